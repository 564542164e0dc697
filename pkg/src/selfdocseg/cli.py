"""Command line entry point: ``selfdocseg <subcommand> [options]``.

Exit codes: 0 success, 1 validated-input or IO failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig
from .docgen import (CorpusManifest, ManifestRecord, generate_corpus, load_image, read_manifest,
                     write_manifest)
from .errors import ConfigError, PipelineIOError, SelfDocSegError
from .evalkit import (METRICS, ablation_harness, eval_report_text, evaluate, load_probe,
                      manifest_split, save_probe, segment, train_probe, visualize,
                      write_report)
from .maskgen import MaskGenParams, make_masks
from .model import load_model, save_model
from .plotting import plot_ablation, plot_per_class, plot_training_curves
from .ssl import init_state, pretrain, read_metrics

log = logging.getLogger("selfdocseg")

LOSS_ARMS = {"combined": ("sim", "det"), "det_only": ("det",), "sim_only": ("sim",), "random": None}


# ---------------------------------------------------------------------------
# helpers

def _write_run_record(out_dir: Path, cfg: RunConfig, command: str, extra: dict = None):
    """Every stage directory gets a run.json carrying the config echo and hash."""
    payload = dict(cfg.echo(), command=command, version=__version__, **(extra or {}))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "run.json", "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise PipelineIOError("cannot write run record", out_dir) from exc


def _stage_dir(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.output) if getattr(args, "output", None) else cfg.output_root / default


def _data_dir(args, cfg: RunConfig) -> Path:
    """Explicit --data, else the mask-augmented corpus if make-mask ran, else the raw corpus."""
    if getattr(args, "data", None):
        return Path(args.data)
    masks = cfg.output_root / "masks"
    return masks if (masks / "manifest.json").exists() else cfg.output_root / "data"


def _eval_config(cfg: RunConfig):
    ev = cfg.section("eval")
    return dataclasses.replace(ev, seeds=tuple(cfg.replicate_seed(k) for k in ev.seeds))


def _print_table(header, rows):
    """Tab-delimited block on stdout, fenced so it can be cut out of a log."""
    print("---")
    print("\t".join(header))
    for row in rows:
        print("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))
    print("---")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg: RunConfig):
    out = _stage_dir(args, cfg, "data")
    count = args.count or cfg.data["docgen"]["count"]
    manifest = generate_corpus(cfg.page_spec(), count, out, config_hash=cfg.hash,
                               split_fractions=tuple(cfg.data["docgen"]["split_fractions"]),
                               workers=args.workers)
    _write_run_record(out, cfg, "gen-data")
    splits = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    _print_table(["output", "records", "train", "val", "test"],
                 [[out, len(manifest.records), splits["train"], splits["val"], splits["test"]]])
    return 0


def cmd_make_mask(args, cfg: RunConfig):
    base = cfg.section("maskgen")
    kernel = (args.kernel, args.kernel) if args.kernel is not None else base.kernel
    try:
        params = MaskGenParams(threshold=args.threshold if args.threshold is not None else base.threshold,
                               kernel=kernel,
                               min_component_area_px=(args.min_area if args.min_area is not None
                                                      else base.min_component_area_px))
    except ValueError as exc:
        raise ConfigError(str(exc), "maskgen") from exc
    src = Path(args.input) if args.input else cfg.output_root / "data"
    out = _stage_dir(args, cfg, "masks")
    manifest = None
    if src.is_dir() and (src / "manifest.json").exists():
        manifest = read_manifest(src)
        inputs = [r.image_path for r in manifest.records]
    elif src.is_dir():
        inputs = sorted(src.glob("*.png"))
    elif src.exists():
        inputs = [src]
    else:
        raise PipelineIOError("input not found", src)
    if not inputs:
        raise PipelineIOError("no input images", src)
    written = make_masks(inputs, out, params, cfg.hash, workers=args.workers)
    if manifest is not None:
        records = [dataclasses.replace(r, mask_path=m) for r, m in zip(manifest.records, written)]
        write_manifest(CorpusManifest(records=records, root=manifest.root, config_hash=cfg.hash,
                                      meta=dict(manifest.meta, maskgen=dataclasses.asdict(params))),
                       out)
    _write_run_record(out, cfg, "make-mask", {"maskgen_effective": dataclasses.asdict(params)})
    _print_table(["output", "masks"], [[out, len(written)]])
    return 0


def cmd_pretrain(args, cfg: RunConfig):
    out = _stage_dir(args, cfg, "pretrain")
    manifest = read_manifest(_data_dir(args, cfg))
    train = cfg.section("train")
    final = pretrain(train, manifest, out, model_cfg=cfg.section("model"),
                     augment_cfg=cfg.section("augment"), mask_params=cfg.section("maskgen"),
                     resume=args.resume, meta=cfg.echo())
    rows = read_metrics(out / "metrics.csv")
    if rows:
        plot_training_curves(rows, out / "training_curve.png", cfg.hash)
    _write_run_record(out, cfg, "pretrain", {"final_checkpoint": str(final)})
    last = rows[-1] if rows else {}
    _print_table(["checkpoint", "steps", "l_sim", "l_det", "l_total"],
                 [[final, int(last.get("step", 0)), last.get("l_sim", float("nan")),
                   last.get("l_det", float("nan")), last.get("l_total", float("nan"))]])
    return 0


def _checkpoint(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else cfg.output_root / "pretrain" / "final"


def cmd_probe(args, cfg: RunConfig):
    out = _stage_dir(args, cfg, "probe")
    model, _, _ = load_model(_checkpoint(args, cfg))
    manifest = read_manifest(_data_dir(args, cfg))
    ev = cfg.section("eval")
    fraction = args.fraction if args.fraction is not None else 1.0
    head = train_probe(model, manifest_split(manifest, "train"), fraction,
                       cfg.replicate_seed(0), ev.probe_steps, ev.probe_lr)
    path = save_probe(out, head, dict(cfg.echo(), fraction=fraction, n_records=head.n_records,
                                      checkpoint=str(_checkpoint(args, cfg))))
    _print_table(["probe", "records", "loss_first", "loss_last"],
                 [[path, head.n_records, head.log[0], head.log[-1]]])
    return 0


def cmd_evaluate(args, cfg: RunConfig):
    out = _stage_dir(args, cfg, "eval")
    model, _, _ = load_model(_checkpoint(args, cfg))
    head = load_probe(Path(args.probe) if args.probe else cfg.output_root / "probe")
    manifest = read_manifest(_data_dir(args, cfg))
    rep = evaluate(model, head, manifest_split(manifest, args.split), cfg.section("eval"),
                   config_echo=cfg.echo())
    rep.seeds = [cfg.replicate_seed(0)]
    write_report(rep, out, "report")
    plot_per_class(rep, out / "per_class.png", cfg.hash)
    _print_table(["metric", "value"], [[m, getattr(rep, m)] for m in METRICS])
    sys.stdout.write(eval_report_text(rep))
    return 0


def _ablation_checkpoints(args, cfg: RunConfig, manifest, out: Path, arms):
    given = {}
    for spec in args.arm_checkpoint or []:
        arm, _, path = spec.partition("=")
        given.setdefault(arm, []).append(path)
    base = cfg.section("train")
    model_cfg = cfg.section("model")
    ev = cfg.section("eval")
    ckpts = {}
    for arm in arms:
        if arm in given:
            ckpts[arm] = given[arm]
            continue
        ckpts[arm] = []
        for k in ev.seeds:
            seed = cfg.replicate_seed(k)
            run_dir = out / "arms" / f"{arm}_seed{k}"
            objectives = LOSS_ARMS[arm]
            tcfg = dataclasses.replace(base, seed=seed, objectives=objectives or base.objectives)
            meta = dict(cfg.echo(), arm=arm, replicate=k)
            if objectives is None:
                path = save_model(run_dir / "final", init_state(tcfg, model_cfg).model, meta)
            else:
                log.info("pre-training arm %s replicate %d", arm, k)
                path = pretrain(tcfg, manifest, run_dir, model_cfg=model_cfg,
                                augment_cfg=cfg.section("augment"), mask_params=cfg.section("maskgen"),
                                meta=meta)
            ckpts[arm].append(path)
    return ckpts


def cmd_ablate(args, cfg: RunConfig):
    out = _stage_dir(args, cfg, f"ablate_{args.mode}")
    manifest = read_manifest(_data_dir(args, cfg))
    arms = list(LOSS_ARMS) if args.mode == "loss_ablation" else ["combined"]
    ckpts = _ablation_checkpoints(args, cfg, manifest, out, arms)
    report = ablation_harness(args.mode, ckpts, manifest, _eval_config(cfg))
    report.config = dict(cfg.echo(), eval_effective=report.config)
    write_report(report, out, "ablation")
    plot_ablation(report, out / "ablation.png", config_hash=cfg.hash)
    header = ["arm"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")]
    rows = [[a.name] + [v for m in METRICS for v in (a.mean(m), a.sd(m))] for a in report.arms]
    with open(out / "ablation.tsv", "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(f"{v:.6f}" if isinstance(v, float) else v for v in row) + "\n")
    _write_run_record(out, cfg, "ablate", {"checkpoints": {k: [str(p) for p in v] for k, v in ckpts.items()}})
    _print_table(header, rows)
    return 0


def cmd_viz(args, cfg: RunConfig):
    out = _stage_dir(args, cfg, "viz")
    model = head = None
    if args.probe:
        model, _, _ = load_model(_checkpoint(args, cfg))
        head = load_probe(args.probe)
    if args.images:
        records = [ManifestRecord(image_path=Path(p)) for p in args.images]
    else:
        records = read_manifest(_data_dir(args, cfg)).split(args.split)[:args.limit]
    ev = cfg.section("eval")
    rows = []
    for rec in records:
        image = load_image(rec.image_path)
        if head is not None:
            items = segment(image, model, head, ev.prob_threshold, ev.min_area)
        elif rec.annotation is not None:
            items = [(o.mask, o.label) for o in rec.annotation.objects]
        else:
            items = []
        path = visualize(image, items, out / f"{Path(rec.image_path).stem}_overlay.png")
        rows.append([path, len(items)])
    _write_run_record(out, cfg, "viz")
    _print_table(["overlay", "regions"], rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfdocseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--workers", type=int, default=1,
                        help="data pipeline processes (1 = fully deterministic serial run)")
    common.add_argument("--output", help="stage output directory (default: <output_root>/<stage>)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic corpus")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-mask", parents=[common], help="build pseudo layout masks")
    p.add_argument("--input", help="corpus directory, image directory or single image")
    p.add_argument("--threshold", type=int)
    p.add_argument("--kernel", type=int, help="square erosion kernel size")
    p.add_argument("--min-area", type=int)
    p.set_defaults(func=cmd_make_mask)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", parents=[common], help="fit a probe on a frozen encoder")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--fraction", type=float)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("evaluate", parents=[common], help="score an encoder + probe")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--probe")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="loss or label-fraction ablation")
    p.add_argument("--mode", choices=["loss_ablation", "semi_supervised"], default="loss_ablation")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint", dest="arm_checkpoint", action="append", metavar="ARM=PATH",
                   help="reuse an existing checkpoint for an arm (repeat once per replicate)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", parents=[common], help="render overlays")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--probe", help="probe checkpoint; without it ground truth is drawn")
    p.add_argument("--images", nargs="+")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=4)
    p.set_defaults(func=cmd_viz)
    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "train.epochs": getattr(args, "epochs", None),
        "train.max_steps": getattr(args, "max_steps", None),
    }


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("must be >= 1", "--workers")
        cfg = RunConfig.load(args.config, _overrides(args))
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2
    except (SelfDocSegError, ValueError, OSError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"error: {code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
