"""Independent brute-force reference implementations shared by the test modules."""

from fractions import Fraction

import numpy as np
import torch

from selfdocseg.docgen import GroundTruth, LayoutObject
from selfdocseg.evalkit import Detection


def box_mask(shape, x0, y0, x1, y1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def gt_from_boxes(shape, boxes_labels):
    objs = [LayoutObject(mask=box_mask(shape, *b), label=lab, bbox=tuple(b)) for b, lab in boxes_labels]
    return GroundTruth(objs)


def brute_ap_single_class(dets, gt_masks, thresh):
    """Enumerate every rank cutoff of the PR curve with rational arithmetic."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][2]))
    used = set()
    hits = []
    for i in order:
        mask = dets[i][1]
        best, best_j = None, None
        for j, g in enumerate(gt_masks):
            if j in used:
                continue
            inter = int(np.sum(mask & g))
            union = int(np.sum(mask | g))
            v = Fraction(inter, union) if union else Fraction(0)
            if v >= Fraction(thresh) and (best is None or v > best):
                best, best_j = v, j
        if best_j is not None:
            used.add(best_j)
        hits.append(best_j is not None)
    n_gt = len(gt_masks)
    if n_gt == 0:
        return None if not dets else Fraction(0)
    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    ap, prev_r = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == prev_r:
            continue
        ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
        prev_r = r
    return ap


def brute_map(dets: list[Detection], gt: GroundTruth, thresh=0.5, n_classes=4):
    aps = []
    for c in range(n_classes):
        d = [(x.score, x.mask, x.det_id) for x in dets if x.label == c]
        g = [o.mask for o in gt.objects if o.label == c]
        ap = brute_ap_single_class(d, g, thresh)
        if ap is not None:
            aps.append(ap)
    if not aps:
        return 1.0
    return float(sum(aps) / len(aps))


def random_ap_case(rng, shape=(24, 24), max_dets=10, max_gt=5, n_classes=2):
    """Random boxes; detections are jittered copies of GT or free boxes, scores from a coarse grid."""
    H, W = shape

    def rand_box():
        x0, y0 = rng.integers(0, W - 4), rng.integers(0, H - 4)
        return (int(x0), int(y0), int(rng.integers(x0 + 2, W + 1)), int(rng.integers(y0 + 2, H + 1)))

    n_gt = int(rng.integers(0, max_gt + 1))
    gts = [(rand_box(), int(rng.integers(0, n_classes))) for _ in range(n_gt)]
    dets = []
    for k in range(int(rng.integers(0, max_dets + 1))):
        if gts and rng.random() < 0.6:
            (x0, y0, x1, y1), lab = gts[int(rng.integers(0, len(gts)))]
            j = rng.integers(-2, 3, size=4)
            box = (max(0, x0 + j[0]), max(0, y0 + j[1]), min(W, max(x0 + j[0] + 1, x1 + j[2])),
                   min(H, max(y0 + j[1] + 1, y1 + j[3])))
            box = (int(box[0]), int(box[1]), int(max(box[2], box[0] + 1)), int(max(box[3], box[1] + 1)))
        else:
            box, lab = rand_box(), int(rng.integers(0, n_classes))
        score = float(rng.integers(1, 10)) / 10
        dets.append(Detection(mask=box_mask(shape, *box), score=score, label=lab, det_id=k))
    return dets, gt_from_boxes(shape, gts)


# ---------------------------------------------------------------------------
# pooling and components

def brute_pool(f, masks):
    c, h, w = f.shape
    out = np.zeros((len(masks), c))
    for k, m in enumerate(masks):
        total, count = np.zeros(c), 0.0
        for i in range(h):
            for j in range(w):
                total += m[i, j] * f[:, i, j]
                count += m[i, j]
        out[k] = total / count
    return out


def flood_components(m):
    """Brute-force 8-connected components by BFS, ordered by first raster pixel."""
    H, W = m.shape
    seen = np.zeros_like(m, dtype=bool)
    comps = []
    for i in range(H):
        for j in range(W):
            if m[i, j] and not seen[i, j]:
                comp = np.zeros_like(m, dtype=bool)
                stack = [(i, j)]
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    comp[a, b] = True
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            x, y = a + da, b + db
                            if 0 <= x < H and 0 <= y < W and m[x, y] and not seen[x, y]:
                                seen[x, y] = True
                                stack.append((x, y))
                comps.append(comp)
    return comps


def greedy_match_ious(gt_masks, comps):
    """Globally greedy one-to-one matching by descending IoU; returns the IoU of each GT (0 if unmatched)."""
    pairs = []
    for i, g in enumerate(gt_masks):
        for j, c in enumerate(comps):
            inter = int(np.sum(g & c))
            if inter:
                pairs.append((inter / int(np.sum(g | c)), i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    best = [0.0] * len(gt_masks)
    used_g, used_c = set(), set()
    for v, i, j in pairs:
        if i in used_g or j in used_c:
            continue
        used_g.add(i)
        used_c.add(j)
        best[i] = v
    return best


# ---------------------------------------------------------------------------
# finite differences

def _stencil(flat, i, evaluate, eps):
    """Fourth-order central difference of ``evaluate()`` along coordinate ``i`` of ``flat``.

    The standard two-point rule carries an O(eps^2) curvature error that is
    visible in the tightly curved batch standardization of two-object batches.
    """
    old = flat[i].item()
    vals = []
    for step in (2, 1, -1, -2):
        flat[i] = old + step * eps
        vals.append(evaluate())
    flat[i] = old
    f2, f1, m1, m2 = vals
    return (8 * (f1 - m1) - (f2 - m2)) / (12 * eps)


def central_diff(fn, x, eps=1e-6):
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        g[i] = _stencil(flat, i, lambda: fn(x), eps)
    return grad


def rel_err(a, b, floor=1e-4):
    """Relative error with an absolute floor, so exactly-zero gradients compare against FD noise."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return ((a - b).norm() / max(b.norm().item(), floor)).item()


def param_fd(module, loss_fn, eps=1e-6):
    """Central differences of ``loss_fn()`` w.r.t. every parameter of ``module``."""
    grads = []
    with torch.no_grad():
        for p in module.parameters():
            g = torch.zeros_like(p)
            flat, gf = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                gf[i] = _stencil(flat, i, lambda: loss_fn().item(), eps)
            grads.append(g)
    return grads
