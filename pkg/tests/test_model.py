import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_pool
from selfdocseg.errors import EmptyMask, MissingCheckpoint, ShapeError
from selfdocseg.model import (PROB_EPS, MLPHead, ModelConfig, SelfDocSegModel, image_to_tensor,
                              load_checkpoint, load_model, mask_pool, save_checkpoint, save_model)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return SelfDocSegModel(ModelConfig(channels=(8, 16, 32, 128), mlp_hidden=64, mlp_out=256))


def test_encode_shape(small_model):
    x = image_to_tensor(np.zeros((64, 64, 3), np.uint8))
    f = small_model.encode(x)
    assert tuple(f.shape) == (1, 128, 4, 4)
    assert small_model.encoder.stride == 16


def test_encode_zero_weights():
    model = SelfDocSegModel(ModelConfig(channels=(4, 8)))
    zero_(model.encoder)
    x = image_to_tensor(np.random.default_rng(0).integers(0, 256, (32, 32, 3)).astype(np.uint8))
    assert not model.encode(x).any()


def test_encode_deterministic(small_model):
    x = image_to_tensor(np.random.default_rng(1).integers(0, 256, (64, 64, 3)).astype(np.uint8))
    assert torch.equal(small_model.encode(x), small_model.encode(x))


def test_encode_rejects_indivisible(small_model):
    with pytest.raises(ShapeError):
        small_model.encode(torch.zeros(1, 3, 60, 64))


def test_pool_all_ones_is_global_mean():
    f = torch.randn(5, 3, 4, dtype=torch.float64)
    y = mask_pool(f, torch.ones(1, 3, 4))
    assert torch.allclose(y[0], f.mean(dim=(1, 2)))


def test_pool_worked_example():
    f = torch.tensor([[[1.0, 2.0], [3.0, 5.0]]], dtype=torch.float64)
    y = mask_pool(f, torch.eye(2)[None])
    assert y.item() == 3.0


def test_pool_zero_features():
    masks = torch.rand(3, 4, 4) > 0.3
    masks[:, 0, 0] = True
    assert not mask_pool(torch.zeros(6, 4, 4), masks).any()


def test_pool_empty_mask():
    with pytest.raises(EmptyMask):
        mask_pool(torch.randn(2, 3, 3), torch.zeros(1, 3, 3))


def test_pool_shape_mismatch():
    with pytest.raises(ShapeError):
        mask_pool(torch.randn(2, 3, 3), torch.ones(1, 4, 4))


def random_instance(rng):
    c, h, w = rng.integers(1, 9), rng.integers(1, 6), rng.integers(1, 6)
    n = rng.integers(1, 5)
    f = rng.normal(size=(c, h, w))
    masks = rng.random((n, h, w)) < 0.5
    masks[np.arange(n), rng.integers(0, h, n), rng.integers(0, w, n)] = True
    return f, masks


def test_pool_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        f, masks = random_instance(rng)
        got = mask_pool(torch.from_numpy(f), torch.from_numpy(masks)).numpy()
        np.testing.assert_allclose(got, brute_pool(f, masks), rtol=1e-6, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_pool_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    f1, masks = random_instance(rng)
    f2 = rng.normal(size=f1.shape)
    masks = torch.from_numpy(masks)
    lhs = mask_pool(torch.from_numpy(a * f1 + b * f2), masks)
    rhs = a * mask_pool(torch.from_numpy(f1), masks) + b * mask_pool(torch.from_numpy(f2), masks)
    np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), rtol=1e-6, atol=1e-9)


def test_pool_disjoint_additivity():
    rng = np.random.default_rng(3)
    f = torch.from_numpy(rng.normal(size=(4, 6, 6)))
    ma = torch.zeros(6, 6, dtype=torch.bool)
    mb = torch.zeros(6, 6, dtype=torch.bool)
    ma[:3] = True
    mb[4:, 2:] = True
    ya, yb, yab = mask_pool(f, torch.stack([ma, mb, ma | mb]))
    na, nb = ma.sum(), mb.sum()
    torch.testing.assert_close(yab, (na * ya + nb * yb) / (na + nb))


def test_project_dims_and_order(small_model):
    y = torch.randn(5, 128)
    z = small_model.project(y)
    assert tuple(z.shape) == (5, 256)
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(small_model.project(y[perm]), z[perm])
    q = small_model.predict(z)
    assert tuple(q.shape) == (5, 256)
    torch.testing.assert_close(small_model.predict(z[perm]), q[perm])


@pytest.mark.parametrize("n", [1, 3])
def test_head_zero_weights_gives_bias(n):
    head = MLPHead(8, 16, 4)
    zero_(head.fc1)
    with torch.no_grad():
        head.fc2.weight.zero_()
        head.fc2.bias.copy_(torch.tensor([1.0, -2.0, 0.5, 3.0]))
    out = head(torch.randn(n, 8))
    assert torch.equal(out, head.fc2.bias.expand(n, 4))


def test_layout_head_probabilities(small_model):
    f = torch.randn(2, 128, 4, 4)
    zero_(small_model.layout_head)
    p = small_model.predict_layout(f)
    assert tuple(p.shape) == (2, 4, 4)
    assert torch.all(p == 0.5)
    with torch.no_grad():
        small_model.layout_head.conv.bias.fill_(20.0)
    p = small_model.predict_layout(f)
    assert torch.allclose(p, torch.full_like(p, 1 - PROB_EPS))


def test_branch_structure(small_model):
    assert all(not p.requires_grad for p in small_model.momentum_parameters())
    n_enc = len(list(small_model.encoder.parameters()))
    n_proj = len(list(small_model.projector.parameters()))
    assert len(list(small_model.ema_pairs())) == n_enc + n_proj
    for xi, th in small_model.ema_pairs():
        assert xi.shape == th.shape


def test_reference_scale_config():
    cfg = ModelConfig(channels=(64, 256, 512, 1024, 2048), mlp_hidden=4096, mlp_out=256)
    assert cfg.feature_dim == 2048 and cfg.stride == 32


def test_checkpoint_format(tmp_path):
    t = torch.arange(6, dtype=torch.float32).reshape(2, 3) / 7
    save_checkpoint(tmp_path / "ck", {"a/b": t}, {"step": 4})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    entry = manifest["tensors"][0]
    assert entry["name"] == "a/b" and entry["shape"] == [2, 3] and entry["dtype"] == "float32-le"
    raw = (tmp_path / "ck" / entry["file"]).read_bytes()
    assert raw == t.numpy().astype("<f4").tobytes()
    tensors, meta = load_checkpoint(tmp_path / "ck")
    assert torch.equal(tensors["a/b"], t) and meta["step"] == 4


def test_model_roundtrip(tmp_path, small_model):
    save_model(tmp_path / "m", small_model, {"note": "x"})
    loaded, manifest, _ = load_model(tmp_path / "m")
    assert manifest["note"] == "x"
    for (k, a), (_, b) in zip(small_model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(small_model.encode(x), loaded.encode(x))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_checkpoint(tmp_path / "nope")
