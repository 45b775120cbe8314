import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsxformer import tensor as T
from dsxformer.dsx import dsx_forward
from dsxformer.encoder import (ModelConfig, ModelParams, drop_path, encoder_block_forward, forward_logits,
                               load_checkpoint, model_forward, patch_embed, patch_merge, save_checkpoint)
from dsxformer.errors import ConfigError, DimensionError, FormatError
from dsxformer.tensor import Tensor, grad_check

from conftest import perturb_params


def small_config(**kw):
    base = dict(in_bands=5, n_classes=3, patch=2, dim=8, depths=(1, 1), heads=2, window=2,
                mlp_hidden=16, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def count_parameters(cfg):
    """Closed-form parameter count, written out per component."""
    total = cfg.patch ** 2 * cfg.in_bands * cfg.dim + cfg.dim
    d, m = cfg.dim, cfg.mlp_hidden
    for i, depth in enumerate(cfg.depths):
        r = cfg.dsx_ratio
        dsx = 2 * r * d * d + r * d + d
        norms = 4 * d
        attn = 4 * d * d + (2 * cfg.window - 1) ** 2 * cfg.heads
        mlp = 2 * d * m + m + d
        total += depth * (dsx + norms + attn + mlp)
        if i < len(cfg.depths) - 1:
            total += 8 * d * d
            d, m = 2 * d, 2 * m
    return total + d * cfg.n_classes + cfg.n_classes


def test_default_parameter_count():
    cfg = ModelConfig(in_bands=30, n_classes=16)
    assert ModelParams.init(cfg).n_parameters() == count_parameters(cfg) == 704_112


@pytest.mark.parametrize("kw", [dict(), dict(depths=(2,)), dict(depths=(1, 2, 1), dsx_ratio=3, window=3)])
def test_parameter_count_formula(kw):
    cfg = small_config(**kw)
    assert ModelParams.init(cfg).n_parameters() == count_parameters(cfg)


def test_patch_embed_matches_loops():
    rng = np.random.default_rng(0)
    S, B, p, d = 5, 3, 2, 4
    x = rng.normal(size=(S, S, B))
    W, b = rng.normal(size=(p * p * B, d)), rng.normal(size=d)
    out = patch_embed(x, p, Tensor(W), Tensor(b)).data
    assert out.shape == (3, 3, d)
    for gi in range(3):
        for gj in range(3):
            vec = []
            for r in range(p):
                for c in range(p):
                    rr, cc = min(gi * p + r, S - 1), min(gj * p + c, S - 1)  # edge replication
                    vec.extend(x[rr, cc])
            np.testing.assert_allclose(out[gi, gj], np.array(vec) @ W + b, atol=1e-12)


def test_patch_embed_band_mismatch():
    with pytest.raises(DimensionError):
        patch_embed(np.ones((4, 4, 3)), 2, Tensor(np.ones((16, 2))), Tensor(np.zeros(2)))


def test_patch_merge_matches_loops():
    rng = np.random.default_rng(1)
    r, c, d = 3, 5, 2
    g = rng.normal(size=(r, c, d))
    W = rng.normal(size=(2 * d, 4 * d))
    out = patch_merge(Tensor(g), Tensor(W)).data
    assert out.shape == (2, 3, 2 * d)
    gp = np.zeros((4, 6, d))
    gp[:r, :c] = g
    for i in range(2):
        for j in range(3):
            cat = np.concatenate([gp[2 * i, 2 * j], gp[2 * i + 1, 2 * j], gp[2 * i, 2 * j + 1], gp[2 * i + 1, 2 * j + 1]])
            np.testing.assert_allclose(out[i, j], W @ cat, atol=1e-12)


def test_drop_path_behaviour():
    x = Tensor(np.ones((400, 3, 3, 2)))
    rng = np.random.default_rng(0)
    assert drop_path(x, 0.0, True, rng) is x
    assert drop_path(x, 0.5, False, rng) is x
    assert not drop_path(x, 1.0, True, rng).data.any()
    y = drop_path(x, 0.25, True, rng).data
    per_sample = y.reshape(400, -1)
    assert (per_sample == per_sample[:, :1]).all()  # whole sample kept or dropped
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}


def test_drop_path_rates_are_linear():
    cfg = small_config(depths=(2, 2), drop_path=0.3)
    np.testing.assert_allclose(cfg.drop_path_rates(), [0.0, 0.1, 0.2, 0.3])
    assert small_config(depths=(1,)).drop_path_rates() == [0.0]


def test_stage_layout():
    stages = ModelConfig(in_bands=30, n_classes=16).stages()
    assert [(s.d, s.h, s.w, s.mlp_hidden, s.merge_after) for s in stages] == [
        (64, 8, 4, 256, True), (128, 8, 4, 512, False)]


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(dim=10, heads=4)
    with pytest.raises(ConfigError):
        small_config(depths=())
    with pytest.raises(ConfigError):
        small_config(dropout=1.5)
    with pytest.raises(ConfigError):
        small_config(context="sideways")
    with pytest.raises(ConfigError):
        small_config(dtype="float16")


def test_init_distribution():
    params = ModelParams.init(ModelConfig(in_bands=30, n_classes=16), seed=0)
    for name, t in params.named_parameters():
        if name.endswith(("bias_table", ".b", "b1", "b2", "beta")):
            assert not t.data.any(), name
        elif name.endswith("gamma"):
            assert (t.data == 1).all()
        elif "dsx" not in name:
            assert np.abs(t.data).max() <= 0.04 + 1e-7, name
    W = params.stages[0].blocks[0].dca.Wq.data
    assert abs(W.std() - 0.02 * 0.88) < 0.002  # std of a +-2 sigma truncated normal


def test_same_seed_same_init():
    a = ModelParams.init(small_config(), seed=3)
    b = ModelParams.init(small_config(), seed=3)
    c = ModelParams.init(small_config(), seed=4)
    for (_, x), (_, y), (_, z) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)
    assert any(not np.array_equal(x.data, z.data) for x, z in zip(a.parameters(), c.parameters())
               if x.data.any())


@settings(max_examples=15, deadline=None)
@given(S=st.integers(3, 11), bands=st.integers(1, 6), p=st.integers(1, 3), depths=st.sampled_from([(1,), (1, 1), (2, 1)]),
       w=st.integers(1, 3), K=st.integers(1, 5), batch=st.integers(1, 3))
def test_shape_algebra(S, bands, p, depths, w, K, batch):
    cfg = ModelConfig(in_bands=bands, n_classes=K, patch=p, dim=4, depths=depths, heads=2, window=w,
                      mlp_hidden=8, dtype="float64")
    params = ModelParams.init(cfg, seed=0)
    perturb_params(params, scale=0.5)
    x = np.random.default_rng(S).normal(size=(batch, S, S, bands))
    probs = model_forward(x, params).data
    assert probs.shape == (batch, K)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
    single = model_forward(x[0], params).data
    assert single.shape == (K,)
    np.testing.assert_allclose(single, probs[0], atol=1e-12)


def test_eval_mode_is_deterministic():
    params = ModelParams.init(small_config(dtype="float32"), seed=1)
    x = np.random.default_rng(0).normal(size=(4, 9, 9, 5)).astype(np.float32)
    np.testing.assert_array_equal(forward_logits(x, params).data, forward_logits(x, params).data)


def test_training_mode_needs_rng_and_is_seeded():
    params = ModelParams.init(small_config(), seed=1)
    perturb_params(params)
    x = np.random.default_rng(0).normal(size=(2, 9, 9, 5))
    with pytest.raises(ConfigError):
        forward_logits(x, params, train=True)
    a = forward_logits(x, params, train=True, rng=np.random.default_rng(7)).data
    b = forward_logits(x, params, train=True, rng=np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)


def test_zero_drop_path_equals_plain_block():
    cfg = small_config(dropout=0.0, drop_path=0.0)
    params = ModelParams.init(cfg, seed=2)
    perturb_params(params)
    bp = params.stages[0].blocks[0]
    grid = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 8)))
    a = encoder_block_forward(grid, bp, 1, train=True, rng=np.random.default_rng(0), drop_path_rate=0.0, config=cfg)
    b = encoder_block_forward(grid, bp, 1, train=False, config=cfg)
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_branches_leave_dsx_output():
    cfg = small_config()
    params = ModelParams.init(cfg, seed=2)
    perturb_params(params)
    bp = params.stages[0].blocks[0]
    for part in (bp.dca, bp.mlp):
        for t in part.parameters().values():
            t.data = np.zeros_like(t.data)
    grid = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 8)))
    out = encoder_block_forward(grid, bp, 1, config=cfg).data
    ref = dsx_forward(T.reshape(grid, (2, 16, 8)), bp.dsx).data.reshape(2, 4, 4, 8)
    np.testing.assert_array_equal(out, ref)


def test_two_stage_gradients_sampled():
    # the full-coordinate end-to-end check lives in the acceptance suite
    cfg = small_config(depths=(2, 1))
    params = ModelParams.init(cfg, seed=5)
    perturb_params(params, seed=5)
    params.requires_grad_(True)
    x = np.random.default_rng(1).normal(size=(2, 7, 7, 5))
    w = np.random.default_rng(2).normal(size=(2, 3))
    report = grad_check(lambda: (forward_logits(x, params) * w).sum(), params.parameters(), max_coords=6)
    assert report.passed, report


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_config(dtype="float32")
    params = ModelParams.init(cfg, seed=9)
    perturb_params(params)
    path = tmp_path / "m.dsxc"
    save_checkpoint(path, params, {"patch_size": 9})
    loaded, meta = load_checkpoint(path)
    assert meta == {"patch_size": 9}
    assert loaded.config == cfg
    for (n1, a), (n2, b) in zip(params.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)
    x = np.random.default_rng(0).normal(size=(3, 9, 9, 5)).astype(np.float32)
    np.testing.assert_array_equal(forward_logits(x, params).data, forward_logits(x, loaded).data)


def test_checkpoint_corruption_is_reported(tmp_path):
    params = ModelParams.init(small_config(dtype="float32"), seed=0)
    path = tmp_path / "m.dsxc"
    save_checkpoint(path, params)
    good = path.read_bytes()

    def expect(buf, pattern):
        path.write_bytes(buf)
        with pytest.raises(FormatError, match=pattern):
            load_checkpoint(path)

    expect(b"XXXX" + good[4:], "magic")
    expect(good[:4] + struct.pack("<I", 7) + good[8:], "version")
    expect(good[:-3], "truncated")
    expect(good + b"\0", "trailing")
    flipped = bytearray(good)
    flipped[8] ^= 0xFF
    expect(bytes(flipped), "digest")
