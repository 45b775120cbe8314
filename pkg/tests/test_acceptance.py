"""Acceptance criteria 1-10, one test each.

Every test records a single PASS/FAIL/SKIP line (shown in the terminal
summary) and then asserts at the stated tolerance.
"""

import os
import time

import numpy as np
import pytest

from dsxformer import dca
from dsxformer import tensor as T
from dsxformer.data import SplitSpec, extract_pixel_patches, load_cube, save_cube, split_train_test
from dsxformer.dca import DCAParams, dca_forward, dynamic_scale, window_partition, window_reverse
from dsxformer.dsx import DSXParams, dsx_forward, dual_pool_squeeze, expand_compress
from dsxformer.encoder import ModelConfig, ModelParams, forward_logits, patch_merge
from dsxformer.metrics import metrics_from_confusion
from dsxformer.synthetic import make_separated_cube, make_table_cube
from dsxformer.tables import SA
from dsxformer.tensor import Tensor, grad_check
from dsxformer.train import TrainConfig, cross_entropy_smoothed, train

from conftest import ACCEPTANCE_LINES, perturb_params, rand
from test_dca import scalar_attention
from test_metrics import reference as metrics_reference


def record(n, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


# --- 1 ---------------------------------------------------------------------------

def _op_cases():
    rng = np.random.default_rng(0)

    def away(shape, seed):
        t = rand(shape, seed=seed)
        t.data = t.data + np.sign(t.data) * 0.1  # keep clear of kinks and ties
        return t

    pos = lambda shape, seed: Tensor(np.random.default_rng(seed).uniform(0.5, 2.0, shape), requires_grad=True)
    mask = np.where(rng.random((2, 4, 4)) < 0.4, dca.MASK_VALUE, 0.0)
    mask[:, np.arange(4), np.arange(4)] = 0.0
    return {
        "add": (T.add, [away((3, 4), 1), away((4,), 2)]),
        "sub": (T.sub, [away((3, 4), 3), away((3, 1), 4)]),
        "mul": (T.mul, [away((3, 4), 5), away((3, 4), 6)]),
        "div": (T.div, [away((3, 4), 7), pos((3, 4), 8)]),
        "neg": (T.neg, [away((3, 4), 9)]),
        "power": (lambda a: T.power(a, 3), [away((3, 4), 10)]),
        "abs": (T.absolute, [away((3, 4), 11)]),
        "exp": (T.exp, [away((3, 4), 12)]),
        "log": (T.log, [pos((3, 4), 13)]),
        "sqrt": (T.sqrt, [pos((3, 4), 14)]),
        "tanh": (T.tanh, [away((3, 4), 15)]),
        "relu": (T.relu, [away((3, 4), 16)]),
        "sigmoid": (T.sigmoid, [away((3, 4), 17)]),
        "gelu": (T.gelu, [away((3, 4), 18)]),
        "gelu_tanh": (lambda a: T.gelu(a, approximate=True), [away((3, 4), 19)]),
        "matmul": (T.matmul, [away((2, 3, 4), 20), away((4, 5), 21)]),
        "sum": (lambda a: a.sum(axis=1), [away((3, 4), 22)]),
        "mean": (lambda a: a.mean(axis=0), [away((3, 4), 23)]),
        "max": (lambda a: a.max(axis=-1), [away((3, 4), 24)]),
        "softmax": (lambda a: T.softmax(a + mask, axis=-1), [away((2, 4, 4), 25)]),
        "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [away((3, 4), 26)]),
        "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [away((3, 5), 27), away((5,), 28), away((5,), 29)]),
        "reshape": (lambda a: a.reshape(4, 3), [away((3, 4), 30)]),
        "transpose": (lambda a: a.transpose(1, 0, 2), [away((2, 3, 4), 31)]),
        "getitem": (lambda a: a[np.array([2, 0, 2]), 1:], [away((3, 4), 32)]),
        "take": (lambda a: T.take(a, np.array([[0, 2], [2, 2]])), [away((3, 4), 33)]),
        "pad": (lambda a: T.pad(a, ((1, 2), (0, 1))), [away((3, 4), 34)]),
        "roll": (lambda a: T.roll(a, (-1, 2), (0, 1)), [away((3, 4), 35)]),
        "concat": (lambda a, b: T.concat([a, b], axis=0), [away((2, 4), 36), away((3, 4), 37)]),
        "dropout": (lambda a: T.dropout(a, 0.3, np.random.default_rng(1)), [away((3, 4), 38)]),
        "cross_entropy": (lambda a: cross_entropy_smoothed(a, [1, 3, 2], 0.1), [away((3, 4), 39)]),
        "window_partition": (lambda a: window_partition(a, 2).windows, [away((3, 5, 2), 40)]),
        "window_reverse": (lambda a: window_reverse(window_partition(a, 2)), [away((3, 5, 2), 41)]),
        "patch_merge": (lambda g, w: patch_merge(g, w), [away((3, 3, 2), 42), away((4, 8), 43)]),
    }


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    worst = {}
    for name, (fn, inputs) in _op_cases().items():
        weights = {}

        def f(fn=fn, inputs=inputs, weights=weights):
            out = fn(*inputs)
            if "w" not in weights:
                weights["w"] = np.random.default_rng(7).normal(size=out.shape)
            return (out * weights["w"]).sum()

        worst[name] = grad_check(f, inputs, tol=1e-4).max_rel_error

    dsx_p = DSXParams.init(6, 2, np.random.default_rng(1), dtype=np.float64)
    F = rand((2, 5, 6), seed=50)
    worst["dsx"] = grad_check(lambda: (dsx_forward(F, dsx_p) * np.linspace(-1, 1, 6)).sum(),
                              [F] + list(dsx_p.parameters().values())).max_rel_error
    dca_p = DCAParams.init(4, 2, 2, np.random.default_rng(2), std=0.5, dtype=np.float64)
    dca_p.bias_table.data = np.random.default_rng(3).normal(size=dca_p.bias_table.shape) * 0.3
    G = rand((2, 3, 5, 4), seed=51)
    wG = np.random.default_rng(4).normal(size=G.shape)
    worst["dca_shifted"] = grad_check(lambda: (dca_forward(G, dca_p, shift=1) * wG).sum(),
                                      [G] + list(dca_p.parameters().values())).max_rel_error

    # full model: 8x8x6 input, d=16, h=4, w=4, two blocks; every parameter coordinate
    cfg = ModelConfig(in_bands=6, n_classes=3, patch=2, dim=16, depths=(2,), heads=4, window=4,
                      mlp_hidden=32, dtype="float64")
    params = ModelParams.init(cfg, seed=0)
    perturb_params(params, seed=0, scale=0.3)
    params.requires_grad_(True)
    x = np.random.default_rng(5).normal(size=(8, 8, 6))
    e2e = grad_check(lambda: cross_entropy_smoothed(forward_logits(x, params), [2], 0.1), params.parameters())
    assert e2e.n_checked == params.n_parameters()
    worst["end_to_end"] = e2e.max_rel_error

    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 60
    record(1, ok, f"{len(worst)} checks, worst rel err {err:.2e} ({name}), "
                  f"{e2e.n_checked} model coords, {elapsed:.1f}s")
    assert err < 1e-4, worst
    assert elapsed < 60


# --- 2 ---------------------------------------------------------------------------

def test_criterion_02_attention_oracle(monkeypatch):
    monkeypatch.setattr(dca, "context_vector", lambda A: Tensor(np.ones(A.shape[:-2] + A.shape[-1:])))
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    combos = [(w, h) for w in (2, 4) for h in (1, 2, 4)]
    per_combo = [9, 9, 8, 8, 8, 8]  # 50 windows in total
    worst = 0.0
    for (w, h), n_win in zip(combos, per_combo):
        d = h * int(rng.integers(1, 3))
        p = DCAParams.init(d, h, w, rng, std=0.5, dtype=np.float64)
        assert not p.bias_table.data.any()
        X = rng.normal(size=(n_win, w, w, d))
        out = dca_forward(Tensor(X), p).data
        for b in range(n_win):
            ref = scalar_attention(X[b], p, mode="unit")
            worst = max(worst, float(np.abs(out[b] - ref).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 30
    record(2, ok, f"50 windows, max abs diff {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-10
    assert elapsed < 30


# --- 3 ---------------------------------------------------------------------------

def test_criterion_03_dsx_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    equivariant = in_range = doubled = 0
    for i in range(200):
        n, d = int(rng.integers(1, 20)), int(rng.integers(1, 17))
        p = DSXParams.init(d, 2, rng, dtype=np.float64)
        F = rng.normal(size=(n, d)) * rng.uniform(0.1, 3.0)
        perm = rng.permutation(n)
        equivariant += np.array_equal(dsx_forward(Tensor(F[perm]), p).data, dsx_forward(Tensor(F), p).data[perm])
        s = expand_compress(dual_pool_squeeze(Tensor(F)), p).data
        in_range += bool(np.all((s > 0) & (s < 1)))
        token = F[:1]
        doubled += np.array_equal(dual_pool_squeeze(Tensor(token)).data, 2 * token[0])
    elapsed = time.perf_counter() - start
    ok = equivariant == in_range == doubled == 200 and elapsed < 10
    record(3, ok, f"equivariant {equivariant}/200, gate in (0,1) {in_range}/200, "
                  f"single-token 2x {doubled}/200, {elapsed:.1f}s")
    assert equivariant == in_range == doubled == 200
    assert elapsed < 10


# --- 4 ---------------------------------------------------------------------------

def test_criterion_04_partition_roundtrip():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    exact = total = 0
    for rows in range(1, 13):
        for cols in range(1, 13):
            for w in (1, 2, 4):
                F = rng.normal(size=(rows, cols, 3))
                exact += np.array_equal(window_reverse(window_partition(Tensor(F), w)).data, F)
                total += 1
    elapsed = time.perf_counter() - start
    ok = exact == total and elapsed < 5
    record(4, ok, f"{exact}/{total} exact roundtrips, {elapsed:.2f}s")
    assert exact == total
    assert elapsed < 5


# --- 5 ---------------------------------------------------------------------------

def test_criterion_05_dynamic_scale_homogeneity():
    rng = np.random.default_rng(5)
    exact = total = 0

    def scaled(A):
        t = Tensor(A)
        return dynamic_scale(t, dca.context_vector(t)).data

    for _ in range(20):
        # integer scores over 16 keys: every product, sum and mean is exact for all three c
        A = rng.integers(-100, 101, size=(4, 16, 16)).astype(np.float64)
        for c in (-2.0, 0.5, 3.0):
            exact += np.array_equal(scaled(c * A), c * c * scaled(A))
            total += 1
        # arbitrary reals: exact for the power-of-two constants
        B = rng.normal(size=(4, 9, 9))
        for c in (-2.0, 0.5):
            exact += np.array_equal(scaled(c * B), c * c * scaled(B))
            total += 1
    ok = exact == total
    record(5, ok, f"{exact}/{total} exact equalities A_scaled(cA) == c^2 A_scaled(A)")
    assert ok


# --- 6 ---------------------------------------------------------------------------

def test_criterion_06_metrics_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        K = int(rng.integers(2, 10))
        C = rng.integers(0, 40, size=(K, K)) + np.diag(rng.integers(5, 80, size=K))
        r = metrics_from_confusion(C)
        oa, aa, kappa = metrics_reference(C.tolist())
        worst = max(worst, abs(r.oa - oa), abs(r.aa - aa), abs(r.kappa - kappa))
    worked = metrics_from_confusion(np.array([[50, 10], [10, 30]]))
    # hand derivation: p_o = 80/100, p_e = (60*60 + 40*40)/100^2 = 0.52
    hand = (0.8 - 0.52) / (1 - 0.52)
    ok = worst <= 1e-12 and abs(worked.kappa - hand) <= 1e-4
    record(6, ok, f"max diff vs definition {worst:.1e}; worked kappa {worked.kappa:.6f} (hand {hand:.6f})")
    assert worst <= 1e-12
    assert abs(worked.kappa - hand) <= 1e-4


# --- 7 ---------------------------------------------------------------------------

def test_criterion_07_split_fidelity(tmp_path):
    path = tmp_path / "sa_like.hsc"
    save_cube(path, make_table_cube("SA"))
    cube = load_cube(path)
    ds = extract_pixel_patches(cube, 3)
    train_ds, test_ds = split_train_test(ds, SplitSpec.from_scene("SA", seed=0))
    got_train = np.bincount(train_ds.labels, minlength=17)[1:].tolist()
    got_test = np.bincount(test_ds.labels, minlength=17)[1:].tolist()
    ok = got_train == list(SA.train) and got_test == list(SA.test)
    record(7, ok, f"SA per-class train/test counts match for {sum(a == b for a, b in zip(got_train, SA.train))}/16 "
                  f"train and {sum(a == b for a, b in zip(got_test, SA.test))}/16 test "
                  f"(class 8: {got_train[7]}/{got_test[7]})")
    assert got_train == list(SA.train)
    assert got_test == list(SA.test)


# --- 8 and 9 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def synthetic_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    cube = make_separated_cube(rows=40, cols=40, bands=20, n_classes=4, separation=4.0, seed=0)
    cfg = TrainConfig(epochs=5, seed=0, threads=1)
    runs = []
    for name in ("first", "second"):
        start = time.perf_counter()
        art = train(cfg, cube, base / name)
        runs.append((art, time.perf_counter() - start))
    return cfg, runs


def test_criterion_08_synthetic_convergence(synthetic_runs):
    cfg, runs = synthetic_runs
    art, elapsed = runs[0]
    assert (cfg.lr, cfg.batch, cfg.label_smoothing, cfg.epochs) == (1e-3, 128, 0.1, 5)
    oa = art.report["OA"]
    ok = oa >= 0.99 and elapsed < 300
    record(8, ok, f"test OA {oa:.4f} on {art.report['n_test']} pixels "
                  f"(train {art.report['n_train']}, batch {min(cfg.batch, art.report['n_train'])}), {elapsed:.1f}s")
    assert oa >= 0.99
    assert elapsed < 300


def test_criterion_09_determinism(synthetic_runs):
    _, ((a, _), (b, _)) = synthetic_runs
    diff = abs(a.report["OA"] - b.report["OA"])
    same_map = a.map_path.read_bytes() == b.map_path.read_bytes()
    ok = diff < 1e-6 and same_map
    record(9, ok, f"OA difference {diff:.1e}, prediction maps byte-identical: {same_map}")
    assert diff < 1e-6
    assert same_map


# --- 10 --------------------------------------------------------------------------

def test_criterion_10_indian_pines_smoke(tmp_path):
    path = os.environ.get("DSX_IP_CUBE")
    if not path:
        ACCEPTANCE_LINES[10] = "criterion 10: SKIP  set DSX_IP_CUBE to an Indian Pines .hsc cube to run"
        pytest.skip("DSX_IP_CUBE not set (optional, non-gating)")
    cube = load_cube(path)
    cfg = TrainConfig(epochs=15, dim=32, depths=(1, 1), train_ratio=0.1, seed=0)
    art = train(cfg, cube, tmp_path / "ip")
    oa = art.report["OA"]
    ok = oa >= 0.60
    record(10, ok, f"IP test OA {oa:.4f} (chance about {1 / cube.n_classes:.3f}); indicative only")
    assert oa >= 0.60
