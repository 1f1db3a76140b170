"""End-to-end acceptance checks, one test per criterion.

The terminal summary prints a PASS/FAIL line per criterion (see conftest).
"""

import hashlib
import time

import mpmath
import numpy as np
import numpy.testing as npt
import pytest

from dabn import cli
from dabn.adapter import StreamAdapter
from dabn.data import PERIOD_20HZ_NS, Series, make_windows, preprocess, write_csv
from dabn.evaluation import (
    FoldModelCache,
    ExperimentSpec,
    drift_recovery,
    lopocv,
    oracle_stats_accuracy,
    run_batch_da,
    run_digest,
    run_lower_baseline,
    run_online,
)
from dabn.model import (
    GLOBAL_STATS,
    TRAIN_BATCH_STATS,
    ArchConfig,
    backward,
    cross_entropy,
    forward,
    init_model,
    predict,
    predict_batch,
)
from dabn.stats import BnLayerState, batch_moments, bn_backward, normalize, update_running_online
from dabn.suite import ONLINE_GRID, TARGET_USER, drift_suite, personalization_suite, tiny_arch, tiny_hyper
from dabn.synthetic import ShiftSpec, SynthSpec, synth_generate
from gradcheck import activation_pattern, finite_difference, rel_err, smooth_finite_difference, tensor_rel_err

criterion = pytest.mark.criterion


def sequential_oracle(mean0, var0, stream, alpha, dps=30):
    with mpmath.workdps(dps):
        a = mpmath.mpf(alpha)
        keep = 1 - a
        m, v = mpmath.mpf(mean0), mpmath.mpf(var0)
        for z in stream:
            d = mpmath.mpf(z) - m
            m, v = m + a * d, keep * (v + a * d * d)
        return float(m), float(v)


@criterion(1, "statistics oracle equivalence")
def test_statistics_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    streams, length = 100, 1000
    for alpha in (0.5, 0.1, 0.01):
        mean0 = rng.normal(0, 2, streams)
        var0 = rng.uniform(0.1, 4, streams)
        z = rng.normal(rng.normal(0, 5, streams), rng.uniform(0.1, 3, streams), size=(length, streams))
        state = BnLayerState.initial(streams)
        state.running_mean[...] = mean0
        state.running_var[...] = var0
        for row in z:
            state = update_running_online(state, row, alpha)
        for k in range(streams):
            m, v = sequential_oracle(mean0[k], var0[k], z[:, k].tolist(), alpha)
            assert abs(state.running_mean[k] - m) <= 1e-10 * abs(m), (alpha, k)
            assert abs(state.running_var[k] - v) <= 1e-10 * abs(v), (alpha, k)

    # constant streams: the gap to the constant shrinks by (1 - alpha) per step;
    # with dyadic alpha and integer constants every step is exact in floating point
    c = rng.integers(-50, 50, 50).astype(float)
    state = BnLayerState.initial(50)
    state.running_mean[...] = c + 1.0
    for n in range(1, 41):
        state = update_running_online(state, c, 0.5)
        assert np.all(np.abs(state.running_mean - c) == 0.5**n)
    for alpha in (0.1, 0.01):
        c = rng.normal(0, 3, 50)
        gap0 = rng.uniform(0.5, 2, 50)
        state = BnLayerState.initial(50)
        state.running_mean[...] = c + gap0
        for n in range(1, 101):
            state = update_running_online(state, c, alpha)
        # the gap is read off values of size |c|, so one ulp of c bounds its rounding
        err = np.abs(np.abs(state.running_mean - c) - (1 - alpha) ** 100 * gap0)
        assert np.all(err <= 1e-10 * (1 - alpha) ** 100 * gap0 + 4 * np.spacing(np.abs(c) + gap0))
    assert time.perf_counter() - start < 5


@criterion(2, "normalization invariant")
def test_normalization_invariant():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, width = int(rng.integers(4, 513)), int(rng.integers(1, 17))
        x = rng.normal(rng.normal(0, 10, width), rng.uniform(0.01, 5, width), size=(n, width))
        layer = BnLayerState.initial(width)
        layer.gamma[...] = rng.uniform(-3, 3, width)
        layer.beta[...] = rng.normal(0, 2, width)
        m = batch_moments(x)
        out = normalize(layer, x, m.mean, m.var)
        npt.assert_allclose(out.mean(axis=0), layer.beta, rtol=0, atol=1e-9)
        npt.assert_allclose(out.var(axis=0), layer.gamma**2 * m.var / (m.var + layer.epsilon), rtol=1e-9, atol=0)
    assert time.perf_counter() - start < 5


@criterion(3, "gradient correctness")
def test_gradients():
    start = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, width = int(rng.integers(2, 16)), int(rng.integers(1, 8))
        layer = BnLayerState.initial(width)
        layer.gamma[...] = rng.uniform(0.5, 2, width)
        layer.beta[...] = rng.normal(size=width)
        x = rng.normal(size=(n, width)) * rng.uniform(0.5, 3)
        w = rng.normal(size=(n, width))

        def bn_loss():
            m = batch_moments(x)
            return float(np.sum(w * normalize(layer, x, m.mean, m.var)))

        dx, dg, db = bn_backward(layer, x, batch_moments(x), w)
        for analytic, param in ((dx, x), (dg, layer.gamma), (db, layer.beta)):
            assert rel_err(analytic, finite_difference(bn_loss, param, 1e-4)) < 1e-4, seed

    arch = ArchConfig(classes=3, conv_layers=2, feature_maps=3, kernel=3, pool=2, dense_width=5, window_len=8,
                      dropout_rate=0.0)
    checked = {TRAIN_BATCH_STATS: 0, GLOBAL_STATS: 0}
    for mode in checked:
        for seed in range(200):
            rng = np.random.default_rng(seed)
            model = init_model(arch, ["a", "b", "c"], seed)
            model.bn.gamma[...] = rng.uniform(0.5, 1.5, arch.dense_width)
            model.bn.beta[...] = rng.normal(0, 0.2, arch.dense_width)
            model.bn.running_var[...] = rng.uniform(0.05, 0.5, arch.dense_width)
            # unit-variance inputs keep the BN input variance well above epsilon; near
            # epsilon the 1e-3 quotient's truncation error alone exceeds the tolerance
            x = rng.normal(size=(8, 8, 3))
            labels = rng.integers(0, 3, 8)
            grads = backward(model, forward(model, x, mode)[1], labels)

            def loss():
                logits, cache = forward(model, x, mode)
                return cross_entropy(logits, labels), activation_pattern(cache)

            numeric = {k: smooth_finite_difference(loss, p, 1e-3) for k, p in model.trainables().items()}
            if any(v is None for v in numeric.values()):
                continue
            for k, fd in numeric.items():
                assert tensor_rel_err(grads[k], fd) < 1e-3, (mode, seed, k)
            checked[mode] += 1
            if checked[mode] == 20:
                break
    assert min(checked.values()) >= 20
    assert time.perf_counter() - start < 60


@criterion(4, "window-count law")
def test_window_count_law():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    for _ in range(1000):
        nu, stride = int(rng.integers(1, 80)), int(rng.integers(1, 60))
        length = int(rng.integers(nu, 1000))
        assert len(make_windows(np.zeros((length, 3)), [0] * length, nu, stride)) == (length - nu) // stride + 1
    assert len(make_windows(np.zeros((3560, 3)), [0] * 3560, 40, 20)) == 177
    ts = np.arange(3560, dtype=np.int64) * PERIOD_20HZ_NS
    groups = {(str(s), f"a{a}"): Series(str(s), f"a{a}", ts, np.zeros((3560, 3))) for s in range(44) for a in range(5)}
    assert len(preprocess(groups)) == 38940
    assert time.perf_counter() - start < 5


@criterion(5, "synthetic personalization gain")
def test_personalization_gain():
    start = time.perf_counter()
    suite = personalization_suite(0)
    model = FoldModelCache().get(suite.dataset, suite.arch, suite.hyper, TARGET_USER)
    idx = suite.dataset.user_indices(TARGET_USER)
    x, y = suite.dataset.windows[idx], suite.dataset.labels[idx]

    frozen = run_lower_baseline(model, x, y).accuracy
    online = max(run_online(model, x, y, a, randomized=True, repeats=5).accuracy for a in ONLINE_GRID)
    batch = run_batch_da(model, x, y, 0.1)
    test = batch.predictions >= 0
    oracle = oracle_stats_accuracy(model, x[test], y[test], x)
    print(f"frozen {frozen:.3f} online {online:.3f} batch {batch.accuracy:.3f} oracle {oracle:.3f}")
    assert online - frozen >= 0.10
    assert abs(batch.accuracy - oracle) <= 0.03
    assert time.perf_counter() - start <= 120


@criterion(6, "drift recovery")
def test_drift_recovery():
    start = time.perf_counter()
    suite = drift_suite(0)
    model = FoldModelCache().get(suite.dataset, suite.arch, suite.hyper, TARGET_USER)
    idx = suite.dataset.user_indices(TARGET_USER)
    x, y = suite.dataset.windows[idx], suite.dataset.labels[idx]
    reports = {}
    for alpha in (0.05, 0.001):
        ad = StreamAdapter(model, alpha)
        correct = [ad.adapt_and_classify(w).label_index == t for w, t in zip(x, y)]
        reports[alpha] = drift_recovery(correct, suite.drift_index)
    print({a: (r.pre_accuracy, r.recovered_after) for a, r in reports.items()})
    assert reports[0.05].recovered_after is not None and reports[0.05].recovered_after < 300
    assert reports[0.001].recovered_after is None
    assert time.perf_counter() - start < 120


@criterion(7, "baseline equivalence")
def test_baseline_equivalence():
    ds = synth_generate(SynthSpec(num_users=3, classes=5, windows_per_class=20, shift=ShiftSpec(offset_std=0.15),
                                  seed=3))
    arch = tiny_arch()
    hyper = tiny_hyper(10)
    cache = FoldModelCache()
    specs = [
        ExperimentSpec("lower-baseline"),
        ExperimentSpec("online-unrandomized", momentum=0.1, adaptation=False),
        ExperimentSpec("online-randomized", momentum=0.1, repeats=2, adaptation=False),
        ExperimentSpec("unsupervised-batch", pre_fraction=0.3, adaptation=False),
    ]
    runs = [lopocv(ds, arch, hyper, s, cache=cache) for s in specs]
    for t, user in enumerate(ds.users()):
        idx = ds.user_indices(user)
        model = cache.get(ds, arch, hyper, user)
        single = np.array([model.label_map.index(predict(model, w)[0]) for w in ds.windows[idx]])
        npt.assert_array_equal(predict_batch(model, ds.windows[idx])[0], single)
        for run in runs:
            pred = run[t].predictions
            seen = pred >= 0
            assert seen.sum() > 0
            npt.assert_array_equal(pred[seen], single[seen])


def _pipeline(capsys, workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    rng = np.random.default_rng(0)
    groups = {}
    for s in range(3):
        for a in range(3):
            ts = np.arange(400, dtype=np.int64) * PERIOD_20HZ_NS + int(rng.integers(0, 10**8))
            groups[(str(s + 1), f"act{a}")] = Series(str(s + 1), f"act{a}", ts, rng.normal(a, 4, (400, 3)))
    write_csv(groups, "raw.csv")
    small = ["--conv-layers", "2", "--feature-maps", "4", "--dense-width", "16", "--lr", "3e-3",
             "--batch-size", "20", "--epochs", "3", "--seed", "5"]
    steps = [
        ["preprocess", "raw.csv", "--out", "data.ds"],
        ["train", "data.ds", *small, "--out", "model.dabn"],
        ["eval", "data.ds", "--kind", "lower-baseline", *small, "--out", "runs"],
        ["eval", "data.ds", "--kind", "online-randomized", "--momentum", "0.05", "--repeats", "2", *small,
         "--out", "runs"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    capsys.readouterr()
    digest = lambda p: hashlib.sha256((workdir / p).read_bytes()).hexdigest()
    return {
        "data": digest("data.ds"),
        "model": digest("model.dabn"),
        "baseline": run_digest(workdir / "runs" / "lower-baseline"),
        "online": run_digest(workdir / "runs" / "online-randomized-0.05"),
    }


@criterion(8, "determinism")
def test_determinism(tmp_path, capsys, monkeypatch):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _pipeline(capsys, tmp_path / "a", monkeypatch)
    second = _pipeline(capsys, tmp_path / "b", monkeypatch)
    assert first == second
