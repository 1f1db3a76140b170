import math
from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dabn.data import (
    PIPELINE_STEPS,
    Dataset,
    Series,
    ingest_csv,
    make_domain_batches,
    make_windows,
    minmax_denormalize,
    minmax_normalize,
    moving_average,
    preprocess,
    resample_20hz,
    window_count,
    write_csv,
)
from dabn.errors import DataError, InvariantViolation
from dabn.synthetic import ShiftSpec, SynthSpec, synth_generate

MS = 1_000_000


def _write(tmp_path, text, name="raw.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def mock_recordings(subjects=3, activities=2, samples=200, seed=0):
    """Raw recordings on an irregular ~20 Hz clock."""
    rng = np.random.default_rng(seed)
    groups = {}
    for s in range(subjects):
        for a in range(activities):
            ts = np.cumsum(rng.integers(45 * MS, 55 * MS, size=samples)).astype(np.int64)
            groups[(f"{s + 1}", f"act{a}")] = Series(f"{s + 1}", f"act{a}", ts, rng.normal(0, 5, size=(samples, 3)))
    return groups


class TestIngest:
    def test_single_row(self, tmp_path):
        res = ingest_csv(_write(tmp_path, "7,Walking,1000,0.5,-1.0,9.8\n"))
        assert list(res.groups) == [("7", "Walking")]
        s = res.groups[("7", "Walking")]
        assert len(s) == 1
        npt.assert_array_equal(s.accel, [[0.5, -1.0, 9.8]])
        assert res.malformed == 0

    def test_malformed_row_is_counted(self, tmp_path):
        text = "subject,activity,timestamp_ns,x,y,z\n1,A,10,1,2,3\n1,A,20,oops,2,3\n1,A,30,1,2,3;\n"
        res = ingest_csv(_write(tmp_path, text))
        assert res.malformed == 1
        assert res.malformed_lines == [3]
        assert len(res.groups[("1", "A")]) == 2

    def test_groups_are_time_sorted(self, tmp_path):
        res = ingest_csv(_write(tmp_path, "1,A,30,0,0,3\n1,A,10,0,0,1\n1,A,20,0,0,2\n"))
        npt.assert_array_equal(res.groups[("1", "A")].timestamps, [10, 20, 30])
        npt.assert_array_equal(res.groups[("1", "A")].accel[:, 2], [1, 2, 3])

    def test_empty_and_missing_files(self, tmp_path):
        with pytest.raises(DataError):
            ingest_csv(_write(tmp_path, ""))
        with pytest.raises(DataError):
            ingest_csv(_write(tmp_path, "a,b,c\nx,y\n"))
        with pytest.raises(DataError):
            ingest_csv(tmp_path / "absent.csv")

    def test_round_trip(self, tmp_path):
        groups = mock_recordings(samples=30)
        write_csv(groups, tmp_path / "out.csv")
        back = ingest_csv(tmp_path / "out.csv").groups
        assert list(back) == list(groups)
        for k in groups:
            npt.assert_array_equal(back[k].timestamps, groups[k].timestamps)
            npt.assert_array_equal(back[k].accel, groups[k].accel)


class TestResample:
    def test_exact_grid_unchanged(self):
        ts = np.arange(10, dtype=np.int64) * 50 * MS + 123
        s = Series("1", "A", ts, np.random.default_rng(0).normal(size=(10, 3)))
        out = resample_20hz(s)
        npt.assert_array_equal(out.timestamps, ts)
        npt.assert_array_equal(out.accel, s.accel)

    def test_linear_midpoint(self):
        s = Series("1", "A", np.array([0, 100 * MS]), np.array([[0.0] * 3, [1.0] * 3]))
        npt.assert_array_equal(resample_20hz(s).accel[:, 0], [0.0, 0.5, 1.0])

    def test_trailing_partial_step_dropped(self):
        s = Series("1", "A", np.array([0, 120 * MS]), np.zeros((2, 3)))
        npt.assert_array_equal(resample_20hz(s).timestamps, [0, 50 * MS, 100 * MS])

    def test_sine_at_19_7_hz(self):
        n = 400
        ts = np.round(np.arange(n) * 1e9 / 19.7).astype(np.int64)
        wave = np.sin(2 * np.pi * ts / 1e9)
        out = resample_20hz(Series("1", "A", ts, np.column_stack([wave] * 3)))
        truth = np.sin(2 * np.pi * out.timestamps / 1e9)
        dev = np.abs(out.accel[:, 0] - truth)
        # linear interpolation error bound h^2 * max|f''| / 8 for the input spacing h
        h = np.max(np.diff(ts)) / 1e9
        assert dev.max() <= h**2 * (2 * np.pi) ** 2 / 8
        assert dev.mean() < 0.01

    def test_rejects_short_or_unordered(self):
        with pytest.raises(ValueError):
            resample_20hz(Series("1", "A", np.array([0]), np.zeros((1, 3))))
        with pytest.raises(ValueError):
            resample_20hz(Series("1", "A", np.array([0, 0]), np.zeros((2, 3))))


class TestMovingAverage:
    def test_constant(self):
        npt.assert_array_equal(moving_average(np.full((9, 3), 2.5)), np.full((9, 3), 2.5))

    def test_alternating(self):
        out = moving_average(np.tile([0.0, 4.0], 10))
        npt.assert_array_equal(out[3:], 2.0)

    def test_warm_up(self):
        out = moving_average(np.array([1.0, 3.0, 8.0, 0.0, 4.0]))
        npt.assert_allclose(out, [1.0, 2.0, 4.0, 3.0, 3.75], rtol=1e-15)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=60))
    def test_matches_definition(self, xs):
        out = moving_average(np.array(xs))
        ref = [math.fsum(xs[max(0, i - 3) : i + 1]) / len(xs[max(0, i - 3) : i + 1]) for i in range(len(xs))]
        npt.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            moving_average(np.zeros(0))


class TestMinMax:
    def test_endpoints_and_clamp(self):
        npt.assert_array_equal(minmax_normalize(np.array([-78.0, 78.0, 0.0, 100.0, -200.0])), [0, 1, 0.5, 1, 0])

    @given(st.lists(st.floats(-78, 78), min_size=1, max_size=50))
    def test_round_trip(self, xs):
        xs = np.array(xs)
        npt.assert_allclose(minmax_denormalize(minmax_normalize(xs)), xs, rtol=0, atol=1e-12)

    def test_bad_range(self):
        with pytest.raises(ValueError):
            minmax_normalize(np.zeros(3), 1.0, 1.0)


class TestWindows:
    def test_count_law_random_triples(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            nu = int(rng.integers(1, 60))
            stride = int(rng.integers(1, 40))
            length = int(rng.integers(nu, 400))
            ws = make_windows(np.zeros((length, 3)), [0] * length, nu, stride)
            assert len(ws) == (length - nu) // stride + 1 == window_count(length, nu, stride)

    def test_wisdm_recording(self):
        assert len(make_windows(np.zeros((3560, 3)), [0] * 3560, 40, 20)) == 177

    def test_boundary(self):
        assert len(make_windows(np.zeros((40, 3)), [0] * 40, 40, 20)) == 1
        with pytest.raises(ValueError):
            make_windows(np.zeros((39, 3)), [0] * 39, 40, 20)

    def test_majority_and_tie(self):
        (w,) = make_windows(np.zeros((40, 3)), ["a"] * 15 + ["b"] * 25, 40, 20)
        assert w.label == "b"
        (w,) = make_windows(np.zeros((40, 3)), ["b"] * 20 + ["a"] * 20, 40, 20)
        assert w.label == "b"

    def test_contents(self):
        vals = np.arange(300, dtype=float).reshape(100, 3)
        ws = make_windows(vals, [0] * 100, 40, 20, subject="s")
        npt.assert_array_equal(ws[2].data, vals[40:80])
        assert [w.index for w in ws] == [0, 1, 2, 3]
        assert ws[0].subject == "s"


class TestDomainBatches:
    def test_wisdm_sized_sources(self):
        subjects = np.repeat([0, 1, 2], 885)
        sources = {u: np.flatnonzero(subjects == u) for u in range(3)}
        batches = make_domain_batches(sources, 177, np.random.default_rng(0), subjects)
        assert len(batches) == 15
        assert Counter(b.source for b in batches) == {0: 5, 1: 5, 2: 5}
        for b in batches:
            assert len(b.indices) == 177
            assert set(subjects[b.indices]) == {b.source}

    def test_union_without_duplicates(self):
        sizes = {0: 103, 1: 90, 2: 77}
        offsets = np.cumsum([0] + list(sizes.values()))
        sources = {u: np.arange(offsets[i], offsets[i] + n) for i, (u, n) in enumerate(sizes.items())}
        q = 20
        for seed in range(5):
            batches = make_domain_batches(sources, q, np.random.default_rng(seed))
            for u, idx in sources.items():
                used = np.concatenate([b.indices for b in batches if b.source == u])
                assert len(used) == len(idx) // q * q
                assert len(np.unique(used)) == len(used)
                assert set(used) <= set(idx)

    def test_full_source_batch_is_permutation(self):
        (b,) = make_domain_batches({0: np.arange(30)}, 30, np.random.default_rng(1))
        npt.assert_array_equal(np.sort(b.indices), np.arange(30))

    def test_errors(self):
        with pytest.raises(ValueError):
            make_domain_batches({0: np.arange(10)}, 11, np.random.default_rng(0))
        with pytest.raises(ValueError):
            make_domain_batches({0: np.arange(10)}, 1, np.random.default_rng(0))

    def test_mixed_batch_detected(self):
        subjects = np.array([0, 0, 1, 1])
        with pytest.raises(InvariantViolation):
            make_domain_batches({0: np.array([0, 1, 2, 3])}, 4, np.random.default_rng(0), subjects)


class TestPreprocess:
    def test_balanced_wisdm_mock(self):
        # 44 subjects x 5 activities of 3560 resampled samples each
        period = 50 * MS
        groups = {}
        for s in range(44):
            for a in range(5):
                ts = np.arange(3560, dtype=np.int64) * period
                groups[(str(s), f"a{a}")] = Series(str(s), f"a{a}", ts, np.zeros((3560, 3)))
        ds = preprocess(groups)
        assert len(ds) == 38940
        assert Counter(ds.subjects.tolist()) == {s: 885 for s in range(44)}

    def test_pipeline_descriptor_and_order(self):
        ds = preprocess(mock_recordings())
        assert ds.pipeline == PIPELINE_STEPS
        assert PIPELINE_STEPS.index("resample_20hz") < PIPELINE_STEPS.index("moving_average")
        assert PIPELINE_STEPS.index("moving_average") < PIPELINE_STEPS.index("minmax_normalize")
        assert PIPELINE_STEPS[-1] == "make_windows"

    def test_matches_manual_chain(self):
        groups = mock_recordings(subjects=2, activities=2, samples=120)
        ds = preprocess(groups)
        lengths = [len(resample_20hz(s)) for s in groups.values()]
        n = min(lengths)
        s = groups[("1", "act1")]
        manual = minmax_normalize(moving_average(resample_20hz(s).accel[:n]))
        ws = make_windows(manual, [1] * n)
        got = ds.windows[(ds.subjects == 0) & (ds.labels == 1)]
        npt.assert_array_equal(got, np.stack([w.data for w in ws]))

    def test_filter_order_matters(self):
        x = np.random.default_rng(0).normal(0, 80, size=(50, 3))
        assert not np.allclose(minmax_normalize(moving_average(x)), moving_average(minmax_normalize(x)))

    def test_cache_round_trip_and_bytes(self, tmp_path):
        ds = preprocess(mock_recordings())
        ds.save(tmp_path / "a.ds")
        preprocess(mock_recordings()).save(tmp_path / "b.ds")
        assert (tmp_path / "a.ds").read_bytes() == (tmp_path / "b.ds").read_bytes()
        back = Dataset.load(tmp_path / "a.ds")
        npt.assert_array_equal(back.windows, ds.windows)
        assert back.label_names == ds.label_names and back.digest() == ds.digest()

    def test_corrupt_cache(self, tmp_path):
        (tmp_path / "bad.ds").write_bytes(b"not a cache")
        with pytest.raises(DataError):
            Dataset.load(tmp_path / "bad.ds")


class TestSynthetic:
    def test_zero_shift_users_identical_in_distribution(self):
        ds = synth_generate(SynthSpec(num_users=3, windows_per_class=200, seed=1))
        means = [ds.windows[ds.subjects == u].mean(axis=(0, 1)) for u in range(3)]
        npt.assert_allclose(means[0], means[1], atol=0.01)
        npt.assert_allclose(means[0], means[2], atol=0.01)

    def test_offsets_move_class_means(self):
        offsets = ((0.0, 0.0, 0.0), (0.3, -0.2, 0.1))
        spec = SynthSpec(num_users=2, windows_per_class=300, shift=ShiftSpec(offsets=offsets), seed=2)
        ds = synth_generate(spec)
        for m in range(spec.classes):
            a = ds.windows[(ds.subjects == 0) & (ds.labels == m)].mean(axis=1)
            b = ds.windows[(ds.subjects == 1) & (ds.labels == m)].mean(axis=1)
            se = np.sqrt(a.var(axis=0) / len(a) + b.var(axis=0) / len(b))
            assert np.all(np.abs(b.mean(axis=0) - a.mean(axis=0) - np.array(offsets[1])) < 3 * se)

    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(shift=ShiftSpec(offset_std=0.1, scale_std=0.1), seed=5)
        synth_generate(spec).save(tmp_path / "a")
        synth_generate(spec).save(tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_drift_switch_index(self):
        shift = ShiftSpec(offsets=((0, 0, 0),) * 2, drift_index=150, drift_user=1, drift_offset=(1.0, 1.0, 1.0))
        ds = synth_generate(SynthSpec(num_users=2, windows_per_class=60, noise=0.01, shift=shift, seed=0))
        target = ds.windows[ds.subjects == 1].mean(axis=(1, 2))
        assert np.all(target[:150] < 0.8)
        assert np.all(target[150:] > 1.2)

    def test_degenerate_spec(self):
        with pytest.raises(ValueError):
            ShiftSpec(scales=((1.0, 0.0, 1.0),))
        with pytest.raises(ValueError):
            synth_generate(SynthSpec(num_users=1))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 4), st.integers(2, 4), st.integers(1, 10))
    def test_shapes(self, users, classes, per_class):
        ds = synth_generate(SynthSpec(num_users=users, classes=classes, windows_per_class=per_class))
        assert ds.windows.shape == (users * classes * per_class, 40, 3)
        assert set(ds.labels.tolist()) == set(range(classes))
