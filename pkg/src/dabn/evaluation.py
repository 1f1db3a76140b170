"""Leave-one-person-out evaluation of the baselines and adaptation variants.

Fold models depend only on (dataset, architecture, hyperparameters, held-out
user), never on the online momentum or the pre-estimation split, so they are
cached by content hash and shared by every experiment and sweep.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adapter import StreamAdapter, StreamCsvWriter
from .data import Dataset
from .model import (
    GLOBAL_STATS,
    TRAIN_BATCH_STATS,
    ArchConfig,
    TrainedModel,
    TrainHyper,
    _head_forward,
    dense_inputs,
    fit,
    init_model,
    load_checkpoint,
    predict_batch,
    round_to_storage,
    save_checkpoint,
    softmax,
    train,
)
from .rng import substream
from .stats import batch_moments, check_momentum, normalize

LOWER_BASELINE = "lower-baseline"
UPPER_BASELINE = "upper-baseline"
UNSUPERVISED_BATCH = "unsupervised-batch"
SUPERVISED_BATCH = "supervised-batch"
SUPERVISED_BASELINE = "supervised-baseline"
ONLINE_UNRANDOMIZED = "online-unrandomized"
ONLINE_RANDOMIZED = "online-randomized"

ONLINE_KINDS = (ONLINE_UNRANDOMIZED, ONLINE_RANDOMIZED)
BATCH_KINDS = (UNSUPERVISED_BATCH, SUPERVISED_BATCH, SUPERVISED_BASELINE)
KINDS = (LOWER_BASELINE, UPPER_BASELINE) + BATCH_KINDS + ONLINE_KINDS

UPPER_TEST_FRACTION = 0.2
UPPER_VALIDATION_FRACTION = 0.1
UPPER_PATIENCE = 20


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    momentum: Optional[float] = None
    pre_fraction: Optional[float] = None
    fine_tune_epochs: int = 10
    repeats: int = 5
    seed: int = 0
    adaptation: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.kind in ONLINE_KINDS:
            if self.momentum is None:
                raise ValueError(f"{self.kind} needs a momentum")
            check_momentum(self.momentum)
        if self.kind in BATCH_KINDS:
            if self.pre_fraction is None or not 0 < self.pre_fraction < 1:
                raise ValueError(f"{self.kind} needs pre_fraction in (0, 1)")
        if self.repeats < 1 or self.fine_tune_epochs < 0:
            raise ValueError("repeats must be >= 1 and fine_tune_epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class FoldResult:
    target: object
    accuracy: float
    correct: int
    total: int
    wall_ms: float = 0.0
    predictions: Optional[np.ndarray] = None  # per target window, in dataset order; -1 = not evaluated
    repeat_accuracies: list = field(default_factory=list)
    records: Optional[list] = None


@dataclass
class SummaryTable:
    run_id: str
    baseline_id: str
    targets: list
    accuracies: list
    baseline_accuracies: list
    median: float
    mean: float
    deltas: list
    top10_mean: float
    flop10_mean: float
    baseline_top10_mean: float
    baseline_flop10_mean: float
    median_delta: float
    mean_delta: float

    def aggregate_rows(self) -> list:
        return [
            ("median", self.median),
            ("mean", self.mean),
            ("top10_mean", self.top10_mean),
            ("flop10_mean", self.flop10_mean),
            ("baseline_median", statistics.median(self.baseline_accuracies)),
            ("baseline_mean", statistics.fmean(self.baseline_accuracies)),
            ("baseline_top10_mean", self.baseline_top10_mean),
            ("baseline_flop10_mean", self.baseline_flop10_mean),
            ("median_delta", self.median_delta),
            ("mean_delta", self.mean_delta),
        ]

    def write(self, directory) -> None:
        directory = Path(directory)
        with open(directory / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["statistic", "value"])
            w.writerow(["run_id", self.run_id])
            w.writerow(["baseline_id", self.baseline_id])
            for name, value in self.aggregate_rows():
                w.writerow([name, repr(float(value))])
        with open(directory / "deltas.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "accuracy", "baseline_accuracy", "delta"])
            for row in zip(self.targets, self.accuracies, self.baseline_accuracies, self.deltas):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# --- splits -----------------------------------------------------------------


def stratified_split(labels, fraction: float, rng: np.random.Generator):
    """Indices ``(selected, rest)`` with ``floor(fraction * n)`` selected.

    The selection is spread over classes by largest remainder and, when it is
    large enough, holds at least one window of every class.
    """
    labels = np.asarray(labels)
    n = len(labels)
    n_sel = int(np.floor(fraction * n))
    if n_sel < 1 or n_sel >= n:
        raise ValueError(f"fraction {fraction} of {n} windows leaves one side of the split empty")
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * n_sel / n
    quota = np.floor(exact).astype(int)
    if n_sel >= len(classes):
        quota = np.maximum(quota, 1)
    while quota.sum() > n_sel:
        quota[np.argmax(quota - exact)] -= 1
    remainder = exact - quota
    for i in np.argsort(-remainder, kind="stable"):
        if quota.sum() >= n_sel:
            break
        if quota[i] < counts[i]:
            quota[i] += 1
    selected = []
    for c, k in zip(classes, quota):
        members = np.flatnonzero(labels == c)
        selected.append(rng.choice(members, size=k, replace=False))
    selected = np.sort(np.concatenate(selected))
    rest = np.setdiff1d(np.arange(n), selected)
    return selected, rest


# --- fold models ----------------------------------------------------------------


class FoldModelCache:
    """Trained fold models keyed by content hash, in memory and optionally on disk."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._models: dict = {}
        self._lock = threading.Lock()
        self.trainings = 0

    @staticmethod
    def key(dataset: Dataset, arch: ArchConfig, hyper: TrainHyper, target) -> str:
        blob = json.dumps(
            {"data": dataset.digest(), "arch": arch.to_dict(), "hyper": hyper.to_dict(), "target": int(target)},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    def get(self, dataset: Dataset, arch: ArchConfig, hyper: TrainHyper, target) -> TrainedModel:
        k = self.key(dataset, arch, hyper, target)
        with self._lock:
            if k in self._models:
                return self._models[k]
        path = self.directory / f"{k[:16]}.dabn" if self.directory else None
        if path is not None and path.exists():
            model = load_checkpoint(path)
        else:
            sources = [u for u in dataset.users() if u != target]
            model = train(dataset, arch, hyper, users=sources)
            with self._lock:
                self.trainings += 1
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, path)
        with self._lock:
            self._models[k] = model
        return model


# --- per-fold evaluations -----------------------------------------------------------


def _classify_with_stats(model: TrainedModel, windows, mean, var) -> np.ndarray:
    z = dense_inputs(model, windows)
    zhat = normalize(model.bn, z, mean, var)
    logits, _, _ = _head_forward(model, zhat, None)
    return softmax(logits).argmax(axis=1)


def _result(target, pred, truth, index=None, size=None, **kw) -> FoldResult:
    correct = int(np.sum(pred == truth))
    full = pred
    if index is not None:
        full = np.full(size, -1, dtype=np.int64)
        full[index] = pred
    return FoldResult(target, correct / len(truth), correct, len(truth), predictions=full, **kw)


def run_lower_baseline(model: TrainedModel, windows, labels, target=None) -> FoldResult:
    pred, _ = predict_batch(model, windows)
    return _result(target, pred, np.asarray(labels))


def run_online(
    model: TrainedModel,
    windows,
    labels,
    momentum: float,
    randomized: bool = False,
    repeats: int = 5,
    seed: int = 0,
    adaptation: bool = True,
    target=None,
    keep_records: bool = False,
) -> FoldResult:
    """Stream the target windows through fresh adapters.

    Unrandomized keeps the recorded order (one pass); randomized averages
    ``repeats`` uniformly shuffled passes. Predictions and records of the first
    pass are kept, mapped back to dataset order.
    """
    windows, labels = np.asarray(windows), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty target stream")
    check_momentum(momentum)
    passes = repeats if randomized else 1
    accs, first_pred, records = [], None, None
    for r in range(passes):
        order = substream(seed, "online-order", r).permutation(len(labels)) if randomized else np.arange(len(labels))
        adapter = StreamAdapter(model, momentum, adaptation_enabled=adaptation)
        pred = np.empty(len(labels), dtype=np.int64)
        recs = [] if keep_records and r == 0 else None
        for i in order:
            rec = adapter.adapt_and_classify(windows[i])
            pred[i] = rec.label_index
            if recs is not None:
                recs.append((rec, int(labels[i])))
        accs.append(float(np.mean(pred == labels)))
        if r == 0:
            first_pred, records = pred, recs
    correct = int(np.sum(first_pred == labels)) if passes == 1 else int(round(np.mean(accs) * len(labels)))
    return FoldResult(target, float(np.mean(accs)), correct, len(labels), predictions=first_pred,
                      repeat_accuracies=accs, records=records)


def fine_tune(model: TrainedModel, windows, labels, epochs: int, hyper: TrainHyper, adaptation: bool = True,
              tag: str = "finetune") -> TrainedModel:
    """Copy of ``model`` with weights tuned on labeled target windows.

    With ``adaptation`` the target batches are normalized by their own moments;
    without it the trained running statistics stay fixed throughout.
    """
    tuned = model.copy()
    n = len(labels)
    q = min(hyper.batch_size, n)
    if q < 2:
        raise ValueError("fine-tuning needs at least two labeled windows")
    fit(tuned, np.asarray(windows), np.asarray(labels), np.zeros(n, dtype=np.int64), {0: np.arange(n)}, hyper,
        epochs=epochs, batch_size=q, mode=TRAIN_BATCH_STATS if adaptation else GLOBAL_STATS, tag=tag)
    return round_to_storage(tuned)


def run_batch_da(
    model: TrainedModel,
    windows,
    labels,
    pre_fraction: float,
    supervised: bool = False,
    fine_tune_epochs: int = 10,
    seed: int = 0,
    hyper: Optional[TrainHyper] = None,
    adaptation: bool = True,
    target=None,
) -> FoldResult:
    """Split the target into a pre-estimation and a test part and evaluate on the test part.

    With ``adaptation`` the normalization uses the plain batch moments of the
    pre-estimation windows' dense inputs; otherwise the trained running
    statistics. ``supervised`` first fine-tunes the weights on the labeled
    pre-estimation windows.
    """
    windows, labels = np.asarray(windows), np.asarray(labels)
    if not 0 < pre_fraction < 1:
        raise ValueError("pre_fraction must lie in (0, 1)")
    pre, test = stratified_split(labels, pre_fraction, substream(seed, "pre-estimation-split"))
    if supervised:
        model = fine_tune(model, windows[pre], labels[pre], fine_tune_epochs, hyper or model.hyper or TrainHyper(),
                          adaptation=adaptation)
    if adaptation:
        m = batch_moments(dense_inputs(model, windows[pre]))
        pred = _classify_with_stats(model, windows[test], m.mean, m.var)
    else:
        pred, _ = predict_batch(model, windows[test])
    return _result(target, pred, labels[test], index=test, size=len(labels))


def oracle_stats_accuracy(model: TrainedModel, eval_windows, eval_labels, stat_windows) -> float:
    """Accuracy when normalizing with the moments of ``stat_windows`` (e.g. the whole target)."""
    m = batch_moments(dense_inputs(model, stat_windows))
    return float(np.mean(_classify_with_stats(model, eval_windows, m.mean, m.var) == np.asarray(eval_labels)))


def run_upper_baseline(dataset: Dataset, arch: ArchConfig, hyper: TrainHyper, user, seed: int = 0) -> FoldResult:
    """Personal model trained and tested on one user's own split (early stopping on validation)."""
    idx = dataset.user_indices(user)
    labels = dataset.labels[idx]
    test, train_part = stratified_split(labels, UPPER_TEST_FRACTION, substream(seed, "upper", int(user), "test"))
    val_rel, fit_rel = stratified_split(labels[train_part], UPPER_VALIDATION_FRACTION,
                                        substream(seed, "upper", int(user), "validation"))
    fit_idx, val_idx = idx[train_part[fit_rel]], idx[train_part[val_rel]]
    model = init_model(arch, dataset.label_names, hyper.seed, train_momentum=hyper.train_momentum)
    model.hyper = hyper
    q = min(hyper.batch_size, len(fit_idx))
    fit(model, dataset.windows, dataset.labels, dataset.subjects, {user: fit_idx}, hyper, batch_size=q,
        tag=f"upper-{int(user)}", validation=(dataset.windows[val_idx], dataset.labels[val_idx]),
        patience=UPPER_PATIENCE)
    round_to_storage(model)
    pred, _ = predict_batch(model, dataset.windows[idx[test]])
    return _result(user, pred, labels[test], index=test, size=len(idx))


def evaluate_fold(model: TrainedModel, windows, labels, spec: ExperimentSpec, hyper=None, target=None,
                  keep_records=False) -> FoldResult:
    if spec.kind == LOWER_BASELINE:
        return run_lower_baseline(model, windows, labels, target)
    if spec.kind in ONLINE_KINDS:
        return run_online(model, windows, labels, spec.momentum, spec.kind == ONLINE_RANDOMIZED, spec.repeats,
                          spec.seed, spec.adaptation, target, keep_records)
    if spec.kind in BATCH_KINDS:
        return run_batch_da(
            model, windows, labels, spec.pre_fraction,
            supervised=spec.kind != UNSUPERVISED_BATCH,
            fine_tune_epochs=spec.fine_tune_epochs,
            seed=spec.seed,
            hyper=hyper,
            adaptation=spec.adaptation and spec.kind != SUPERVISED_BASELINE,
            target=target,
        )
    raise ValueError(f"{spec.kind} is not a fold-model experiment")


def lopocv(
    dataset: Dataset,
    arch: ArchConfig,
    hyper: TrainHyper,
    spec: ExperimentSpec,
    cache: Optional[FoldModelCache] = None,
    workers: int = 1,
    keep_records: bool = False,
) -> list:
    """One :class:`FoldResult` per user, each user held out once as the target."""
    users = dataset.users()
    if len(users) < 2:
        raise ValueError("leave-one-person-out needs at least two users")
    cache = cache if cache is not None else FoldModelCache()

    def fold(target):
        start = time.perf_counter()
        if spec.kind == UPPER_BASELINE:
            res = run_upper_baseline(dataset, arch, hyper, target, spec.seed)
        else:
            sources = [u for u in users if u != target]
            tgt_idx = dataset.user_indices(target)
            train_idx = np.flatnonzero(np.isin(dataset.subjects, sources))
            if np.intersect1d(tgt_idx, train_idx).size or target in sources:
                raise AssertionError(f"target {target} leaks into its training set")
            model = cache.get(dataset, arch, hyper, target)
            res = evaluate_fold(model, dataset.windows[tgt_idx], dataset.labels[tgt_idx], spec, hyper,
                                target, keep_records)
        res.target = dataset.subject_names[target]
        res.wall_ms = (time.perf_counter() - start) * 1000.0
        return res

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fold, users))
    return [fold(u) for u in users]


def summarize(results: Sequence[FoldResult], baseline: Sequence[FoldResult], run_id: str = "run",
              baseline_id: str = "baseline", k: int = 10) -> SummaryTable:
    """Median, mean, per-user deltas and top/flop-k means ranked by baseline accuracy."""
    targets = [r.target for r in results]
    if sorted(map(str, targets)) != sorted(str(b.target) for b in baseline) or len(set(targets)) != len(targets):
        raise ValueError("results and baseline cover different folds")
    if not results:
        raise ValueError("no folds to summarize")
    base = {b.target: b.accuracy for b in baseline}
    acc = [r.accuracy for r in results]
    base_acc = [base[t] for t in targets]
    deltas = [a - b for a, b in zip(acc, base_acc)]
    ranked = sorted(range(len(targets)), key=lambda i: (-base_acc[i], i))
    k = min(k, len(targets))
    top, flop = ranked[:k], ranked[-k:]
    return SummaryTable(
        run_id, baseline_id, targets, acc, base_acc,
        statistics.median(acc), statistics.fmean(acc), deltas,
        statistics.fmean(acc[i] for i in top), statistics.fmean(acc[i] for i in flop),
        statistics.fmean(base_acc[i] for i in top), statistics.fmean(base_acc[i] for i in flop),
        statistics.median(deltas), statistics.fmean(deltas),
    )


def momentum_sweep(
    dataset: Dataset,
    arch: ArchConfig,
    hyper: TrainHyper,
    kind: str,
    momenta: Sequence[float],
    cache: Optional[FoldModelCache] = None,
    repeats: int = 5,
    seed: int = 0,
    workers: int = 1,
) -> dict:
    """Full LOPOCV per momentum against the lower baseline; fold models trained once."""
    if not momenta:
        raise ValueError("empty momentum list")
    for a in momenta:
        check_momentum(a)
    if kind not in ONLINE_KINDS:
        raise ValueError(f"momentum sweeps need an online kind, got {kind!r}")
    cache = cache if cache is not None else FoldModelCache()
    baseline = lopocv(dataset, arch, hyper, ExperimentSpec(LOWER_BASELINE, seed=seed), cache, workers)
    tables = {}
    for a in momenta:
        spec = ExperimentSpec(kind, momentum=a, repeats=repeats, seed=seed)
        results = lopocv(dataset, arch, hyper, spec, cache, workers)
        tables[a] = summarize(results, baseline, run_id=f"{kind}@{a!r}", baseline_id=LOWER_BASELINE)
    return tables


@dataclass
class DriftReport:
    pre_accuracy: float
    recovered_after: Optional[int]  # windows after the drift point, None if not within the horizon
    trailing: list


def drift_recovery(correct, drift_index: int, trailing: int = 50, horizon: int = 300,
                   tolerance: float = 0.05) -> DriftReport:
    """When does trailing accuracy come back after a drift?

    The reference is the accuracy over the ``horizon`` windows before the
    drift. Recovery is the first window, at least ``trailing - 1`` windows past
    the drift (so the trailing block is entirely post-drift) and before
    ``drift_index + horizon``, whose trailing-block accuracy is within
    ``tolerance`` of the reference.
    """
    correct = np.asarray(correct, dtype=np.float64)
    if drift_index < 1 or drift_index + horizon > len(correct):
        raise ValueError("stream too short around the drift point")
    pre = float(correct[max(0, drift_index - horizon) : drift_index].mean())
    trail = []
    recovered = None
    for tau in range(drift_index + trailing - 1, drift_index + horizon):
        acc = float(correct[tau - trailing + 1 : tau + 1].mean())
        trail.append(acc)
        if recovered is None and acc >= pre - tolerance:
            recovered = tau - drift_index
    return DriftReport(pre, recovered, trail)


# --- results directory ---------------------------------------------------------------


def write_run(run_dir, manifest: dict, results: Sequence[FoldResult], summary: Optional[SummaryTable] = None,
              label_names: Sequence[str] = ()) -> Path:
    """``manifest.json``, ``folds.csv``, ``summary.csv``/``deltas.csv`` and any ``stream_<t>.csv``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    with open(run_dir / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "accuracy", "wall_ms"])
        for r in results:
            w.writerow([r.target, repr(float(r.accuracy)), f"{r.wall_ms:.3f}"])
    if summary is not None:
        summary.write(run_dir)
    for r in results:
        if r.records:
            with StreamCsvWriter(run_dir / f"stream_{r.target}.csv", len(label_names)) as sink:
                for rec, truth in r.records:
                    sink.write(rec, label_names[truth])
    return run_dir


def read_folds(path) -> list:
    with open(path, newline="") as fh:
        return [(row["target"], float(row["accuracy"]), float(row["wall_ms"])) for row in csv.DictReader(fh)]


def run_digest(run_dir) -> str:
    """Hash of a run directory's artifacts; the wall-clock column of folds.csv is excluded."""
    run_dir = Path(run_dir)
    h = hashlib.sha256()
    for path in sorted(p for p in run_dir.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(run_dir)).encode())
        if path.name == "folds.csv":
            rows = read_folds(path)
            h.update(repr([(t, a) for t, a, _ in rows]).encode())
        else:
            h.update(path.read_bytes())
    return h.hexdigest()


# log-spaced grids inside the quoted ranges, one per stream order
DEFAULT_GRIDS = {
    ONLINE_UNRANDOMIZED: (0.0001, 0.0002, 0.0005, 0.0009, 0.002, 0.005),
    ONLINE_RANDOMIZED: (0.001, 0.002, 0.005, 0.01, 0.02, 0.05),
}
