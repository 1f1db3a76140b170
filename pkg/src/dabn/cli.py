"""``dabn`` command line: preprocess, train, stream, eval, sweep, synth.

Every option can also come from a JSON ``--config`` file (keys are the option
names with underscores, optionally nested under the command name). Flags win
over the file, the file wins over built-in defaults, and the resolved values
are written next to the command's output.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .adapter import StreamAdapter, StreamCsvWriter
from .data import ACCEL_RANGE, FILTER_WIDTH, WINDOW_LEN, WINDOW_STRIDE, Dataset, ingest_csv, preprocess
from .errors import AdapterPoisoned, DataError, InvariantViolation
from .model import ArchConfig, TrainHyper, TrainLog, load_checkpoint, save_checkpoint, train
from .rng import substream
from .suite import drift_suite, personalization_suite
from .synthetic import SynthSpec, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

ARCH_KEYS = ("conv_layers", "feature_maps", "kernel", "stride", "pool", "dense_width", "dropout_rate")
HYPER_KEYS = ("learning_rate", "decay", "epochs", "batch_size", "train_momentum")
_ARCH = ArchConfig(classes=2)
_HYPER = TrainHyper()
MODEL_DEFAULTS = {**{k: getattr(_ARCH, k) for k in ARCH_KEYS}, **{k: getattr(_HYPER, k) for k in HYPER_KEYS}}

SHARED_DEFAULTS = {"seed": None, "threads": 1}

DEFAULTS = {
    "preprocess": {
        "input": None, "out": None, "window": WINDOW_LEN, "window_stride": WINDOW_STRIDE,
        "filter_width": FILTER_WIDTH, "value_min": ACCEL_RANGE[0], "value_max": ACCEL_RANGE[1],
        "period_ms": 50, "equalize": True, "activities": None, "exclude_subjects": [],
    },
    "train": {"dataset": None, "out": None, "users": None, "exclude_subjects": [], **MODEL_DEFAULTS},
    "stream": {
        "checkpoint": None, "dataset": None, "out": "stream.csv", "user": None, "momentum": 0.01,
        "order": "original", "adaptation": "on", "diagnostics": False,
    },
    "eval": {
        "dataset": None, "out": "runs", "kind": None, "momentum": None, "pre_fraction": None,
        "fine_tune_epochs": 10, "repeats": 5, "adaptation": "on", "run_id": None, "baseline": None,
        "cache_dir": None, "stream_csv": False, **MODEL_DEFAULTS,
    },
    "sweep": {
        "dataset": None, "out": "runs", "kind": ev.ONLINE_RANDOMIZED, "momenta": None, "repeats": 5,
        "run_id": None, "cache_dir": None, **MODEL_DEFAULTS,
    },
    "synth": {
        "spec": None, "suite": None, "out": None, "num_users": None, "classes": None,
        "windows_per_class": None, "noise": None, "offset_std": None, "scale_std": None,
        "drift_index": None, "drift_user": None,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _names(value):
    if value is None:
        return None
    if isinstance(value, str):
        return [v for v in (p.strip() for p in value.split(",")) if v]
    return [str(v) for v in value]


def _floats(value):
    return None if value is None else [float(v) for v in _names(value)]


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int, help="root seed for every random sub-stream (default 0)")
    shared.add_argument("--out", help="output path or directory")
    shared.add_argument("--config", help="JSON file with option values")
    shared.add_argument("--threads", type=int, help="parallel fold workers for eval/sweep (default 1)")

    def model_flags(p):
        g = p.add_argument_group("architecture and training")
        g.add_argument("--conv-layers", dest="conv_layers", type=int)
        g.add_argument("--feature-maps", dest="feature_maps", type=int)
        g.add_argument("--kernel", type=int)
        g.add_argument("--stride", type=int)
        g.add_argument("--pool", type=int)
        g.add_argument("--dense-width", dest="dense_width", type=int)
        g.add_argument("--dropout-rate", dest="dropout_rate", type=float)
        g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
        g.add_argument("--decay", type=float)
        g.add_argument("--epochs", type=int)
        g.add_argument("--batch-size", dest="batch_size", type=int)
        g.add_argument("--train-momentum", dest="train_momentum", type=float)

    parser = _Parser(prog="dabn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[shared], help="raw CSV -> windowed dataset cache")
    p.add_argument("input", nargs="?", help="subject,activity,timestamp_ns,x,y,z CSV")
    p.add_argument("--window", type=int)
    p.add_argument("--window-stride", dest="window_stride", type=int)
    p.add_argument("--filter-width", dest="filter_width", type=int)
    p.add_argument("--value-min", dest="value_min", type=float)
    p.add_argument("--value-max", dest="value_max", type=float)
    p.add_argument("--period-ms", dest="period_ms", type=int)
    p.add_argument("--no-equalize", dest="equalize", action="store_const", const=False)
    p.add_argument("--activities", help="comma-separated activity names to keep (and their label order)")
    p.add_argument("--exclude-subjects", dest="exclude_subjects")

    p = sub.add_parser("train", parents=[shared], help="train a model on the source users")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--users", help="comma-separated subject names to train on (default all)")
    p.add_argument("--exclude-subjects", dest="exclude_subjects")
    model_flags(p)

    p = sub.add_parser("stream", parents=[shared], help="adapt and classify target windows one by one")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--user", help="subject name whose windows form the stream (default all windows)")
    p.add_argument("--momentum", type=float)
    p.add_argument("--order", choices=("original", "shuffled"))
    p.add_argument("--adaptation", choices=("on", "off"))
    p.add_argument("--diagnostics", action="store_const", const=True, help="write the per-window CSV to --out")

    p = sub.add_parser("eval", parents=[shared], help="leave-one-person-out experiment")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--kind", choices=ev.KINDS)
    p.add_argument("--momentum", type=float)
    p.add_argument("--pre-fraction", dest="pre_fraction", type=float)
    p.add_argument("--fine-tune-epochs", dest="fine_tune_epochs", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--adaptation", choices=("on", "off"))
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--baseline", help="run id under --out whose folds.csv is the comparison baseline")
    p.add_argument("--cache-dir", dest="cache_dir", help="fold-model cache (default <out>/fold-models)")
    p.add_argument("--stream-csv", dest="stream_csv", action="store_const", const=True)
    model_flags(p)

    p = sub.add_parser("sweep", parents=[shared], help="online momentum sweep")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--kind", choices=ev.ONLINE_KINDS)
    p.add_argument("--momenta", help="comma-separated momenta (default: grid for the kind)")
    p.add_argument("--repeats", type=int)
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--cache-dir", dest="cache_dir")
    model_flags(p)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic dataset cache")
    p.add_argument("--spec", help="JSON synthetic spec")
    p.add_argument("--suite", choices=("personalization", "drift"))
    p.add_argument("--num-users", dest="num_users", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--windows-per-class", dest="windows_per_class", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--offset-std", dest="offset_std", type=float)
    p.add_argument("--scale-std", dest="scale_std", type=float)
    p.add_argument("--drift-index", dest="drift_index", type=int)
    p.add_argument("--drift-user", dest="drift_user", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults."""
    defaults = {**SHARED_DEFAULTS, **DEFAULTS[args.command]}
    file_cfg = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        nested = raw.get(args.command, {})
        file_cfg = {k: v for k, v in raw.items() if k not in DEFAULTS}
        file_cfg.update(nested)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    cfg = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        cfg[key] = flag if flag is not None else file_cfg.get(key, default)
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _arch_hyper(cfg, ds: Dataset):
    arch = ArchConfig(classes=ds.num_classes, window_len=ds.windows.shape[1], in_channels=ds.windows.shape[2],
                      **{k: cfg[k] for k in ARCH_KEYS})
    hyper = TrainHyper(seed=cfg["seed"], **{k: cfg[k] for k in HYPER_KEYS})
    return arch, hyper


def _subject_codes(ds: Dataset, names):
    codes = []
    for n in names:
        if n not in ds.subject_names:
            raise UsageError(f"unknown subject {n!r}")
        codes.append(ds.subject_names.index(n))
    return codes


def cmd_preprocess(cfg, out=None) -> int:
    out = out or sys.stdout
    _require(cfg, "input", "out")
    ingest = ingest_csv(cfg["input"])
    for line in ingest.malformed_lines:
        print(f"{cfg['input']}:{line}: malformed row skipped", file=sys.stderr)
    ds = preprocess(
        ingest.groups, nu=cfg["window"], stride=cfg["window_stride"], filter_width=cfg["filter_width"],
        value_range=(cfg["value_min"], cfg["value_max"]), period_ns=int(cfg["period_ms"]) * 1_000_000,
        equalize=bool(cfg["equalize"]), activities=_names(cfg["activities"]),
        exclude_subjects=_names(cfg["exclude_subjects"]) or (),
    )
    ds.save(cfg["out"])
    _write_json(_sidecar(cfg["out"]), {
        "command": "preprocess", "config": cfg, "rows": ingest.rows, "malformed_rows": ingest.malformed,
        "windows": len(ds), "subjects": len(ds.subject_names), "labels": list(ds.label_names),
        "digest": ds.digest(),
    })
    print(f"{ingest.rows} rows ({ingest.malformed} malformed), {len(ds.subject_names)} subjects", file=out)
    print(f"windows {len(ds)}", file=out)
    return EXIT_OK


def cmd_train(cfg, out=None) -> int:
    out = out or sys.stdout
    _require(cfg, "dataset", "out")
    ds = Dataset.load(cfg["dataset"])
    arch, hyper = _arch_hyper(cfg, ds)
    names = _names(cfg["users"]) or list(ds.subject_names)
    excluded = set(_names(cfg["exclude_subjects"]) or ())
    users = _subject_codes(ds, [n for n in names if n not in excluded])
    log = TrainLog()
    model = train(ds, arch, hyper, users=users, log=log)
    save_checkpoint(model, cfg["out"])
    with open(Path(cfg["out"]).with_name(Path(cfg["out"]).name + ".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "learning_rate", "loss"])
        for e, loss in zip(log.epochs, log.losses):
            w.writerow([e, repr(hyper.lr_at(e)), repr(loss)])
    _write_json(_sidecar(cfg["out"]), {
        "command": "train", "config": cfg, "arch": arch.to_dict(), "hyper": hyper.to_dict(),
        "users": [ds.subject_names[u] for u in users], "digest": model.digest(),
    })
    print(f"trained on {len(users)} users, {log.batches} batches", file=out)
    print(f"checkpoint {cfg['out']} {model.digest()}", file=out)
    return EXIT_OK


def cmd_stream(cfg, out=None) -> int:
    out = out or sys.stdout
    _require(cfg, "checkpoint", "dataset")
    model = load_checkpoint(cfg["checkpoint"])
    ds = Dataset.load(cfg["dataset"])
    if ds.windows.shape[1:] != (model.arch.window_len, model.arch.in_channels):
        raise DataError(f"windows of shape {ds.windows.shape[1:]} do not fit the checkpoint's architecture")
    if tuple(ds.label_names) != tuple(model.label_map):
        raise DataError("dataset labels differ from the checkpoint's label map")
    idx = np.arange(len(ds)) if cfg["user"] is None else ds.user_indices(_subject_codes(ds, [cfg["user"]])[0])
    if len(idx) == 0:
        raise DataError("no windows to stream")
    if cfg["order"] == "shuffled":
        idx = idx[substream(cfg["seed"], "stream-order").permutation(len(idx))]
    adapter = StreamAdapter(model, cfg["momentum"], adaptation_enabled=cfg["adaptation"] == "on")
    sink = StreamCsvWriter(cfg["out"], ds.num_classes) if cfg["diagnostics"] else None
    correct = 0
    try:
        for i in idx:
            rec = adapter.adapt_and_classify(ds.windows[i])
            correct += rec.label_index == ds.labels[i]
            if sink is not None:
                sink.write(rec, ds.label_names[ds.labels[i]])
    finally:
        if sink is not None:
            sink.close()
    if sink is not None:
        _write_json(_sidecar(cfg["out"]), {"command": "stream", "config": cfg, "windows": len(idx)})
    print(f"windows {len(idx)}", file=out)
    print(f"accuracy {float(correct) / len(idx)!r}", file=out)
    return EXIT_OK


def _run_dir(cfg, default_id) -> Path:
    return Path(cfg["out"]) / (cfg["run_id"] or default_id)


def _cache(cfg) -> ev.FoldModelCache:
    return ev.FoldModelCache(cfg["cache_dir"] or Path(cfg["out"]) / "fold-models")


def _baseline_folds(path) -> list:
    try:
        rows = ev.read_folds(path)
    except OSError as exc:
        raise DataError(f"baseline run not found: {exc}") from exc
    return [ev.FoldResult(t, a, 0, 0) for t, a, _ in rows]


def cmd_eval(cfg, out=None) -> int:
    out = out or sys.stdout
    _require(cfg, "dataset", "kind")
    ds = Dataset.load(cfg["dataset"])
    arch, hyper = _arch_hyper(cfg, ds)
    spec = ev.ExperimentSpec(
        cfg["kind"], momentum=cfg["momentum"], pre_fraction=cfg["pre_fraction"],
        fine_tune_epochs=cfg["fine_tune_epochs"], repeats=cfg["repeats"], seed=cfg["seed"],
        adaptation=cfg["adaptation"] == "on",
    )
    default_id = spec.kind if spec.momentum is None else f"{spec.kind}-{spec.momentum!r}"
    run_dir = _run_dir(cfg, default_id)
    cache = _cache(cfg)
    results = ev.lopocv(ds, arch, hyper, spec, cache, workers=cfg["threads"], keep_records=bool(cfg["stream_csv"]))
    if cfg["baseline"]:
        baseline, baseline_id = _baseline_folds(Path(cfg["out"]) / cfg["baseline"] / "folds.csv"), cfg["baseline"]
    elif spec.kind == ev.LOWER_BASELINE:
        baseline, baseline_id = results, run_dir.name
    else:
        baseline = ev.lopocv(ds, arch, hyper, ev.ExperimentSpec(ev.LOWER_BASELINE, seed=spec.seed), cache,
                             workers=cfg["threads"])
        baseline_id = ev.LOWER_BASELINE
    summary = ev.summarize(results, baseline, run_id=run_dir.name, baseline_id=baseline_id)
    fold_models = {}
    if spec.kind != ev.UPPER_BASELINE:
        fold_models = {ds.subject_names[u]: cache.get(ds, arch, hyper, u).digest() for u in ds.users()}
    manifest = {
        "command": "eval", "config": cfg, "spec": spec.to_dict(), "arch": arch.to_dict(),
        "hyper": hyper.to_dict(), "dataset": ds.digest(), "fold_models": fold_models,
    }
    ev.write_run(run_dir, manifest, results, summary, ds.label_names)
    print(f"run {run_dir}", file=out)
    print(f"mean {summary.mean!r}", file=out)
    print(f"median {summary.median!r}", file=out)
    return EXIT_OK


def cmd_sweep(cfg, out=None) -> int:
    out = out or sys.stdout
    _require(cfg, "dataset")
    ds = Dataset.load(cfg["dataset"])
    arch, hyper = _arch_hyper(cfg, ds)
    kind = cfg["kind"]
    if kind not in ev.ONLINE_KINDS:
        raise UsageError(f"sweep kind must be one of {', '.join(ev.ONLINE_KINDS)}")
    momenta = _floats(cfg["momenta"]) or list(ev.DEFAULT_GRIDS[kind])
    run_dir = _run_dir(cfg, f"sweep-{kind}")
    cache = _cache(cfg)
    tables = ev.momentum_sweep(ds, arch, hyper, kind, momenta, cache, repeats=cfg["repeats"], seed=cfg["seed"],
                               workers=cfg["threads"])
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "manifest.json", {
        "command": "sweep", "config": cfg, "momenta": momenta, "arch": arch.to_dict(), "hyper": hyper.to_dict(),
        "dataset": ds.digest(),
    })
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = [n for n, _ in next(iter(tables.values())).aggregate_rows()]
        w.writerow(["momentum"] + names)
        for a, table in tables.items():
            w.writerow([repr(a)] + [repr(float(v)) for _, v in table.aggregate_rows()])
            sub = run_dir / f"alpha-{a!r}"
            sub.mkdir(exist_ok=True)
            table.write(sub)
    best = max(tables, key=lambda a: tables[a].median)
    print(f"run {run_dir}", file=out)
    print(f"best momentum {best!r} median {tables[best].median!r}", file=out)
    return EXIT_OK


def cmd_synth(cfg, out=None) -> int:
    out = out or sys.stdout
    _require(cfg, "out")
    if cfg["spec"] and cfg["suite"]:
        raise UsageError("give either --spec or --suite, not both")
    try:
        if cfg["suite"]:
            builder = personalization_suite if cfg["suite"] == "personalization" else drift_suite
            cfg["seed"] = cfg["seed"] or 0
            ds = builder(cfg["seed"]).dataset
        else:
            base = {}
            if cfg["spec"]:
                try:
                    base = json.loads(Path(cfg["spec"]).read_text(encoding="utf-8"))
                except (OSError, json.JSONDecodeError) as exc:
                    raise DataError(f"cannot read synthetic spec {cfg['spec']}: {exc}") from exc
            if cfg["seed"] is not None or "seed" not in base:
                base["seed"] = cfg["seed"] or 0
            cfg["seed"] = base["seed"]
            shift = dict(base.pop("shift", {}) or {})
            for key in ("num_users", "classes", "windows_per_class", "noise"):
                if cfg[key] is not None:
                    base[key] = cfg[key]
            for key in ("offset_std", "scale_std", "drift_index", "drift_user"):
                if cfg[key] is not None:
                    shift[key] = cfg[key]
            ds = synth_generate(SynthSpec.from_dict({**base, "shift": shift}))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"degenerate synthetic spec: {exc}") from exc
    ds.save(cfg["out"])
    _write_json(_sidecar(cfg["out"]), {"command": "synth", "config": cfg, "extra": ds.extra, "windows": len(ds),
                                       "digest": ds.digest()})
    print(f"windows {len(ds)}", file=out)
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "stream": cmd_stream,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        if cfg["threads"] < 1:
            raise UsageError("--threads must be >= 1")
        if cfg["seed"] is None and args.command != "synth":
            cfg["seed"] = 0
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantViolation, AdapterPoisoned, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
