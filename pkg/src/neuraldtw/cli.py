"""Command-line entry point: ``neuraldtw <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from .data import (PreprocessStats, SynthConfig, load_dataset, preprocess, read_signal_csv, sample_pairs,
                   save_dataset, slice_fixed, synth_gen)
from .diffnet import load_checkpoint, save_checkpoint
from .evaluation import (MetricHandle, knn_macro_f1, nn_retrieval_agreement, report_dict, timing_bench,
                         train_prototypes)
from .experiments import prepare
from .models import model_from_checkpoint
from .training import TrainConfig, desk_config, train

log = logging.getLogger("neuraldtw")


class UsageError(Exception):
    pass


# -- config and output plumbing ------------------------------------------------------

def parse_kv(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; values parsed as JSON when possible."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg.update(parse_kv(Path(args.config).read_text()))
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from e
    for item in getattr(args, "set", None) or []:
        cfg.update(parse_kv(item))
    return cfg


def overlay(cfg: dict, **flags) -> dict:
    """Config values overridden by every flag the user actually set (non-None)."""
    return {**cfg, **{k: v for k, v in flags.items() if v is not None}}


def make(cls, opts: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(opts) - known)
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**opts)


class Staged:
    """Collects outputs in a scratch directory and moves them into place only on success."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(dir=self.out.parent, prefix=f".{self.out.name}.stage."))

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")

    def commit(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        for src in sorted(self.dir.rglob("*")):
            if src.is_file():
                dst = self.out / src.relative_to(self.dir)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
        shutil.rmtree(self.dir, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def run_staged(args, fn) -> int:
    """Run ``fn(stage, config) -> (resolved_config, inputs)`` and write a RunManifest beside the outputs."""
    t0 = time.perf_counter()
    cfg = load_config(args)
    # config keys fill flags the user did not type; explicit flags win
    for key in list(cfg):
        dest = key.replace("-", "_")
        if dest in vars(args) and dest not in ("command", "func", "config", "set"):
            value = cfg.pop(key)
            if dest not in args.explicit:
                setattr(args, dest, value)
    if args.seed is None:
        args.seed = 0
    if cfg and args.command not in ("gen-data", "train"):
        raise UsageError(f"unknown config keys for {args.command}: {sorted(cfg)}")
    stage = Staged(args.out)
    try:
        resolved, inputs = fn(stage, cfg)
        resolved.pop("explicit", None)
        manifest = {"subcommand": args.command, "config": resolved, "seed": args.seed,
                    "inputs": [str(p) for p in inputs], "outputs": sorted(
                        str(p.relative_to(stage.dir)) for p in stage.dir.rglob("*") if p.is_file()),
                    "tool_version": __version__, "wall_time": time.perf_counter() - t0}
        stage.write_json("run_manifest.json", manifest)
        stage.commit()
    except BaseException:
        stage.abort()
        raise
    return 0


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def _read_series(path) -> np.ndarray:
    p = Path(path)
    try:
        if p.suffix == ".npy":
            return np.load(p).astype(np.float64).ravel()
        if p.suffix == ".f32":
            return np.fromfile(p, dtype="<f4").astype(np.float64)
        return read_signal_csv(p)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read signal {path}: {e}") from e


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot load dataset {path}: {e}") from e


# -- subcommands ------------------------------------------------------------------------

def cmd_compute(args) -> int:
    x, y = _read_series(args.x), _read_series(args.y)
    if args.metric == "dtw":
        value, path = M.dtw(x, y, cost=args.cost)
    elif args.metric == "soft_dtw":
        if args.gamma <= 0:
            raise UsageError("gamma must be positive")
        value, path = M.soft_dtw(x, y, gamma=args.gamma), None
    else:
        if args.radius < 0:
            raise UsageError("radius must be non-negative")
        value, path = M.fast_dtw(x, y, radius=args.radius, cost=args.cost)
    print(f"{value:.6f}")
    if args.path and path is not None:
        print(" ".join(f"({i},{j})" for i, j in path.one_based()))
    return 0


def cmd_gen_data(args) -> int:
    def body(stage, cfg):
        opts = overlay(cfg, seed=args.seed, n_classes=args.n_classes, per_class=args.per_class,
                       n_groups=args.n_groups)
        if args.min_length is not None or args.max_length is not None:
            lo, hi = opts.get("length_range", (256, 256))
            opts["length_range"] = (args.min_length or lo, args.max_length or hi)
        synth = make(SynthConfig, opts)
        save_dataset(synth_gen(synth), stage.dir)
        return asdict(synth), []
    return run_staged(args, body)


def cmd_preprocess(args) -> int:
    def body(stage, cfg):
        raw = _load_dataset(args.data)
        stats = None
        if args.stats:
            stats = PreprocessStats(**json.loads(Path(args.stats).read_text()))
        processed, stats = preprocess(raw, stats)
        save_dataset(processed, stage.dir)
        stage.write_json("stats.json", asdict(stats))
        return {"stats": asdict(stats)}, [args.data] + ([args.stats] if args.stats else [])
    return run_staged(args, body)


def cmd_ground_truth(args) -> int:
    def body(stage, cfg):
        ds = _load_dataset(args.data).split(args.split)
        signals = ds.signals[: args.n_signals] if args.n_signals else ds.signals
        rng = np.random.default_rng([args.seed, 1])
        if args.slice:
            signals = slice_fixed(signals, args.slice, rng)
            save_dataset(type(ds)(signals, ["train"] * len(signals), ds.provenance + f" | slice {args.slice}"),
                         stage.path("signals_dataset"))
        pairs = sample_pairs(len(signals), args.pairs, rng)
        gt = M.build_ground_truth(signals, pairs, normalize=not args.raw, workers=args.workers)
        gt.save(stage.path(args.name))
        resolved = {"split": args.split, "n_signals": len(signals), "pairs": args.pairs, "slice": args.slice,
                    "normalized": not args.raw}
        return resolved, [args.data]
    return run_staged(args, body)


def cmd_train(args) -> int:
    def body(stage, cfg):
        base = desk_config() if args.desk else TrainConfig()
        opts = overlay({**asdict(base), **cfg}, seed=args.seed, model_kind=args.model)
        tcfg = make(TrainConfig, opts)
        ds = _load_dataset(args.data)
        prep = prepare(tcfg, ds, workers=args.workers, already_processed=not args.raw)
        ckpt, report = train(tcfg, prep.train, prep.train_gt, prep.val, prep.val_gt)
        save_checkpoint(ckpt, stage.path("checkpoint.ckpt"))
        stage.write_text("curve.csv", report.curve_csv())
        rep = report.to_dict()
        for e in rep["epochs"]:
            e.pop("time", None)
        rep.pop("wall_time")
        stage.write_json("report.json", rep)
        return asdict(tcfg), [args.data]
    return run_staged(args, body)


def _metric_handles(args) -> list[MetricHandle]:
    handles = []
    for name in args.metric.split(","):
        name = name.strip()
        if name == "dtw":
            handles.append(MetricHandle("dtw", "exact_dtw", {"normalize": args.normalize}))
        elif name == "fastdtw":
            handles.append(MetricHandle("fastdtw", "fast_dtw", {"radius": args.radius, "normalize": args.normalize}))
        elif name == "softdtw":
            if args.gamma <= 0:
                raise UsageError("gamma must be positive")
            handles.append(MetricHandle("softdtw", "soft_dtw", {"gamma": args.gamma, "normalize": args.normalize}))
        elif name in ("siamese", "direct"):
            ckpt = getattr(args, name)
            if not ckpt:
                raise UsageError(f"metric {name} needs --{name} CHECKPOINT")
            if not Path(ckpt).is_file():
                raise UsageError(f"checkpoint not found: {ckpt}")
            handles.append(MetricHandle(name, f"model_{name}", {"checkpoint": ckpt}))
        elif name == "random":
            handles.append(MetricHandle("random", "random", {"seed": args.seed}))
        else:
            raise UsageError(f"unknown metric {name!r}")
    return handles


def _eval_signals(args, data=None):
    ds = _load_dataset(data or args.data).split(args.split)
    signals = ds.signals
    if args.slice:
        signals = slice_fixed(signals, args.slice, np.random.default_rng([args.seed, 2]))
    return signals


def _ckpt_inputs(args):
    return [p for p in (getattr(args, "siamese", None), getattr(args, "direct", None)) if p]


def cmd_eval(args) -> int:
    def body(stage, cfg):
        handles = _metric_handles(args)
        signals = _eval_signals(args)
        resolved = {k: v for k, v in vars(args).items() if k not in ("func", "explicit")}
        if args.task == "retrieval":
            ref = MetricHandle("dtw", "exact_dtw", {"normalize": args.normalize})
            reports = [nn_retrieval_agreement(h, ref, signals, args.nt, args.top_k, args.reps, args.seed,
                                              args.workers) for h in handles]
            rows = [(r.metric, r.reference, r.n_t, r.top_k, len(r.per_rep), r.mean, r.std) for r in reports]
            stage.write_text("retrieval.csv", _csv(["metric", "reference", "n_t", "top_k", "reps", "mean", "std"], rows))
            stage.write_json("retrieval.json", [report_dict(r) for r in reports])
        elif args.task == "knn":
            reports = [knn_macro_f1(h, signals, args.n_signals, args.k, args.reps, args.seed, workers=args.workers)
                       for h in handles]
            rows = [(r.metric, r.k, r.n_signals, len(r.per_rep), r.mean, r.std) for r in reports]
            stage.write_text("knn.csv", _csv(["metric", "k", "n_signals", "reps", "macro_f1_mean", "macro_f1_std"], rows))
            stage.write_json("knn.json", [report_dict(r) for r in reports])
        else:
            if not args.data_b:
                raise UsageError("transfer needs --data-b")
            ref = MetricHandle("dtw", "exact_dtw", {"normalize": args.normalize})
            other = _eval_signals(args, args.data_b)
            rows, raw = [], []
            for h in handles:
                a = nn_retrieval_agreement(h, ref, signals, args.nt, args.top_k, args.reps, args.seed, args.workers)
                b = nn_retrieval_agreement(h, ref, other, args.nt, args.top_k, args.reps, args.seed, args.workers)
                rows.append((h.name, a.mean, a.std, b.mean, b.std, b.mean - a.mean))
                raw.append({"source": report_dict(a), "target": report_dict(b)})
            stage.write_text("transfer.csv", _csv(["metric", "source_mean", "source_std", "target_mean",
                                                   "target_std", "delta"], rows))
            stage.write_json("transfer.json", raw)
        for r in rows:
            print(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r))
        return resolved, [args.data] + ([args.data_b] if args.data_b else []) + _ckpt_inputs(args)
    return run_staged(args, body)


def cmd_bench(args) -> int:
    def body(stage, cfg):
        args.workers = 1
        handles = _metric_handles(args)
        lengths = [int(v) for v in args.lengths.split(",")]
        report = timing_bench(handles, lengths, args.reps, args.seed)
        stage.write_text("timing.csv", report.to_csv())
        stage.write_json("timing.json", report.rows)
        sys.stdout.write(report.to_csv())
        return {k: v for k, v in vars(args).items() if k not in ("func", "explicit")}, _ckpt_inputs(args)
    return run_staged(args, body)


def cmd_prototypes(args) -> int:
    def body(stage, cfg):
        try:
            model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        except OSError as e:
            raise UsageError(f"cannot read checkpoint: {e}") from e
        ds = _load_dataset(args.data)
        rng = np.random.default_rng([args.seed, 3])
        train_s = ds.split("train").signals
        val_s = ds.split(args.val_split).signals
        if args.slice:
            train_s, val_s = slice_fixed(train_s, args.slice, rng), slice_fixed(val_s, args.slice, rng)
        before = model.params.checksum()
        protos, curve = train_prototypes(model, train_s, val_s, args.epochs, args.lr, args.beta, args.batch_size,
                                         args.seed)
        if model.params.checksum() != before:
            raise RuntimeError("model parameters changed during prototype training")
        stage.write_json("prototypes.json", protos.to_dict())
        stage.write_text("accuracy.csv", _csv(["epoch", "accuracy"], list(enumerate(curve))))
        print(f"{curve[0]:.6f} -> {curve[-1]:.6f}")
        return {k: v for k, v in vars(args).items() if k not in ("func", "explicit")}, [args.data, args.checkpoint]
    return run_staged(args, body)


# -- parser -------------------------------------------------------------------------------

def _common(p, out=True):
    p.add_argument("--seed", type=int, default=None, help="overrides a seed key in --config (default 0)")
    p.add_argument("--workers", type=int, default=None, help="cap on parallel pairwise workers")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def _metric_flags(p, default):
    p.add_argument("--metric", default=default, help="comma list of dtw,fastdtw,softdtw,siamese,direct,random")
    p.add_argument("--siamese", help="siamese checkpoint")
    p.add_argument("--direct", help="direct checkpoint")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--normalize", action="store_true", help="divide DP metrics by the longer length")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neuraldtw", description="DTW metrics, learned approximations and experiments")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compute", help="one metric value for two signal files")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("--metric", choices=("dtw", "soft_dtw", "fast_dtw"), default="dtw")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--cost", choices=M.COST_KINDS, default="absolute")
    p.add_argument("--path", action="store_true", help="also print the 1-based warping path")
    p.set_defaults(func=cmd_compute)

    p = sub.add_parser("gen-data", help="synthetic labeled dataset")
    _common(p)
    p.add_argument("--n-classes", type=int, help="default 3")
    p.add_argument("--per-class", type=int, help="default 100")
    p.add_argument("--min-length", type=int, help="default 256")
    p.add_argument("--max-length", type=int, help="default 256")
    p.add_argument("--n-groups", type=int, help="default 20")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="percentile clip then min-max scale")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stats", help="reuse stats.json from an earlier run")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("ground-truth", help="sample pairs and compute exact DTW targets")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--n-signals", type=int, default=0)
    p.add_argument("--slice", type=int, default=0, help="slice every signal to this length first")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--raw", action="store_true", help="keep raw (unnormalized) DTW")
    p.add_argument("--name", default="ground_truth.csv", help="file name; .bin selects the binary format")
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("train", help="train a siamese or direct approximation")
    _common(p)
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--model", choices=("siamese", "direct"), help="default siamese")
    p.add_argument("--desk", action="store_true", help="start from the small CPU preset")
    p.add_argument("--raw", action="store_true", help="dataset is not yet preprocessed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval, knn or transfer experiments")
    p.add_argument("task", choices=("retrieval", "knn", "transfer"))
    _common(p)
    _metric_flags(p, "dtw")
    p.add_argument("--data", required=True)
    p.add_argument("--data-b", help="second dataset for transfer")
    p.add_argument("--split", default="test")
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--nt", type=int, default=100)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n-signals", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="serial timing of single-pair evaluations")
    _common(p)
    _metric_flags(p, "dtw,fastdtw,softdtw")
    p.add_argument("--lengths", default="500,1000,3000")
    p.add_argument("--reps", type=int, default=1000)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("prototypes", help="learn class prototypes through a frozen model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--val-split", default="val")
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_prototypes)
    return ap


def _explicit_dests(parser, command, argv) -> set[str]:
    sub = parser._subparsers._group_actions[0].choices[command]
    typed = {a.split("=", 1)[0] for a in argv if a.startswith("-")}
    return {a.dest for a in sub._actions if typed & set(a.option_strings)}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.explicit = _explicit_dests(parser, args.command, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.reps is None:
        args.reps = 8 if args.task != "knn" else 5
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        # InvalidInput and config validation errors are ValueErrors too
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
