"""Desk-scale run of every experiment on synthetic data; prints markdown tables.

    python scripts/desk_experiment.py --out runs/desk [--direct-epochs 15] [--siamese-epochs 5]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from neuraldtw import evaluation as E
from neuraldtw import training as T
from neuraldtw.data import preprocess, slice_fixed, synth_gen
from neuraldtw.diffnet import save_checkpoint
from neuraldtw.experiments import desk_synth, eval_signals, prepare_synthetic, synthetic_test_split
from neuraldtw.models import model_from_checkpoint

import numpy as np


def table(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--direct-epochs", type=int, default=15)
    ap.add_argument("--siamese-epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bench-reps", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args.out.mkdir(parents=True, exist_ok=True)

    handles, results, prep = {}, {}, None
    for kind, epochs in (("direct", args.direct_epochs), ("siamese", args.siamese_epochs)):
        cfg = T.desk_config(model_kind=kind, max_epochs=epochs, patience=min(3, epochs), seed=args.seed)
        prep = prepare_synthetic(cfg)
        ckpt, report = T.train(cfg, prep.train, prep.train_gt, prep.val, prep.val_gt)
        save_checkpoint(ckpt, args.out / f"{kind}.ckpt")
        (args.out / f"{kind}_curve.csv").write_text(report.curve_csv())
        handles[kind] = E.model_metric(model_from_checkpoint(ckpt), kind)
        results[kind] = report

    print("\n## Training\n")
    print(table(["model", "epochs", "best epoch", "epoch-0 val MSE", "best val MSE", "minutes"],
                [[k, len(r.epochs) - 1, r.best_epoch, f"{r.epochs[0]['val_approx']:.5f}",
                  f"{r.epochs[r.best_epoch]['val_approx']:.5f}", f"{r.wall_time / 60:.1f}"]
                 for k, r in results.items()]))

    dtw = E.MetricHandle("dtw", "exact_dtw")
    test = eval_signals(prep.test, 256, args.seed)
    other = synthetic_test_split(args.seed + 101, 256)
    metrics = [dtw, E.MetricHandle("fastdtw", "fast_dtw", {"radius": 1}),
               E.MetricHandle("random", "random", {"seed": args.seed}), *handles.values()]

    rows = []
    for h in metrics:
        a = E.nn_retrieval_agreement(h, dtw, test, 100, 5, 8, seed=args.seed)
        b = E.nn_retrieval_agreement(h, dtw, other, 100, 5, 8, seed=args.seed)
        rows.append([h.name, f"{a.mean:.2f} +/- {a.std:.2f}", f"{b.mean:.2f} +/- {b.std:.2f}"])
    print("\n## Retrieval agreement with DTW (N_t=100, top-5, %)\n")
    print(table(["metric", "dataset A", "dataset B"], rows))

    rows = []
    for h in metrics:
        r = E.knn_macro_f1(h, test, k=1, reps=5, seed=args.seed)
        rows.append([h.name, f"{r.mean:.3f} +/- {r.std:.3f}"])
    print("\n## 1-NN macro-F1\n")
    print(table(["metric", "macro-F1"], rows))

    bench = E.timing_bench([dtw, *handles.values()], [500, 1000, 3000], reps=args.bench_reps, seed=args.seed)
    (args.out / "bench.csv").write_text(bench.to_csv())
    print("\n## Timing (seconds per 1000 pairs)\n")
    print(table(["metric", "length", "s/1000"],
                [[r["metric"], r["length"], f"{1000 * r['total_seconds'] / r['reps']:.3f}"] for r in bench.rows]))

    model = handles["direct"].model
    ds, _ = preprocess(synth_gen(desk_synth(args.seed + 5, per_class=60)), prep.stats)
    rng = np.random.default_rng(args.seed)
    sig = slice_fixed(ds.signals, 256, rng)
    order = rng.permutation(len(sig))
    t0 = time.perf_counter()
    _, curve = E.train_prototypes(model, [sig[i] for i in order[:120]], [sig[i] for i in order[120:]],
                                  epochs=8, lr=1e-2, beta=0.1, seed=args.seed)
    print("\n## Prototype learning through the direct model\n")
    print(table(["epoch", "val accuracy"], [[i, f"{a:.3f}"] for i, a in enumerate(curve)]))
    print(f"\n({time.perf_counter() - t0:.0f}s)")
    (args.out / "prototype_curve.json").write_text(json.dumps(curve))


if __name__ == "__main__":
    main()
