"""Run every model variant on the tiny world and write metrics.csv plus a report.

    python scripts/ablation.py --out runs/ablation [--epochs 60] [--tasks travel_time ranking]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from mmpath.config import TINY, VARIANTS
from mmpath.report import write_report
from mmpath.train import ablate, write_loss_log, write_metrics
from mmpath.world import PRESETS, generate_synthetic_world, synth_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--finetune-epochs", type=int, default=TINY.finetune_epochs)
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--tasks", nargs="+", default=["travel_time"], choices=["travel_time", "ranking"])
    ap.add_argument("--noise-level", type=float, default=5.0)
    args = ap.parse_args()

    out = Path(args.out)
    (out / "loss_logs").mkdir(parents=True, exist_ok=True)
    world = generate_synthetic_world(0, PRESETS["tiny"])
    labels = synth_labels(world, seed=0, noise_level=args.noise_level)
    cfg = replace(TINY, epochs=args.epochs, finetune_epochs=args.finetune_epochs)

    def on_run(variant, task, pre, ft):
        write_loss_log(pre.loss_log, out / "loss_logs" / f"{variant}_{task}.csv")
        print(f"{variant:13s} {task:12s} final pretraining loss {pre.loss_log[-1]['total']:.4f}")

    rows = ablate(world, labels, args.variants, cfg, args.tasks, on_run=on_run)
    write_metrics(rows, out / "metrics.csv")
    first = next(iter(sorted((out / "loss_logs").glob("full_*.csv"))), None) or \
        sorted((out / "loss_logs").glob("*.csv"))[0]
    (out / "loss_log.csv").write_bytes(first.read_bytes())
    write_report(out)
    for r in rows:
        print(f"{r['variant']:13s} {r['task']:12s} mae {r['mae']:8.3f}  mape {r['mape']:6.2f}  "
              f"tau {r['tau']:+.3f}")


if __name__ == "__main__":
    main()
