"""Overfit pretraining on the 32-path tiny world and report the A3/A6 quantities.

    python scripts/overfit.py --out runs/overfit [--epochs 200] [--seed 0]
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from mmpath.config import TINY
from mmpath.model import prepare_world
from mmpath.train import alignment_separation, mask_accuracy, pretrain, save_model, write_loss_log
from mmpath.world import PRESETS, generate_synthetic_world


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=TINY.epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--world-seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(TINY, epochs=args.epochs, seed=args.seed)
    world = generate_synthetic_world(args.world_seed, PRESETS["tiny"])
    start = time.perf_counter()
    pre = pretrain(world, cfg, progress=lambda r: print(f"epoch {r['epoch']:4d}  total {r['total']:.4f}")
                   if r["epoch"] % 20 == 0 or r["epoch"] == 1 else None)
    elapsed = time.perf_counter() - start
    prepared = prepare_world(world, pre.vocab, 8)
    matched, rand = alignment_separation(pre.model, prepared)
    summary = {
        "epochs": cfg.epochs,
        "seconds": round(elapsed, 1),
        "loss_ratio": pre.loss_log[-1]["total"] / pre.loss_log[0]["total"],
        "mask_accuracy": mask_accuracy(pre.model, prepared, cfg.mask_ratio),
        "matched_cos": matched,
        "random_cos": rand,
        "separation": matched - rand,
    }
    write_loss_log(pre.loss_log, out / "loss_log.csv")
    save_model(out / "pretrained.ckpt", pre.model, cfg, pre.vocab, rng_state=pre.rng_state)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
