"""Travel-time fine-tuning on noiseless linear labels, repeated over world seeds.

Prints held-out MAPE and the MAE gain over the constant-mean predictor next to a
node-count linear regression reference fitted on the same split.

    python scripts/downstream.py --world-seeds 0 1 2 [--freeze-encoder]
"""

import argparse
from dataclasses import replace

import numpy as np

from mmpath.config import TINY
from mmpath.model import prepare_world
from mmpath.train import evaluate, finetune, pretrain, split_paths
from mmpath.world import PRESETS, generate_synthetic_world, synth_labels


def node_count_reference(world, train_ids, test_ids, y_train, y_test):
    count = {p.path_id: len(p.nodes) for p in world.paths}
    X = np.array([[1.0, count[i]] for i in train_ids])
    coef = np.linalg.lstsq(X, y_train, rcond=None)[0]
    pred = np.array([[1.0, count[i]] for i in test_ids]) @ coef
    return 100 * np.mean(np.abs(pred - y_test) / y_test)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--world-seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=TINY.epochs)
    ap.add_argument("--finetune-epochs", type=int, default=TINY.finetune_epochs)
    ap.add_argument("--finetune-lr", type=float, default=TINY.finetune_lr)
    ap.add_argument("--freeze-encoder", action="store_true")
    args = ap.parse_args()

    cfg = replace(TINY, epochs=args.epochs, finetune_epochs=args.finetune_epochs,
                  finetune_lr=args.finetune_lr, freeze_encoder=args.freeze_encoder)
    print("world_seed  mape  mae_gain  node_count_mape")
    for seed in args.world_seeds:
        world = generate_synthetic_world(seed, PRESETS["tiny"])
        labels = synth_labels(world, seed=0, noise_level=0.0, delay_scale=0.0)
        train_ids, test_ids = split_paths([p.path_id for p in world.paths], cfg.test_fraction, cfg.seed)
        pre = pretrain(world, cfg)
        prepared = prepare_world(world, pre.vocab, 8)
        by_id = {p.path_id: p for p in prepared}
        ft = finetune(pre, world, labels, "travel_time", train_ids, cfg, prepared=prepared)
        m = evaluate(ft, [by_id[i] for i in test_ids], labels)
        y_train = labels.values("travel_time", train_ids)
        y_test = labels.values("travel_time", test_ids)
        const = np.mean(np.abs(y_test - y_train.mean()))
        ref = node_count_reference(world, train_ids, test_ids, y_train, y_test)
        print(f"{seed:10d}  {m.mape:5.1f}  {1 - m.mae / const:+8.0%}  {ref:15.1f}")


if __name__ == "__main__":
    main()
