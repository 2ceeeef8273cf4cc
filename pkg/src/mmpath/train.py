"""Pretraining, fine-tuning, evaluation and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TASKS, VARIANTS, TrainConfig
from .errors import ConfigError, NonFiniteLossError
from .fuse import sample_negatives
from .metrics import Metrics, compute_metrics
from .model import (Batch, MMPath, PreparedPath, build_model, collate, prepare_world, resolve_patch_side,
                    sample_mask_positions)
from .rng import substream, torch_seed
from .tokenize import PatchBank, build_vocab
from .world import LabelSet, World

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("l_mask", "l_fine", "l_medium", "l_coarse", "l_fuse", "total")


def total_loss(l_mask, l_multi, l_fuse, cfg: TrainConfig):
    return cfg.lambda_mask * l_mask + cfg.lambda_multi * l_multi + cfg.lambda_fuse * l_fuse


def _optimizer(params, cfg: TrainConfig, lr: float):
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            weight_decay=cfg.weight_decay)


@dataclass
class Pretrained:
    model: MMPath
    cfg: TrainConfig
    vocab: dict[int, int]
    loss_log: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)


def _setup(world: World, cfg: TrainConfig):
    o = resolve_patch_side(cfg, world.grid.r)
    vocab = build_vocab(world.network)
    bank = PatchBank(world.rasters, world.grid, o)
    return o, vocab, bank


def pretrain(world: World, cfg: TrainConfig, prepared: list[PreparedPath] | None = None,
             progress=None) -> Pretrained:
    torch.set_num_threads(1)
    if len(world.paths) < cfg.batch_size:
        raise ConfigError(f"world has {len(world.paths)} paths, fewer than batch size {cfg.batch_size}")
    o, vocab, bank = _setup(world, cfg)
    if prepared is None:
        prepared = prepare_world(world, vocab, o, workers=cfg.workers)
    model = build_model(cfg, len(vocab), bank, torch_seed(cfg.seed, "init"))
    opt = _optimizer(model.parameters(), cfg, cfg.lr)
    rng_batch = substream(cfg.seed, "batches")
    rng_mask = substream(cfg.seed, "mask")
    rng_neg = substream(cfg.seed, "negatives")
    torch.manual_seed(torch_seed(cfg.seed, "dropout"))

    loss_log = []
    n = len(prepared)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng_batch.permutation(n)
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            items = [prepared[i] for i in order[start:start + cfg.batch_size]]
            masks = [sample_mask_positions(len(p.node_positions), cfg.mask_ratio, rng_mask) for p in items]
            batch = collate(items, masks)
            negatives = sample_negatives(len(items), rng_neg)
            losses = model.losses(batch, negatives)
            for k, v in losses.items():
                if not torch.isfinite(v):
                    raise NonFiniteLossError(f"epoch {epoch}: loss component {k} is {v.item()}")
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for k in LOSS_COLUMNS:
                sums[k] += float(losses[k].detach())
            steps += 1
        row = {"epoch": epoch, **{k: sums[k] / steps for k in LOSS_COLUMNS}}
        loss_log.append(row)
        if progress is not None:
            progress(row)
    rng_state = {name: g.bit_generator.state for name, g in
                 (("batches", rng_batch), ("mask", rng_mask), ("negatives", rng_neg))}
    return Pretrained(model, cfg, vocab, loss_log, rng_state)


def write_loss_log(loss_log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch",) + LOSS_COLUMNS)
        for row in loss_log:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOSS_COLUMNS])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in LOSS_COLUMNS}} for r in csv.DictReader(fh)]


# ------------------------------------------------------------- evaluation

def evaluation_losses(model: MMPath, prepared: list[PreparedPath], cfg: TrainConfig, seed: int = 12345) -> dict:
    """Deterministic eval-mode losses with fixed masks and negatives."""
    model.eval()
    rng_mask = substream(seed, "eval-mask")
    rng_neg = substream(seed, "eval-negatives")
    sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
    steps = 0
    with torch.no_grad():
        for start in range(0, len(prepared), cfg.batch_size):
            items = prepared[start:start + cfg.batch_size]
            masks = [sample_mask_positions(len(p.node_positions), cfg.mask_ratio, rng_mask) for p in items]
            out = model.losses(collate(items, masks), sample_negatives(len(items), rng_neg))
            for k in LOSS_COLUMNS:
                sums[k] += float(out[k])
            steps += 1
    return {k: v / steps for k, v in sums.items()}


def mask_accuracy(model: MMPath, prepared: list[PreparedPath], ratio: float, seed: int = 0,
                  draws: int = 5, batch_size: int = 16) -> float:
    """Fraction of masked nodes whose argmax prediction is the true node."""
    model.eval()
    rng = substream(seed, "mask-accuracy")
    hit = total = 0
    with torch.no_grad():
        for _ in range(draws):
            for start in range(0, len(prepared), batch_size):
                items = prepared[start:start + batch_size]
                masks = [sample_mask_positions(len(p.node_positions), ratio, rng) for p in items]
                batch = collate(items, masks)
                P0, H0, P, H = model.encode_batch(batch)
                pred = model.mnm_head(P[batch.mask_b, batch.mask_pos]).argmax(-1)
                hit += int((pred == batch.mask_tgt).sum())
                total += len(pred)
    return hit / max(total, 1)


def alignment_separation(model: MMPath, prepared: list[PreparedPath], n_random: int = 1000,
                         seed: int = 0) -> tuple[float, float]:
    """Mean cosine of corresponding node/patch pairs vs random non-corresponding pairs."""
    from .align import cosine
    from .tokenize import N_SPECIAL

    model.eval()
    with torch.no_grad():
        batch = collate(prepared)
        _, _, P, H = model.encode_batch(batch)
        corr = cosine(P[batch.fine_b, batch.fine_road], H[batch.fine_b, batch.fine_image]).mean().item()
        rng = substream(seed, "alignment-random")
        pairs = {(int(b), int(r), int(i)) for b, r, i in zip(batch.fine_b, batch.fine_road, batch.fine_image)}
        node_rows = [(int(b), int(r)) for b, r in zip(batch.fine_b, batch.fine_road)]
        patch_rows = [(b, i) for b, p in enumerate(prepared) for i in np.flatnonzero(p.image_codes >= N_SPECIAL)]
        a, c = [], []
        while len(a) < n_random:
            nb, nr = node_rows[rng.integers(len(node_rows))]
            pb, pi = patch_rows[rng.integers(len(patch_rows))]
            if nb == pb and (nb, nr, int(pi)) in pairs:
                continue
            a.append(P[nb, nr])
            c.append(H[pb, int(pi)])
        rand = cosine(torch.stack(a), torch.stack(c)).mean().item()
    return corr, rand


# ------------------------------------------------------------ checkpoints

def model_state(model: MMPath) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def save_model(path, model: MMPath, cfg: TrainConfig, vocab: dict[int, int], extra: dict | None = None,
               rng_state: dict | None = None) -> None:
    header = {
        "config": cfg.to_dict(),
        "vocab": {str(k): v for k, v in sorted(vocab.items())},
        "model": {"vocab_size": len(vocab), "patch_dim": model.tables.patch_proj.in_features,
                  "has_head": model.head is not None},
        "pixel_stats": np.asarray(model.pixel_stats, np.float64).tolist(),
        "rng_state": _jsonable(rng_state or {}),
        "extra": extra or {},
    }
    save_checkpoint(path, model_state(model), header)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def load_model(path, world: World) -> tuple[MMPath, TrainConfig, dict[int, int], dict]:
    state, header = load_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    vocab = {int(k): int(v) for k, v in header["vocab"].items()}
    o = resolve_patch_side(cfg, world.grid.r)
    bank = PatchBank(world.rasters, world.grid, o, stats=np.asarray(header["pixel_stats"], np.float32))
    model = MMPath(cfg, header["model"]["vocab_size"], header["model"]["patch_dim"])
    if header["model"]["has_head"]:
        model.attach_head()
    model.load_state_dict(state)
    model.set_pixels(bank)
    return model, cfg, vocab, header


# ------------------------------------------------------------ fine-tuning

def split_paths(path_ids, test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    ids = sorted(path_ids)
    perm = substream(seed, "split").permutation(len(ids))
    n_test = max(1, math.ceil(test_fraction * len(ids)))
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    return train, test


@dataclass
class Finetuned:
    model: MMPath
    task: str
    target_mean: float
    target_std: float
    train_ids: list[int]
    loss_log: list[float] = field(default_factory=list)

    def predict(self, prepared: list[PreparedPath], batch_size: int = 32) -> np.ndarray:
        self.model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(prepared), batch_size):
                out.append(self.model.predict(collate(prepared[start:start + batch_size])).double().numpy())
        return np.concatenate(out) * self.target_std + self.target_mean


def finetune(pre: Pretrained, world: World, labels: LabelSet, task: str, train_ids,
             cfg: TrainConfig | None = None, prepared: list[PreparedPath] | None = None) -> Finetuned:
    """Attach a task head on x = y || z and train with squared error on standardized targets."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    cfg = cfg or pre.cfg
    torch.set_num_threads(1)
    model = pre.model
    train_ids = sorted(train_ids)
    if prepared is None:
        o = resolve_patch_side(pre.cfg, world.grid.r)
        prepared = prepare_world(world, pre.vocab, o, paths=[world.path(i) for i in train_ids],
                                 workers=cfg.workers)
    by_id = {p.path_id: p for p in prepared}
    items_all = [by_id[i] for i in train_ids]
    y = labels.values(task, train_ids)
    mean, std = float(y.mean()), float(y.std()) or 1.0
    target = torch.from_numpy((y - mean) / std).to(model.tables.pos_road.dtype)

    torch.manual_seed(torch_seed(cfg.seed, "head-init"))
    head = model.attach_head()
    if cfg.freeze_encoder:
        for name, p in model.named_parameters():
            p.requires_grad_(name.startswith("head."))
    opt = _optimizer(head.parameters() if cfg.freeze_encoder else model.parameters(), cfg, cfg.finetune_lr)
    rng = substream(cfg.seed, "finetune-batches")
    torch.manual_seed(torch_seed(cfg.seed, "finetune-dropout"))
    log_rows = []
    for _ in range(cfg.finetune_epochs):
        model.train()
        order = rng.permutation(len(items_all))
        total = 0.0
        for start in range(0, len(order), cfg.finetune_batch_size):
            idx = order[start:start + cfg.finetune_batch_size]
            pred = model.predict(collate([items_all[i] for i in idx]))
            loss = torch.mean((pred - target[torch.from_numpy(idx)]) ** 2)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("fine-tuning loss is not finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log_rows.append(total / len(order))
    for p in model.parameters():
        p.requires_grad_(True)
    return Finetuned(model, task, mean, std, train_ids, log_rows)


def evaluate(ft: Finetuned, prepared: list[PreparedPath], labels: LabelSet, task: str | None = None) -> Metrics:
    task = task or ft.task
    if not prepared:
        raise ValueError("empty test set")
    pred = ft.predict(prepared)
    truth = labels.values(task, [p.path_id for p in prepared])
    return compute_metrics(pred, truth)


# --------------------------------------------------------------- ablation

METRIC_COLUMNS = ("variant", "task", "mae", "mare", "mape", "tau", "rho", "n_test")


def metrics_row(variant: str, task: str, m: Metrics) -> dict:
    return {"variant": variant, "task": task, "mae": m.mae, "mare": m.mare, "mape": m.mape,
            "tau": m.kendall_tau, "rho": m.spearman_rho, "n_test": m.n}


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["variant"], r["task"]] + [repr(float(r[k])) for k in ("mae", "mare", "mape", "tau", "rho")]
                       + [int(r["n_test"])])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({"variant": r["variant"], "task": r["task"],
                         **{k: float(r[k]) for k in ("mae", "mare", "mape", "tau", "rho")},
                         "n_test": int(r["n_test"])})
        return rows


def run_pipeline(world: World, labels: LabelSet, cfg: TrainConfig, task: str = "travel_time") -> tuple[Metrics, Pretrained, Finetuned]:
    """pretrain -> finetune -> evaluate on the configured train/test split."""
    o, vocab, _ = _setup(world, cfg)
    prepared = prepare_world(world, vocab, o, workers=cfg.workers)
    train_ids, test_ids = split_paths([p.path_id for p in world.paths], cfg.test_fraction, cfg.seed)
    pre = pretrain(world, cfg, prepared=prepared)
    ft = finetune(pre, world, labels, task, train_ids, cfg, prepared=prepared)
    by_id = {p.path_id: p for p in prepared}
    return evaluate(ft, [by_id[i] for i in test_ids], labels, task), pre, ft


def ablate(world: World, labels: LabelSet, variants, cfg: TrainConfig, tasks=("travel_time",),
           on_run=None) -> list[dict]:
    """One metrics row per (variant, task); ``on_run(variant, task, pre, ft)`` sees each run."""
    rows = []
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    for v in variants:
        vcfg = replace(cfg, variant=v)
        log.info("ablation variant %s (effective config %s)", v, asdict(vcfg.effective()))
        for task in tasks:
            m, pre, ft = run_pipeline(world, labels, vcfg, task)
            rows.append(metrics_row(v, task, m))
            if on_run is not None:
                on_run(v, task, pre, ft)
    return rows
