"""Command-line entry point: ``mmpath <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from .config import TASKS, TINY, VARIANTS, TrainConfig
from .errors import ConfigError
from .fuse import build_graph, dumps_graph
from .tokenize import build_correspondence, tokenize_image, tokenize_road
from .world import (PRESETS, WorldConfig, derive_image_path, generate_synthetic_world, load_world, save_world,
                    synth_labels)

log = logging.getLogger("mmpath")

COMMANDS = {
    "gen": "generate a synthetic world and its labels",
    "pretrain": "pretrain the two-branch model on a world",
    "finetune": "attach a task head to a pretrained run and fine-tune it",
    "eval": "evaluate a fine-tuned head on the held-out paths",
    "ablate": "run pretrain + finetune + eval for several model variants",
    "graph-dump": "write the cross-modal graph of one path as JSON",
    "report": "render report.md and loss-curve images for a run directory",
    "help": "show this command list",
}


class UsageError(Exception):
    pass


class ArtifactExists(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get("MMPATH_RUN_DIR", "runs"))


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_fields(parser, dataclass_type, skip=()):
    group = parser.add_argument_group(f"{dataclass_type.__name__} keys")
    for f in fields(dataclass_type):
        if f.name in skip:
            continue
        kind = type(f.default)
        names = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        group.add_argument(*names, dest=f"cfg_{f.name}", type=_bool if kind is bool else kind,
                           default=argparse.SUPPRESS, metavar=kind.__name__.upper())


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}


def resolve_train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """flag > --config file > base (preset or checkpoint) > defaults."""
    data = (base or (TINY if getattr(args, "preset", "default") == "tiny" else TrainConfig())).to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        data.update(from_file)
    data.update(_overrides(args))
    return TrainConfig.from_dict(data)


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ArtifactExists(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _merge_resolved(run: Path, section: str, payload: dict) -> None:
    path = run / "config.resolved.json"
    data = json.loads(path.read_text()) if path.is_file() else {}
    data[section] = payload
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_vocab(run: Path, vocab: dict[int, int]) -> None:
    from .tokenize import save_vocab
    save_vocab(vocab, run / "vocab.json")


def _load_world(path: Path, need_labels: bool = False):
    if not (path / "network.jsonl").is_file():
        raise FileNotFoundError(f"no world found at {path} (missing network.jsonl)")
    world = load_world(path)
    if need_labels and world.labels is None:
        raise FileNotFoundError(f"world at {path} has no labels.csv")
    return world


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    out = Path(args.out or run_root() / "world")
    _guard([out / "world.json"], args.force)
    base = asdict(PRESETS[args.preset])
    base.update(_overrides(args))
    cfg = WorldConfig(**base)
    world = generate_synthetic_world(args.seed, cfg)
    label_seed = args.seed if args.label_seed is None else args.label_seed
    world.labels = synth_labels(world, seed=label_seed, noise_level=args.noise_level,
                                delay_scale=args.delay_scale)
    out.mkdir(parents=True, exist_ok=True)
    save_world(world, out)
    _merge_resolved(out, "gen", {"seed": args.seed, "preset": args.preset, "world": asdict(cfg),
                                 "labels": {"seed": label_seed, "noise_level": args.noise_level,
                                            "delay_scale": args.delay_scale}})
    print(f"wrote world with {len(world.paths)} paths to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .train import pretrain, save_model, write_loss_log

    cfg = resolve_train_config(args)
    world = _load_world(Path(args.world or run_root() / "world"))
    run = Path(args.out or run_root() / "run")
    _guard([run / "pretrained.ckpt", run / "loss_log.csv"], args.force)
    run.mkdir(parents=True, exist_ok=True)
    _merge_resolved(run, "pretrain", {"config": cfg.to_dict(), "world": str(args.world or run_root() / "world")})

    def progress(row):
        log.info("epoch %d total %.5f", row["epoch"], row["total"])

    pre = pretrain(world, cfg, progress=progress)
    _write_vocab(run, pre.vocab)
    write_loss_log(pre.loss_log, run / "loss_log.csv")
    save_model(run / "pretrained.ckpt", pre.model, cfg, pre.vocab, rng_state=pre.rng_state)
    print(f"pretrained {cfg.epochs} epochs; total loss {pre.loss_log[0]['total']:.4f} -> "
          f"{pre.loss_log[-1]['total']:.4f}; wrote {run}")
    return 0


def _finetuned_path(run: Path, task: str) -> Path:
    return run / f"finetuned_{task}.ckpt"


def cmd_finetune(args) -> int:
    from .train import Pretrained, finetune, load_model, save_model, split_paths

    run = Path(args.run or run_root() / "run")
    ckpt = run / "pretrained.ckpt"
    if not ckpt.is_file():
        raise FileNotFoundError(f"missing {ckpt}; run `mmpath pretrain` first")
    world = _load_world(Path(args.world or run_root() / "world"), need_labels=True)
    out = _finetuned_path(run, args.task)
    log_path = run / f"finetune_log_{args.task}.csv"
    _guard([out, log_path], args.force)
    model, saved_cfg, vocab, _ = load_model(ckpt, world)
    cfg = resolve_train_config(args, base=saved_cfg)
    train_ids, test_ids = split_paths([p.path_id for p in world.paths], cfg.test_fraction, cfg.seed)
    ft = finetune(Pretrained(model, saved_cfg, vocab), world, world.labels, args.task, train_ids, cfg)
    extra = {"task": args.task, "target_mean": ft.target_mean, "target_std": ft.target_std,
             "train_ids": train_ids, "test_ids": test_ids}
    save_model(out, ft.model, saved_cfg, vocab, extra=extra)
    with open(log_path, "w") as fh:
        fh.write("epoch,mse\n")
        for i, v in enumerate(ft.loss_log, 1):
            fh.write(f"{i},{v!r}\n")
    _merge_resolved(run, f"finetune_{args.task}", {"config": cfg.to_dict()})
    print(f"fine-tuned {args.task} head on {len(train_ids)} paths; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import compute_metrics
    from .model import prepare_world, resolve_patch_side
    from .train import Finetuned, load_model, metrics_row, read_metrics, write_metrics

    run = Path(args.run or run_root() / "run")
    ckpt = _finetuned_path(run, args.task)
    if not ckpt.is_file():
        raise FileNotFoundError(f"missing {ckpt}; run `mmpath finetune --task {args.task}` first")
    world = _load_world(Path(args.world or run_root() / "world"), need_labels=True)
    model, cfg, vocab, header = load_model(ckpt, world)
    extra = header["extra"]
    ids = extra["test_ids"] if args.split == "test" else sorted(p.path_id for p in world.paths)
    ft = Finetuned(model, extra["task"], extra["target_mean"], extra["target_std"], extra["train_ids"])
    prepared = prepare_world(world, vocab, resolve_patch_side(cfg, world.grid.r),
                             paths=[world.path(i) for i in ids], workers=cfg.workers)
    m = compute_metrics(ft.predict(prepared), world.labels.values(args.task, ids))
    row = metrics_row(cfg.variant, args.task, m)

    metrics_path = run / "metrics.csv"
    rows = read_metrics(metrics_path) if metrics_path.is_file() else []
    clash = [r for r in rows if (r["variant"], r["task"]) == (row["variant"], row["task"])]
    if clash and not args.force:
        raise ArtifactExists(f"{metrics_path} already has a {row['variant']}/{row['task']} row (pass --force)")
    rows = [r for r in rows if r not in clash] + [row]
    write_metrics(rows, metrics_path)
    _merge_resolved(run, f"eval_{args.task}", {"split": args.split, "n_paths": len(ids)})
    print(json.dumps({k: (v if not isinstance(v, float) else round(v, 6)) for k, v in row.items()}))
    return 0


def cmd_ablate(args) -> int:
    from .train import ablate, save_model, write_loss_log, write_metrics

    cfg = resolve_train_config(args)
    world = _load_world(Path(args.world or run_root() / "world"), need_labels=True)
    run = Path(args.out or run_root() / "ablation")
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    tasks = args.tasks.split(",") if args.tasks else ["travel_time"]
    bad = [v for v in variants if v not in VARIANTS] + [t for t in tasks if t not in TASKS]
    if bad:
        raise UsageError(f"unknown variant or task: {', '.join(bad)}")
    _guard([run / "metrics.csv", run / "loss_log.csv"], args.force)
    (run / "loss_logs").mkdir(parents=True, exist_ok=True)
    _merge_resolved(run, "ablate", {"config": cfg.to_dict(), "variants": variants, "tasks": tasks,
                                    "effective": {v: replace(cfg, variant=v).effective().to_dict()
                                                  for v in variants}})
    written = {}

    def on_run(variant, task, pre, ft):
        if variant not in written:
            write_loss_log(pre.loss_log, run / "loss_logs" / f"{variant}.csv")
            written[variant] = pre.loss_log
            if len(written) == 1:
                _write_vocab(run, pre.vocab)
                write_loss_log(pre.loss_log, run / "loss_log.csv")
        if args.save_checkpoints:
            save_model(run / f"{variant}_{task}.ckpt", ft.model, pre.cfg, pre.vocab,
                       extra={"task": task, "target_mean": ft.target_mean, "target_std": ft.target_std})

    rows = ablate(world, world.labels, variants, cfg, tasks, on_run=on_run)
    write_metrics(rows, run / "metrics.csv")
    print(f"wrote {len(rows)} metrics rows to {run / 'metrics.csv'}")
    return 0


def cmd_graph_dump(args) -> int:
    from .model import resolve_patch_side

    world = _load_world(Path(args.world or run_root() / "world"))
    ids = {p.path_id for p in world.paths}
    if args.path_id not in ids:
        raise KeyError(f"path {args.path_id} is not in the world ({len(ids)} paths)")
    o = args.patch_side or resolve_patch_side(TrainConfig(), world.grid.r)
    path = world.path(args.path_id)
    ip = derive_image_path(path, world.network, world.grid)
    rs, iseq = tokenize_road(path, ip), tokenize_image(ip, world.grid, o)
    graph = build_graph(rs, iseq, build_correspondence(rs, iseq, path, world.network, world.grid, o))
    out = Path(args.out or run_root() / f"graph_{args.path_id}.json")
    _guard([out], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_graph(graph))
    print(f"wrote {graph.size}-token graph with {int(graph.adjacency.sum())} edges to {out}")
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    run = Path(args.run or run_root() / "run")
    _guard([run / "report.md"], args.force)
    for p in write_report(run):
        print(f"wrote {p}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmpath", description="multi-modal path representation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, **kw):
        return sub.add_parser(name, help=COMMANDS[name], description=COMMANDS[name], parents=[common], **kw)

    p = add("gen")
    p.add_argument("--out", help="world directory (default $MMPATH_RUN_DIR/world)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--label-seed", type=int, default=None)
    p.add_argument("--noise-level", type=float, default=0.0)
    p.add_argument("--delay-scale", type=float, default=2.0)
    p.add_argument("--force", action="store_true")
    _add_fields(p, WorldConfig)

    def train_flags(p):
        p.add_argument("--world", help="world directory (default $MMPATH_RUN_DIR/world)")
        p.add_argument("--config", help="JSON file of training-config keys")
        p.add_argument("--preset", choices=("default", "tiny"), default="default",
                       help="base settings before --config and flags")
        p.add_argument("--force", action="store_true")
        _add_fields(p, TrainConfig)

    p = add("pretrain")
    p.add_argument("--out", help="run directory (default $MMPATH_RUN_DIR/run)")
    train_flags(p)

    for name in ("finetune", "eval"):
        p = add(name)
        p.add_argument("--run", help="run directory holding pretrained.ckpt")
        p.add_argument("--task", choices=TASKS, default="travel_time")
        if name == "eval":
            p.add_argument("--split", choices=("test", "all"), default="test")
        train_flags(p)

    p = add("ablate")
    p.add_argument("--out", help="output directory (default $MMPATH_RUN_DIR/ablation)")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--tasks", help=f"comma-separated subset of {','.join(TASKS)}")
    p.add_argument("--save-checkpoints", action="store_true")
    train_flags(p)

    p = add("graph-dump")
    p.add_argument("--world")
    p.add_argument("--path-id", type=int, required=True)
    p.add_argument("--patch-side", type=int, default=0, help="patch side in pixels (default r // 4)")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = add("report")
    p.add_argument("--run", help="run directory with loss_log.csv and metrics.csv")
    p.add_argument("--force", action="store_true")

    add("help")
    return parser


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "ablate": cmd_ablate, "graph-dump": cmd_graph_dump, "report": cmd_report}


def print_commands(stream) -> None:
    stream.write("usage: mmpath <command> [options]\n\ncommands:\n")
    for name, text in COMMANDS.items():
        stream.write(f"  {name:<11} {text}\n")
    stream.write("\nrun `mmpath <command> --help` for the options of one command\n")


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        print_commands(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    if args.command == "help":
        print_commands(sys.stdout)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return HANDLERS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"mmpath {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ArtifactExists, FileNotFoundError, KeyError, ValueError, RuntimeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mmpath {args.command}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
