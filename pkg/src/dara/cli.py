"""Command-line entry point.

Commands: synth, pretrain, finetune, eval, hist, inspect. Every registry
key is available both as a config-file line and as a `--key value` flag
(flags win). Exit codes: 0 success, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CHECKPOINT_MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from .config import REGISTRY, Config, load_config
from .data import BANK_MAGIC, gen_synthetic, load_bank, sample_episode, save_bank
from .errors import ConfigError, DaraError
from .pipeline import (
    ModelState,
    evaluate,
    export_distance_histogram,
    finetune,
    pretrain_source,
)

COMMANDS = ("synth", "pretrain", "finetune", "eval", "hist", "inspect")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dara", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subs.add_parser(name)
        if name == "inspect":
            sub.add_argument("file", help="bank or checkpoint to dump")
            continue
        sub.add_argument("--config", default=None, help="flat key = value file")
        for key in REGISTRY:
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def _config_from_args(args) -> Config:
    overrides = {
        key: getattr(args, key)
        for key in REGISTRY
        if getattr(args, key, None) is not None
    }
    return load_config(args.config, overrides)


def _load_state(cfg: Config, key: str) -> tuple[ModelState, Checkpoint]:
    ckpt = load_checkpoint(cfg.require_path(key))
    state = ModelState(
        backbone=ckpt.backbone,
        gamma_log=ckpt.gamma_log,
        gate=ckpt.gate,
        reprojection=dict(ckpt.reprojection),
    )
    return state, ckpt


def cmd_synth(cfg: Config) -> int:
    source_path = cfg.require_path("source_bank")
    target_path = cfg.require_path("target_bank")
    source, target, descriptor = gen_synthetic(cfg.synth())
    save_bank(source, source_path)
    save_bank(target, target_path)
    print(f"wrote {source_path}: {len(source.items)} items, {source.class_count} classes")
    print(f"wrote {target_path}: {len(target.items)} items, {target.class_count} classes")
    print(f"query shift delta = {descriptor['query_delta']}")
    print(f"config digest = {cfg.digest()}")
    return 0


def cmd_pretrain(cfg: Config) -> int:
    bank = load_bank(cfg.require_path("source_bank"))
    out = cfg.require_path("checkpoint")
    result = pretrain_source(bank, cfg.train())
    save_checkpoint(
        Checkpoint(
            backbone=result.state.backbone,
            gamma_log=result.state.gamma_log,
            gate=result.state.gate,
            reprojection={},
        ),
        out,
    )
    print(
        f"pretrained {cfg['pretrain_epochs']} epochs:"
        f" loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f},"
        f" train accuracy {result.epoch_accuracies[-1]:.3f}"
    )
    print(f"wrote {out}")
    print(f"config digest = {cfg.digest()}")
    return 0


def cmd_finetune(cfg: Config) -> int:
    bank = load_bank(cfg.require_path("target_bank"))
    state, _ = _load_state(cfg, "checkpoint")
    out = cfg.require_path("finetuned")
    spec = cfg.episode_spec()
    train = cfg.train()
    seq = np.random.SeedSequence(spec.seed, spawn_key=(0,))
    sample_seq, tune_seq = seq.spawn(2)
    episode = sample_episode(bank, spec, np.random.default_rng(sample_seq))
    losses1, losses2 = finetune(state, episode.support, spec, train, tune_seq)
    save_checkpoint(
        Checkpoint(
            backbone=state.backbone,
            gamma_log=state.gamma_log,
            gate=state.gate,
            reprojection=state.reprojection,
        ),
        out,
    )
    if losses1:
        print(f"stage 1: loss {losses1[0]:.4f} -> {losses1[-1]:.4f} ({len(losses1)} steps)")
    if losses2:
        print(f"stage 2: loss {losses2[0]:.4f} -> {losses2[-1]:.4f} ({len(losses2)} steps)")
    print(f"wrote {out}")
    print(f"config digest = {cfg.digest()}")
    return 0


def cmd_eval(cfg: Config) -> int:
    bank = load_bank(cfg.require_path("target_bank"))
    state, _ = _load_state(cfg, "checkpoint")
    report_path = Path(cfg.require_path("report"))
    report = evaluate(
        state,
        bank,
        cfg.episode_spec(),
        cfg.train(),
        episode_count=cfg["episodes"],
        query_delta=cfg["query_delta"],
        config_digest=cfg.digest(),
    )
    report_path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    csv_path = report_path.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write("episode,accuracy\n")
        for e, acc in enumerate(report.per_episode):
            fh.write(f"{e},{acc!r}\n")
    outputs = [str(report_path), str(csv_path)]
    if cfg["figures"]:
        from .figures import render_accuracy_histogram

        png_path = report_path.with_suffix(".png")
        render_accuracy_histogram(report.per_episode, report.mean, report.ci95, png_path)
        outputs.append(str(png_path))
    print(f"mean accuracy {report.mean:.4f} ± {report.ci95:.4f} over {report.episodes} episodes")
    for out in outputs:
        print(f"wrote {out}")
    return 0


def cmd_hist(cfg: Config) -> int:
    bank = load_bank(cfg.require_path("target_bank"))
    state, _ = _load_state(cfg, "checkpoint")
    hist_path = Path(cfg.require_path("histogram"))
    rows = export_distance_histogram(
        state,
        bank,
        cfg.episode_spec(),
        cfg.train(),
        episode_count=cfg["episodes"],
        query_delta=cfg["query_delta"],
    )
    with open(hist_path, "w") as fh:
        fh.write("episode,query_index,true_class,distance,aligned\n")
        for episode, qi, cid, distance, aligned in rows:
            fh.write(f"{episode},{qi},{cid},{distance!r},{aligned}\n")
    outputs = [str(hist_path)]
    if cfg["figures"]:
        from .figures import render_distance_histogram

        png_path = hist_path.with_suffix(".png")
        render_distance_histogram(
            [d for _, _, _, d, a in rows if a == 1],
            [d for _, _, _, d, a in rows if a == 0],
            png_path,
        )
        outputs.append(str(png_path))
    aligned = sorted(d for _, _, _, d, a in rows if a == 1)
    unaligned = sorted(d for _, _, _, d, a in rows if a == 0)
    print(
        f"median distance: aligned {np.median(aligned):.4f},"
        f" unaligned {np.median(unaligned):.4f}"
    )
    for out in outputs:
        print(f"wrote {out}")
    return 0


def cmd_inspect(path: str) -> int:
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == BANK_MAGIC:
        bank = load_bank(path)
        print(f"{path}: feature bank ({BANK_MAGIC.decode()})")
        print(f"  items = {len(bank.items)}")
        print(f"  W = {bank.width}, H = {bank.height}, C = {bank.channels}")
        print(f"  class_count = {bank.class_count}")
        counts = np.bincount([label for _, label in bank.items], minlength=bank.class_count)
        print(f"  items per class = {counts.tolist()}")
        return 0
    if magic == CHECKPOINT_MAGIC:
        ckpt = load_checkpoint(path)
        print(f"{path}: checkpoint ({CHECKPOINT_MAGIC.decode()})")
        for name, m in zip(("w1", "b1", "w2", "b2"), ckpt.backbone.matrices()):
            print(f"  {name}: {m.shape[0]} x {m.shape[1]}")
        print(f"  gamma_log = {ckpt.gamma_log!r}")
        print(f"  gate: mode = {ckpt.gate.mode}, alpha = {ckpt.gate.alpha!r}, "
              f"w length = {ckpt.gate.w.size}, b = {ckpt.gate.b!r}")
        if ckpt.reprojection:
            for tag in sorted(ckpt.reprojection):
                z = ckpt.reprojection[tag]
                print(f"  reprojection[{tag}]: {z.shape[0]} x {z.shape[1]}")
        else:
            print("  reprojection: none")
        return 0
    raise DaraError(f"{path}: unrecognized magic {magic!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.file)
        cfg = _config_from_args(args)
        handler = {
            "synth": cmd_synth,
            "pretrain": cmd_pretrain,
            "finetune": cmd_finetune,
            "eval": cmd_eval,
            "hist": cmd_hist,
        }[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DaraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
