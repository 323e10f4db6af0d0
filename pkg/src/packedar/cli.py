"""Command-line entry point.

One executable, six subcommands: gen, pack, inspect, inspect-mask,
pretrain, finetune, verify. Every run-config key is exposed as a flag on
every subcommand (preset -> --config file -> flags, later layers win).
Exit codes: 0 success, 1 verification/training failure, 2 usage or
config error. The PACKEDAR_LOG env var sets the log level; nothing else
is read from the environment.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import FIELD_DOCS, PRESETS, ConfigError, RunConfig, build_config
from .data import generate_corpus, in_memory_corpus, load_corpus
from .decoder import build_mask, render_mask
from .patching import image_to_clusters
from .separator import layout_plan, load_packed, pack, save_packed
from .training import NonFiniteLoss, finetune, pretrain
from .verification import run_all

log = logging.getLogger("packedar")


class _Formatter(argparse.HelpFormatter):
    """Fixed width so --help is byte-stable across terminals."""

    def __init__(self, prog):
        super().__init__(prog, max_help_position=28, width=100)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    group = parser.add_argument_group("config keys")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            default=None,
            metavar="V",
            help=f"{FIELD_DOCS[f.name]} [default: {getattr(defaults, f.name)}]",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="packedar",
        formatter_class=_Formatter,
        description="Packed autoregressive pretraining for a state-space image encoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, **kwargs):
        p = sub.add_parser(
            name, help=help_text, description=help_text, formatter_class=_Formatter
        )
        p.add_argument(
            "--preset",
            default="desk",
            choices=sorted(PRESETS),
            help="config preset to start from [default: desk]",
        )
        p.add_argument(
            "--config", default=None, metavar="FILE",
            help="key = value config file applied over the preset",
        )
        _add_config_flags(p)
        return p

    add("gen", "generate a labeled synthetic corpus").set_defaults(func=cmd_gen)
    add("pack", "pack corpus images into one sequence dump").set_defaults(func=cmd_pack)
    p = add("inspect", "summarize a packed-sequence dump")
    p.add_argument("dump", help="packed dump file written by `pack`")
    p.set_defaults(func=cmd_inspect)
    add("inspect-mask", "render the block-causal mask as text").set_defaults(
        func=cmd_inspect_mask
    )
    p = add("pretrain", "run packed next-cluster pretraining")
    p.add_argument("--resume", default=None, metavar="CKPT", help="checkpoint to resume")
    p.add_argument(
        "--stop-after", type=int, default=None, metavar="STEP",
        help="stop before this step without changing the schedule",
    )
    p.set_defaults(func=cmd_pretrain)
    p = add("finetune", "fine-tune a classifier with the four-scan encoder")
    p.add_argument(
        "--checkpoint", default=None, metavar="CKPT",
        help="pretrained checkpoint (omit for random init)",
    )
    p.set_defaults(func=cmd_finetune)
    add("verify", "run the property-check suite").set_defaults(func=cmd_verify)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(RunConfig)
        if getattr(args, f.name) is not None
    }
    return build_config(args.preset, args.config, overrides)


def _corpus(cfg: RunConfig):
    if cfg.corpus_dir:
        return load_corpus(cfg.corpus_dir)
    log.info("no corpus_dir set; generating %d images in memory", cfg.count)
    return in_memory_corpus(cfg.count, cfg.geometry(), cfg.seed)


def _check_geometry(images, cfg: RunConfig) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    for i, im in enumerate(images):
        if im.shape != want:
            raise ConfigError(
                f"corpus image {i} has shape {im.shape}, config wants {want}"
            )


def cmd_gen(args, cfg: RunConfig) -> int:
    out = cfg.corpus_dir or cfg.out_dir
    manifest = generate_corpus(out, cfg.count, cfg.geometry(), cfg.seed)
    print(f"wrote {cfg.count} images to {out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_pack(args, cfg: RunConfig) -> int:
    images, _ = _corpus(cfg)
    _check_geometry(images, cfg)
    if len(images) < cfg.images_per_seq:
        raise ConfigError(
            f"corpus has {len(images)} images, need {cfg.images_per_seq}"
        )
    geom = cfg.geometry()
    seqs = [
        image_to_clusters(images[i], geom) for i in range(cfg.images_per_seq)
    ]
    emb = None
    if cfg.sep_kind == "embeddings":
        emb = np.zeros(cfg.width, dtype=np.float32)  # placeholder until trained
    packed = pack(
        seqs,
        cfg.separator_spec(),
        layout=cfg.layout,
        embedding=emb,
        group=cfg.group(),
        per_image_positions=cfg.pos_per_image,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "packed.bin"
    save_packed(path, packed)
    print(f"images: {packed.num_images}")
    print(f"tokens per image: {packed.num_tokens // packed.num_images}")
    print(f"total tokens: {packed.num_tokens}")
    print(f"dump: {path}")
    return 0


def cmd_inspect(args, cfg: RunConfig) -> int:
    packed = load_packed(args.dump)
    print(f"layout: {packed.layout}  separator: {packed.spec.value_kind}")
    print(
        f"images: {packed.num_images}  pixel clusters/image: {packed.num_pixel_clusters}"
        f"  cluster side: {packed.spec.cluster_side}"
    )
    print(f"patch dim: {packed.patch_dim}  embed dim: {packed.spec.embed_dim}")
    print(
        f"tokens: {packed.num_tokens} total, "
        f"{int(packed.is_separator.sum())} separator"
    )
    print(f"position ids: 0..{int(packed.position_ids.max())}")
    return 0


def cmd_inspect_mask(args, cfg: RunConfig) -> int:
    geom = cfg.geometry()
    plan = layout_plan(cfg.layout, geom.num_clusters, cfg.group())
    per_cluster = geom.tokens_per_cluster
    ids = []
    g = 0
    for _ in range(cfg.images_per_seq):
        for _ in plan:
            ids.extend([g] * per_cluster)
            g += 1
    print(render_mask(build_mask(np.array(ids, dtype=np.int64))))
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    images, _ = _corpus(cfg)
    _check_geometry(images, cfg)
    try:
        result = pretrain(
            cfg, images, resume_from=args.resume, stop_after=args.stop_after
        )
    except NonFiniteLoss as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 1
    print(f"steps: {result.steps_run}")
    print(f"first loss: {result.first_loss:.6f}")
    print(f"final loss: {result.final_loss:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    images, labels = _corpus(cfg)
    _check_geometry(images, cfg)
    try:
        result = finetune(cfg, images, labels, checkpoint_path=args.checkpoint)
    except NonFiniteLoss as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 1
    print(f"sequence length: {result.sequence_length}")
    print(f"train accuracy: {result.train_accuracy:.4f}")
    print(f"heldout accuracy: {result.heldout_accuracy:.4f}")
    print(f"heldout accuracy (ema): {result.heldout_accuracy_ema:.4f}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    results = run_all(seed=cfg.seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name}: {r.detail}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("PACKEDAR_LOG", "WARNING").upper(), logging.WARNING)
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
