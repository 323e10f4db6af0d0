"""Flat run configuration shared by every CLI subcommand.

One dataclass holds every key. Config files are plain ``key = value``
lines (# comments allowed); unknown keys are hard errors, and every key
has a documented default (see docs/config.md, generated from the same
table that feeds --help).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .decoder import DecoderConfig
from .patching import Geometry
from .separator import SeparatorSpec
from .ssm import EncoderConfig


class ConfigError(Exception):
    """Bad key, bad value, or an unsatisfiable combination."""


@dataclass
class RunConfig:
    # geometry
    image_size: int = 16
    patch_size: int = 4
    cluster_side: int = 2
    channels: int = 3
    # separator / packing
    sep_kind: str = "identity"
    layout: str = "sc"
    images_per_seq: int = 2
    sep_group: int = 0
    pos_per_image: bool = True
    # encoder
    depth: int = 4
    width: int = 64
    state_dim: int = 8
    mlp_ratio: int = 4
    scan_mode: str = "one"
    pos_embed: bool = True
    max_positions: int = 512
    four_scan_reduce: str = "sum"
    # decoder
    dec_layers: int = 2
    dec_width: int = 64
    dec_heads: int = 8
    dec_self_attn: bool = True
    # objective
    include_separator_targets: bool = True
    # optimization
    augment: bool = True
    lr: float = 0.0
    batch_size: int = 8
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 40
    steps: int = 200
    ema_decay: float = 0.9999
    layer_decay: float = 0.65
    drop_path: float = 0.1
    class_token_pos: str = "tail"
    heldout_frac: float = 0.25
    # run plumbing
    seed: int = 0
    count: int = 64
    corpus_dir: str = ""
    out_dir: str = "."
    deterministic: bool = True
    checkpoint_every: int = 0
    log_every: int = 1

    # ----- derived views -------------------------------------------------

    def geometry(self) -> Geometry:
        return Geometry(
            image_size=self.image_size,
            patch_size=self.patch_size,
            cluster_side=self.cluster_side,
            channels=self.channels,
        )

    def separator_spec(self) -> SeparatorSpec:
        return SeparatorSpec(
            value_kind=self.sep_kind,
            cluster_side=self.cluster_side,
            embed_dim=self.width,
        )

    def group(self) -> int:
        return self.sep_group if self.sep_group > 0 else self.cluster_side

    def encoder_config(self, scan_mode: str | None = None) -> EncoderConfig:
        return EncoderConfig(
            width=self.width,
            depth=self.depth,
            state_dim=self.state_dim,
            mlp_ratio=self.mlp_ratio,
            scan_mode=scan_mode or self.scan_mode,
            patch_dim=self.geometry().patch_dim,
            max_positions=self.max_positions,
            use_pos_embed=self.pos_embed,
            four_scan_reduce=self.four_scan_reduce,
            separator_kind=self.sep_kind,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            layers=self.dec_layers,
            width=self.dec_width,
            heads=self.dec_heads,
            feature_dim=self.width,
            patch_dim=self.geometry().patch_dim,
            use_self_attn=self.dec_self_attn,
        )

    def pretrain_lr(self) -> float:
        # 0 means "derive from batch size" with the usual linear scaling rule
        return self.lr if self.lr > 0 else 1.5e-4 * self.batch_size / 256

    def finetune_lr(self) -> float:
        return self.lr if self.lr > 0 else 5e-4 * self.batch_size / 256

    def snapshot(self) -> dict:
        """All fields as plain values, minus filesystem paths (a resumed run
        may live elsewhere; everything that shapes the computation stays)."""
        d = dataclasses.asdict(self)
        d.pop("corpus_dir")
        d.pop("out_dir")
        return d

    def validate(self) -> None:
        try:
            self.geometry()
            self.separator_spec()
            self.encoder_config()
            self.decoder_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.layout not in ("sc", "cs", "scs", "csc"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.class_token_pos not in ("tail", "middle"):
            raise ConfigError(f"unknown class_token_pos {self.class_token_pos!r}")
        if not 1 <= self.images_per_seq <= 16:
            raise ConfigError(f"images_per_seq must be in 1..16, got {self.images_per_seq}")
        if not 0 <= self.heldout_frac < 1:
            raise ConfigError(f"heldout_frac must be in [0, 1), got {self.heldout_frac}")
        for name in ("batch_size", "steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "weight_decay", "warmup_steps", "drop_path"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("beta1/beta2 must be in (0, 1)")


# one-line help per key; feeds --help and docs/config.md
FIELD_DOCS = {
    "image_size": "square image edge in pixels",
    "patch_size": "patch edge in pixels; must divide image_size",
    "cluster_side": "patches per cluster edge; must divide the patch grid",
    "channels": "image channels",
    "sep_kind": "separator values: zeros | ones | embeddings | identity",
    "layout": "separator placement per image: sc | cs | scs | csc",
    "images_per_seq": "images packed into one training sequence (N)",
    "sep_group": "clusters per separator for scs/csc; 0 = cluster_side",
    "pos_per_image": "restart position ids at each image instead of running globally",
    "depth": "encoder block count",
    "width": "encoder embedding dim D",
    "state_dim": "SSM state size d",
    "mlp_ratio": "MLP hidden expansion factor",
    "scan_mode": "token mixer traversals: one (causal) | four (fine-tune)",
    "pos_embed": "add learned positional encodings",
    "max_positions": "size of the positional table",
    "four_scan_reduce": "combine the four scan paths by: sum | mean",
    "dec_layers": "decoder layer count",
    "dec_width": "decoder width",
    "dec_heads": "decoder attention heads",
    "dec_self_attn": "enable decoder self-attention sublayer",
    "include_separator_targets": "score separator-target positions in the loss",
    "augment": "random crop/flip augmentation during training",
    "lr": "base learning rate; 0 derives it from batch_size (1.5e-4*batch/256 "
          "pretrain, 5e-4*batch/256 fine-tune)",
    "batch_size": "sequences (pretrain) or images (fine-tune) per step",
    "weight_decay": "decoupled weight decay",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "warmup_steps": "linear warmup length in steps",
    "steps": "total optimization steps",
    "ema_decay": "parameter EMA decay",
    "layer_decay": "fine-tune layer-wise lr decay factor",
    "drop_path": "fine-tune stochastic depth rate (linear ramp over blocks)",
    "class_token_pos": "fine-tune class token placement: tail | middle",
    "heldout_frac": "fraction of the labeled corpus held out for eval",
    "seed": "seed for all sampling and initialization",
    "count": "images to generate (gen subcommand)",
    "corpus_dir": "directory holding manifest.tsv and images",
    "out_dir": "directory for checkpoints, metrics, dumps",
    "deterministic": "single-thread deterministic mode; wall_ms is logged as 0",
    "checkpoint_every": "steps between periodic checkpoints; 0 = final only",
    "log_every": "steps between metrics records",
}

PRESETS = {
    "desk": {},
    # full-scale geometry and packing; model dims land near the
    # ~85M-parameter base encoder
    "base": {
        "image_size": 192,
        "patch_size": 16,
        "cluster_side": 4,
        "images_per_seq": 8,
        "depth": 16,
        "width": 768,
        "state_dim": 16,
        "dec_layers": 4,
        "dec_width": 512,
        "dec_heads": 8,
        "lr": 0.0,
    },
}


def _coerce(name: str, text: str, target_type: type):
    text = text.strip()
    try:
        if target_type is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {e}") from e


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; later duplicates win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(
    preset: str = "desk",
    config_file: str | None = None,
    overrides: dict[str, str] | None = None,
) -> RunConfig:
    """Preset -> config file -> explicit overrides, later layers winning."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (have {', '.join(PRESETS)})")
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    # dataclass field types arrive as strings under from __future__ annotations
    named = {"int": int, "float": float, "bool": bool, "str": str}
    values: dict = dict(PRESETS[preset])
    layers: list[dict] = []
    if config_file:
        layers.append(parse_config_file(config_file))
    if overrides:
        layers.append(dict(overrides))
    for layer in layers:
        for key, text in layer.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            t = types[key]
            values[key] = _coerce(key, str(text), named.get(t, t) if isinstance(t, str) else t)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
