"""Training loops, hand-rolled AdamW, LR schedule, EMA, and the gradient check.

The optimizer operates on flat name -> tensor dicts so the checkpoint
format stays framework-free. Pretraining runs the packed next-cluster
objective with the causal one-scan encoder; fine-tuning switches to the
four-scan encoder, adds a class token (tail or middle) and a linear
head, and trains with cross-entropy under layer-wise lr decay and
stochastic depth. Everything random flows through one seeded numpy
generator whose state rides along in the checkpoint.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import CLASSES, augment
from .decoder import Decoder
from .objective import build_targets, next_cluster_loss
from .patching import Geometry, image_to_clusters
from .separator import pack
from .ssm import Encoder, four_scan_orders


class NonFiniteLoss(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class OptimHyper:
    base_lr: float
    batch_size: int
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: float = 40.0
    total_epochs: float = 200.0
    steps_per_epoch: int = 1
    eps: float = 1e-8

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))


def lr_at(step: int, hyper: OptimHyper) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    warmup = hyper.warmup_steps
    if warmup > 0 and step < warmup:
        return hyper.base_lr * step / warmup
    span = max(hyper.total_steps - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    return hyper.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Moments:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    count: int = 0


def init_moments(params: dict[str, torch.Tensor]) -> Moments:
    return Moments(
        m={n: torch.zeros_like(p) for n, p in params.items()},
        v={n: torch.zeros_like(p) for n, p in params.items()},
    )


def no_decay_names(params: dict[str, torch.Tensor]) -> frozenset[str]:
    """Parameters excluded from weight decay: biases and norms (all rank <= 1
    tensors, which also covers the class token and separator embedding), the
    positional table, and the state-transition log parameter."""
    return frozenset(
        n
        for n, p in params.items()
        if p.ndim <= 1 or n.endswith("pos_embed.weight") or n.endswith("log_neg_a")
    )


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    moments: Moments,
    hyper: OptimHyper,
    lr: float,
    no_decay: frozenset[str] = frozenset(),
    lr_scales: dict[str, float] | None = None,
) -> None:
    """One decoupled-weight-decay Adam step, in place.

    Mirrors the reference AdamW update exactly: decay first with the
    effective lr, then the bias-corrected moment step. Parameters whose
    grad is None are skipped entirely.
    """
    moments.count += 1
    t = moments.count
    bc1 = 1.0 - hyper.beta1**t
    bc2_sqrt = math.sqrt(1.0 - hyper.beta2**t)
    with torch.no_grad():
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise ValueError(f"non-finite gradient in {name}")
            step_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
            p = params[name]
            if hyper.weight_decay and name not in no_decay:
                p.mul_(1.0 - step_lr * hyper.weight_decay)
            m, v = moments.m[name], moments.v[name]
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            denom = (v.sqrt() / bc2_sqrt).add_(hyper.eps)
            p.addcdiv_(m, denom, value=-step_lr / bc1)


def ema_update(ema: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float) -> None:
    with torch.no_grad():
        for name, p in params.items():
            ema[name].mul_(decay).add_(p, alpha=1.0 - decay)


def layer_scales(names, depth: int, decay: float) -> dict[str, float]:
    """Layer-wise lr scales for fine-tuning: block b gets decay^(depth - b),
    embeddings sit one level below block 0, head/final norm/class token at
    the top with scale 1."""
    scales = {}
    for name in names:
        if name.startswith("encoder.blocks."):
            level = int(name.split(".")[2]) + 1
        elif name.startswith(
            ("encoder.patch_embed", "encoder.pos_embed", "encoder.sep_embedding")
        ):
            level = 0
        else:
            level = depth + 1
        scales[name] = decay ** (depth + 1 - level)
    return scales


# ---------------------------------------------------------------------------
# Shared plumbing


def collect_params(**modules) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, module in modules.items():
        if isinstance(module, torch.nn.Parameter):
            out[prefix] = module
        else:
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p
    return out


def _grad_norm(grads) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(g.detach().double().square().sum())
    return math.sqrt(total)


def _state_groups(params, moments, ema):
    def as_np(d):
        return {n: t.detach().cpu().numpy().copy() for n, t in d.items()}

    return {
        "params": as_np(params),
        "moment_m": as_np(moments.m),
        "moment_v": as_np(moments.v),
        "ema": as_np(ema),
    }


def _load_group(tensors: dict[str, torch.Tensor], stored: dict[str, np.ndarray], what: str):
    if set(tensors) != set(stored):
        missing = sorted(set(tensors) ^ set(stored))
        raise ValueError(f"checkpoint {what} names do not match: {missing[:4]}")
    with torch.no_grad():
        for name, t in tensors.items():
            t.copy_(torch.from_numpy(stored[name]).to(t.dtype))


class MetricsWriter:
    """Line-delimited JSON; in deterministic mode wall_ms is pinned to 0 so
    two seeded runs produce byte-identical files."""

    def __init__(self, path: Path, deterministic: bool, append: bool):
        self.path = path
        self.deterministic = deterministic
        self._f = open(path, "a" if append else "w")
        self._t0 = time.monotonic()

    def write(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        wall = 0.0 if self.deterministic else (time.monotonic() - self._t0) * 1e3
        rec = {
            "step": step,
            "loss": loss,
            "lr": lr,
            "grad_norm": grad_norm,
            "wall_ms": wall,
        }
        self._f.write(json.dumps(rec, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


# ---------------------------------------------------------------------------
# Pretraining


@dataclass
class PretrainResult:
    checkpoint_path: Path
    metrics_path: Path
    first_loss: float
    final_loss: float
    steps_run: int


def _pretrain_forward(cfg: RunConfig, encoder, decoder, images, rng):
    geom = cfg.geometry()
    spec = cfg.separator_spec()
    emb = None
    if cfg.sep_kind == "embeddings":
        emb = encoder.sep_embedding.detach().cpu().numpy()
    total = 0.0
    for _ in range(cfg.batch_size):
        chosen = rng.integers(0, len(images), size=cfg.images_per_seq)
        seqs = [
            image_to_clusters(
                augment(images[int(i)], rng) if cfg.augment else images[int(i)],
                geom,
            )
            for i in chosen
        ]
        packed = pack(
            seqs,
            spec,
            layout=cfg.layout,
            embedding=emb,
            group=cfg.group(),
            per_image_positions=cfg.pos_per_image,
        )
        features = encoder.encode(packed)
        preds = decoder.decode(features, packed.cluster_index)
        plan = build_targets(packed)
        total = total + next_cluster_loss(
            preds, plan, include_separator_targets=cfg.include_separator_targets
        )
    return total / cfg.batch_size


def pretrain(
    cfg: RunConfig,
    images: list[np.ndarray],
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
) -> PretrainResult:
    """Run the packed next-cluster pretraining loop.

    stop_after caps the number of the step to stop at (exclusive) without
    changing the configured schedule, so a stopped run can be resumed
    bit-exactly from its checkpoint.
    """
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    encoder = Encoder(cfg.encoder_config("one"))
    decoder = Decoder(cfg.decoder_config())
    params = collect_params(encoder=encoder, decoder=decoder)
    moments = init_moments(params)
    ema = {n: p.detach().clone() for n, p in params.items()}
    rng = np.random.default_rng(cfg.seed)
    hyper = OptimHyper(
        base_lr=cfg.pretrain_lr(),
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        warmup_epochs=cfg.warmup_steps,
        total_epochs=cfg.steps,
    )
    no_decay = no_decay_names(params)

    start = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config != cfg.snapshot():
            raise ValueError("checkpoint config does not match the run config")
        _load_group(params, ck.groups["params"], "params")
        _load_group(moments.m, ck.groups["moment_m"], "moment_m")
        _load_group(moments.v, ck.groups["moment_v"], "moment_v")
        _load_group(ema, ck.groups["ema"], "ema")
        moments.count = ck.state["moment_count"]
        rng.bit_generator.state = ck.state["rng"]
        start = ck.step

    metrics_path = out / "metrics.jsonl"
    metrics = MetricsWriter(
        metrics_path, cfg.deterministic, append=resume_from is not None
    )

    def save(path: Path, step: int):
        save_checkpoint(
            path,
            config=cfg.snapshot(),
            step=step,
            state={"moment_count": moments.count, "rng": rng.bit_generator.state},
            groups=_state_groups(params, moments, ema),
        )

    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    first_loss = math.nan
    final_loss = math.nan
    try:
        for step in range(start, end):
            loss = _pretrain_forward(cfg, encoder, decoder, images, rng)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step, f"loss={loss.item()}")
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            lr = lr_at(step, hyper)
            try:
                adamw_step(params, grads, moments, hyper, lr, no_decay)
            except ValueError as e:
                raise NonFiniteLoss(step, str(e)) from e
            ema_update(ema, params, cfg.ema_decay)
            final_loss = loss.item()
            if step == start:
                first_loss = final_loss
            if step % cfg.log_every == 0:
                metrics.write(step, final_loss, lr, _grad_norm(grads))
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save(out / f"checkpoint_{step + 1:06d}.bin", step + 1)
    finally:
        metrics.close()
    save(out / "checkpoint.bin", end)
    return PretrainResult(
        checkpoint_path=out / "checkpoint.bin",
        metrics_path=metrics_path,
        first_loss=first_loss,
        final_loss=final_loss,
        steps_run=end - start,
    )


# ---------------------------------------------------------------------------
# Fine-tuning


@dataclass
class FinetuneResult:
    metrics_path: Path
    train_accuracy: float
    heldout_accuracy: float
    heldout_accuracy_ema: float
    sequence_length: int


def class_token_index(num_pixel_tokens: int, policy: str) -> int:
    """Tail appends after all pixel tokens; middle inserts at floor(n/2)."""
    if policy == "tail":
        return num_pixel_tokens
    if policy == "middle":
        return num_pixel_tokens // 2
    raise ValueError(f"unknown class token policy {policy!r}")


def build_class_sequence(image: np.ndarray, geom: Geometry, policy: str):
    """Pixel token matrix plus class-token slot and four-scan traversals.

    Returns (tokens (n, s) float32, insert index, position ids (n+1,),
    orders builder inputs). The class token itself is added by the caller
    in embedding space; sequence length is always n + 1.
    """
    seq = image_to_clusters(image, geom)
    flat = seq.clusters.reshape(-1, geom.patch_dim)
    n = flat.shape[0]
    insert = class_token_index(n, policy)
    # class token gets position id 0; pixel ids 1..n in sequence order
    ids = np.empty(n + 1, dtype=np.int64)
    ids[insert] = 0
    pixel_slots = np.delete(np.arange(n + 1, dtype=np.int64), insert)
    ids[pixel_slots] = np.arange(1, n + 1)
    side = geom.cluster_side
    grid = geom.grid_side // side
    ordinal = np.arange(n, dtype=np.int64) // geom.tokens_per_cluster
    within = np.arange(n, dtype=np.int64) % geom.tokens_per_cluster
    rows = (ordinal // grid) * side + within // side
    cols = (ordinal % grid) * side + within % side
    orders = four_scan_orders(rows, cols, pixel_slots, n + 1)
    return flat, insert, ids, orders


def _drop_plan(depth: int, rate: float, rng: np.random.Generator | None):
    """Stochastic depth with a linear ramp over blocks; None rng = eval."""
    if rng is None or rate <= 0 or depth == 0:
        return None
    plan = []
    for i in range(depth):
        p = rate * i / max(depth - 1, 1)
        if rng.random() < p:
            plan.append((True, 0.0))
        else:
            plan.append((False, 1.0 / (1.0 - p)))
    return plan


def _class_logits(encoder, class_token, head, image, geom, cfg, drop_plan=None):
    flat, insert, ids, orders = build_class_sequence(image, geom, cfg.class_token_pos)
    x = encoder.patch_embed(torch.from_numpy(flat).to(encoder.dtype))
    x = torch.cat([x[:insert], class_token[None, :], x[insert:]])
    if cfg.pos_embed:
        x = x + encoder.pos_embed(torch.from_numpy(ids))
    feats = encoder.run(x, orders=orders, drop_plan=drop_plan)
    return head(feats[insert]), x.shape[0]


def _encoder_compat_keys():
    return (
        "image_size", "patch_size", "cluster_side", "channels",
        "depth", "width", "state_dim", "mlp_ratio",
        "pos_embed", "max_positions", "sep_kind",
    )


def finetune(
    cfg: RunConfig,
    images: list[np.ndarray],
    labels: list[int],
    checkpoint_path: str | Path | None = None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> FinetuneResult:
    """Classification fine-tune; random init when checkpoint_path is None."""
    seed = cfg.seed if seed is None else seed
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geom = cfg.geometry()

    encoder = Encoder(cfg.encoder_config("four"))
    class_token = torch.nn.Parameter(torch.zeros(cfg.width))
    torch.nn.init.trunc_normal_(class_token, std=0.02)
    head = torch.nn.Linear(cfg.width, len(CLASSES))

    if checkpoint_path is not None:
        ck = load_checkpoint(checkpoint_path)
        ours = cfg.snapshot()
        for key in _encoder_compat_keys():
            if ck.config.get(key) != ours[key]:
                raise ValueError(
                    f"checkpoint {key}={ck.config.get(key)!r} does not match "
                    f"run config {ours[key]!r}"
                )
        stored = {
            n[len("encoder."):]: a
            for n, a in ck.groups["params"].items()
            if n.startswith("encoder.")
        }
        _load_group(dict(encoder.named_parameters()), stored, "encoder params")

    params = collect_params(encoder=encoder, class_token=class_token, head=head)
    moments = init_moments(params)
    ema = {n: p.detach().clone() for n, p in params.items()}
    scales = layer_scales(params.keys(), cfg.depth, cfg.layer_decay)
    no_decay = no_decay_names(params)
    hyper = OptimHyper(
        base_lr=cfg.finetune_lr(),
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        warmup_epochs=cfg.warmup_steps,
        total_epochs=cfg.steps,
    )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_held = int(round(len(images) * cfg.heldout_frac))
    held_idx = order[:n_held]
    train_idx = order[n_held:]
    if len(train_idx) == 0:
        raise ValueError("held-out split leaves no training images")

    metrics = MetricsWriter(out / "finetune_metrics.jsonl", cfg.deterministic, False)
    seq_len = geom.pixel_tokens_per_image + 1
    try:
        for step in range(cfg.steps):
            batch = rng.choice(train_idx, size=cfg.batch_size, replace=True)
            loss = 0.0
            for i in batch:
                img = augment(images[int(i)], rng) if cfg.augment else images[int(i)]
                plan = _drop_plan(cfg.depth, cfg.drop_path, rng)
                logits, seq_len = _class_logits(
                    encoder, class_token, head, img, geom, cfg, plan
                )
                target = torch.tensor([labels[int(i)]])
                loss = loss + F.cross_entropy(logits[None, :], target)
            loss = loss / cfg.batch_size
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step, f"loss={loss.item()}")
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            lr = lr_at(step, hyper)
            try:
                adamw_step(params, grads, moments, hyper, lr, no_decay, scales)
            except ValueError as e:
                raise NonFiniteLoss(step, str(e)) from e
            ema_update(ema, params, cfg.ema_decay)
            if step % cfg.log_every == 0:
                metrics.write(step, loss.item(), lr, _grad_norm(grads))
    finally:
        metrics.close()

    def accuracy(idx) -> float:
        if len(idx) == 0:
            return math.nan
        hits = 0
        with torch.no_grad():
            for i in idx:
                logits, _ = _class_logits(
                    encoder, class_token, head, images[int(i)], geom, cfg
                )
                hits += int(int(logits.argmax()) == labels[int(i)])
        return hits / len(idx)

    train_acc = accuracy(train_idx)
    held_acc = accuracy(held_idx)
    # swap in EMA weights for the second held-out pass, then restore
    backup = {n: p.detach().clone() for n, p in params.items()}
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(ema[n])
    held_acc_ema = accuracy(held_idx)
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(backup[n])
    return FinetuneResult(
        metrics_path=out / "finetune_metrics.jsonl",
        train_accuracy=train_acc,
        heldout_accuracy=held_acc,
        heldout_accuracy_ema=held_acc_ema,
        sequence_length=seq_len,
    )


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    loss_fn,
    params: dict[str, torch.Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, per element.

    The error metric is |g_a - g_n| / max(1, |g_a| + |g_n|): relative for
    O(1) gradients, absolute below that so true-zero gradients do not
    divide by zero. Run in double precision.
    """
    if not params:
        return GradCheckReport(per_param={}, tol=tol)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in params.items()
    }
    report = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            ga = analytic[name].view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                gn = (f_plus - f_minus) / (2.0 * eps)
                g = float(ga[i])
                worst = max(worst, abs(g - gn) / max(1.0, abs(g) + abs(gn)))
            report[name] = worst
    return GradCheckReport(per_param=report, tol=tol)
