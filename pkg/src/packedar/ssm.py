"""State-space machinery and the MambaMLP encoder stack.

Two layers live here. A small NumPy reference implements the linear
time-invariant pieces (zero-order-hold discretization, the recurrent
scan, and the equivalent convolution-kernel form) and exists mostly so
the learned model has something exact to be checked against. The torch
side implements the selective scan (per-token Δ, B, C), the MambaMLP
block, and the encoder that embeds a packed sequence and runs it in
causal one-scan mode or four-direction scan mode for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .separator import VALUE_KINDS, PackedSequence

# below this, (e^z - 1)/z switches to its series to avoid 0/0
SMALL_Z = 1e-4

SCAN_MODES = ("one", "four")


# ---------------------------------------------------------------------------
# NumPy LTI reference


@dataclass
class SSMParams:
    """One diagonal continuous-time SSM channel: h' = a*h + b*x, y = c.h."""

    a: np.ndarray      # (d,) diagonal entries
    b: np.ndarray      # (d,)
    c: np.ndarray      # (d,)
    delta: float       # step size, > 0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        d = self.a.shape[0]
        if d < 1:
            raise ValueError("state dimension must be at least 1")
        if self.b.shape[0] != d or self.c.shape[0] != d:
            raise ValueError(
                f"b/c lengths {self.b.shape[0]}/{self.c.shape[0]} do not match d={d}"
            )
        if np.ndim(self.delta) != 0:
            raise ValueError("delta must be a scalar (static parameters only)")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


def _phi(z: np.ndarray) -> np.ndarray:
    # (e^z - 1) / z, continuous through z = 0
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SMALL_Z
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(safe) / safe)


def discretize(a: np.ndarray, b: np.ndarray, delta: float):
    """Zero-order-hold: abar = exp(delta*a), bbar = (delta*a)^-1(exp(delta*a)-1)*delta*b.

    Elementwise over the diagonal. The inverse term is evaluated through a
    series near zero, so a = 0 is fine and gives bbar -> delta*b.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if np.ndim(delta) != 0 or not delta > 0:
        raise ValueError(f"delta must be a positive scalar, got {delta!r}")
    z = delta * a
    with np.errstate(over="ignore"):  # overflow surfaces as the error below
        abar = np.exp(z)
        bbar = _phi(z) * delta * b
    for name, arr in (("abar", abar), ("bbar", bbar)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise ValueError(f"non-finite {name} at channel {bad[0]}")
    return abar, bbar


def scan_discrete(abar: np.ndarray, bbar: np.ndarray, c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Left-to-right recurrence h_t = abar*h_{t-1} + bbar*x_t, y_t = c.h_t, h_0 = 0."""
    abar = np.asarray(abar, dtype=np.float64).reshape(-1)
    bbar = np.asarray(bbar, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = np.zeros_like(abar)
    y = np.empty(x.shape[0], dtype=np.float64)
    for t in range(x.shape[0]):
        h = abar * h + bbar * x[t]
        y[t] = c @ h
    return y


def scan_recurrent(params: SSMParams, x: np.ndarray) -> np.ndarray:
    abar, bbar = discretize(params.a, params.b, params.delta)
    return scan_discrete(abar, bbar, params.c, x)


def kernel_discrete(abar: np.ndarray, bbar: np.ndarray, c: np.ndarray, length: int) -> np.ndarray:
    """K = (c.bbar, c.(abar*bbar), ..., c.(abar^(L-1)*bbar)) for diagonal abar."""
    abar = np.asarray(abar, dtype=np.float64).reshape(-1)
    bbar = np.asarray(bbar, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    k = np.empty(length, dtype=np.float64)
    pw = bbar.copy()
    for i in range(length):
        k[i] = c @ pw
        pw = abar * pw
    return k


def conv_causal(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y_t = sum_{j<=t} kernel_j x_{t-j}."""
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return np.convolve(x, kernel)[: x.shape[0]]


def kernel_conv(params: SSMParams, x: np.ndarray) -> np.ndarray:
    """Convolution-kernel evaluation of the same LTI system; static params only."""
    abar, bbar = discretize(params.a, params.b, params.delta)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    kernel = kernel_discrete(abar, bbar, params.c, x.shape[0])
    return conv_causal(kernel, x)


# ---------------------------------------------------------------------------
# Torch model


@dataclass
class EncoderConfig:
    """MambaMLP encoder hyperparameters."""

    width: int                # embedding dim D
    depth: int                # block count
    state_dim: int            # SSM state size d
    mlp_ratio: int = 4
    scan_mode: str = "one"    # "one" (causal) or "four" (fine-tune)
    patch_dim: int = 48       # flattened patch length s
    max_positions: int = 512  # learned positional table size
    use_pos_embed: bool = True
    four_scan_reduce: str = "sum"  # "sum" or "mean" over the four paths
    separator_kind: str = "identity"

    def __post_init__(self):
        if self.scan_mode not in SCAN_MODES:
            raise ValueError(f"unknown scan_mode {self.scan_mode!r}")
        if self.four_scan_reduce not in ("sum", "mean"):
            raise ValueError(f"unknown four_scan_reduce {self.four_scan_reduce!r}")
        if self.separator_kind not in VALUE_KINDS:
            raise ValueError(f"unknown separator_kind {self.separator_kind!r}")
        for name in ("width", "depth", "state_dim", "mlp_ratio"):
            v = getattr(self, name)
            if v < (0 if name == "depth" else 1):
                raise ValueError(f"{name} must be positive, got {v}")


def _phi_t(z: torch.Tensor) -> torch.Tensor:
    small = z.abs() < SMALL_Z
    safe = torch.where(small, torch.ones_like(z), z)
    # both branches of where() are differentiated; keep the masked one finite
    return torch.where(small, 1.0 + z / 2.0 + z * z / 6.0, torch.expm1(safe) / safe)


class SelectiveScan(nn.Module):
    """Input-dependent SSM over D channels with shared state size d.

    Per token t: delta_t = softplus(W_d x_t + b_d) per channel, B_t and C_t
    from linear maps of x_t, then one zero-order-hold step per channel.
    Strictly causal by construction.
    """

    def __init__(self, width: int, state_dim: int):
        super().__init__()
        self.width = width
        self.state_dim = state_dim
        # stable init: a_i = -(i+1) along the state index, same for every channel
        log_neg_a = torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32))
        self.log_neg_a = nn.Parameter(log_neg_a.repeat(width, 1))
        self.delta_proj = nn.Linear(width, width)
        self.b_proj = nn.Linear(width, state_dim)
        self.c_proj = nn.Linear(width, state_dim)
        # bias so softplus lands in ~[1e-3, 1e-1] at init
        dt = torch.exp(
            torch.rand(width) * (np.log(1e-1) - np.log(1e-3)) + np.log(1e-3)
        )
        with torch.no_grad():
            self.delta_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length, width = x.shape
        if width != self.width:
            raise ValueError(f"expected width {self.width}, got {width}")
        a = -torch.exp(self.log_neg_a)                    # (D, d)
        delta = F.softplus(self.delta_proj(x))            # (L, D)
        b = self.b_proj(x)                                # (L, d)
        c = self.c_proj(x)                                # (L, d)
        h = x.new_zeros(self.width, self.state_dim)
        ys = []
        for t in range(length):
            z = delta[t][:, None] * a                     # (D, d)
            abar = torch.exp(z)
            bbar = _phi_t(z) * delta[t][:, None] * b[t][None, :]
            h = abar * h + bbar * x[t][:, None]
            ys.append(h @ c[t])
        return torch.stack(ys)


class MambaMLPBlock(nn.Module):
    """Pre-norm residual block: selective scan as token mixer, MLP as channel mixer."""

    def __init__(self, width: int, state_dim: int, mlp_ratio: int = 4):
        super().__init__()
        hidden = width * mlp_ratio
        self.norm1 = nn.LayerNorm(width)
        self.mixer = SelectiveScan(width, state_dim)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width)
        )

    def forward(
        self,
        x: torch.Tensor,
        orders: list[torch.Tensor] | None = None,
        reduce: str = "sum",
        drop: bool = False,
        keep_scale: float = 1.0,
    ) -> torch.Tensor:
        """orders: traversal permutations; None means the given order only.

        drop/keep_scale implement stochastic depth: a dropped block is the
        identity, a kept one scales its residual branches by keep_scale.
        """
        if drop:
            return x
        normed = self.norm1(x)
        if orders is None:
            mixed = self.mixer(normed)
        else:
            mixed = torch.zeros_like(normed)
            for order in orders:
                inverse = torch.empty_like(order)
                inverse[order] = torch.arange(order.shape[0], device=order.device)
                mixed = mixed + self.mixer(normed[order])[inverse]
            if reduce == "mean":
                mixed = mixed / len(orders)
        x = x + keep_scale * mixed
        x = x + keep_scale * self.mlp(self.norm2(x))
        return x


def four_scan_orders(
    rows: np.ndarray, cols: np.ndarray, pixel_slots: np.ndarray, total: int
) -> list[torch.Tensor]:
    """The four patch-grid traversals as index permutations over the sequence.

    Paths: row-major left-to-right, row-major right-to-left, column-major
    with columns left-to-right, column-major with columns right-to-left.
    The set is closed under a horizontal flip of the grid. Non-pixel tokens
    (separators, class token) keep their ordinal slot in every traversal.
    """
    w = int(cols.max()) + 1 if cols.size else 1
    orders = []
    for key_row, key_col in (
        (rows, cols),
        (rows, w - 1 - cols),
        (cols, rows),
        (w - 1 - cols, rows),
    ):
        perm = np.arange(total, dtype=np.int64)
        perm[np.sort(pixel_slots)] = pixel_slots[np.lexsort((key_col, key_row))]
        orders.append(torch.from_numpy(perm))
    return orders


def pixel_grid_coords(packed: PackedSequence):
    """Recover each pixel token's (patch row, patch col) on its image grid.

    Pixel clusters appear in row-major cluster order within an image and
    patches row-major within a cluster; the cluster grid is square.
    """
    side = packed.spec.cluster_side
    grid = isqrt(packed.num_pixel_clusters)
    if grid * grid != packed.num_pixel_clusters:
        raise ValueError(
            f"cluster count {packed.num_pixel_clusters} is not a square grid"
        )
    pixel_slots = np.flatnonzero(~packed.is_separator)
    # ordinal of each pixel cluster within its image, skipping separators
    cluster_ids = packed.cluster_index[pixel_slots]
    uniq, inv = np.unique(cluster_ids, return_inverse=True)
    slots_per_image = uniq.shape[0] // packed.num_images
    ordinal = inv % slots_per_image
    within = packed.within_cluster_index[pixel_slots]
    rows = (ordinal // grid) * side + within // side
    cols = (ordinal % grid) * side + within % side
    return rows, cols, pixel_slots


class Encoder(nn.Module):
    """Patch embedding + positional table + a stack of MambaMLP blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim, config.width)
        self.pos_embed = nn.Embedding(config.max_positions, config.width)
        self.blocks = nn.ModuleList(
            MambaMLPBlock(config.width, config.state_dim, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.final_norm = nn.LayerNorm(config.width)
        if config.separator_kind == "embeddings":
            self.sep_embedding = nn.Parameter(torch.zeros(config.width))
        else:
            self.sep_embedding = None
        self._reset()

    def _reset(self):
        nn.init.trunc_normal_(self.pos_embed.weight, std=0.02)
        if self.sep_embedding is not None:
            nn.init.trunc_normal_(self.sep_embedding, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def embed(self, packed: PackedSequence) -> torch.Tensor:
        """(T, D) token matrix: patch-embedded pixels, injected separators,
        positional encodings added to all tokens."""
        pixels = torch.from_numpy(packed.pixel_values).to(self.dtype)
        x = self.patch_embed(pixels)
        sep = torch.from_numpy(packed.is_separator)
        if sep.any():
            if packed.spec.value_kind == "embeddings":
                if self.sep_embedding is None:
                    raise ValueError("encoder was not built with a separator embedding")
                x = torch.where(sep[:, None], self.sep_embedding.to(self.dtype), x)
            else:
                template = torch.from_numpy(packed.separator_rows()).to(self.dtype)
                x = torch.where(sep[:, None], template, x)
        if self.config.use_pos_embed:
            ids = torch.from_numpy(packed.position_ids)
            if int(ids.max()) >= self.config.max_positions:
                raise ValueError(
                    f"position id {int(ids.max())} exceeds table size "
                    f"{self.config.max_positions}"
                )
            x = x + self.pos_embed(ids)
        return x

    def run(
        self,
        x: torch.Tensor,
        orders: list[torch.Tensor] | None = None,
        drop_plan: list[tuple[bool, float]] | None = None,
    ) -> torch.Tensor:
        """Run embedded tokens through the block stack."""
        for i, block in enumerate(self.blocks):
            drop, keep_scale = drop_plan[i] if drop_plan is not None else (False, 1.0)
            x = block(
                x,
                orders=orders,
                reduce=self.config.four_scan_reduce,
                drop=drop,
                keep_scale=keep_scale,
            )
        if self.config.depth > 0:
            x = self.final_norm(x)
        return x

    def encode(self, packed: PackedSequence) -> torch.Tensor:
        """Features for a packed sequence, (token count, D)."""
        orders = None
        if self.config.scan_mode == "four":
            if packed.num_images != 1:
                raise ValueError(
                    f"four-scan mode handles a single image, got {packed.num_images}"
                )
            rows, cols, slots = pixel_grid_coords(packed)
            orders = four_scan_orders(rows, cols, slots, packed.num_tokens)
        return self.run(self.embed(packed), orders=orders)
