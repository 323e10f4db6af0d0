"""Separator clusters, layout plans, and packing N images into one sequence.

A separator is a cluster-shaped block of content-independent tokens that
lives directly in embedding space (it bypasses patch embedding). Four
value variants exist: zeros, ones, a single learnable vector repeated
(``embeddings``), and ``identity`` (ones on the cluster diagonal, zeros
elsewhere). Layouts place separators before each image (SC), after (CS),
or alternating every few clusters (SCS / CSC).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patching import ClusterSequence

VALUE_KINDS = ("zeros", "ones", "embeddings", "identity")
LAYOUTS = ("sc", "cs", "scs", "csc")

# slot marker inside a layout plan; pixel clusters are their 0-based index
SEPARATOR_SLOT = None


@dataclass(frozen=True)
class SeparatorSpec:
    """Separator definition: value variant, cluster edge, and model width."""

    value_kind: str
    cluster_side: int
    embed_dim: int

    def __post_init__(self):
        if self.value_kind not in VALUE_KINDS:
            raise ValueError(f"unknown separator value kind {self.value_kind!r}")
        if self.cluster_side < 1:
            raise ValueError(f"cluster_side must be positive, got {self.cluster_side}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")


def separator_pattern(value_kind: str, cluster_side: int) -> np.ndarray:
    """Scalar 0/1 rendering per separator token, row-major within the cluster.

    The ``embeddings`` variant has no 0/1 pattern; it renders as zeros.
    """
    n = cluster_side * cluster_side
    if value_kind == "ones":
        return np.ones(n, dtype=np.float32)
    if value_kind == "identity":
        pattern = np.zeros(n, dtype=np.float32)
        for k in range(n):
            if k // cluster_side == k % cluster_side:
                pattern[k] = 1.0
        return pattern
    if value_kind in ("zeros", "embeddings"):
        return np.zeros(n, dtype=np.float32)
    raise ValueError(f"unknown separator value kind {value_kind!r}")


def make_separator(spec: SeparatorSpec, embedding: np.ndarray | None = None) -> np.ndarray:
    """Build the (cluster_side^2, embed_dim) separator token block.

    ``embeddings`` requires the single learnable vector (owned by the model
    parameter store); it is repeated for every token. The other variants
    are constant and contain only 0/1 values.
    """
    n = spec.cluster_side * spec.cluster_side
    if spec.value_kind == "embeddings":
        if embedding is None:
            raise ValueError("embeddings separator needs the learnable vector")
        vec = np.asarray(embedding, dtype=np.float32).reshape(-1)
        if vec.shape[0] != spec.embed_dim:
            raise ValueError(
                f"embedding vector has length {vec.shape[0]}, expected {spec.embed_dim}"
            )
        return np.tile(vec, (n, 1))
    pattern = separator_pattern(spec.value_kind, spec.cluster_side)
    return pattern[:, None] * np.ones((n, spec.embed_dim), dtype=np.float32)


def layout_plan(kind: str, num_clusters: int, group: int | None = None) -> list[int | None]:
    """Ordered slots for one image: SEPARATOR_SLOT or a pixel-cluster index.

    ``sc`` puts one separator before the clusters, ``cs`` one after. The
    alternating layouts ``scs``/``csc`` insert a separator every ``group``
    clusters (before each group for scs, after for csc); packing passes
    the cluster side as the group size.
    """
    if kind not in LAYOUTS:
        raise ValueError(f"unknown layout {kind!r}")
    if num_clusters < 1:
        raise ValueError(f"need at least one cluster, got {num_clusters}")
    clusters = list(range(num_clusters))
    if kind == "sc":
        return [SEPARATOR_SLOT, *clusters]
    if kind == "cs":
        return [*clusters, SEPARATOR_SLOT]
    if group is None:
        raise ValueError(f"layout {kind!r} needs a group size")
    if group < 1 or num_clusters % group != 0:
        raise ValueError(
            f"layout {kind!r} needs cluster count {num_clusters} divisible by group {group}"
        )
    plan: list[int | None] = []
    for start in range(0, num_clusters, group):
        block = clusters[start : start + group]
        if kind == "scs":
            plan.extend([SEPARATOR_SLOT, *block])
        else:
            plan.extend([*block, SEPARATOR_SLOT])
    return plan


@dataclass
class PackedSequence:
    """N images packed into one token stream with per-token metadata.

    Pixel tokens carry their raw patch vector (rows of ``pixel_values``;
    separator rows are zero) and pass through patch embedding. Separator
    tokens are embedding-space vectors taken from ``separator_template``
    and bypass patch embedding. ``cluster_index`` counts separator and
    pixel clusters uniformly over the whole sequence.
    """

    spec: SeparatorSpec
    layout: str
    num_images: int
    num_pixel_clusters: int
    patch_dim: int
    pixel_values: np.ndarray        # (T, s) float32, zero rows at separators
    separator_template: np.ndarray  # (cluster_side^2, D) as built at pack time
    image_index: np.ndarray         # (T,) int64
    cluster_index: np.ndarray       # (T,) int64
    within_cluster_index: np.ndarray  # (T,) int64
    is_separator: np.ndarray        # (T,) bool
    position_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def num_tokens(self) -> int:
        return self.pixel_values.shape[0]

    @property
    def tokens_per_cluster(self) -> int:
        return self.spec.cluster_side**2

    @property
    def num_clusters(self) -> int:
        return int(self.cluster_index[-1]) + 1

    def separator_rows(self) -> np.ndarray:
        """(T, D) matrix holding the separator vector at separator rows, zero elsewhere."""
        rows = np.zeros((self.num_tokens, self.spec.embed_dim), dtype=np.float32)
        sep = self.is_separator
        rows[sep] = self.separator_template[self.within_cluster_index[sep]]
        return rows

    def separator_token_patterns(self) -> np.ndarray:
        """(T,) scalar 0/1 render per token; zero at pixel rows."""
        pattern = separator_pattern(self.spec.value_kind, self.spec.cluster_side)
        out = np.zeros(self.num_tokens, dtype=np.float32)
        sep = self.is_separator
        out[sep] = pattern[self.within_cluster_index[sep]]
        return out


def pack(
    images: list[ClusterSequence],
    spec: SeparatorSpec,
    layout: str = "sc",
    embedding: np.ndarray | None = None,
    group: int | None = None,
    per_image_positions: bool = True,
    max_images: int = 16,
) -> PackedSequence:
    """Concatenate per-image layouts into one packed token sequence.

    All images must share geometry and match spec.cluster_side. Global
    cluster indices run 0..(slots*N - 1); all tokens of one cluster are
    contiguous.
    """
    n = len(images)
    if not 1 <= n <= max_images:
        raise ValueError(f"need 1..{max_images} images, got {n}")
    first = images[0]
    for i, img in enumerate(images[1:], start=1):
        if (
            img.clusters.shape != first.clusters.shape
            or img.cluster_side != first.cluster_side
            or img.grid_h != first.grid_h
            or img.grid_w != first.grid_w
        ):
            raise ValueError(f"image {i} geometry differs from image 0")
    if first.cluster_side != spec.cluster_side:
        raise ValueError(
            f"images have cluster_side {first.cluster_side}, "
            f"separator spec has {spec.cluster_side}"
        )

    template = make_separator(spec, embedding)
    if group is None:
        group = spec.cluster_side
    plan = layout_plan(layout, first.num_clusters, group)
    per_cluster = spec.cluster_side**2
    s = first.patch_dim

    tokens_per_image = len(plan) * per_cluster
    total = n * tokens_per_image
    pixel_values = np.zeros((total, s), dtype=np.float32)
    image_index = np.empty(total, dtype=np.int64)
    cluster_index = np.empty(total, dtype=np.int64)
    within = np.tile(np.arange(per_cluster, dtype=np.int64), n * len(plan))
    is_sep = np.empty(total, dtype=bool)

    t = 0
    g = 0
    for i, img in enumerate(images):
        for slot in plan:
            sl = slice(t, t + per_cluster)
            image_index[sl] = i
            cluster_index[sl] = g
            if slot is SEPARATOR_SLOT:
                is_sep[sl] = True
            else:
                is_sep[sl] = False
                pixel_values[sl] = img.clusters[slot]
            t += per_cluster
            g += 1

    packed = PackedSequence(
        spec=spec,
        layout=layout,
        num_images=n,
        num_pixel_clusters=first.num_clusters,
        patch_dim=s,
        pixel_values=pixel_values,
        separator_template=template,
        image_index=image_index,
        cluster_index=cluster_index,
        within_cluster_index=within,
        is_separator=is_sep,
    )
    packed.position_ids = position_ids(packed, per_image=per_image_positions)
    return packed


def position_ids(packed: PackedSequence, per_image: bool = True) -> np.ndarray:
    """Assign position ids: one shared id per separator, consecutive ids per
    pixel token, restarting at each image when ``per_image`` is set."""
    ids = np.empty(packed.num_tokens, dtype=np.int64)
    next_id = 0
    current_image = -1
    current_cluster = -1
    sep_id = -1
    for t in range(packed.num_tokens):
        if per_image and packed.image_index[t] != current_image:
            current_image = int(packed.image_index[t])
            next_id = 0
            current_cluster = -1
        if packed.is_separator[t]:
            if packed.cluster_index[t] != current_cluster:
                current_cluster = int(packed.cluster_index[t])
                sep_id = next_id
                next_id += 1
            ids[t] = sep_id
        else:
            current_cluster = int(packed.cluster_index[t])
            ids[t] = next_id
            next_id += 1
    return ids


_DUMP_MAGIC = b"PKSQ"
_DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIIIIIBBxxII")


def save_packed(path: str | Path, packed: PackedSequence) -> None:
    """Serialize a PackedSequence to the binary dump format.

    Header: magic, version, N, L, cluster_side, embed_dim, layout code,
    value-kind code, patch_dim, token count; then the separator template
    and one fixed-width record per token.
    """
    with open(path, "wb") as f:
        f.write(
            _DUMP_HEADER.pack(
                _DUMP_MAGIC,
                _DUMP_VERSION,
                packed.num_images,
                packed.num_pixel_clusters,
                packed.spec.cluster_side,
                packed.spec.embed_dim,
                LAYOUTS.index(packed.layout),
                VALUE_KINDS.index(packed.spec.value_kind),
                packed.patch_dim,
                packed.num_tokens,
            )
        )
        f.write(packed.separator_template.astype("<f4").tobytes())
        meta = np.stack(
            [
                packed.image_index,
                packed.cluster_index,
                packed.within_cluster_index,
                packed.is_separator.astype(np.int64),
                packed.position_ids,
            ],
            axis=1,
        )
        f.write(meta.astype("<i8").tobytes())
        f.write(packed.pixel_values.astype("<f4").tobytes())


def load_packed(path: str | Path) -> PackedSequence:
    """Read a PackedSequence dump written by save_packed."""
    data = Path(path).read_bytes()
    if len(data) < _DUMP_HEADER.size:
        raise ValueError(f"{path}: truncated dump header")
    magic, version, n, l, side, dim, layout_code, kind_code, s, total = (
        _DUMP_HEADER.unpack_from(data)
    )
    if magic != _DUMP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    pos = _DUMP_HEADER.size
    per_cluster = side * side
    template = (
        np.frombuffer(data, dtype="<f4", count=per_cluster * dim, offset=pos)
        .reshape(per_cluster, dim)
        .copy()
    )
    pos += per_cluster * dim * 4
    meta = (
        np.frombuffer(data, dtype="<i8", count=total * 5, offset=pos)
        .reshape(total, 5)
        .copy()
    )
    pos += total * 5 * 8
    pixel_values = (
        np.frombuffer(data, dtype="<f4", count=total * s, offset=pos)
        .reshape(total, s)
        .copy()
    )
    spec = SeparatorSpec(VALUE_KINDS[kind_code], side, dim)
    return PackedSequence(
        spec=spec,
        layout=LAYOUTS[layout_code],
        num_images=n,
        num_pixel_clusters=l,
        patch_dim=s,
        pixel_values=pixel_values,
        separator_template=template,
        image_index=meta[:, 0],
        cluster_index=meta[:, 1],
        within_cluster_index=meta[:, 2],
        is_separator=meta[:, 3].astype(bool),
        position_ids=meta[:, 4],
    )
