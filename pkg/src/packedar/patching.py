"""Image -> patches -> clusters, in cluster-priority order.

Patches are non-overlapping pixel blocks flattened in (row, col, channel)
order. Spatially adjacent patches are grouped into square clusters; the
token sequence enumerates clusters row-major over the cluster grid and
patches row-major inside each cluster. The permutation from sequence
position back to row-major patch index depends only on the grid shape,
never on pixel content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Geometry:
    """Shape parameters shared by every image in one run."""

    image_size: int
    patch_size: int
    cluster_side: int
    channels: int = 3

    def __post_init__(self):
        if self.image_size % (self.patch_size * self.cluster_side) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size*cluster_side = {self.patch_size * self.cluster_side}"
            )

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_clusters(self) -> int:
        return (self.grid_side // self.cluster_side) ** 2

    @property
    def tokens_per_cluster(self) -> int:
        return self.cluster_side * self.cluster_side

    @property
    def pixel_tokens_per_image(self) -> int:
        return self.grid_side * self.grid_side


@dataclass
class PatchGrid:
    """Row-major array of flattened patch vectors.

    patches has shape (grid_h * grid_w, s) where s = patch_size^2 * channels.
    """

    patches: np.ndarray
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class ClusterSequence:
    """One image as an ordered list of clusters of patch tokens.

    clusters has shape (L, cluster_side^2, s). order maps the flattened
    (cluster index, within-cluster index) sequence position to the
    original row-major patch index and is a bijection onto [0, n).
    """

    clusters: np.ndarray
    cluster_side: int
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int
    order: np.ndarray

    @property
    def num_clusters(self) -> int:
        return self.clusters.shape[0]

    @property
    def tokens_per_cluster(self) -> int:
        return self.clusters.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.clusters.shape[2]


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split an (H, W, C) image into non-overlapping flattened patches.

    Patches are enumerated row-major over the patch grid; each patch vector
    is the pixel block flattened in (row, col, channel) order.

    Raises:
        ValueError: if H or W is not divisible by patch_size, naming the
            offending axis.
    """
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) array, got shape {image.shape}")
    if patch_size < 1:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    h, w, c = image.shape
    if h % patch_size != 0:
        raise ValueError(f"height {h} not divisible by patch_size {patch_size}")
    if w % patch_size != 0:
        raise ValueError(f"width {w} not divisible by patch_size {patch_size}")

    grid_h, grid_w = h // patch_size, w // patch_size
    patches = (
        image.reshape(grid_h, patch_size, grid_w, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid_h * grid_w, patch_size * patch_size * c)
    )
    return PatchGrid(
        patches=np.ascontiguousarray(patches),
        grid_h=grid_h,
        grid_w=grid_w,
        patch_size=patch_size,
        channels=c,
    )


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Inverse of patchify; returns the (H, W, C) pixel array."""
    p, c = grid.patch_size, grid.channels
    return (
        grid.patches.reshape(grid.grid_h, grid.grid_w, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.grid_h * p, grid.grid_w * p, c)
    )


def cluster_priority_permutation(grid_h: int, grid_w: int, cluster_side: int) -> np.ndarray:
    """Sequence position -> row-major patch index, as a function of shape only.

    Position k = (cluster index, within-cluster index) visits clusters
    row-major over the cluster grid and patches row-major inside each
    cluster's spatial extent.
    """
    if grid_h % cluster_side != 0 or grid_w % cluster_side != 0:
        raise ValueError(
            f"grid {grid_h}x{grid_w} not divisible by cluster_side {cluster_side}"
        )
    rows = np.arange(grid_h).reshape(grid_h // cluster_side, cluster_side)
    cols = np.arange(grid_w).reshape(grid_w // cluster_side, cluster_side)
    # index[cr, cc, ir, ic] = row-major patch id of inner cell (ir, ic) of cluster (cr, cc)
    index = rows[:, None, :, None] * grid_w + cols[None, :, None, :]
    return index.reshape(-1).astype(np.int64)


def clusterize(grid: PatchGrid, cluster_side: int) -> ClusterSequence:
    """Group spatially adjacent patches into square clusters.

    Raises:
        ValueError: if the patch grid is not divisible by cluster_side.
    """
    if cluster_side < 1:
        raise ValueError(f"cluster_side must be positive, got {cluster_side}")
    order = cluster_priority_permutation(grid.grid_h, grid.grid_w, cluster_side)
    tokens = grid.patches[order]
    per_cluster = cluster_side * cluster_side
    num_clusters = tokens.shape[0] // per_cluster
    return ClusterSequence(
        clusters=tokens.reshape(num_clusters, per_cluster, grid.patch_dim),
        cluster_side=cluster_side,
        grid_h=grid.grid_h,
        grid_w=grid.grid_w,
        patch_size=grid.patch_size,
        channels=grid.channels,
        order=order,
    )


def unclusterize(seq: ClusterSequence) -> PatchGrid:
    """Undo the cluster-priority permutation, restoring row-major patches."""
    flat = seq.clusters.reshape(-1, seq.patch_dim)
    patches = np.empty_like(flat)
    patches[seq.order] = flat
    return PatchGrid(
        patches=patches,
        grid_h=seq.grid_h,
        grid_w=seq.grid_w,
        patch_size=seq.patch_size,
        channels=seq.channels,
    )


def image_to_clusters(image: np.ndarray, geometry: Geometry) -> ClusterSequence:
    """patchify + clusterize with geometry validation."""
    h, w, c = image.shape
    if h != geometry.image_size or w != geometry.image_size:
        raise ValueError(
            f"image is {h}x{w}, configured size is {geometry.image_size}"
        )
    if c != geometry.channels:
        raise ValueError(f"image has {c} channels, configured {geometry.channels}")
    return clusterize(patchify(image, geometry.patch_size), geometry.cluster_side)
