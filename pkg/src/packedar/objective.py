"""Next-cluster prediction targets and the pretraining loss.

Every token at (cluster g, slot j) predicts the token at (cluster g+1,
slot j); the final cluster predicts a virtual trailing separator. Pixel
targets are normalized per patch (mean/variance, as in masked-autoencoder
practice); separator targets are the raw 0/1 token pattern broadcast to
patch length and are deliberately not normalized, since constant patches
make the statistics degenerate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .separator import PackedSequence, separator_pattern

NORM_EPS = 1e-6


def normalize_target(patch: np.ndarray) -> np.ndarray:
    """(patch - mean) / sqrt(var + eps) over the last axis, population variance."""
    patch = np.asarray(patch, dtype=np.float64)
    mean = patch.mean(axis=-1, keepdims=True)
    var = patch.var(axis=-1, keepdims=True)
    return ((patch - mean) / np.sqrt(var + NORM_EPS)).astype(np.float32)


@dataclass
class TargetPlan:
    """Per-token targets over a packed sequence.

    targets[t] is what the prediction at token t is scored against;
    is_separator_target[t] marks positions whose target is a separator
    pattern (the exclude-separators loss flag keys off this).
    successor_cluster[t] equals num_clusters for the virtual trailing
    separator.
    """

    targets: np.ndarray             # (T, s) float32
    is_separator_target: np.ndarray  # (T,) bool
    successor_cluster: np.ndarray   # (T,) int64


def build_targets(packed: PackedSequence) -> TargetPlan:
    """Targets for every token: the same slot of the next cluster.

    Clusters all hold cluster_side^2 contiguous tokens, so the successor
    slot of token t is simply t + cluster_side^2. Raw patch content is
    taken from the packed pixel rows and normalized; separator successors
    (and the virtual one past the end) use the 0/1 pattern.
    """
    per_cluster = packed.tokens_per_cluster
    total = packed.num_tokens
    s = packed.patch_dim
    pattern = separator_pattern(packed.spec.value_kind, packed.spec.cluster_side)

    targets = np.empty((total, s), dtype=np.float32)
    is_sep_target = np.empty(total, dtype=bool)
    successor = packed.cluster_index + 1

    normalized = normalize_target(packed.pixel_values)
    for t in range(total):
        u = t + per_cluster
        if u >= total:
            targets[t] = pattern[packed.within_cluster_index[t]]
            is_sep_target[t] = True
        elif packed.is_separator[u]:
            targets[t] = pattern[packed.within_cluster_index[u]]
            is_sep_target[t] = True
        else:
            targets[t] = normalized[u]
            is_sep_target[t] = False
    return TargetPlan(
        targets=targets,
        is_separator_target=is_sep_target,
        successor_cluster=successor,
    )


def next_cluster_loss(
    predictions: torch.Tensor,
    plan: TargetPlan,
    include_separator_targets: bool = True,
) -> torch.Tensor:
    """Mean squared error over all scored token positions and components."""
    if tuple(predictions.shape) != plan.targets.shape:
        raise ValueError(
            f"predictions {tuple(predictions.shape)} do not match "
            f"targets {plan.targets.shape}"
        )
    targets = torch.from_numpy(plan.targets).to(predictions.dtype)
    err = (predictions - targets) ** 2
    if include_separator_targets:
        return err.mean()
    keep = torch.from_numpy(~plan.is_separator_target)
    if not keep.any():
        raise ValueError("no pixel-target positions left to score")
    return err[keep].mean()
