"""Cluster-level autoregressive pretraining over packed image sequences.

Images are split into patches, patches are grouped into square clusters,
and several images are packed into one long token sequence delimited by
separator clusters. A causal state-space encoder plus a lightweight
cross-attention decoder are trained to predict each cluster from the
sequence prefix.
"""

__version__ = "0.1.0"
