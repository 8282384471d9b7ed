"""Actor relation graphs and graph-convolution group embeddings.

Edges come from embedded appearance similarity: two learned linear maps
embed the actor features, their scaled dot product gives raw affinities,
pairs farther apart than a distance threshold are masked out (the
diagonal never is), and each row is softmax-normalized.  A row-stochastic
graph convolution then refines the actor features; the group embedding of
a clip is the actor-mean of input plus refined features.

All clips of a video are processed in one block-diagonal pass so a
training step stays a handful of matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "MASKED",
    "RelationGraph",
    "distance_mask",
    "relation_matrix",
    "build_relation_graph",
    "gcn_layer",
    "group_embedding",
    "group_embedding_sequence",
]

# Large finite stand-in for -inf: exp underflows to exactly zero, while
# every intermediate matrix stays finite.
MASKED = -1e30

_ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "identity": lambda node: node,
}


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; "
                         f"choose from {sorted(_ACTIVATIONS)}") from None


@dataclass
class RelationGraph:
    """Row-stochastic adjacency over actors plus the node features it
    was built from."""

    adjacency: ad.Node
    node_features: ad.Node

    @property
    def adjacency_values(self) -> np.ndarray:
        return self.adjacency.value


def distance_mask(positions, threshold: float) -> np.ndarray:
    """0 where actors are within ``threshold`` (always on the diagonal),
    a huge negative value elsewhere."""
    if threshold <= 0.0:
        raise ValueError("distance threshold must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    delta = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((delta ** 2).sum(axis=2))
    mask = np.where(dist > threshold, MASKED, 0.0)
    np.fill_diagonal(mask, 0.0)
    return mask


def _block_distance_mask(position_blocks, threshold: float) -> np.ndarray:
    """Block-diagonal mask for all clips of a video; cross-clip entries
    are always masked."""
    sizes = [len(p) for p in position_blocks]
    total = sum(sizes)
    mask = np.full((total, total), MASKED)
    at = 0
    for positions in position_blocks:
        n = len(positions)
        mask[at:at + n, at:at + n] = distance_mask(positions, threshold)
        at += n
    return mask


def relation_matrix(features, mask: np.ndarray, w_src, w_dst) -> ad.Node:
    """Row-softmax of masked, scaled embedded-dot-product affinities."""
    features = features if isinstance(features, ad.Node) else ad.constant(features)
    embed_dim = w_src.shape[1]
    src = ad.matmul(features, w_src)
    dst = ad.matmul(features, w_dst)
    logits = ad.scale(ad.matmul(src, ad.transpose(dst)), 1.0 / np.sqrt(embed_dim))
    return ad.softmax_rows(ad.add(logits, ad.constant(mask)))


def build_relation_graph(frame, threshold: float, w_src, w_dst) -> RelationGraph:
    """Relation graph for one clip's actor frame."""
    features = ad.constant(frame.features)
    mask = distance_mask(frame.positions, threshold)
    return RelationGraph(relation_matrix(features, mask, w_src, w_dst), features)


def gcn_layer(h, a, w, activation: str = "relu") -> ad.Node:
    """One graph-convolution layer: activation(A @ H @ W)."""
    act = _activation(activation)
    h = h if isinstance(h, ad.Node) else ad.constant(h)
    a = a if isinstance(a, ad.Node) else ad.constant(a)
    w = w if isinstance(w, ad.Node) else ad.constant(w)
    if a.shape[1] != h.shape[0] or h.shape[1] != w.shape[0]:
        raise ValueError(f"gcn_layer shape mismatch: A {a.shape}, H {h.shape}, "
                         f"W {w.shape}")
    return act(ad.matmul(ad.matmul(a, h), w))


def group_embedding_sequence(frames, threshold: float, w_src, w_dst,
                             gcn_weights, activation: str = "relu") -> ad.Node:
    """Group embeddings for all clips of a video, stacked as T x d.

    All actor frames are concatenated and handled through one
    block-diagonal relation matrix, then mean-pooled per clip over the
    sum of input and convolved features.
    """
    if not frames:
        raise ValueError("need at least one actor frame")
    feats = np.concatenate([f.features for f in frames], axis=0)
    mask = _block_distance_mask([f.positions for f in frames], threshold)
    all_features = ad.constant(feats)
    adjacency = relation_matrix(all_features, mask, w_src, w_dst)

    refined = all_features
    for w in gcn_weights:
        refined = gcn_layer(refined, adjacency, w, activation)

    # Per-clip mean pooling as one constant matrix product.
    sizes = [f.actor_count for f in frames]
    pool = np.zeros((len(frames), sum(sizes)))
    at = 0
    for row, n in enumerate(sizes):
        pool[row, at:at + n] = 1.0 / n
        at += n
    return ad.matmul(ad.constant(pool), ad.add(all_features, refined))


def group_embedding(frame, threshold: float, w_src, w_dst, gcn_weights,
                    activation: str = "relu") -> ad.Node:
    """Group embedding of a single clip (1 x d)."""
    return group_embedding_sequence([frame], threshold, w_src, w_dst,
                                    gcn_weights, activation)
