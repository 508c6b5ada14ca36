"""Point groups, group feature tokens and centre position embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import PointCloud


@dataclass
class TokenBatch:
    tokens: T.Tensor        # [g, c]
    positions: T.Tensor     # [g, c]
    groups: np.ndarray      # [g, k] point indices
    centers: np.ndarray     # [g, 3]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


def knn_group(cloud, center_indices, k: int) -> np.ndarray:
    """The ``k`` nearest points to each centre, nearest first, ties by index.

    A centre is always the first member of its own group.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"group size k={k} must be in [1, {n}]")
    d = ((pts[None, :, :] - pts[center_indices][:, None, :]) ** 2).sum(axis=2)
    d[np.arange(len(center_indices)), center_indices] = -1.0
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def relative_groups(points: np.ndarray, groups: np.ndarray, center_indices) -> np.ndarray:
    """Centre-relative group coordinates scaled by each group's max radius -> [g, k, 3]."""
    rel = points[groups] - points[np.asarray(center_indices)][:, None, :]
    scale = np.sqrt((rel ** 2).sum(axis=2)).max(axis=1)
    return rel / np.maximum(scale, 1e-12)[:, None, None]


def encode_groups(rel: np.ndarray, params: dict) -> T.Tensor:
    """Shared per-point MLP (3 -> c/2 -> c), max-pool over each group, then c -> c."""
    rel = np.asarray(rel, dtype=np.float64)
    if rel.ndim != 3 or rel.shape[1] == 0:
        raise ValueError(f"expected non-empty groups shaped [g, k, 3], got {rel.shape}")
    h = T.gelu(T.linear(T.Tensor(rel), params["enc.w1"], params["enc.b1"]))
    h = T.linear(h, params["enc.w2"], params["enc.b2"])
    return T.linear(T.max_pool(h, axis=1), params["enc.w3"], params["enc.b3"])


def position_embed(centers: np.ndarray, params: dict) -> T.Tensor:
    """Two-layer GELU MLP from centre coordinates to c channels."""
    h = T.gelu(T.linear(T.Tensor(centers), params["pos.w1"], params["pos.b1"]))
    return T.linear(h, params["pos.w2"], params["pos.b2"])


def tokenizer_shapes(channels: int) -> dict[str, tuple]:
    half = max(channels // 2, 1)
    return {
        "enc.w1": (3, half), "enc.b1": (half,),
        "enc.w2": (half, channels), "enc.b2": (channels,),
        "enc.w3": (channels, channels), "enc.b3": (channels,),
        "pos.w1": (3, channels), "pos.b1": (channels,),
        "pos.w2": (channels, channels), "pos.b2": (channels,),
    }


def tokenize(points: np.ndarray, center_indices, k: int, params: dict) -> TokenBatch:
    groups = knn_group(points, center_indices, k)
    rel = relative_groups(points, groups, center_indices)
    centers = points[np.asarray(center_indices)]
    return TokenBatch(encode_groups(rel, params), position_embed(centers, params), groups, centers)
