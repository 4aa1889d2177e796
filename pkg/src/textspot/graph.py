"""k-nearest-neighbor primitive graph and the 8-channel type-aware edge tensor."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Drawing, Primitive, primitive_center, primitive_length, primitive_orientation

EDGE_CHANNELS = 8

GEO_GEO, GEO_TEXT, TEXT_TEXT = 0, 1, 2


class GraphTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborTable:
    """Neighbors of every node, nearest first.

    ``index`` has ``k`` columns; slots beyond ``min(k, N-1)`` are padding,
    flagged False in ``mask`` and pointing at the node itself.
    """

    index: np.ndarray  # (N, k) int
    mask: np.ndarray  # (N, k) bool
    distance: np.ndarray  # (N, k) float, inf on padding

    @property
    def k(self) -> int:
        return self.index.shape[1]

    def __len__(self) -> int:
        return self.index.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j, m in zip(self.index[i], self.mask[i]) if m]


def centers_of(tile: Drawing) -> np.ndarray:
    return np.array([primitive_center(p) for p in tile.primitives], dtype=np.float64).reshape(-1, 2)


def knn_neighbors(tile: Drawing, k: int = 16) -> NeighborTable:
    """Euclidean kNN over primitive centers, ties broken by smaller id."""
    n = len(tile.primitives)
    if n < 2:
        raise GraphTooSmallError(f"need at least 2 primitives for a graph, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    c = centers_of(tile)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    # Stable sort keeps ascending id order among equal distances.
    order = np.argsort(dist, axis=1, kind="stable")
    k_eff = min(k, n - 1)
    index = np.repeat(np.arange(n)[:, None], k, axis=1)
    mask = np.zeros((n, k), dtype=bool)
    distance = np.full((n, k), np.inf)
    index[:, :k_eff] = order[:, :k_eff]
    mask[:, :k_eff] = True
    distance[:, :k_eff] = np.take_along_axis(dist, order[:, :k_eff], axis=1)
    return NeighborTable(index, mask, distance)


def pair_type_indicator(a: Primitive, b: Primitive) -> int:
    return int(a.is_text) + int(b.is_text)


def _orientation_gap(alpha_a: float, alpha_b: float) -> float:
    """Undirected orientation difference folded to [0, pi/2], scaled to [0, 1]."""
    d = abs(alpha_a - alpha_b) % math.pi
    return min(d, math.pi - d) / (math.pi / 2)


def geometric_edge_vector(a: Primitive, b: Primitive, tile_size: float = 14.0) -> np.ndarray:
    """[dx, dy, rho, sin(theta), cos(theta), orientation gap, log-length ratio].

    Positions are taken as given (normalized tile units); lengths are
    rescaled by ``tile_size`` to meters before the log so the last channel
    matches the metric's ln(1 + L) weighting.
    """
    (ax, ay), (bx, by) = primitive_center(a), primitive_center(b)
    dx, dy = bx - ax, by - ay
    rho = math.hypot(dx, dy)
    theta = math.atan2(dy, dx) if rho > 0 else 0.0
    gap = _orientation_gap(primitive_orientation(a), primitive_orientation(b))
    lam = math.log1p(primitive_length(b) * tile_size) - math.log1p(primitive_length(a) * tile_size)
    return np.array([dx, dy, rho, math.sin(theta), math.cos(theta), gap, lam])


@dataclass(frozen=True)
class EdgeTensor:
    values: np.ndarray  # (N, k, 8)
    mask: np.ndarray  # (N, k) bool, False on padded slots

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def build_edge_tensor(tile: Drawing, nbrs: NeighborTable, tile_size: float | None = None) -> EdgeTensor:
    """Vectorized ``(pair type || geometric vector)`` for every (i, N(i)[j]).

    Computes the same quantities as :func:`pair_type_indicator` and
    :func:`geometric_edge_vector`; padded rows are zero.
    """
    if tile_size is None:
        tile_size = float(tile.meta.get("tile_size", 14.0))
    prims = tile.primitives
    c = centers_of(tile)
    is_text = np.array([p.is_text for p in prims], dtype=np.float64)
    orient = np.array([primitive_orientation(p) for p in prims])
    loglen = np.log1p(np.array([primitive_length(p) for p in prims]) * tile_size)

    idx = nbrs.index
    d = c[idx] - c[:, None, :]
    rho = np.sqrt((d**2).sum(-1))
    theta = np.where(rho > 0, np.arctan2(d[..., 1], d[..., 0]), 0.0)
    gap = np.abs(orient[idx] - orient[:, None]) % math.pi
    gap = np.minimum(gap, math.pi - gap) / (math.pi / 2)
    values = np.stack(
        [
            is_text[:, None] + is_text[idx],
            d[..., 0],
            d[..., 1],
            rho,
            np.sin(theta),
            np.cos(theta),
            gap,
            loglen[idx] - loglen[:, None],
        ],
        axis=-1,
    )
    values[~nbrs.mask] = 0.0
    return EdgeTensor(values, nbrs.mask.copy())


def save_edge_tensor(e: EdgeTensor, path: str | Path) -> None:
    n, k, c = e.values.shape
    payload = np.ascontiguousarray(e.values, dtype="<f4").tobytes()
    Path(path).write_bytes(struct.pack("<3I", n, k, c) + payload)


def load_edge_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, k, c = struct.unpack_from("<3I", raw)
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, k, c).astype(np.float64)
