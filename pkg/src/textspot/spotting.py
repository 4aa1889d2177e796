"""Turn per-primitive network outputs into labels, instances and symbols."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .model import BACKGROUND, Drawing, Primitive, Symbol, primitive_center


class UnionFind:
    """Disjoint sets over 0..n-1 with path halving and union by size."""

    def __init__(self, n: int) -> None:
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


def predict_semantics(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; numpy returns the first maximum, i.e. the smaller class id."""
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=int)
    return np.argmax(logits, axis=1)


def shift_centers(centers: np.ndarray | Drawing, offsets: np.ndarray) -> np.ndarray:
    if isinstance(centers, Drawing):
        centers = np.array([primitive_center(p) for p in centers.primitives]).reshape(-1, 2)
    return np.asarray(centers, dtype=np.float64) + np.asarray(offsets, dtype=np.float64)


def cluster_instances(
    labels: np.ndarray, shifted: np.ndarray, radius: float, thing_labels
) -> np.ndarray:
    """Single-linkage grouping of shifted centers within each thing class.

    Components are numbered by their smallest member index, so the result
    does not depend on the order primitives are visited in.
    """
    if radius <= 0:
        raise ValueError("clustering radius must be positive")
    labels = np.asarray(labels)
    shifted = np.asarray(shifted, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(labels), -1, dtype=int)
    things = set(int(t) for t in thing_labels)
    roots: dict[tuple[int, int], list[int]] = defaultdict(list)
    for cls in sorted(set(int(l) for l in labels) & things):
        idx = np.flatnonzero(labels == cls)
        pts = shifted[idx]
        close = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)) <= radius
        uf = UnionFind(len(idx))
        for a, b in zip(*np.nonzero(np.triu(close, 1))):
            uf.union(int(a), int(b))
        for j, i in enumerate(idx):
            roots[(cls, uf.find(j))].append(int(i))
    for z, members in enumerate(sorted(roots.values(), key=min)):
        out[members] = z
    return out


def assemble_symbols(labels, instances, tile: Drawing) -> list[Symbol]:
    """Thing symbols per (label, instance); one stuff symbol per stuff label present.

    Background, annotation and thing primitives without an instance are left out.
    """
    things, stuff = tile.thing_labels, tile.stuff_labels
    groups: dict[tuple[int, int], set[int]] = defaultdict(set)
    for pid, (l, z) in enumerate(zip(labels, instances)):
        l, z = int(l), int(z)
        if l in stuff:
            groups[(l, -1)].add(pid)
        elif l in things and z >= 0:
            groups[(l, z)].add(pid)
    return sorted(Symbol(l, z, frozenset(m)) for (l, z), m in groups.items())


def ground_truth_symbols(tile: Drawing) -> list[Symbol]:
    return assemble_symbols([p.label for p in tile.primitives], [p.instance for p in tile.primitives], tile)


@dataclass
class SpottingResult:
    labels: np.ndarray
    instances: np.ndarray
    shifted: np.ndarray
    symbols: list[Symbol]

    def as_drawing(self, tile: Drawing) -> Drawing:
        """``tile`` with predicted labels and instances in place of its own."""
        prims = [
            Primitive(p.id, p.geometry, int(l), int(z))
            for p, l, z in zip(tile.primitives, self.labels, self.instances)
        ]
        return tile.with_primitives(prims, prediction=True)


def spot(tile: Drawing, logits: np.ndarray, offsets: np.ndarray, radius: float = 0.02) -> SpottingResult:
    """Full inference assembly for a normalized tile whose rows match ``logits``."""
    labels = predict_semantics(logits)
    annotation = tile.annotation_label
    # Annotation nodes are known from their type; never let them claim a class.
    for i, p in enumerate(tile.primitives):
        if p.is_text:
            labels[i] = annotation
        elif labels[i] == annotation:
            labels[i] = BACKGROUND
    shifted = shift_centers(tile, offsets)
    instances = cluster_instances(labels, shifted, radius, tile.thing_labels)
    return SpottingResult(labels, instances, shifted, assemble_symbols(labels, instances, tile))
