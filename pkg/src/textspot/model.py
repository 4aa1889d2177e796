"""Domain types for vector CAD drawings: primitives, symbols and drawings.

Coordinates are meters unless a drawing has been normalized to its tile
(``meta["normalized"]``), in which case they live in the unit square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

BACKGROUND = 0
BACKGROUND_NAME = "background"
ANNOTATION_NAME = "annotation"


class InvalidGeometryError(ValueError):
    pass


class InvalidSymbolError(ValueError):
    pass


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class Line:
    x1: float
    y1: float
    x2: float
    y2: float

    kind = "line"

    def problem(self) -> str | None:
        if not _finite(self.x1, self.y1, self.x2, self.y2):
            return "non-finite coordinate"
        return None


@dataclass(frozen=True)
class Arc:
    cx: float
    cy: float
    r: float
    start: float
    sweep: float

    kind = "arc"

    def problem(self) -> str | None:
        if not _finite(self.cx, self.cy, self.r, self.start, self.sweep):
            return "non-finite coordinate"
        if self.r <= 0:
            return "arc radius must be positive"
        if not 0 < self.sweep <= 2 * math.pi:
            return "arc sweep must lie in (0, 2*pi]"
        return None


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    kind = "circle"

    def problem(self) -> str | None:
        if not _finite(self.cx, self.cy, self.r):
            return "non-finite coordinate"
        if self.r <= 0:
            return "circle radius must be positive"
        return None


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    rotation: float = 0.0

    kind = "ellipse"

    def problem(self) -> str | None:
        if not _finite(self.cx, self.cy, self.a, self.b, self.rotation):
            return "non-finite coordinate"
        if not self.a >= self.b > 0:
            return "ellipse semi-axes must satisfy a >= b > 0"
        return None


@dataclass(frozen=True)
class Text:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    content: str = ""
    rotation: float = 0.0

    kind = "text"

    def problem(self) -> str | None:
        if not _finite(self.xmin, self.ymin, self.xmax, self.ymax, self.rotation):
            return "non-finite coordinate"
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            return "degenerate text box"
        return None


Geometry = Union[Line, Arc, Circle, Ellipse, Text]
GEOMETRY_KINDS: dict[str, type] = {g.kind: g for g in (Line, Arc, Circle, Ellipse, Text)}


@dataclass(frozen=True)
class Primitive:
    id: int
    geometry: Geometry
    label: int = BACKGROUND
    instance: int = -1

    @property
    def kind(self) -> str:
        return self.geometry.kind

    @property
    def is_text(self) -> bool:
        return isinstance(self.geometry, Text)


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    kind: str  # "thing" | "stuff"


@dataclass(frozen=True, order=True)
class Symbol:
    label: int
    instance: int
    members: frozenset[int] = field(compare=False)

    def __post_init__(self) -> None:
        if not self.members:
            raise InvalidSymbolError(f"symbol ({self.label}, {self.instance}) has no members")


@dataclass(frozen=True)
class Drawing:
    """A set of primitives plus the class table that gives their labels meaning."""

    primitives: tuple[Primitive, ...]
    classes: tuple[ClassInfo, ...]
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self) -> None:
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "classes", tuple(sorted(self.classes, key=lambda c: c.id)))

    def __len__(self) -> int:
        return len(self.primitives)

    @property
    def annotation_label(self) -> int:
        """Reserved pseudo-class for text annotations, one past the last category."""
        return max((c.id for c in self.classes), default=0) + 1

    @property
    def num_classes(self) -> int:
        """Size of the label space: background + categories + annotation."""
        return self.annotation_label + 1

    @property
    def thing_labels(self) -> frozenset[int]:
        return frozenset(c.id for c in self.classes if c.kind == "thing")

    @property
    def stuff_labels(self) -> frozenset[int]:
        return frozenset(c.id for c in self.classes if c.kind == "stuff")

    def class_name(self, label: int) -> str:
        if label == BACKGROUND:
            return BACKGROUND_NAME
        if label == self.annotation_label:
            return ANNOTATION_NAME
        for c in self.classes:
            if c.id == label:
                return c.name
        raise KeyError(label)

    def label_of(self, name: str) -> int:
        if name == BACKGROUND_NAME:
            return BACKGROUND
        if name == ANNOTATION_NAME:
            return self.annotation_label
        for c in self.classes:
            if c.name == name:
                return c.id
        raise KeyError(name)

    def with_primitives(self, primitives: Iterable[Primitive], **meta_updates) -> "Drawing":
        meta = dict(self.meta)
        meta.update(meta_updates)
        return replace(self, primitives=tuple(primitives), meta=meta)

    def extent(self) -> tuple[float, float, float, float]:
        """World bounding box (xmin, ymin, xmax, ymax) over all geometry."""
        if not self.primitives:
            return (0.0, 0.0, 0.0, 0.0)
        boxes = [bounding_box(p) for p in self.primitives]
        return (
            min(b[0] for b in boxes),
            min(b[1] for b in boxes),
            max(b[2] for b in boxes),
            max(b[3] for b in boxes),
        )


def _check(p: Primitive) -> None:
    reason = p.geometry.problem()
    if reason:
        raise InvalidGeometryError(f"primitive {p.id}: {reason}")


def primitive_length(p: Primitive) -> float:
    """Arc length of a primitive; text boxes count their diagonal."""
    _check(p)
    g = p.geometry
    if isinstance(g, Line):
        return math.hypot(g.x2 - g.x1, g.y2 - g.y1)
    if isinstance(g, Arc):
        return g.r * abs(g.sweep)
    if isinstance(g, Circle):
        return 2 * math.pi * g.r
    if isinstance(g, Ellipse):
        a, b = g.a, g.b
        # Ramanujan's first approximation; exact when a == b.
        return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))
    return math.hypot(g.xmax - g.xmin, g.ymax - g.ymin)


def primitive_center(p: Primitive) -> tuple[float, float]:
    _check(p)
    g = p.geometry
    if isinstance(g, Line):
        return ((g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2)
    if isinstance(g, Arc):
        mid = g.start + g.sweep / 2
        return (g.cx + g.r * math.cos(mid), g.cy + g.r * math.sin(mid))
    if isinstance(g, (Circle, Ellipse)):
        return (g.cx, g.cy)
    return ((g.xmin + g.xmax) / 2, (g.ymin + g.ymax) / 2)


def primitive_orientation(p: Primitive) -> float:
    """Undirected orientation in radians; circles and arcs report 0."""
    g = p.geometry
    if isinstance(g, Line):
        return math.atan2(g.y2 - g.y1, g.x2 - g.x1)
    if isinstance(g, (Ellipse, Text)):
        return g.rotation
    return 0.0


def bounding_box(p: Primitive) -> tuple[float, float, float, float]:
    g = p.geometry
    if isinstance(g, Line):
        return (min(g.x1, g.x2), min(g.y1, g.y2), max(g.x1, g.x2), max(g.y1, g.y2))
    if isinstance(g, Arc):
        # Endpoints plus any axis extreme that falls inside the sweep.
        angles = [g.start, g.start + g.sweep]
        k = math.ceil(g.start / (math.pi / 2))
        while k * math.pi / 2 <= g.start + g.sweep:
            angles.append(k * math.pi / 2)
            k += 1
        xs = [g.cx + g.r * math.cos(a) for a in angles]
        ys = [g.cy + g.r * math.sin(a) for a in angles]
        return (min(xs), min(ys), max(xs), max(ys))
    if isinstance(g, Circle):
        return (g.cx - g.r, g.cy - g.r, g.cx + g.r, g.cy + g.r)
    if isinstance(g, Ellipse):
        c, s = math.cos(g.rotation), math.sin(g.rotation)
        hx = math.hypot(g.a * c, g.b * s)
        hy = math.hypot(g.a * s, g.b * c)
        return (g.cx - hx, g.cy - hy, g.cx + hx, g.cy + hy)
    return (g.xmin, g.ymin, g.xmax, g.ymax)


def symbol_weight(s: Symbol | Iterable[int], drawing: Drawing) -> float:
    """Sum of ln(1 + length) over the symbol's members."""
    members = s.members if isinstance(s, Symbol) else frozenset(s)
    if not members:
        raise InvalidSymbolError("empty symbol")
    by_id = {p.id: p for p in drawing.primitives}
    total = 0.0
    for i in sorted(members):
        if i not in by_id:
            raise InvalidSymbolError(f"member {i} not in drawing")
        total += math.log1p(primitive_length(by_id[i]))
    return total


@dataclass(frozen=True)
class Violation:
    primitive_id: int | None
    reason: str


def validate_drawing(d: Drawing) -> list[Violation]:
    """Every invariant violation in ``d``; empty iff the drawing is valid."""
    out: list[Violation] = []
    seen: set[int] = set()
    for p in d.primitives:
        if p.id in seen:
            out.append(Violation(p.id, "duplicate primitive id"))
        seen.add(p.id)
    if not out and seen != set(range(len(d.primitives))):
        out.append(Violation(None, "primitive ids are not dense 0..N-1"))

    valid_labels = {BACKGROUND, d.annotation_label} | {c.id for c in d.classes}
    instance_label: dict[int, int] = {}
    for p in d.primitives:
        reason = p.geometry.problem()
        if reason:
            out.append(Violation(p.id, reason))
        if p.label not in valid_labels:
            out.append(Violation(p.id, f"unknown label {p.label}"))
        if p.is_text:
            if p.label != d.annotation_label:
                out.append(Violation(p.id, "text primitive must carry the annotation class"))
            if p.instance != -1:
                out.append(Violation(p.id, "text primitive must have instance -1"))
        elif p.label == d.annotation_label:
            out.append(Violation(p.id, "annotation class on a non-text primitive"))
        if p.instance < -1:
            out.append(Violation(p.id, f"invalid instance index {p.instance}"))
        if p.instance >= 0:
            if p.label in d.stuff_labels or p.label == BACKGROUND:
                out.append(Violation(p.id, "stuff/background primitive with instance >= 0"))
            prev = instance_label.setdefault(p.instance, p.label)
            if prev != p.label:
                out.append(
                    Violation(p.id, f"instance {p.instance} used with labels {prev} and {p.label}")
                )
    return out
