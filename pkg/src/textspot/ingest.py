"""Reading, writing, tiling and normalizing drawings.

The canonical format is a JSON document with one primitive per line::

    {"classes": [...],
    "meta": {...},
    "primitives": [
    {"id": 0, "type": "line", ...},
    ...
    ]}

Floats are written with 9 significant digits and keys are sorted, so the
bytes are a pure function of the drawing.
"""

from __future__ import annotations

import json
import logging
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .model import (
    ANNOTATION_NAME,
    BACKGROUND,
    Arc,
    Circle,
    ClassInfo,
    Drawing,
    Ellipse,
    Line,
    Primitive,
    Text,
    primitive_center,
)

log = logging.getLogger(__name__)

FORMATS = ("canonical-json", "svg-subset")

GEOMETRY_FIELDS: dict[str, tuple[str, ...]] = {
    "line": ("x1", "y1", "x2", "y2"),
    "arc": ("cx", "cy", "r", "start", "sweep"),
    "circle": ("cx", "cy", "r"),
    "ellipse": ("cx", "cy", "a", "b", "rotation"),
    "text": ("xmin", "ymin", "xmax", "ymax", "rotation"),
}
_GEOMETRY_TYPES = {"line": Line, "arc": Arc, "circle": Circle, "ellipse": Ellipse, "text": Text}


class DrawingParseError(ValueError):
    """Malformed input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(ValueError):
    pass


def quantize(x: float) -> float:
    """Round to the 9 significant digits the canonical format keeps."""
    return float(f"{x:.9g}")


# ---------------------------------------------------------------- serialize


def _fmt_float(x: float) -> str:
    s = f"{x:.9g}"
    if not any(ch in s for ch in ".eEn"):
        s += ".0"
    return s


def _dump(obj: Any) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite value {obj}")
        return _fmt_float(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {_dump(obj[k])}" for k in sorted(obj, key=str))
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _primitive_record(p: Primitive, d: Drawing) -> dict:
    g = p.geometry
    rec: dict[str, Any] = {"id": p.id, "type": g.kind, "instance": p.instance}
    rec["label"] = d.class_name(p.label)
    for name in GEOMETRY_FIELDS[g.kind]:
        rec[name] = float(getattr(g, name))
    if isinstance(g, Text):
        rec["text"] = g.content
    return rec


def serialize_drawing(d: Drawing) -> bytes:
    classes = [{"id": c.id, "kind": c.kind, "name": c.name} for c in d.classes]
    lines = [
        "{" + f'"classes": {_dump(classes)},',
        f'"meta": {_dump(d.meta)},',
        '"primitives": [',
    ]
    recs = [_dump(_primitive_record(p, d)) for p in d.primitives]
    lines.extend(r + ("," if i < len(recs) - 1 else "") for i, r in enumerate(recs))
    lines.append("]}")
    return ("\n".join(lines) + "\n").encode("utf-8")


# -------------------------------------------------------------------- parse


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def _parse_classes(raw: Any) -> tuple[ClassInfo, ...]:
    if not isinstance(raw, list):
        raise SchemaError("'classes' must be a list")
    out = []
    for c in raw:
        try:
            info = ClassInfo(int(c["id"]), str(c["name"]), str(c["kind"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad class entry {c!r}") from exc
        if info.kind not in ("thing", "stuff"):
            raise SchemaError(f"class {info.name!r} has kind {info.kind!r}")
        if info.id <= BACKGROUND:
            raise SchemaError(f"class {info.name!r} uses reserved id {info.id}")
        out.append(info)
    if len({c.id for c in out}) != len(out) or len({c.name for c in out}) != len(out):
        raise SchemaError("duplicate class id or name")
    return tuple(out)


def _meta_from_json(raw: Any) -> dict:
    meta = dict(raw or {})
    if "origin" in meta:
        meta["origin"] = [float(v) for v in meta["origin"]]
    if "tile_size" in meta:
        meta["tile_size"] = float(meta["tile_size"])
    return meta


def parse_canonical(data: bytes | str) -> Drawing:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DrawingParseError(exc.msg, _byte_offset(text, exc.pos)) from exc
    if not isinstance(doc, dict):
        raise SchemaError("top-level value must be an object")
    classes = _parse_classes(doc.get("classes", []))
    probe = Drawing((), classes)
    prims = []
    seen: set[int] = set()
    for rec in doc.get("primitives", []):
        try:
            kind = rec["type"]
            fields = GEOMETRY_FIELDS[kind]
            values = [float(rec[f]) for f in fields]
            pid = int(rec["id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad primitive record {rec!r}") from exc
        if pid in seen:
            raise SchemaError(f"duplicate primitive id {pid}")
        seen.add(pid)
        geom = Text(*values[:4], str(rec.get("text", "")), values[4]) if kind == "text" else _GEOMETRY_TYPES[kind](*values)
        label_name = rec.get("label", "background")
        try:
            label = probe.label_of(str(label_name))
        except KeyError:
            raise SchemaError(f"unknown class name {label_name!r} on primitive {pid}") from None
        prims.append(Primitive(pid, geom, label, int(rec.get("instance", -1))))
    return Drawing(tuple(prims), classes, _meta_from_json(doc.get("meta")))


# ---------------------------------------------------------------- svg subset

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TOKEN = re.compile(rf"([MmLlHhVvAaZz])|({_NUM})")


def _svg_arc_to_center(x1, y1, rx, ry, phi_deg, large, sweep, x2, y2):
    """Endpoint parametrization to center form (SVG implementation notes F.6.5)."""
    phi = math.radians(phi_deg)
    cphi, sphi = math.cos(phi), math.sin(phi)
    dx, dy = (x1 - x2) / 2, (y1 - y2) / 2
    x1p = cphi * dx + sphi * dy
    y1p = -sphi * dx + cphi * dy
    rx, ry = abs(rx), abs(ry)
    lam = (x1p / rx) ** 2 + (y1p / ry) ** 2
    if lam > 1:
        rx, ry = rx * math.sqrt(lam), ry * math.sqrt(lam)
    num = rx * rx * ry * ry - rx * rx * y1p * y1p - ry * ry * x1p * x1p
    den = rx * rx * y1p * y1p + ry * ry * x1p * x1p
    coef = math.sqrt(max(num, 0.0) / den) if den else 0.0
    if large == sweep:
        coef = -coef
    cxp, cyp = coef * rx * y1p / ry, -coef * ry * x1p / rx
    cx = cphi * cxp - sphi * cyp + (x1 + x2) / 2
    cy = sphi * cxp + cphi * cyp + (y1 + y2) / 2

    def ang(ux, uy, vx, vy):
        return math.atan2(ux * vy - uy * vx, ux * vx + uy * vy)

    theta = ang(1, 0, (x1p - cxp) / rx, (y1p - cyp) / ry)
    delta = ang((x1p - cxp) / rx, (y1p - cyp) / ry, (-x1p - cxp) / rx, (-y1p - cyp) / ry)
    if not sweep and delta > 0:
        delta -= 2 * math.pi
    elif sweep and delta < 0:
        delta += 2 * math.pi
    return cx, cy, rx, ry, theta, delta


def _path_geometries(d: str) -> tuple[list, list[str]]:
    """Lines and arcs from an SVG path; unsupported segments come back as reasons."""
    tokens = [(m.group(1), m.group(2)) for m in _TOKEN.finditer(d)]
    out: list = []
    skipped: list[str] = []
    i = 0
    cmd = None
    x = y = sx = sy = 0.0

    def nums(n):
        nonlocal i
        vals = []
        for _ in range(n):
            if i >= len(tokens) or tokens[i][1] is None:
                raise DrawingParseError(f"path command {cmd!r} missing arguments")
            vals.append(float(tokens[i][1]))
            i += 1
        return vals

    while i < len(tokens):
        if tokens[i][0]:
            cmd = tokens[i][0]
            i += 1
        elif cmd is None:
            raise DrawingParseError("path data must start with a command")
        rel = cmd.islower()
        c = cmd.upper()
        if c == "M":
            px, py = nums(2)
            x, y = (x + px, y + py) if rel else (px, py)
            sx, sy = x, y
            cmd = "l" if rel else "L"
        elif c in "LHV":
            if c == "L":
                px, py = nums(2)
                nx, ny = (x + px, y + py) if rel else (px, py)
            elif c == "H":
                (px,) = nums(1)
                nx, ny = (x + px if rel else px), y
            else:
                (py,) = nums(1)
                nx, ny = x, (y + py if rel else py)
            if (nx, ny) != (x, y):
                out.append(Line(x, y, nx, ny))
            x, y = nx, ny
        elif c == "A":
            rx, ry, rot, large, sweep, px, py = nums(7)
            nx, ny = (x + px, y + py) if rel else (px, py)
            if rx == 0 or ry == 0:
                out.append(Line(x, y, nx, ny))
            else:
                cx, cy, rx2, ry2, theta, delta = _svg_arc_to_center(
                    x, y, rx, ry, rot, int(large), int(sweep), nx, ny
                )
                if abs(rx2 - ry2) > 1e-9 * max(rx2, ry2):
                    skipped.append("elliptical arc segment")
                else:
                    start = theta + math.radians(rot)
                    if delta < 0:
                        start, delta = start + delta, -delta
                    out.append(Arc(cx, cy, rx2, start % (2 * math.pi), delta))
            x, y = nx, ny
        elif c == "Z":
            if (x, y) != (sx, sy):
                out.append(Line(x, y, sx, sy))
            x, y = sx, sy
        else:  # pragma: no cover - regex admits only the commands above
            skipped.append(f"path command {cmd}")
    return out, skipped


def _fattr(el: ET.Element, name: str, default: float = 0.0) -> float:
    raw = el.get(name)
    if raw is None:
        return default
    m = re.match(_NUM, raw.strip())
    if not m:
        raise DrawingParseError(f"bad numeric attribute {name}={raw!r}")
    return float(m.group(0))


def parse_svg_subset(data: bytes | str, classes: tuple[ClassInfo, ...] = ()) -> Drawing:
    """Best-effort import of line/circle/ellipse/path/text elements.

    Labels come from a ``data-label`` (class name) or FloorPlanCAD-style
    ``semantic-id`` attribute; instances from ``instance-id``. Anything else
    is listed in ``meta["skipped"]`` rather than dropped silently.
    """
    raw = data if isinstance(data, bytes) else data.encode("utf-8")
    try:
        root = ET.fromstring(raw)
    except ET.ParseError as exc:
        line, col = exc.position
        lines = raw.split(b"\n")
        offset = sum(len(l) + 1 for l in lines[: line - 1]) + col
        raise DrawingParseError(f"malformed SVG: {exc}", offset) from exc

    probe = Drawing((), classes)
    geoms: list[tuple[Any, int, int]] = []
    skipped: list[str] = []

    def label_of(el: ET.Element, is_text: bool) -> tuple[int, int]:
        if is_text:
            return probe.annotation_label, -1
        name = el.get("data-label")
        if name is not None:
            try:
                label = probe.label_of(name)
            except KeyError:
                raise SchemaError(f"unknown class name {name!r}") from None
        else:
            label = int(el.get("semantic-id", BACKGROUND))
            if label != BACKGROUND and label not in {c.id for c in classes}:
                raise SchemaError(f"unknown semantic-id {label}")
        instance = int(el.get("instance-id", -1))
        return label, instance

    for el in root.iter():
        tag = el.tag.rsplit("}", 1)[-1]
        if tag in ("svg", "g", "title", "desc", "defs", "metadata", "tspan"):
            continue
        if tag == "line":
            g = [Line(_fattr(el, "x1"), _fattr(el, "y1"), _fattr(el, "x2"), _fattr(el, "y2"))]
        elif tag == "circle":
            g = [Circle(_fattr(el, "cx"), _fattr(el, "cy"), _fattr(el, "r"))]
        elif tag == "ellipse":
            rx, ry = _fattr(el, "rx"), _fattr(el, "ry")
            rot = 0.0 if rx >= ry else math.pi / 2
            g = [Ellipse(_fattr(el, "cx"), _fattr(el, "cy"), max(rx, ry), min(rx, ry), rot)]
        elif tag == "path":
            g, why = _path_geometries(el.get("d", ""))
            skipped.extend(f"path: {w}" for w in why)
        elif tag == "text":
            content = "".join(el.itertext()).strip()
            size = _fattr(el, "font-size", 1.0)
            x, y = _fattr(el, "x"), _fattr(el, "y")
            width = max(len(content), 1) * 0.6 * size
            g = [Text(x, y - size, x + width, y, content, 0.0)]
        else:
            skipped.append(f"unsupported element <{tag}>")
            continue
        label, instance = label_of(el, tag == "text")
        geoms.extend((geom, label, instance) for geom in g)

    for reason in skipped:
        log.warning("svg import skipped %s", reason)
    prims = tuple(Primitive(i, g, l, z) for i, (g, l, z) in enumerate(geoms))
    return Drawing(prims, classes, {"skipped": skipped})


def parse_drawing(data: bytes | str, format: str = "canonical-json", classes: tuple[ClassInfo, ...] = ()) -> Drawing:
    if format == "canonical-json":
        return parse_canonical(data)
    if format == "svg-subset":
        return parse_svg_subset(data, classes)
    raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")


def load_drawing(path: str | Path, format: str = "canonical-json") -> Drawing:
    return parse_drawing(Path(path).read_bytes(), format)


def save_drawing(d: Drawing, path: str | Path) -> None:
    Path(path).write_bytes(serialize_drawing(d))


# ------------------------------------------------------------------- tiling


@dataclass(frozen=True)
class TileSpec:
    size: float = 14.0
    origin_snap: float = 1.0
    overlap: float = 0.0

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError("tile size must be positive")
        if not 0 <= self.overlap < self.size:
            raise ValueError("overlap must lie in [0, tile size)")
        if self.origin_snap < 0:
            raise ValueError("origin snap must be non-negative")


def _snap(v: float, step: float) -> float:
    return math.floor(v / step) * step if step > 0 else v


def tile_drawing(d: Drawing, spec: TileSpec = TileSpec()) -> list[Drawing]:
    """Split ``d`` into square tiles by primitive center.

    Coordinates stay in world units; each tile records its ``origin`` and
    ``tile_size``. Instance indices are renumbered per tile so that an
    instance straddling a boundary becomes one symbol in each tile.
    """
    if not d.primitives:
        return []
    xmin, ymin, _, _ = d.extent()
    ax, ay = _snap(xmin, spec.origin_snap), _snap(ymin, spec.origin_snap)
    buckets: dict[tuple[int, int], list[Primitive]] = {}
    for p in d.primitives:
        cx, cy = primitive_center(p)
        if spec.overlap == 0:
            keys = [(math.floor((cx - ax) / spec.size), math.floor((cy - ay) / spec.size))]
        else:
            lo_x = math.floor((cx - ax - spec.overlap) / spec.size)
            hi_x = math.floor((cx - ax + spec.overlap) / spec.size)
            lo_y = math.floor((cy - ay - spec.overlap) / spec.size)
            hi_y = math.floor((cy - ay + spec.overlap) / spec.size)
            keys = [(i, j) for i in range(lo_x, hi_x + 1) for j in range(lo_y, hi_y + 1)]
        for key in keys:
            buckets.setdefault(key, []).append(p)

    remap_base = d.meta.get("id_remap")
    tiles = []
    for (i, j) in sorted(buckets, key=lambda k: (k[1], k[0])):
        members = buckets[(i, j)]
        local_z: dict[int, int] = {}
        prims = []
        for new_id, p in enumerate(members):
            z = p.instance
            if z >= 0:
                z = local_z.setdefault(z, len(local_z))
            prims.append(Primitive(new_id, p.geometry, p.label, z))
        remap = [remap_base[p.id] if remap_base else p.id for p in members]
        meta = {k: v for k, v in d.meta.items() if k not in ("origin", "tile_size", "id_remap", "tile_index")}
        meta.update(
            origin=[ax + i * spec.size, ay + j * spec.size],
            tile_size=float(spec.size),
            tile_index=[i, j],
            id_remap=remap,
        )
        tiles.append(Drawing(tuple(prims), d.classes, meta))
    return tiles


# ------------------------------------------------------------ normalization


def _map_geometry(g, f, scale: float):
    """Apply the affine point map ``f`` (uniform ``scale``) to a geometry."""
    if isinstance(g, Line):
        (x1, y1), (x2, y2) = f(g.x1, g.y1), f(g.x2, g.y2)
        return Line(x1, y1, x2, y2)
    if isinstance(g, Arc):
        cx, cy = f(g.cx, g.cy)
        return Arc(cx, cy, g.r * scale, g.start, g.sweep)
    if isinstance(g, Circle):
        cx, cy = f(g.cx, g.cy)
        return Circle(cx, cy, g.r * scale)
    if isinstance(g, Ellipse):
        cx, cy = f(g.cx, g.cy)
        return Ellipse(cx, cy, g.a * scale, g.b * scale, g.rotation)
    (x0, y0), (x1, y1) = f(g.xmin, g.ymin), f(g.xmax, g.ymax)
    return Text(x0, y0, x1, y1, g.content, g.rotation)


def _tile_frame(tile: Drawing) -> tuple[float, float, float]:
    try:
        ox, oy = tile.meta["origin"]
        size = float(tile.meta["tile_size"])
    except KeyError:
        raise ValueError("tile has no origin/tile_size metadata") from None
    return float(ox), float(oy), size


def normalize_coords(tile: Drawing) -> Drawing:
    """Map tile coordinates into the unit square (origin at 0, side 1)."""
    if tile.meta.get("normalized"):
        return tile
    ox, oy, size = _tile_frame(tile)
    f = lambda x, y: ((x - ox) / size, (y - oy) / size)  # noqa: E731
    prims = [Primitive(p.id, _map_geometry(p.geometry, f, 1 / size), p.label, p.instance) for p in tile.primitives]
    out = tile.with_primitives(prims, normalized=True)
    bad = [p.id for p in out.primitives if not _inside_unit(primitive_center(p))]
    if bad:
        log.warning("%d primitive(s) outside the unit tile after normalization: %s", len(bad), bad[:10])
    return out


def _inside_unit(c: tuple[float, float]) -> bool:
    return 0.0 <= c[0] <= 1.0 and 0.0 <= c[1] <= 1.0


def denormalize_coords(tile: Drawing) -> Drawing:
    if not tile.meta.get("normalized"):
        return tile
    ox, oy, size = _tile_frame(tile)
    f = lambda x, y: (x * size + ox, y * size + oy)  # noqa: E731
    prims = [Primitive(p.id, _map_geometry(p.geometry, f, size), p.label, p.instance) for p in tile.primitives]
    meta = {k: v for k, v in tile.meta.items() if k != "normalized"}
    return Drawing(tuple(prims), tile.classes, meta)


# ----------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    tiles: list[tuple[str, str]]
    classes: tuple[ClassInfo, ...]
    stats_path: str

    SPLITS = ("train", "val", "test")

    def __post_init__(self) -> None:
        paths = [p for p, _ in self.tiles]
        if len(set(paths)) != len(paths):
            raise SchemaError("a tile appears in more than one manifest entry")
        for _, split in self.tiles:
            if split not in self.SPLITS:
                raise SchemaError(f"unknown split {split!r}")

    def split(self, name: str) -> list[str]:
        return [p for p, s in self.tiles if s == name]

    def to_json(self) -> bytes:
        doc = {
            "classes": [{"id": c.id, "kind": c.kind, "name": c.name} for c in self.classes],
            "stats": self.stats_path,
            "tiles": [{"path": p, "split": s} for p, s in self.tiles],
        }
        return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes | str) -> "DatasetManifest":
        doc = json.loads(data)
        return cls(
            [(t["path"], t["split"]) for t in doc["tiles"]],
            _parse_classes(doc["classes"]),
            doc["stats"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_bytes())


__all__ = [
    "ANNOTATION_NAME",
    "DatasetManifest",
    "DrawingParseError",
    "SchemaError",
    "TileSpec",
    "denormalize_coords",
    "load_drawing",
    "normalize_coords",
    "parse_drawing",
    "quantize",
    "save_drawing",
    "serialize_drawing",
    "tile_drawing",
]
