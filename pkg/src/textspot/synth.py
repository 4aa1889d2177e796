"""Deterministic synthetic floor-plan tiles with ground-truth symbols.

Each 14 m tile has walls (stuff) along its border and across a few random
partitions, a handful of furniture-like thing instances under random rigid
transforms, optional background clutter, and text boxes beside instances.
With probability ``informativeness`` a box carries its instance's class
token; otherwise it carries a random one-off string that corpus filtering
removes. Box width grows with the token length.

Sofa and table share one footprint (a rectangle with an inset line), so
geometry alone cannot separate them; the annotation beside them can.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import DatasetManifest, quantize, save_drawing
from .model import Arc, Circle, ClassInfo, Drawing, Line, Primitive, Text
from .textfilter import TextFilterConfig, build_corpus_stats

TILE = 14.0
CHAR_WIDTH = 0.25
TEXT_HEIGHT = 0.3

TEMPLATES = ("door", "window", "sofa", "table", "chair")
CLASS_TOKENS = {"door": "DOOR", "window": "WINDOW", "sofa": "SOFA", "table": "TABLE", "chair": "CHAIR"}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    train_tiles: int = 200
    val_tiles: int = 40
    test_tiles: int = 40
    thing_classes: tuple[str, ...] = TEMPLATES
    stuff_classes: tuple[str, ...] = ("wall",)
    text_rate: float = 0.9
    informativeness: float = 0.9
    clutter_rate: float = 0.2
    min_instances: int = 4
    max_instances: int = 8
    partitions: tuple[int, int] = (0, 2)

    def __post_init__(self) -> None:
        for name in ("text_rate", "informativeness", "clutter_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        unknown = set(self.thing_classes) - set(TEMPLATES)
        if unknown:
            raise ValueError(f"unknown thing templates {sorted(unknown)}")
        if set(self.stuff_classes) - {"wall"}:
            raise ValueError("only the 'wall' stuff class is generated")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("instance count range is empty")

    @property
    def classes(self) -> tuple[ClassInfo, ...]:
        out = [ClassInfo(i + 1, name, "thing") for i, name in enumerate(self.thing_classes)]
        out += [ClassInfo(len(out) + i + 1, name, "stuff") for i, name in enumerate(self.stuff_classes)]
        return tuple(out)

    @property
    def total_tiles(self) -> int:
        return self.train_tiles + self.val_tiles + self.test_tiles

    def split_of(self, index: int) -> str:
        if index < self.train_tiles:
            return "train"
        if index < self.train_tiles + self.val_tiles:
            return "val"
        return "test"


# ---------------------------------------------------------------- templates


def _rect(w: float, h: float) -> list:
    x, y = w / 2, h / 2
    return [Line(-x, -y, x, -y), Line(x, -y, x, y), Line(x, y, -x, y), Line(-x, y, -x, -y)]


def _template(name: str, rng: np.random.Generator) -> list:
    """Primitives in local coordinates, roughly centered on the origin."""
    if name == "door":
        w = rng.uniform(0.8, 1.0)
        h = w / 2
        return [Line(-h, -h, -h, w - h), Arc(-h, -h, w, 0.0, math.pi / 2)]
    if name == "window":
        length = rng.uniform(1.2, 1.8)
        return [Line(-length / 2, dy, length / 2, dy) for dy in (-0.12, 0.0, 0.12)]
    if name in ("sofa", "table"):
        w, d = rng.uniform(1.6, 2.2), rng.uniform(0.8, 0.95)
        inset = d / 2 - 0.2
        return _rect(w, d) + [Line(-w / 2, inset, w / 2, inset)]
    if name == "chair":
        s = rng.uniform(0.45, 0.55)
        return _rect(s, s) + [Arc(0.0, s / 2, s / 2, 0.0, math.pi)]
    raise ValueError(name)


def _radius(geoms: list) -> float:
    r = 0.0
    for g in geoms:
        if isinstance(g, Line):
            r = max(r, math.hypot(g.x1, g.y1), math.hypot(g.x2, g.y2))
        else:
            r = max(r, math.hypot(g.cx, g.cy) + g.r)
    return r


def _transform(g, theta: float, tx: float, ty: float):
    c, s = math.cos(theta), math.sin(theta)

    def pt(x, y):
        return quantize(c * x - s * y + tx), quantize(s * x + c * y + ty)

    if isinstance(g, Line):
        (x1, y1), (x2, y2) = pt(g.x1, g.y1), pt(g.x2, g.y2)
        return Line(x1, y1, x2, y2)
    if isinstance(g, Arc):
        cx, cy = pt(g.cx, g.cy)
        return Arc(cx, cy, quantize(g.r), quantize((g.start + theta) % (2 * math.pi)), quantize(g.sweep))
    cx, cy = pt(g.cx, g.cy)
    return Circle(cx, cy, quantize(g.r))


def _text_box(cx: float, cy: float, content: str) -> Text:
    w = CHAR_WIDTH * len(content)
    return Text(
        quantize(cx - w / 2), quantize(cy - TEXT_HEIGHT / 2), quantize(cx + w / 2), quantize(cy + TEXT_HEIGHT / 2), content, 0.0
    )


def _noise_token(rng: np.random.Generator) -> str:
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    n = int(rng.integers(3, 8))
    return "".join(letters[int(i)] for i in rng.integers(0, 26, n)) + "-" + "".join(letters[int(i)] for i in rng.integers(0, 26, 3))


# --------------------------------------------------------------- generation


def _walls(rng: np.random.Generator, cfg: SynthConfig) -> tuple[list[Line], list[tuple[str, float]]]:
    """Border walls plus full-span partitions, each drawn as a pair of lines."""
    lines = []
    a, b = 0.1, 0.3
    lines += [Line(a, a, TILE - a, a), Line(b, b, TILE - b, b)]
    lines += [Line(TILE - a, a, TILE - a, TILE - a), Line(TILE - b, b, TILE - b, TILE - b)]
    lines += [Line(TILE - a, TILE - a, a, TILE - a), Line(TILE - b, TILE - b, b, TILE - b)]
    lines += [Line(a, TILE - a, a, a), Line(b, TILE - b, b, b)]
    parts = []
    for _ in range(int(rng.integers(cfg.partitions[0], cfg.partitions[1] + 1))):
        axis = "x" if rng.random() < 0.5 else "y"
        pos = float(rng.uniform(4.0, 10.0))
        if any(ax == axis and abs(p - pos) < 2.5 for ax, p in parts):
            continue
        parts.append((axis, pos))
        for off in (-0.075, 0.075):
            q = pos + off
            lines.append(Line(q, b, q, TILE - b) if axis == "x" else Line(b, q, TILE - b, q))
    return [Line(*(quantize(v) for v in (l.x1, l.y1, l.x2, l.y2))) for l in lines], parts


def generate_tile(cfg: SynthConfig, index: int) -> Drawing:
    rng = np.random.default_rng([cfg.seed, index])
    classes = cfg.classes
    label = {c.name: c.id for c in classes}
    annotation = max(c.id for c in classes) + 1
    prims: list[tuple] = []  # (geometry, label, instance)

    wall_label = label.get("wall")
    walls, parts = _walls(rng, cfg) if wall_label is not None else ([], [])
    prims += [(w, wall_label, -1) for w in walls]

    placed: list[tuple[float, float, float]] = []  # (x, y, keep-out radius)

    def free(x, y, r):
        if not (0.5 + r <= x <= TILE - 0.5 - r and 0.5 + r <= y <= TILE - 0.5 - r):
            return False
        if any(abs((x if ax == "x" else y) - p) < r + 0.2 for ax, p in parts):
            return False
        return all(math.hypot(x - px, y - py) > r + pr for px, py, pr in placed)

    n_inst = int(rng.integers(cfg.min_instances, cfg.max_instances + 1)) if cfg.thing_classes else 0
    instance = 0
    for _ in range(n_inst):
        name = cfg.thing_classes[int(rng.integers(len(cfg.thing_classes)))]
        local = _template(name, rng)
        r = _radius(local)
        theta = float(rng.uniform(0, 2 * math.pi))
        has_text = rng.random() < cfg.text_rate
        informative = rng.random() < cfg.informativeness
        token = CLASS_TOKENS[name] if informative else _noise_token(rng)
        reach = r + (0.35 + CHAR_WIDTH * len(token) / 2 if has_text else 0.15)
        for _attempt in range(100):
            x, y = rng.uniform(0.5, TILE - 0.5, size=2)
            if free(x, y, reach):
                break
        else:
            continue
        placed.append((float(x), float(y), reach))
        prims += [(_transform(g, theta, x, y), label[name], instance) for g in local]
        if has_text:
            phi = float(rng.uniform(0, 2 * math.pi))
            d = r + 0.1 + TEXT_HEIGHT
            prims.append((_text_box(x + d * math.cos(phi), y + d * math.sin(phi), token), annotation, -1))
        instance += 1

    n_clutter = int(rng.binomial(10, cfg.clutter_rate))
    for _ in range(n_clutter):
        for _attempt in range(50):
            x, y = rng.uniform(0.6, TILE - 0.6, size=2)
            if free(x, y, 0.35):
                break
        else:
            continue
        placed.append((float(x), float(y), 0.35))
        if rng.random() < 0.5:
            g = _transform(Circle(0.0, 0.0, float(rng.uniform(0.05, 0.2))), 0.0, x, y)
        else:
            half = float(rng.uniform(0.1, 0.3))
            g = _transform(Line(-half, 0.0, half, 0.0), float(rng.uniform(0, math.pi)), x, y)
        prims.append((g, 0, -1))

    if rng.random() < cfg.text_rate:
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(1.5, TILE - 1.5, size=2)
            prims.append((_text_box(float(x), float(y), _noise_token(rng)), annotation, -1))

    primitives = tuple(Primitive(i, g, l, z) for i, (g, l, z) in enumerate(prims))
    meta = {"origin": [0.0, 0.0], "tile_size": TILE, "source": f"synth:{cfg.seed}:{index}"}
    return Drawing(primitives, classes, meta)


def generate_dataset(cfg: SynthConfig, out_dir: str | Path, text_cfg: TextFilterConfig = TextFilterConfig()) -> DatasetManifest:
    """Write every tile, the train-split corpus statistics and a manifest."""
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    entries = []
    train = []
    for i in range(cfg.total_tiles):
        tile = generate_tile(cfg, i)
        split = cfg.split_of(i)
        rel = f"tiles/{split}_{i:05d}.json"
        save_drawing(tile, out / rel)
        entries.append((rel, split))
        if split == "train":
            train.append(tile)
    build_corpus_stats(train, text_cfg).save(out / "stats.tsv")
    manifest = DatasetManifest(entries, cfg.classes, "stats.tsv")
    (out / "manifest.json").write_bytes(manifest.to_json())
    return manifest


def compact_tile(n: int, seed: int = 0) -> Drawing:
    """A small valid tile with exactly ``n`` primitives, including annotations.

    Whole instances (with their text) are kept first, then walls, so the
    tile exercises every edge type.
    """
    cfg = SynthConfig(seed=seed, text_rate=1.0, informativeness=1.0, clutter_rate=0.0, min_instances=6, max_instances=8)
    for attempt in range(100):
        full = generate_tile(cfg, attempt)
        by_kind = {"inst": [], "text": [], "wall": []}
        for p in full.primitives:
            key = "text" if p.is_text else ("inst" if p.instance >= 0 else "wall")
            by_kind[key].append(p)
        if not by_kind["text"] or len(full.primitives) < n:
            continue
        chosen = by_kind["text"][:2] + by_kind["inst"] + by_kind["wall"]
        chosen = sorted(chosen[:n], key=lambda p: p.id)
        if len(chosen) < n:
            continue
        zmap: dict[int, int] = {}
        prims = []
        for i, p in enumerate(chosen):
            z = zmap.setdefault(p.instance, len(zmap)) if p.instance >= 0 else -1
            prims.append(Primitive(i, p.geometry, p.label, z))
        return Drawing(tuple(prims), full.classes, dict(full.meta))
    raise RuntimeError(f"could not build a {n}-primitive tile")
