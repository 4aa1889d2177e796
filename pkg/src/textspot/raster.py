"""Rasterize tiles, extract a feature map, and sample vertex features from it."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .model import Arc, Circle, Drawing, Line, Text, primitive_center

# ------------------------------------------------------------ rasterization


def _polyline(g, size: int) -> np.ndarray:
    """Vertices approximating a primitive in normalized coordinates."""
    if isinstance(g, Line):
        return np.array([[g.x1, g.y1], [g.x2, g.y2]])
    if isinstance(g, Text):
        return np.array(
            [[g.xmin, g.ymin], [g.xmax, g.ymin], [g.xmax, g.ymax], [g.xmin, g.ymax], [g.xmin, g.ymin]]
        )
    if isinstance(g, Arc):
        start, sweep, a, b, rot = g.start, g.sweep, g.r, g.r, 0.0
    elif isinstance(g, Circle):
        start, sweep, a, b, rot = 0.0, 2 * math.pi, g.r, g.r, 0.0
    else:
        start, sweep, a, b, rot = 0.0, 2 * math.pi, g.a, g.b, g.rotation
    # Roughly two pixels per chord.
    n = int(min(256, max(8, math.ceil(sweep * a * size / 2))))
    t = start + sweep * np.linspace(0.0, 1.0, n + 1)
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = math.cos(rot), math.sin(rot)
    cx, cy = (g.cx, g.cy)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def _stroke(img: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> None:
    """Max-composite an anti-aliased ~1px segment; pixel centers sit at i + 0.5."""
    h, w = img.shape
    lo = np.floor(np.minimum(p0, p1) - 2).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + 2).astype(int)
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0], w), min(hi[1], h)
    if c0 >= c1 or r0 >= r1:
        return
    xs = np.arange(c0, c1) + 0.5
    ys = np.arange(r0, r1) + 0.5
    px, py = np.meshgrid(xs, ys)
    d = p1 - p0
    ll = float(d @ d)
    if ll > 0:
        t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / ll, 0.0, 1.0)
    else:
        t = np.zeros_like(px)
    dist = np.hypot(px - (p0[0] + t * d[0]), py - (p0[1] + t * d[1]))
    ink = np.clip(1.5 - dist, 0.0, 1.0)
    np.maximum(img[r0:r1, c0:c1], ink, out=img[r0:r1, c0:c1])


def rasterize_tile(tile: Drawing, size: int = 256) -> np.ndarray:
    """Render a normalized tile to a (size, size) image, ink = 1, background = 0.

    Rows run along +y. Geometry is clamped to the unit square here only.
    """
    img = np.zeros((size, size), dtype=np.float64)
    for p in tile.primitives:
        pts = np.clip(_polyline(p.geometry, size), 0.0, 1.0) * size
        for a, b in zip(pts[:-1], pts[1:]):
            _stroke(img, a, b)
    return img


def save_pgm(img: np.ndarray, path: str | Path) -> None:
    h, w = img.shape
    body = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


# ---------------------------------------------------------- feature extraction


@dataclass(frozen=True)
class ExtractorConfig:
    backend: str = "conv-stack"
    raster_size: int = 256
    channels: int = 32
    widths: tuple[int, ...] = (8, 16)
    depth: int = 1
    path: str | None = None

    def __post_init__(self) -> None:
        if self.backend not in ("conv-stack", "file-import"):
            raise ValueError(f"unknown extractor backend {self.backend!r}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        s = self.raster_size
        if s < 8 or s & (s - 1):
            raise ValueError("raster size must be a power of two >= 8")
        if len(self.widths) != 2 or self.depth < 1:
            raise ValueError("conv-stack needs two hidden widths and depth >= 1")
        if self.backend == "file-import" and not self.path:
            raise ValueError("file-import backend needs a path")


@dataclass
class FeatureMap:
    """(H, W, C) features plus the map from normalized coordinates to cells."""

    values: Tensor

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def to_cells(self, xy: np.ndarray) -> np.ndarray:
        h, w, _ = self.values.shape
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.stack([xy[:, 0] * w - 0.5, xy[:, 1] * h - 0.5], axis=1)


class ConvStack:
    """Three stages of 3x3 conv + relu with stride-2 downsampling: (S, S) -> (S/8, S/8, C)."""

    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator, dtype=np.float64, prefix: str = "cnn"):
        self.cfg = cfg
        self.layers: list[tuple[Parameter, Parameter, int]] = []
        widths = (1, *cfg.widths, cfg.channels)
        for stage in range(3):
            cin, cout = widths[stage], widths[stage + 1]
            for j in range(cfg.depth):
                stride = 2 if j == cfg.depth - 1 else 1
                fan_in = 9 * cin
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(3, 3, cin, cout)).astype(dtype)
                name = f"{prefix}.s{stage}.c{j}"
                self.layers.append(
                    (Parameter(name + ".w", w, "he-normal"), Parameter(name + ".b", np.zeros(cout, dtype), "zeros"), stride)
                )
                cin = cout

    def parameters(self) -> list[Parameter]:
        return [t for w, b, _ in self.layers for t in (w, b)]

    def __call__(self, img: np.ndarray | Tensor) -> Tensor:
        x = img if isinstance(img, Tensor) else Tensor(np.asarray(img)[..., None] if np.ndim(img) == 2 else img)
        for w, b, stride in self.layers:
            x = ad.relu(ad.conv2d(x, w, stride) + b)
        return x


def extract_features(img: np.ndarray, cfg: ExtractorConfig, stack: ConvStack | None = None) -> FeatureMap:
    if cfg.backend == "file-import":
        return load_feature_map(cfg.path, expected_channels=cfg.channels)
    if img.shape != (cfg.raster_size, cfg.raster_size):
        raise ad.ShapeError(f"image {img.shape} does not match raster size {cfg.raster_size}")
    if stack is None:
        raise ValueError("conv-stack backend needs a ConvStack")
    dtype = stack.layers[0][0].dtype
    return FeatureMap(stack(Tensor(img.astype(dtype)[..., None])))


def save_feature_map(fm: FeatureMap | np.ndarray, path: str | Path) -> None:
    arr = fm.values.data if isinstance(fm, FeatureMap) else np.asarray(fm)
    h, w, c = arr.shape
    Path(path).write_bytes(struct.pack("<3I", h, w, c) + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_feature_map(path: str | Path, expected_channels: int | None = None) -> FeatureMap:
    raw = Path(path).read_bytes()
    h, w, c = struct.unpack_from("<3I", raw)
    if len(raw) != 12 + 4 * h * w * c:
        raise ad.ShapeError(f"feature map file holds {len(raw) - 12} bytes, header says {h}x{w}x{c}")
    if h < 2 or w < 2:
        raise ad.ShapeError(f"feature map {h}x{w} smaller than 2x2")
    if expected_channels is not None and c != expected_channels:
        raise ad.ShapeError(f"feature map has {c} channels, expected {expected_channels}")
    arr = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, c).astype(np.float64)
    return FeatureMap(Tensor(arr))


# ------------------------------------------------------------------ sampling


def bilinear_sample(fm: FeatureMap, c) -> Tensor:
    """Feature vector(s) at normalized coordinate(s) ``c``."""
    return ad.bilinear_sample(fm.values, fm.to_cells(c))


def init_vertex_features(tile: Drawing, fm: FeatureMap) -> Tensor:
    """One row per primitive, sampled at its (clamped) center."""
    if tile.primitives:
        centers = np.clip([primitive_center(p) for p in tile.primitives], 0.0, 1.0)
    else:
        centers = np.zeros((0, 2))
    return bilinear_sample(fm, centers)
