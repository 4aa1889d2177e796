"""Tile preparation and end-to-end prediction/evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import gradient_check, no_grad
from .graph import build_edge_tensor, centers_of, knn_neighbors
from .ingest import normalize_coords
from .metrics import PanopticReport, evaluate_tile
from .model import Drawing, Primitive
from .network import GraphInputs, SpottingNetwork
from .raster import FeatureMap, rasterize_tile
from .spotting import SpottingResult, spot
from .textfilter import CorpusStats, TextFilterConfig, drop_text, filter_text_primitives


@dataclass
class PreparedTile:
    source: Drawing  # the tile as given, world coordinates
    graph: Drawing  # filtered and normalized; ``meta["id_remap"]`` points into ``source``
    inputs: GraphInputs


def instance_offsets(tile: Drawing) -> tuple[np.ndarray, np.ndarray]:
    """Targets c_i - p_i (instance mean center minus own center) and the thing mask."""
    centers = centers_of(tile)
    targets = np.zeros_like(centers)
    mask = np.zeros(len(tile.primitives))
    groups: dict[int, list[int]] = {}
    for p in tile.primitives:
        if p.instance >= 0:
            groups.setdefault(p.instance, []).append(p.id)
    for members in groups.values():
        c = centers[members].mean(axis=0)
        targets[members] = c - centers[members]
        mask[members] = 1.0
    return targets, mask


def graph_tile(
    tile: Drawing,
    stats: CorpusStats | None,
    text_cfg: TextFilterConfig = TextFilterConfig(),
    no_text: bool = False,
) -> Drawing:
    base = Drawing(tile.primitives, tile.classes, {k: v for k, v in tile.meta.items() if k != "id_remap"})
    if no_text:
        kept = drop_text(base)
    elif stats is not None:
        kept = filter_text_primitives(base, stats, text_cfg)
    else:
        kept = base.with_primitives(base.primitives, id_remap=list(range(len(base.primitives))))
    return normalize_coords(kept)


def prepare_tile(
    tile: Drawing,
    stats: CorpusStats | None,
    k: int = 16,
    raster_size: int = 256,
    text_cfg: TextFilterConfig = TextFilterConfig(),
    no_text: bool = False,
    feature_map: FeatureMap | None = None,
) -> PreparedTile:
    g = graph_tile(tile, stats, text_cfg, no_text)
    nbrs = knn_neighbors(g, k)
    tile_size = float(g.meta.get("tile_size", 14.0))
    edges = build_edge_tensor(g, nbrs, tile_size)
    targets, thing_mask = instance_offsets(g)
    inputs = GraphInputs(
        image=rasterize_tile(g, raster_size),
        centers=centers_of(g),
        neighbors=nbrs.index,
        mask=nbrs.mask,
        edges=edges.values,
        labels=np.array([p.label for p in g.primitives], dtype=int),
        offset_targets=targets,
        thing_mask=thing_mask,
        text_mask=np.array([p.is_text for p in g.primitives], dtype=bool),
        feature_map=feature_map,
        tile_size=tile_size,
    )
    return PreparedTile(tile, g, inputs)


def predict(model: SpottingNetwork, prepared: PreparedTile, radius: float = 0.02) -> tuple[Drawing, SpottingResult]:
    """Predicted labels/instances for every primitive of ``prepared.source``.

    Annotations that never entered the graph keep the annotation class.
    """
    with no_grad():
        out = model.forward(prepared.inputs)
    result = spot(prepared.graph, out.cosine.data, out.offsets.data, radius)
    src = prepared.source
    labels = [src.annotation_label if p.is_text else 0 for p in src.primitives]
    instances = [-1] * len(src.primitives)
    for gid, sid in enumerate(prepared.graph.meta["id_remap"]):
        labels[sid] = int(result.labels[gid])
        instances[sid] = int(result.instances[gid])
    prims = [Primitive(p.id, p.geometry, l, z) for p, l, z in zip(src.primitives, labels, instances)]
    meta = {k: v for k, v in src.meta.items() if k != "id_remap"}
    meta["prediction"] = True
    return Drawing(tuple(prims), src.classes, meta), result


def evaluate(model: SpottingNetwork, tiles: list[PreparedTile], radius: float = 0.02) -> PanopticReport:
    report = PanopticReport()
    for t in tiles:
        pred, _ = predict(model, t, radius)
        gt = Drawing(t.source.primitives, t.source.classes, {})
        report.merge(evaluate_tile(pred, gt))
    return report


def pipeline_gradcheck(
    n: int = 12, seed: int = 7, literal_eq4: bool = False, raster_size: int = 32, n_coords: int = 64
) -> float:
    """Finite-difference check of the full loss, raster to both heads, in float64."""
    from .network import ModelConfig
    from .synth import compact_tile

    tile = compact_tile(n, seed)
    cfg = ModelConfig(
        num_classes=tile.num_classes,
        k=min(16, n - 1),
        raster_size=raster_size,
        dim=24,
        heads=6,
        edge_hidden=8,
        ffn_hidden=16,
        offset_hidden=8,
        feature_channels=4,
        cnn_widths=(4, 4),
        literal_eq4=literal_eq4,
    )
    prepared = prepare_tile(tile, None, cfg.k, raster_size)
    model = SpottingNetwork(cfg, seed=seed, dtype=np.float64)
    # Zero-initialized offset weights would hide the head's gradient path.
    rng = np.random.default_rng(seed)
    w = model.params["offset2.w"]
    w.data = rng.normal(0.0, 0.1, w.shape)
    return gradient_check(lambda: model.loss(prepared.inputs)[0], model.parameters(), n_coords=n_coords, seed=seed)
