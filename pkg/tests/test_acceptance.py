"""Acceptance criteria 1 to 9; each records one PASS/FAIL line for the summary."""

import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import brute_force_matching, drawings, random_symbol_sets, record
from textspot.cli import run
from textspot.graph import knn_neighbors
from textspot.ingest import parse_drawing, serialize_drawing
from textspot.metrics import match_symbols, panoptic_scores, pq_from_components, weighted_iou
from textspot.network import GraphInputs, ModelConfig, SpottingNetwork, with_ablation
from textspot.pipeline import evaluate, pipeline_gradcheck, prepare_tile
from textspot.synth import SynthConfig, compact_tile, generate_dataset
from textspot.trainer import DESK_LR, TrainConfig, load_dataset, train

from test_graph import brute_force, points
from test_metrics import HALF, sym

# ------------------------------------------------------------ criterion 1

TABLE_ROWS = [(0.8298, 0.8619, 0.7152), (0.8381, 0.8794, 0.7371)]


def test_c1_pq_matches_table_rows():
    t0 = time.perf_counter()
    got = [round(pq_from_components(rq, sq), 4) for rq, sq, _ in TABLE_ROWS]
    elapsed = time.perf_counter() - t0
    ok = all(g == want for g, (*_, want) in zip(got, TABLE_ROWS)) and elapsed < 1.0
    detail = ", ".join(f"{rq}x{sq}={pq_from_components(rq, sq):.8f}->{g} (want {w})" for (rq, sq, w), g in zip(TABLE_ROWS, got))
    record(1, ok, detail)
    assert got[0] == 0.7152
    # Fails: the product of the rounded components is 0.73702514.
    assert got[1] == 0.7371


def test_c1_rows_consistent_with_unrounded_components():
    # The reference components are themselves rounded to 4 places; the
    # product range they allow must contain the reference PQ.
    for rq, sq, pq in TABLE_ROWS:
        lo = pq_from_components(rq - 5e-5, sq - 5e-5)
        hi = pq_from_components(rq + 5e-5, sq + 5e-5)
        assert lo <= pq <= hi


# ------------------------------------------------------------ criterion 2


def test_c2_metric_oracle_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = product_errors = 0
    for _ in range(1000):
        pred, gt, w = random_symbol_sets(rng)
        m = match_symbols(pred, gt, w)
        count, total = brute_force_matching(pred, gt, w)
        if len(m.tp) != count or abs(sum(i for *_, i in m.tp) - total) > 1e-12:
            mismatches += 1
        s = panoptic_scores(m)
        if abs(s.pq - s.rq * s.sq) > 1e-12:
            product_errors += 1
        if gt:
            perfect = panoptic_scores(match_symbols(gt, gt, w))
            if perfect.pq != 1.0:
                product_errors += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and product_errors == 0 and elapsed < 30
    record(2, ok, f"1000 pairs, {mismatches} matching mismatches, {product_errors} score errors, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ criterion 3


def test_c3_weighted_iou_half():
    iou = weighted_iou(sym(1, 0, 0, 1), sym(1, 0, 1, 2), HALF)
    ok = abs(iou - 0.5) <= 1e-12
    record(3, ok, f"IoU={iou!r}")
    assert ok


# ------------------------------------------------------------ criterion 4


def test_c4_full_pipeline_gradient():
    t0 = time.perf_counter()
    errs = {name: pipeline_gradcheck(12, 7, literal) for name, literal in (("standard", False), ("literal-eq4", True))}
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and elapsed < 120
    record(4, ok, ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + f", {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------ criterion 5


def _permuted(inputs: GraphInputs, perm: np.ndarray) -> GraphInputs:
    inv = np.argsort(perm)
    return GraphInputs(
        image=inputs.image,
        centers=inputs.centers[perm],
        neighbors=inv[inputs.neighbors[perm]],
        mask=inputs.mask[perm],
        edges=inputs.edges[perm],
    )


def test_c5_attention_invariants():
    cfg = ModelConfig(num_classes=8, raster_size=64)
    prepared = prepare_tile(compact_tile(16, 5), None, cfg.k, cfg.raster_size)
    model = SpottingNetwork(cfg, seed=1, dtype=np.float64)
    out = model.forward(prepared.inputs)
    row_err = max(np.abs(s.weights.data.sum(axis=1) - 1.0).max() for s in out.stages)

    perm = np.random.default_rng(0).permutation(prepared.inputs.n)
    moved = model.forward(_permuted(prepared.inputs, perm))
    perm_err = max(np.abs(a.features.data[perm] - b.features.data).max() for a, b in zip(out.stages, moved.stages))

    unbiased = SpottingNetwork(with_ablation(cfg, zero_edge_bias=True), seed=1, dtype=np.float64)
    for s in range(cfg.stages):
        for name in ("edge2.w", "edge2.b"):
            model.params[f"stage{s}.{name}"].data[...] = 0.0
    a, b = model.forward(prepared.inputs), unbiased.forward(prepared.inputs)
    bitwise = a.cosine.data.tobytes() == b.cosine.data.tobytes() and a.offsets.data.tobytes() == b.offsets.data.tobytes()

    ok = row_err <= 1e-9 and perm_err <= 1e-9 and bitwise
    record(5, ok, f"row sum err {row_err:.1e}, permutation err {perm_err:.1e}, zeroed MLP bit-identical {bitwise}")
    assert ok


# ------------------------------------------------------- criteria 6 and 7

_RESULTS: dict[tuple[str, int], tuple[float, float]] = {}


@pytest.fixture(scope="module")
def seed7_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("seed7")
    generate_dataset(SynthConfig(seed=7, train_tiles=200, val_tiles=40, test_tiles=40, informativeness=0.9), root)
    return root / "manifest.json"


def _train_variant(manifest, variant: str, seed: int) -> tuple[float, float]:
    key = (variant, seed)
    if key not in _RESULTS:
        tc = TrainConfig(lr=DESK_LR, seed=seed, no_text=variant == "no-text", zero_edge_bias=variant == "zero-edge-bias")
        mc = ModelConfig(num_classes=8, zero_edge_bias=tc.zero_edge_bias)
        t0 = time.perf_counter()
        data = load_dataset(manifest, mc, no_text=tc.no_text)
        model = SpottingNetwork(mc, seed=seed)
        train(model, data, tc)
        pq = evaluate(model, data.test, tc.radius).overall().pq
        _RESULTS[key] = (pq, time.perf_counter() - t0)
    return _RESULTS[key]


@pytest.mark.slow
def test_c6_desk_scale_training(seed7_dataset):
    pq, elapsed = _train_variant(seed7_dataset, "full", 0)
    ok = pq >= 0.80 and elapsed < 30 * 60
    record(6, ok, f"test PQ {pq:.4f} after 50 epochs in {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c7_ablation_direction(seed7_dataset):
    medians = {}
    for variant in ("full", "no-text", "zero-edge-bias"):
        medians[variant] = statistics.median(_train_variant(seed7_dataset, variant, s)[0] for s in range(3))
    text_gain = medians["full"] - medians["no-text"]
    bias_gain = medians["full"] - medians["zero-edge-bias"]
    ok = text_gain >= 0.03 and bias_gain >= 0.0
    per_seed = "; ".join(f"{v} " + "/".join(f"{_RESULTS[(v, s)][0]:.4f}" for s in range(3)) for v in medians)
    record(7, ok, f"medians {', '.join(f'{k} {v:.4f}' for k, v in medians.items())} ({per_seed})")
    assert text_gain >= 0.03
    assert bias_gain >= 0.0


# ------------------------------------------------------------ criterion 8

_ROUND_TRIPS = {"count": 0, "failures": 0}


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(drawings())
def test_c8_canonical_round_trip(d):
    _ROUND_TRIPS["count"] += 1
    raw = serialize_drawing(d)
    if parse_drawing(raw) != d or serialize_drawing(parse_drawing(raw)) != raw:
        _ROUND_TRIPS["failures"] += 1
        raise AssertionError("round trip changed the drawing")


def test_c8_knn_and_round_trip_summary():
    rng = np.random.default_rng(8)
    cases = bad = 0
    for trial in range(60):
        n = int(rng.integers(2, 201))
        if trial % 2:
            xy = [tuple(map(float, p)) for p in rng.integers(0, 12, (n, 2))]  # many exact ties
        else:
            xy = [tuple(map(float, p)) for p in rng.uniform(0, 14, (n, 2))]
        k = int(rng.integers(1, 24))
        t = knn_neighbors(points(xy), k)
        cases += 1
        bad += [t.neighbors(i) for i in range(n)] != brute_force(xy, k)
    trips, trip_bad = _ROUND_TRIPS["count"], _ROUND_TRIPS["failures"]
    ok = bad == 0 and trips >= 1000 and trip_bad == 0
    record(8, ok, f"kNN {cases - bad}/{cases} instances (N<=200) match brute force; {trips - trip_bad}/{trips} round trips exact")
    assert bad == 0
    assert trips >= 1000 and trip_bad == 0


# ------------------------------------------------------------ criterion 9

TINY_CONFIG = """\
dim = 12
heads = 2
edge_hidden = 8
ffn_hidden = 16
offset_hidden = 8
feature_channels = 4
cnn_widths = [4, 4]
raster_size = 32
k = 6
stages = 2
min_count = 1
"""


def _tree_bytes(path):
    if path.is_file():
        return {path.name: path.read_bytes()}
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_c9_cli_determinism(tmp_path, capsys):
    (tmp_path / "tiny.cfg").write_text(TINY_CONFIG)
    cfg = str(tmp_path / "tiny.cfg")
    data = tmp_path / "a" / "data"  # later commands in both passes read the first pass's dataset
    manifest = str(data / "manifest.json")

    def commands(d):
        yield "synth", ["synth", "--tiles", "3,2,1", "--seed", "4", "--out", str(d / "data")], d / "data"
        tile = str(sorted((data / "tiles").glob("test_*.json"))[0])
        yield "ingest", ["ingest", tile, "--tile", "--tile-size", "7", "--out", str(d / "ing")], d / "ing"
        yield "stats build", ["stats", "build", "--manifest", manifest, "--out", str(d / "s.tsv")], d / "s.tsv"
        yield "stats show", ["stats", "show", str(d / "s.tsv")], None
        yield "train", ["train", "--manifest", manifest, "--out", str(d / "run"), "--epochs", "2", "--lr", "1e-3",
                        "--seed", "3", "--config", cfg], d / "run"
        yield "eval", ["eval", "--run", str(d / "run"), "--manifest", manifest, "--json", str(d / "r.json")], d / "r.json"
        yield "spot", ["spot", "--run", str(d / "run"), "--input", tile, "--out", str(d / "p.json")], d / "p.json"
        yield "render", ["render", "--gt", tile, "--pred", str(d / "p.json"), "--out", str(d / "o.svg")], d / "o.svg"
        yield "gradcheck", ["gradcheck", "--n", "8", "--block", "standard", "--coords", "8"], None

    outputs = {}
    for side in ("a", "b"):
        d = tmp_path / side
        d.mkdir()
        for name, argv, produced in commands(d):
            code = run(argv)
            # Output paths differ between the passes by construction.
            stdout = capsys.readouterr().out.replace(str(d), "<dir>")
            files = _tree_bytes(produced) if produced is not None else {}
            outputs.setdefault(name, []).append((code, stdout, files))
    differing = [name for name, (a, b) in outputs.items() if a != b]
    failed = [name for name, runs in outputs.items() if any(code != 0 for code, *_ in runs)]
    ok = not differing and not failed
    record(9, ok, f"{len(outputs)} subcommands rerun; differing {differing or 'none'}; nonzero exit {failed or 'none'}")
    assert not failed
    assert not differing
