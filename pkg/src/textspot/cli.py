"""Command-line entry point: ``textspot <subcommand> ...``.

Exit codes: 0 success, 1 validation or data error, 2 usage error.
Every run writes its resolved configuration to stderr as ``# key = value``
lines before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NumericError, ShapeError
from .ingest import DatasetManifest, DrawingParseError, SchemaError, TileSpec, load_drawing, save_drawing, tile_drawing
from .metrics import evaluate_tile
from .model import InvalidGeometryError, InvalidSymbolError
from .network import ModelConfig, SpottingNetwork, read_config_file
from .pipeline import evaluate, pipeline_gradcheck, predict, prepare_tile
from .render import save_overlay
from .synth import SynthConfig, generate_dataset
from .textfilter import CorpusStats, TextFilterConfig, build_corpus_stats
from .trainer import TrainConfig, load_dataset, train

log = logging.getLogger("textspot")

GRADCHECK_TOLERANCE = 1e-4
VALIDATION_ERRORS = (
    ValueError,
    KeyError,
    FileNotFoundError,
    IsADirectoryError,
    DrawingParseError,
    SchemaError,
    InvalidGeometryError,
    InvalidSymbolError,
    NumericError,
    ShapeError,
)


class UsageError(Exception):
    """Bad flag combination detected after argparse accepted the syntax."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------- config


def _config_values(path: str | None) -> dict:
    return read_config_file(path) if path else {}


def _split_config(values: dict) -> tuple[dict, dict, dict]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    text_keys = {f.name for f in fields(TextFilterConfig)}
    unknown = set(values) - model_keys - train_keys - text_keys
    if unknown:
        raise ValueError(f"config: unknown keys {sorted(unknown)}")
    pick = lambda keys: {k: v for k, v in values.items() if k in keys}  # noqa: E731
    return pick(model_keys), pick(train_keys), pick(text_keys)


def _print_config(**sections) -> None:
    for name, obj in sections.items():
        d = asdict(obj) if hasattr(obj, "__dataclass_fields__") else dict(obj)
        for k in sorted(d):
            v = d[k]
            v = list(v) if isinstance(v, tuple) else v
            print(f"# {name}.{k} = {json.dumps(v, sort_keys=True, default=str)}", file=sys.stderr)


# --------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    spec = TileSpec(args.tile_size, args.origin_snap, args.overlap)
    _print_config(run={"input": args.input, "format": args.format, "out": args.out, "tile": args.tile}, tile=spec)
    d = load_drawing(args.input, args.format)
    for reason in d.meta.get("skipped", []):
        print(f"skipped: {reason}", file=sys.stderr)
    out = Path(args.out)
    if not args.tile:
        save_drawing(d, out)
        print(f"wrote {out} ({len(d.primitives)} primitives)")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    tiles = tile_drawing(d, spec)
    for t in tiles:
        i, j = t.meta["tile_index"]
        save_drawing(t, out / f"tile_{i:+04d}_{j:+04d}.json")
    print(f"wrote {len(tiles)} tiles to {out}")
    return 0


def cmd_stats(args) -> int:
    _, _, text_values = _split_config(_config_values(args.config))
    text_cfg = TextFilterConfig(**text_values)
    if args.stats_command == "build":
        _print_config(run={"manifest": args.manifest, "out": args.out}, text=text_cfg)
        root = Path(args.manifest).parent
        manifest = DatasetManifest.load(args.manifest)
        stats = build_corpus_stats((load_drawing(root / rel) for rel in manifest.split("train")), text_cfg)
        stats.save(args.out)
        print(f"wrote {args.out} ({len(stats.counts)} tokens over {stats.documents} tiles)")
        return 0
    _print_config(run={"stats": args.stats, "top": args.top})
    stats = CorpusStats.load(args.stats)
    if args.top < 0:
        raise ValueError("--top must be non-negative")
    for tok, cnt in stats.top(args.top):
        print(f"{tok}\t{cnt}")
    return 0


def _tile_counts(spec: str) -> tuple[int, int, int]:
    parts = [int(x) for x in spec.split(",")]
    if len(parts) == 1:
        n = parts[0]
        return n, n // 5, n // 5
    if len(parts) != 3:
        raise ValueError("--tiles takes N or TRAIN,VAL,TEST")
    return parts[0], parts[1], parts[2]


def cmd_synth(args) -> int:
    tr, va, te = _tile_counts(args.tiles)
    cfg = SynthConfig(
        seed=args.seed,
        train_tiles=tr,
        val_tiles=va,
        test_tiles=te,
        text_rate=args.text_rate,
        informativeness=args.informativeness,
        clutter_rate=args.clutter_rate,
    )
    _print_config(synth=cfg, run={"out": args.out})
    manifest = generate_dataset(cfg, args.out)
    print(f"wrote {len(manifest.tiles)} tiles to {args.out}")
    return 0


def _train_configs(args, num_classes: int) -> tuple[ModelConfig, TrainConfig, TextFilterConfig]:
    model_values, train_values, text_values = _split_config(_config_values(args.config))
    train_values["seed"] = args.seed
    for name in ("epochs", "lr", "batch_size", "radius", "min_count"):
        v = getattr(args, name, None)
        if v is not None:
            train_values[name] = v
    for flag in ("no_text", "zero_edge_bias", "literal_eq4"):
        if getattr(args, flag, False):
            train_values[flag] = True
    tc = TrainConfig(**train_values)
    model_values.update(num_classes=num_classes, zero_edge_bias=tc.zero_edge_bias, literal_eq4=tc.literal_eq4)
    text_values.setdefault("min_count", tc.min_count)
    return ModelConfig(**model_values), tc, TextFilterConfig(**text_values)


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    num_classes = max(c.id for c in manifest.classes) + 2
    mc, tc, text_cfg = _train_configs(args, num_classes)
    _print_config(model=mc, train=tc, text=text_cfg, run={"manifest": args.manifest, "out": args.out})
    data = load_dataset(args.manifest, mc, no_text=tc.no_text, text_cfg=text_cfg)
    model = SpottingNetwork(mc, seed=tc.seed)
    result = train(model, data, tc, args.out)
    out = Path(args.out)
    (out / "train.cfg").write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in asdict(tc).items()))
    shutil.copyfile(Path(args.manifest).parent / manifest.stats_path, out / "stats.tsv")
    print(f"best epoch {result.best_epoch} val PQ={result.best_val_pq:.4f}")
    print(f"checkpoint {result.checkpoint}")
    return 0


def _load_run(run_dir: str | Path) -> tuple[SpottingNetwork, TrainConfig, CorpusStats]:
    run = Path(run_dir)
    mc = ModelConfig.loads((run / "model.cfg").read_text())
    tc = TrainConfig(**read_config_file(run / "train.cfg")) if (run / "train.cfg").exists() else TrainConfig()
    model = SpottingNetwork(mc)
    model.load(run / "best.ckpt")
    return model, tc, CorpusStats.load(run / "stats.tsv")


def _report_out(report, args) -> None:
    print(report.to_table(), end="")
    print(f"PQ={report.overall().pq:.4f}")
    if args.json:
        Path(args.json).write_text(report.to_json())


def cmd_eval(args) -> int:
    if args.pred and args.gt:
        _print_config(run={"pred": args.pred, "gt": args.gt})
        pred, gt = load_drawing(args.pred), load_drawing(args.gt)
        _report_out(evaluate_tile(pred, gt), args)
        return 0
    if not (args.run and args.manifest):
        raise UsageError("eval needs --pred and --gt, or --run and --manifest")
    model, tc, _ = _load_run(args.run)
    radius = args.radius if args.radius is not None else tc.radius
    _print_config(model=model.cfg, run={"run": args.run, "manifest": args.manifest, "split": args.split, "radius": radius})
    text_cfg = TextFilterConfig(min_count=tc.min_count)
    data = load_dataset(args.manifest, model.cfg, no_text=tc.no_text, text_cfg=text_cfg, splits=(args.split,))
    _report_out(evaluate(model, getattr(data, args.split), radius), args)
    return 0


def cmd_spot(args) -> int:
    model, tc, stats = _load_run(args.run)
    radius = args.radius if args.radius is not None else tc.radius
    _print_config(model=model.cfg, run={"run": args.run, "input": args.input, "out": args.out, "radius": radius})
    tile = load_drawing(args.input, args.format)
    prepared = prepare_tile(tile, stats, model.cfg.k, model.cfg.raster_size, TextFilterConfig(min_count=tc.min_count), tc.no_text)
    pred, result = predict(model, prepared, radius)
    save_drawing(pred, args.out)
    print(f"wrote {args.out} ({len(result.symbols)} symbols)")
    return 0


def cmd_render(args) -> int:
    _print_config(run={"gt": args.gt, "pred": args.pred, "out": args.out})
    gt, pred = load_drawing(args.gt), load_drawing(args.pred)
    save_overlay(gt, pred, args.out, title=Path(args.gt).stem)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    blocks = {"standard": [False], "literal-eq4": [True], "both": [False, True]}[args.block]
    _print_config(run={"n": args.n, "seed": args.seed, "block": args.block, "raster": args.raster, "coords": args.coords})
    worst = 0.0
    for literal in blocks:
        err = pipeline_gradcheck(args.n, args.seed, literal, args.raster, args.coords)
        worst = max(worst, err)
        print(f"{'literal-eq4' if literal else 'standard'}: max relative error {err:.3e}")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--config", help="file of 'key = value' lines overriding model/train/text defaults")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="textspot", description="Panoptic symbol spotting for vector drawings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="convert a drawing to canonical JSON, optionally tiled")
    s.add_argument("input", help="input drawing")
    s.add_argument("--format", choices=("canonical-json", "svg-subset"), default="canonical-json")
    s.add_argument("--out", required=True, help="output file, or directory with --tile")
    s.add_argument("--tile", action="store_true", help="split into square tiles")
    s.add_argument("--tile-size", type=float, default=14.0, help="tile edge in meters")
    s.add_argument("--origin-snap", type=float, default=1.0, help="grid the tiling anchor snaps to")
    s.add_argument("--overlap", type=float, default=0.0, help="tile overlap in meters")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("stats", help="annotation corpus statistics")
    ssub = s.add_subparsers(dest="stats_command", required=True, parser_class=_Parser)
    b = ssub.add_parser("build", parents=[common], help="count tokens over the training split")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_stats)
    sh = ssub.add_parser("show", parents=[common], help="print the most frequent tokens")
    sh.add_argument("stats", help="stats file")
    sh.add_argument("--top", type=int, default=20)
    sh.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--tiles", default="200,40,40", help="N or TRAIN,VAL,TEST (N gives N,N/5,N/5)")
    s.add_argument("--text-rate", type=float, default=0.9)
    s.add_argument("--informativeness", type=float, default=0.9)
    s.add_argument("--clutter-rate", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train on a dataset manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, help="learning rate (default 2.5e-5; 1e-3 suits small synthetic sets)")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--radius", type=float, help="clustering radius in normalized tile units")
    s.add_argument("--min-count", type=int, help="minimum corpus count for an annotation to stay")
    s.add_argument("--no-text", action="store_true", help="drop every annotation before graph construction")
    s.add_argument("--zero-edge-bias", action="store_true", help="remove the edge-feature attention bias")
    s.add_argument("--literal-eq4", action="store_true", help="bare weighted-sum stages with no transformer block")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score predictions or a trained run")
    s.add_argument("--pred", help="predicted drawing")
    s.add_argument("--gt", help="ground-truth drawing")
    s.add_argument("--run", help="run directory from train")
    s.add_argument("--manifest")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--radius", type=float)
    s.add_argument("--json", help="also write the report as JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("spot", parents=[common], help="predict labels and instances for one tile")
    s.add_argument("--run", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("canonical-json", "svg-subset"), default="canonical-json")
    s.add_argument("--out", required=True)
    s.add_argument("--radius", type=float)
    s.set_defaults(func=cmd_spot)

    s = sub.add_parser("render", parents=[common], help="SVG overlay of ground truth and prediction")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")
    s.add_argument("--n", type=int, default=12, help="primitives in the test tile")
    s.add_argument("--block", choices=("standard", "literal-eq4", "both"), default="both")
    s.add_argument("--raster", type=int, default=32, help="raster size for the check")
    s.add_argument("--coords", type=int, default=64, help="coordinates probed per parameter")
    s.set_defaults(func=cmd_gradcheck)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"textspot: usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"textspot: usage error: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        module = type(e).__module__.replace("textspot.", "")
        module = "textspot" if module == "builtins" else f"textspot.{module}"
        print(f"{module} ({args.command}): {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
