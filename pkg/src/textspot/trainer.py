"""Adam training with step-decayed learning rate and best-validation selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NumericError, Parameter
from .ingest import DatasetManifest, load_drawing
from .network import ModelConfig, SpottingNetwork
from .pipeline import PreparedTile, evaluate, prepare_tile
from .textfilter import CorpusStats, TextFilterConfig

log = logging.getLogger(__name__)

DEFAULT_LR = 2.5e-5
# Small synthetic datasets converge within 50 epochs only at a larger step.
DESK_LR = 1e-3
HISTORY_COLUMNS = ("epoch", "loss", "L_sem", "L_ins", "val_PQ", "val_RQ", "val_SQ", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    decay: float = 0.5
    decay_every: int = 20
    epochs: int = 50
    batch_size: int = 2
    seed: int = 0
    no_text: bool = False
    zero_edge_bias: bool = False
    literal_eq4: bool = False
    radius: float = 0.02
    min_count: int = 5

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ValueError("batch_size, epochs and decay_every must be positive")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.decay ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    t: int,
    cfg: TrainConfig,
    lr: float | None = None,
) -> None:
    """One bias-corrected Adam update, in place. ``None`` gradients count as zero."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    lr = cfg.lr if lr is None else lr
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)
    state.t = t


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_pq: float
    checkpoint: Path | None


@dataclass
class Dataset:
    train: list[PreparedTile]
    val: list[PreparedTile]
    test: list[PreparedTile]
    stats: CorpusStats
    num_classes: int


def load_dataset(
    manifest_path: str | Path,
    model_cfg: ModelConfig,
    no_text: bool = False,
    text_cfg: TextFilterConfig = TextFilterConfig(),
    splits: Sequence[str] = ("train", "val", "test"),
) -> Dataset:
    root = Path(manifest_path).parent
    manifest = DatasetManifest.load(manifest_path)
    stats = CorpusStats.load(root / manifest.stats_path)
    out = {}
    for split in ("train", "val", "test"):
        tiles = []
        if split in splits:
            for rel in manifest.split(split):
                tile = load_drawing(root / rel)
                tiles.append(prepare_tile(tile, stats, model_cfg.k, model_cfg.raster_size, text_cfg, no_text))
        out[split] = tiles
    n = max(c.id for c in manifest.classes) + 2
    return Dataset(out["train"], out["val"], out["test"], stats, n)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_history(rows: list[dict], path: str | Path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) if c == "epoch" else _fmt(r[c]) for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def train(
    model: SpottingNetwork,
    data: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train, validating after every epoch and keeping the best checkpoint.

    On return the model holds the parameters of the best validation epoch.
    """
    if not data.train:
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.trainable_parameters()
    state = AdamState()
    history: list[dict] = []
    best = (-1.0, -1)
    best_state = model.state_dict()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data.train))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = [data.train[i] for i in order[start : start + cfg.batch_size]]
            for p in model.parameters():
                p.zero_grad()
            for tile in batch:
                total, l_sem, l_ins = model.loss(tile.inputs)
                (total * (1.0 / len(batch))).backward()
                sums += (total.item(), l_sem.item(), l_ins.item())
            step += 1
            adam_step(params, [p.grad for p in params], state, step, cfg, lr)
        n = len(data.train)
        val = evaluate(model, data.val, cfg.radius).overall() if data.val else None
        row = {
            "epoch": epoch,
            "loss": sums[0] / n,
            "L_sem": sums[1] / n,
            "L_ins": sums[2] / n,
            "val_PQ": val.pq if val else math.nan,
            "val_RQ": val.rq if val else math.nan,
            "val_SQ": val.sq if val else math.nan,
            "lr": lr,
        }
        history.append(row)
        log.info(
            "epoch %d loss %.4f sem %.4f ins %.4f val PQ %.4f", epoch, row["loss"], row["L_sem"], row["L_ins"], row["val_PQ"]
        )
        score = row["val_PQ"] if val else -row["loss"]
        if score > best[0] or best[1] < 0:
            best = (score, epoch)
            best_state = model.state_dict()
        if out is not None:
            write_history(history, out / "history.csv")
    model.load_state_dict(best_state)
    ckpt = None
    if out is not None:
        ckpt = out / "best.ckpt"
        model.save(ckpt)
        (out / "model.cfg").write_text(model.cfg.dumps())
    return TrainResult(history, best[1], best[0], ckpt)
