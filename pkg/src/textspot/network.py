"""Type-aware neighbor attention network with classification and offset heads.

Each stage scores neighbors with scaled dot products per head, adds a bias
produced by a two-layer MLP over the edge tensor, and aggregates neighbor
features with the resulting softmax weights. By default the aggregation sits
inside a pre-norm transformer block (value/output projections, residuals,
feed-forward); ``literal_eq4`` reduces a stage to the bare weighted sum of the
previous features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .raster import ConvStack, ExtractorConfig, FeatureMap


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 8
    stages: int = 4
    heads: int = 6
    dim: int = 96
    edge_dim: int = 8
    edge_hidden: int = 32
    ffn_hidden: int = 192
    offset_hidden: int = 96
    offset_dim: int = 2
    k: int = 16
    am_scale: float = 30.0
    am_margin: float = 0.35
    lambda_sem: float = 1.0
    lambda_ins: float = 0.3
    literal_eq4: bool = False
    zero_edge_bias: bool = False
    supervise_text: bool = True
    position_embedding: bool = True
    edge_values: bool = True
    raster_size: int = 256
    feature_channels: int = 32
    cnn_widths: tuple[int, ...] = (8, 16)
    cnn_depth: int = 1
    freeze_extractor: bool = False

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if self.lambda_sem < 0 or self.lambda_ins < 0:
            raise ValueError("loss weights must be non-negative")
        if self.num_classes < 2:
            raise ValueError("need at least background + one class")
        object.__setattr__(self, "cnn_widths", tuple(self.cnn_widths))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(
            raster_size=self.raster_size, channels=self.feature_channels, widths=self.cnn_widths, depth=self.cnn_depth
        )

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text: str, **overrides) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        values = parse_config_text(text)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"config: unknown keys {unknown}")
        values.update(overrides)
        return cls(**values)


def parse_config_text(text: str, source: str = "config") -> dict:
    """Parse ``key = value`` lines (values are JSON literals, ``#`` starts a comment)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected key = value")
        try:
            out[key.strip()] = json.loads(raw.strip())
        except json.JSONDecodeError as e:
            raise ValueError(f"{source}:{lineno}: bad value {raw.strip()!r}") from e
    return out


def read_config_file(path: str | Path) -> dict:
    return parse_config_text(Path(path).read_text(), str(path))


@dataclass
class GraphInputs:
    """Everything the network consumes for one tile, precomputed once."""

    image: np.ndarray  # (S, S) raster
    centers: np.ndarray  # (N, 2) normalized primitive centers
    neighbors: np.ndarray  # (N, k) int
    mask: np.ndarray  # (N, k) bool
    edges: np.ndarray  # (N, k, 8)
    labels: np.ndarray | None = None  # (N,) int
    offset_targets: np.ndarray | None = None  # (N, 2) instance center minus primitive center
    thing_mask: np.ndarray | None = None  # (N,) float, 1 for primitives inside an instance
    text_mask: np.ndarray | None = None  # (N,) bool
    feature_map: FeatureMap | None = None  # imported map; bypasses the conv stack
    tile_size: float = 1.0  # meters per normalized unit; the instance loss is measured in meters

    @property
    def n(self) -> int:
        return self.centers.shape[0]


@dataclass
class StageState:
    features: Tensor  # (N, d)
    scores: Tensor  # (N, k, h), -inf on padded slots
    bias: Tensor | None  # (N, k, h)
    weights: Tensor  # (N, k, h)


@dataclass
class ForwardResult:
    cosine: Tensor  # (N, C)
    offsets: Tensor  # (N, 2)
    stages: list[StageState] = field(default_factory=list)

    def logits(self) -> np.ndarray:
        return self.cosine.data


def _linear(rng, name, fan_in, fan_out, dtype, bias=True) -> list[Parameter]:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    out = [Parameter(name + ".w", rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), "xavier-uniform")]
    if bias:
        out.append(Parameter(name + ".b", np.zeros(fan_out, dtype), "zeros"))
    return out


class SpottingNetwork:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, h = cfg.dim, cfg.heads
        self.cnn = ConvStack(cfg.extractor, rng, dtype)
        plist: list[Parameter] = list(self.cnn.parameters())
        plist += _linear(rng, "input", cfg.feature_channels, d, dtype)
        if cfg.position_embedding:
            plist += _linear(rng, "pos", 2, d, dtype, bias=False)
        for s in range(cfg.stages):
            p = f"stage{s}"
            plist += _linear(rng, p + ".q", d, d, dtype, bias=False)
            plist += _linear(rng, p + ".k", d, d, dtype, bias=False)
            plist += _linear(rng, p + ".edge1", cfg.edge_dim, cfg.edge_hidden, dtype)
            plist += _linear(rng, p + ".edge2", cfg.edge_hidden, h, dtype)
            if not cfg.literal_eq4:
                plist += [
                    Parameter(p + ".ln1.g", np.ones(d, dtype), "ones"),
                    Parameter(p + ".ln1.b", np.zeros(d, dtype), "zeros"),
                ]
                plist += _linear(rng, p + ".v", d, d, dtype, bias=False)
                if cfg.edge_values:
                    plist += _linear(rng, p + ".ev", cfg.edge_dim, d, dtype, bias=False)
                plist += _linear(rng, p + ".o", d, d, dtype)
                plist += [
                    Parameter(p + ".ln2.g", np.ones(d, dtype), "ones"),
                    Parameter(p + ".ln2.b", np.zeros(d, dtype), "zeros"),
                ]
                plist += _linear(rng, p + ".ffn1", d, cfg.ffn_hidden, dtype)
                plist += _linear(rng, p + ".ffn2", cfg.ffn_hidden, d, dtype)
        if not cfg.literal_eq4:
            plist += [Parameter("final.ln.g", np.ones(d, dtype), "ones"), Parameter("final.ln.b", np.zeros(d, dtype), "zeros")]
        plist.append(Parameter("cls.w", rng.normal(0.0, 1.0, (cfg.num_classes, d)).astype(dtype), "normal"))
        plist += _linear(rng, "offset1", d, cfg.offset_hidden, dtype)
        plist += _linear(rng, "offset2", cfg.offset_hidden, cfg.offset_dim, dtype)
        # Regression starts from zero offsets.
        plist[-2].data[...] = 0.0
        self.params: dict[str, Parameter] = {}
        for prm in plist:
            if prm.name in self.params:
                raise ValueError(f"duplicate parameter name {prm.name}")
            self.params[prm.name] = prm

    # ------------------------------------------------------------- params
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        """Parameters the optimizer updates; a frozen extractor is left out."""
        if not self.cfg.freeze_extractor:
            return self.parameters()
        return [p for k, p in self.params.items() if not k.startswith("cnn.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype).copy()

    def save(self, path: str | Path) -> None:
        ad.save_parameters(self.params, path)

    def load(self, path: str | Path) -> None:
        self.load_state_dict(ad.load_parameters(path))

    def stage_params(self, s: int) -> dict[str, Parameter]:
        pre = f"stage{s}."
        return {k[len(pre) :]: v for k, v in self.params.items() if k.startswith(pre)}

    def _mlp(self, prefix1: str, prefix2: str) -> tuple[Tensor, ...]:
        p = self.params
        return (p[prefix1 + ".w"], p[prefix1 + ".b"], p[prefix2 + ".w"], p[prefix2 + ".b"])

    # ------------------------------------------------------------ forward
    def vertex_features(self, inputs: GraphInputs) -> Tensor:
        """f_0: bilinear samples of the feature map projected to the model width."""
        if inputs.feature_map is not None:
            fm = inputs.feature_map
        else:
            fm = FeatureMap(self.cnn(Tensor(inputs.image.astype(self.dtype)[..., None])))
        sampled = ad.bilinear_sample(fm.values, fm.to_cells(np.clip(inputs.centers, 0.0, 1.0)))
        p = self.params
        f0 = sampled @ p["input.w"] + p["input.b"]
        if self.cfg.position_embedding:
            f0 = f0 + Tensor((inputs.centers - 0.5).astype(self.dtype)) @ p["pos.w"]
        return f0

    def attention_scores(self, f: Tensor, inputs: GraphInputs, s: int) -> Tensor:
        """Per-head scaled dot products q_i . k_j / sqrt(d/h) for j in N(i), shape (N, k, h)."""
        cfg = self.cfg
        n, k = inputs.neighbors.shape
        h, dh = cfg.heads, cfg.head_dim
        sp = self.stage_params(s)
        q = (f @ sp["q.w"]).reshape(n, 1, h, dh)
        keys = ad.gather_rows(f @ sp["k.w"], inputs.neighbors).reshape(n, k, h, dh)
        a = (q * keys).sum(axis=-1) * (1.0 / math.sqrt(dh))
        return ad.masked_fill(a, inputs.mask[:, :, None], -np.inf)

    def edge_bias(self, inputs: GraphInputs, s: int) -> Tensor:
        sp = self.stage_params(s)
        e = Tensor(inputs.edges.astype(self.dtype))
        return ad.mlp_apply((sp["edge1.w"], sp["edge1.b"], sp["edge2.w"], sp["edge2.b"]), e)

    def neighbor_weights(self, a: Tensor, t: Tensor | None, inputs: GraphInputs) -> Tensor:
        """Softmax over the neighbor axis of (A + T), per head; shape (N, k, h)."""
        logits = a if t is None else a + t
        w = ad.softmax_lastdim(logits.transpose(0, 2, 1), inputs.mask[:, None, :])
        return w.transpose(0, 2, 1)

    def _aggregate(self, w: Tensor, values: Tensor, inputs: GraphInputs, edge_term: Tensor | None = None) -> Tensor:
        n, k = inputs.neighbors.shape
        h, dh = self.cfg.heads, self.cfg.head_dim
        gathered = ad.gather_rows(values, inputs.neighbors)
        if edge_term is not None:
            gathered = gathered + edge_term
        agg = (w.reshape(n, k, h, 1) * gathered.reshape(n, k, h, dh)).sum(axis=1)
        return agg.reshape(n, h * dh)

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x) * self.params[prefix + ".g"] + self.params[prefix + ".b"]

    def stage(self, f: Tensor, inputs: GraphInputs, s: int) -> StageState:
        sp = self.stage_params(s)
        if self.cfg.literal_eq4:
            a = self.attention_scores(f, inputs, s)
            t = None if self.cfg.zero_edge_bias else self.edge_bias(inputs, s)
            w = self.neighbor_weights(a, t, inputs)
            return StageState(self._aggregate(w, f, inputs), a, t, w)
        x = self._layer_norm(f, f"stage{s}.ln1")
        a = self.attention_scores(x, inputs, s)
        t = None if self.cfg.zero_edge_bias else self.edge_bias(inputs, s)
        w = self.neighbor_weights(a, t, inputs)
        # Optional relative-position term: each value also sees its edge vector.
        ev = Tensor(inputs.edges.astype(self.dtype)) @ sp["ev.w"] if self.cfg.edge_values else None
        attn = self._aggregate(w, x @ sp["v.w"], inputs, ev) @ sp["o.w"] + sp["o.b"]
        f = f + attn
        y = self._layer_norm(f, f"stage{s}.ln2")
        f = f + ad.mlp_apply((sp["ffn1.w"], sp["ffn1.b"], sp["ffn2.w"], sp["ffn2.b"]), y)
        return StageState(f, a, t, w)

    def forward(self, inputs: GraphInputs) -> ForwardResult:
        if inputs.n < 2:
            raise ValueError("a graph needs at least two primitives")
        f = self.vertex_features(inputs)
        states = []
        for s in range(self.cfg.stages):
            st = self.stage(f, inputs, s)
            states.append(st)
            f = st.features
        if not self.cfg.literal_eq4:
            f = self._layer_norm(f, "final.ln")
        cos = classification_cosine(f, self.params["cls.w"])
        offsets = ad.mlp_apply(self._mlp("offset1", "offset2"), f)
        return ForwardResult(cos, offsets, states)

    def loss(self, inputs: GraphInputs, out: ForwardResult | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """(total, semantic, instance) losses for one tile."""
        if inputs.labels is None or inputs.offset_targets is None or inputs.thing_mask is None:
            raise ValueError("training targets missing from inputs")
        out = out if out is not None else self.forward(inputs)
        weights = None
        if not self.cfg.supervise_text and inputs.text_mask is not None:
            weights = (~inputs.text_mask).astype(np.float64)
        l_sem = am_softmax_loss(out.cosine, inputs.labels, self.cfg.am_scale, self.cfg.am_margin, weights)
        l_ins = instance_loss(out.offsets, inputs.offset_targets, inputs.thing_mask) * inputs.tile_size
        return total_loss(l_sem, l_ins, self.cfg), l_sem, l_ins


# ------------------------------------------------------------------- heads


def classification_cosine(f: Tensor, class_weights: Tensor) -> Tensor:
    """Cosine similarity between L2-normalized features and class weight rows."""
    return ad.l2_norm_rows(f) @ ad.l2_norm_rows(class_weights).transpose(1, 0)


def am_softmax_loss(cosine: Tensor, targets: np.ndarray, scale: float, margin: float, weights=None) -> Tensor:
    """Cross-entropy over scale * (cos - margin * onehot(target))."""
    targets = np.asarray(targets, dtype=int)
    onehot = np.zeros(cosine.shape, dtype=cosine.dtype)
    onehot[np.arange(len(targets)), targets] = margin
    logits = (cosine - onehot) * scale
    return ad.cross_entropy_logits(logits, targets, weights)


def instance_loss(offsets: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean Euclidean residual ||o_i - (c_i - p_i)|| over primitives inside an instance."""
    m = np.asarray(mask, dtype=offsets.dtype)
    total = m.sum()
    if total == 0:
        return Tensor(np.zeros((), dtype=offsets.dtype))
    resid = ad.norm_lastdim(offsets - targets.astype(offsets.dtype))
    return (resid * m).sum() * (1.0 / total)


def total_loss(l_sem: Tensor | float, l_ins: Tensor | float, cfg: ModelConfig) -> Tensor:
    l_sem, l_ins = ad.as_tensor(l_sem), ad.as_tensor(l_ins)
    if not (np.isfinite(l_sem.data).all() and np.isfinite(l_ins.data).all()):
        raise ad.NumericError(f"non-finite loss terms: sem={l_sem.data} ins={l_ins.data}")
    return l_sem * cfg.lambda_sem + l_ins * cfg.lambda_ins


def with_ablation(cfg: ModelConfig, **flags) -> ModelConfig:
    return replace(cfg, **flags)
