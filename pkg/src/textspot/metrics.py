"""Panoptic quality for symbol spotting with log-length weighted IoU.

A predicted and a ground-truth symbol match when their labels agree and
their weighted IoU exceeds 0.5. Because every symbol's weight mass exceeds
half of any union it wins, no symbol can match twice, so matching needs no
assignment solver.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .model import BACKGROUND, Drawing, InvalidSymbolError, Symbol, primitive_length

MATCH_THRESHOLD = 0.5


def primitive_weights(drawing: Drawing) -> dict[int, float]:
    return {p.id: math.log1p(primitive_length(p)) for p in drawing.primitives}


def _weights(source: Drawing | Mapping[int, float]) -> Mapping[int, float]:
    return primitive_weights(source) if isinstance(source, Drawing) else source


def weighted_iou(sp: Symbol, sg: Symbol, drawing: Drawing | Mapping[int, float]) -> float:
    w = _weights(drawing)
    union = sp.members | sg.members
    if not union:
        raise InvalidSymbolError("IoU of two empty symbols")
    inter = sum(w[i] for i in sorted(sp.members & sg.members))
    total = sum(w[i] for i in sorted(union))
    if total == 0:
        # Only zero-length primitives: fall back to plain set overlap.
        return len(sp.members & sg.members) / len(union)
    return inter / total


@dataclass
class MatchResult:
    tp: list[tuple[Symbol, Symbol, float]] = field(default_factory=list)
    fp: list[Symbol] = field(default_factory=list)
    fn: list[Symbol] = field(default_factory=list)


def match_symbols(pred: Iterable[Symbol], gt: Iterable[Symbol], drawing: Drawing | Mapping[int, float]) -> MatchResult:
    pred, gt = list(pred), list(gt)
    w = _weights(drawing)
    owner: dict[tuple[int, int], list[int]] = defaultdict(list)
    for gi, g in enumerate(gt):
        for pid in g.members:
            owner[(g.label, pid)].append(gi)
    matched_gt: set[int] = set()
    out = MatchResult()
    for p in pred:
        candidates = sorted({gi for pid in p.members for gi in owner.get((p.label, pid), ())})
        hit = None
        for gi in candidates:
            if gi in matched_gt:
                continue
            iou = weighted_iou(p, gt[gi], w)
            if iou > MATCH_THRESHOLD:
                hit = (gi, iou)
                break
        if hit is None:
            out.fp.append(p)
        else:
            matched_gt.add(hit[0])
            out.tp.append((p, gt[hit[0]], hit[1]))
    out.fn = [g for gi, g in enumerate(gt) if gi not in matched_gt]
    return out


@dataclass(frozen=True)
class PanopticScores:
    pq: float
    rq: float
    sq: float
    tp: int
    fp: int
    fn: int
    empty: bool = False


def scores_from_counts(tp: int, fp: int, fn: int, iou_sum: float) -> PanopticScores:
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return PanopticScores(0.0, 0.0, 0.0, 0, 0, 0, empty=True)
    rq = tp / denom
    sq = iou_sum / tp if tp else 0.0
    pq = iou_sum / denom
    if abs(pq - rq * sq) > 1e-12:
        raise ArithmeticError(f"PQ {pq} disagrees with RQ*SQ {rq * sq}")
    return PanopticScores(pq, rq, sq, tp, fp, fn)


def panoptic_scores(m: MatchResult) -> PanopticScores:
    return scores_from_counts(len(m.tp), len(m.fp), len(m.fn), sum(iou for _, _, iou in m.tp))


def pq_from_components(rq: float, sq: float) -> float:
    return rq * sq


@dataclass
class _ClassTally:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def scores(self) -> PanopticScores:
        return scores_from_counts(self.tp, self.fp, self.fn, self.iou_sum)


@dataclass
class PanopticReport:
    """Per-class and pooled scores; merge tile reports with :meth:`merge`."""

    classes: dict[int, _ClassTally] = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)
    # primitive-level tallies per class: (correct, predicted, ground truth)
    prim: dict[int, list[int]] = field(default_factory=dict)

    def merge(self, other: "PanopticReport") -> "PanopticReport":
        for c, t in other.classes.items():
            mine = self.classes.setdefault(c, _ClassTally())
            mine.tp += t.tp
            mine.fp += t.fp
            mine.fn += t.fn
            mine.iou_sum += t.iou_sum
        for c, counts in other.prim.items():
            mine = self.prim.setdefault(c, [0, 0, 0])
            for i in range(3):
                mine[i] += counts[i]
        self.names.update(other.names)
        return self

    def overall(self) -> PanopticScores:
        return scores_from_counts(
            sum(t.tp for t in self.classes.values()),
            sum(t.fp for t in self.classes.values()),
            sum(t.fn for t in self.classes.values()),
            sum(t.iou_sum for t in self.classes.values()),
        )

    def per_class(self) -> dict[int, PanopticScores]:
        return {c: self.classes[c].scores() for c in sorted(self.classes)}

    @staticmethod
    def _f1(correct: int, predicted: int, actual: int) -> float:
        p = correct / predicted if predicted else 0.0
        r = correct / actual if actual else 0.0
        return 2 * p * r / (p + r) if p + r else 0.0

    def f1(self, cls: int | None = None) -> float:
        if cls is not None:
            return self._f1(*self.prim.get(cls, [0, 0, 0]))
        tot = [sum(v[i] for v in self.prim.values()) for i in range(3)]
        return self._f1(*tot)

    @property
    def pq(self) -> float:
        return self.overall().pq

    def to_dict(self) -> dict:
        def row(s: PanopticScores, f1: float) -> dict:
            return {"PQ": s.pq, "RQ": s.rq, "SQ": s.sq, "F1": f1, "TP": s.tp, "FP": s.fp, "FN": s.fn}

        return {
            "overall": row(self.overall(), self.f1()),
            "classes": {self.names.get(c, str(c)): row(s, self.f1(c)) for c, s in self.per_class().items()},
        }

    def to_json(self) -> str:
        return json.dumps(_round_floats(self.to_dict()), sort_keys=True, indent=1) + "\n"

    def to_table(self) -> str:
        d = self.to_dict()
        lines = [f"{'class':<16}{'PQ':>8}{'RQ':>8}{'SQ':>8}{'F1':>8}{'TP':>6}{'FP':>6}{'FN':>6}"]
        items = list(d["classes"].items()) + [("total", d["overall"])]
        for name, r in items:
            lines.append(
                f"{name:<16}{r['PQ']:>8.4f}{r['RQ']:>8.4f}{r['SQ']:>8.4f}{r['F1']:>8.4f}{r['TP']:>6d}{r['FP']:>6d}{r['FN']:>6d}"
            )
        return "\n".join(lines) + "\n"


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    return obj


def classwise_report(m: MatchResult, gt: Drawing, pred: Drawing | None = None) -> PanopticReport:
    """Scores per class from one tile's matching.

    With ``pred`` given, primitive-level semantic precision/recall is tallied
    over every label except background and annotation.
    """
    report = PanopticReport()
    for p, _, iou in m.tp:
        t = report.classes.setdefault(p.label, _ClassTally())
        t.tp += 1
        t.iou_sum += iou
    for p in m.fp:
        report.classes.setdefault(p.label, _ClassTally()).fp += 1
    for g in m.fn:
        report.classes.setdefault(g.label, _ClassTally()).fn += 1
    if pred is not None:
        skip = {BACKGROUND, gt.annotation_label}
        for pg, pp in zip(gt.primitives, pred.primitives):
            if pp.label not in skip:
                report.prim.setdefault(pp.label, [0, 0, 0])[1] += 1
            if pg.label not in skip:
                counts = report.prim.setdefault(pg.label, [0, 0, 0])
                counts[2] += 1
                if pp.label == pg.label:
                    counts[0] += 1
    report.names = {c: gt.class_name(c) for c in set(report.classes) | set(report.prim)}
    return report


def evaluate_tile(pred: Drawing, gt: Drawing) -> PanopticReport:
    """Match predicted against ground-truth labels/instances on the same primitives."""
    from .spotting import ground_truth_symbols

    if len(pred.primitives) != len(gt.primitives):
        raise ValueError("prediction and ground truth must cover the same primitives")
    m = match_symbols(ground_truth_symbols(pred), ground_truth_symbols(gt), gt)
    return classwise_report(m, gt, pred)
