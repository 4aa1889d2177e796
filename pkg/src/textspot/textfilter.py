"""Corpus statistics over annotation strings and frequency-based text filtering."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .model import Drawing, Primitive, Text

NORMALIZATION_VERSION = "norm-v1"

_DIGITS = re.compile(r"\d+")
_SPACE = re.compile(r"\s+")


def normalize_token(s: str, lowercase: bool = True, collapse_digits: bool = True) -> str:
    """Canonical form of an annotation string: ``"Bedroom 12"`` -> ``"bedroom #"``."""
    s = s.strip()
    if lowercase:
        s = s.lower()
    if collapse_digits:
        s = _DIGITS.sub("#", s)
    return _SPACE.sub(" ", s)


@dataclass(frozen=True)
class TextFilterConfig:
    min_count: int = 5
    max_kept_per_tile: int | None = None
    lowercase: bool = True
    collapse_digits: bool = True

    def __post_init__(self) -> None:
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.max_kept_per_tile is not None and self.max_kept_per_tile < 0:
            raise ValueError("max_kept_per_tile must be >= 0")

    def normalize(self, s: str) -> str:
        return normalize_token(s, self.lowercase, self.collapse_digits)


@dataclass
class CorpusStats:
    counts: Counter = field(default_factory=Counter)
    documents: int = 0
    version: str = NORMALIZATION_VERSION

    def __getitem__(self, token: str) -> int:
        return self.counts.get(token, 0)

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        if other.version != self.version:
            raise ValueError(f"cannot merge stats with versions {self.version} and {other.version}")
        return CorpusStats(self.counts + other.counts, self.documents + other.documents, self.version)

    def top(self, n: int) -> list[tuple[str, int]]:
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]

    def dumps(self) -> str:
        # Normalized tokens never contain tabs or newlines and are never empty,
        # so lines that start with a tab are free to carry metadata.
        lines = [f"\tversion\t{self.version}", f"\tdocuments\t{self.documents}"]
        lines += [f"{tok}\t{cnt}" for tok, cnt in sorted(self.counts.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CorpusStats":
        stats = cls()
        for line in text.splitlines():
            if not line:
                continue
            if line.startswith("\t"):
                _, key, value = line.split("\t")
                if key == "version":
                    stats.version = value
                elif key == "documents":
                    stats.documents = int(value)
                continue
            tok, cnt = line.rsplit("\t", 1)
            stats.counts[tok] = int(cnt)
        return stats

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusStats":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_corpus_stats(tiles: Iterable[Drawing], cfg: TextFilterConfig = TextFilterConfig()) -> CorpusStats:
    """Count normalized annotation tokens. Pass training tiles only."""
    counts: Counter = Counter()
    documents = 0
    for tile in tiles:
        documents += 1
        for p in tile.primitives:
            if isinstance(p.geometry, Text):
                tok = cfg.normalize(p.geometry.content)
                if tok:
                    counts[tok] += 1
    return CorpusStats(counts, documents)


def _redensify(tile: Drawing, keep: list[Primitive]) -> Drawing:
    base = tile.meta.get("id_remap")
    remap = [base[p.id] if base else p.id for p in keep]
    prims = [Primitive(i, p.geometry, p.label, p.instance) for i, p in enumerate(keep)]
    return tile.with_primitives(prims, id_remap=remap)


def filter_text_primitives(tile: Drawing, stats: CorpusStats, cfg: TextFilterConfig = TextFilterConfig()) -> Drawing:
    """Drop annotations whose normalized token is rarer than ``cfg.min_count``.

    Ids are re-densified; ``meta["id_remap"][new_id]`` gives the original id.
    """
    scored = {}
    for p in tile.primitives:
        if isinstance(p.geometry, Text):
            n = stats[cfg.normalize(p.geometry.content)]
            if n >= cfg.min_count:
                scored[p.id] = n
    if cfg.max_kept_per_tile is not None and len(scored) > cfg.max_kept_per_tile:
        ranked = sorted(scored, key=lambda i: (-scored[i], i))
        scored = {i: scored[i] for i in ranked[: cfg.max_kept_per_tile]}
    keep = [p for p in tile.primitives if not p.is_text or p.id in scored]
    return _redensify(tile, keep)


def drop_text(tile: Drawing) -> Drawing:
    """Remove every annotation (the no-text ablation)."""
    return _redensify(tile, [p for p in tile.primitives if not p.is_text])
