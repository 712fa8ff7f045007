"""Corpus-level analysis: correlation of metrics against benchmark
scores, and highlighted rendering of selected key tokens.

Annotation rendering is exactly invertible: ``parse_highlight_spans``
recovers the original character spans from either output format. HTML
output escapes all text, so arbitrary content round-trips; ANSI output
assumes the text itself contains no escape character.
"""

from __future__ import annotations

import html
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError
from .metrics import KeyTokenMask
from .scoring import ScoredDoc
from .tokenizers import TokenizedDoc

__all__ = [
    "pearson",
    "ScoreRow",
    "BenchmarkScoreTable",
    "CorrelationReport",
    "correlate",
    "load_score_table",
    "Highlight",
    "AnnotatedDoc",
    "annotate",
    "annotate_records",
    "render",
    "parse_highlight_spans",
]


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Product-moment correlation coefficient.

    Requires equal lengths of at least 3 and non-zero variance on both
    sides (zero variance raises ``UndefinedMetricError``).
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError("inputs must be 1-d sequences of equal length")
    if x.size < 3:
        raise ValueError(f"need at least 3 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation is undefined for zero-variance input")
    return float(np.dot(dx, dy) / np.sqrt(sxx * syy))


@dataclass(frozen=True)
class ScoreRow:
    model_name: str
    metric_value: float
    benchmark_score: float


@dataclass(frozen=True)
class BenchmarkScoreTable:
    """(model, metric, benchmark score) rows with unique model names."""

    rows: tuple[ScoreRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        names = [row.model_name for row in self.rows]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class CorrelationReport:
    r: float
    n: int
    rows: tuple[ScoreRow, ...]

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "n": self.n,
            "rows": [
                {
                    "model": row.model_name,
                    "metric": row.metric_value,
                    "score": row.benchmark_score,
                }
                for row in self.rows
            ],
        }


def correlate(table: BenchmarkScoreTable) -> CorrelationReport:
    """Pearson r of metric values against benchmark scores, echoing the
    input rows for audit. Requires at least 3 rows."""
    if len(table) < 3:
        raise ValueError(f"correlation needs at least 3 rows, got {len(table)}")
    r = pearson(
        [row.metric_value for row in table.rows],
        [row.benchmark_score for row in table.rows],
    )
    return CorrelationReport(r=r, n=len(table), rows=table.rows)


def load_score_table(path: str | Path) -> BenchmarkScoreTable:
    """Read a JSON array of ``{"model", "metric", "score"}`` objects."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("score table file must contain a JSON array")
    rows = []
    for i, obj in enumerate(data):
        if not isinstance(obj, dict) or not {"model", "metric", "score"} <= set(obj):
            raise ValueError(f"row {i} must be an object with model, metric, score")
        if not isinstance(obj["model"], str):
            raise ValueError(f"row {i}: model must be a string")
        try:
            metric = float(obj["metric"])
            score = float(obj["score"])
        except (TypeError, ValueError):
            raise ValueError(f"row {i}: metric and score must be numbers")
        rows.append(ScoreRow(obj["model"], metric, score))
    return BenchmarkScoreTable(rows=tuple(rows))


@dataclass(frozen=True)
class Highlight:
    """One highlighted character span with optional score attributes."""

    start: int
    end: int
    lpg: float | None = None
    lpv: float | None = None


@dataclass(frozen=True)
class AnnotatedDoc:
    """Source text plus an ordered, non-overlapping set of highlights."""

    text: str
    highlights: tuple[Highlight, ...]

    def __post_init__(self):
        object.__setattr__(self, "highlights", tuple(self.highlights))
        prev_end = 0
        for h in self.highlights:
            if not 0 <= h.start < h.end <= len(self.text):
                raise ValueError(f"highlight span ({h.start}, {h.end}) out of bounds")
            if h.start < prev_end:
                raise ValueError("highlights must be sorted and non-overlapping")
            prev_end = h.end


def annotate_records(
    text: str,
    spans: Sequence[tuple[int, int]],
    flags: Sequence[bool],
    lpgs: Sequence[float] | None = None,
    lpvs: Sequence[float] | None = None,
) -> AnnotatedDoc:
    """Build an annotation from parallel token data: one highlight per
    flagged token span."""
    if len(spans) != len(flags):
        raise ValueError("need one flag per span")
    highlights = []
    for i, (span, flag) in enumerate(zip(spans, flags)):
        if flag:
            highlights.append(
                Highlight(
                    start=span[0],
                    end=span[1],
                    lpg=lpgs[i] if lpgs is not None else None,
                    lpv=lpvs[i] if lpvs is not None else None,
                )
            )
    return AnnotatedDoc(text=text, highlights=tuple(highlights))


def annotate(
    doc: TokenizedDoc, mask: KeyTokenMask, scored: ScoredDoc | None = None
) -> AnnotatedDoc:
    """Highlight a document's key tokens; when ``scored`` is given each
    highlight carries the token's LPG and LPV."""
    if len(mask) != len(doc):
        raise ValueError("mask length does not match the document")
    lpgs = lpvs = None
    if scored is not None:
        if len(scored) != len(doc):
            raise ValueError("scored length does not match the document")
        lpgs = [rec.logp_long - rec.logp_short for rec in scored.records]
        lpvs = [rec.logp_long for rec in scored.records]
    return annotate_records(
        doc.source_text, doc.spans(), list(mask.flags), lpgs, lpvs
    )


_ANSI_OPEN = "\x1b[43m"
_ANSI_CLOSE = "\x1b[0m"


def render(ann: AnnotatedDoc, fmt: str) -> str:
    """Render with highlight markers; ``fmt`` is ``ansi`` or ``html``."""
    if fmt == "ansi":
        out = []
        pos = 0
        for h in ann.highlights:
            out.append(ann.text[pos : h.start])
            out.append(_ANSI_OPEN + ann.text[h.start : h.end] + _ANSI_CLOSE)
            pos = h.end
        out.append(ann.text[pos:])
        return "".join(out)
    if fmt == "html":
        out = []
        pos = 0
        for h in ann.highlights:
            out.append(html.escape(ann.text[pos : h.start]))
            attrs = ""
            if h.lpg is not None:
                attrs += f' data-lpg="{h.lpg:.17g}"'
            if h.lpv is not None:
                attrs += f' data-lpv="{h.lpv:.17g}"'
            out.append(
                f"<mark{attrs}>" + html.escape(ann.text[h.start : h.end]) + "</mark>"
            )
            pos = h.end
        out.append(html.escape(ann.text[pos:]))
        return "".join(out)
    raise ValueError(f"unknown format {fmt!r}")


_MARK_RE = re.compile(r"<mark(?: [^>]*)?>|</mark>")


def parse_highlight_spans(rendered: str, fmt: str) -> list[tuple[int, int]]:
    """Recover the highlighted character spans from rendered output."""
    spans: list[tuple[int, int]] = []
    pos = 0
    if fmt == "ansi":
        open_at = None
        i = 0
        while i < len(rendered):
            if rendered.startswith(_ANSI_OPEN, i):
                open_at = pos
                i += len(_ANSI_OPEN)
            elif rendered.startswith(_ANSI_CLOSE, i):
                if open_at is None:
                    raise ValueError("close marker without open marker")
                spans.append((open_at, pos))
                open_at = None
                i += len(_ANSI_CLOSE)
            else:
                pos += 1
                i += 1
        if open_at is not None:
            raise ValueError("unclosed highlight marker")
        return spans
    if fmt == "html":
        open_at = None
        i = 0
        while i < len(rendered):
            m = _MARK_RE.match(rendered, i)
            if m:
                if m.group(0).startswith("</"):
                    if open_at is None:
                        raise ValueError("close marker without open marker")
                    spans.append((open_at, pos))
                    open_at = None
                else:
                    open_at = pos
                i = m.end()
                continue
            # consume one HTML-escaped character
            if rendered[i] == "&":
                semi = rendered.index(";", i)
                pos += len(html.unescape(rendered[i : semi + 1]))
                i = semi + 1
            else:
                pos += 1
                i += 1
        if open_at is not None:
            raise ValueError("unclosed highlight marker")
        return spans
    raise ValueError(f"unknown format {fmt!r}")
