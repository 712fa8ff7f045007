"""Score dump files: JSONL transport for per-token log-probabilities.

One object per token:

    {"doc_id": str, "token_index": int, "token_text": str,
     "span": [int, int], "logp_long": float, "logp_short": float,
     "short_ctx_len": int}

Floats are serialized with 17 significant digits, which is enough for
an exact double round trip, so write followed by read is the identity.
Unknown extra fields are ignored on read (diagnostics may be appended
by the ``select`` command). A document's records must appear with
``token_index`` counting up contiguously from 0; documents may be
interleaved in the file but each is reassembled in order of first
appearance.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DumpFormatError
from .scoring import ScoredDoc, TokenScoreRecord

__all__ = ["write_dump", "read_dump", "validate_dump", "format_dump_line"]

_REQUIRED_FIELDS = (
    "doc_id",
    "token_index",
    "token_text",
    "span",
    "logp_long",
    "logp_short",
    "short_ctx_len",
)


def _fmt_float(value: float) -> str:
    return f"{value:.17g}"


def format_dump_line(
    doc_id: str, record: TokenScoreRecord, extras: dict | None = None
) -> str:
    """Serialize one record as a JSON line, floats at 17 significant digits."""
    start, end = record.span
    parts = [
        f'"doc_id": {json.dumps(doc_id)}',
        f'"token_index": {record.token_index}',
        f'"token_text": {json.dumps(record.token_text)}',
        f'"span": [{start}, {end}]',
        f'"logp_long": {_fmt_float(record.logp_long)}',
        f'"logp_short": {_fmt_float(record.logp_short)}',
        f'"short_ctx_len": {record.short_ctx_len}',
    ]
    for key, value in (extras or {}).items():
        if isinstance(value, bool):
            parts.append(f'"{key}": {"true" if value else "false"}')
        elif isinstance(value, float):
            parts.append(f'"{key}": {_fmt_float(value)}')
        else:
            parts.append(f'"{key}": {json.dumps(value)}')
    return "{" + ", ".join(parts) + "}"


def write_dump(
    docs: Iterable[ScoredDoc],
    path: str | Path,
    extras: Sequence[Sequence[dict]] | None = None,
) -> None:
    """Write scored documents as dump JSONL.

    ``extras``, when given, must hold one dict per record per document;
    its fields are appended to the corresponding lines.
    """
    docs = list(docs)
    if extras is not None and len(extras) != len(docs):
        raise ValueError("need one extras list per document")
    with open(path, "w", encoding="utf-8") as fh:
        for d, doc in enumerate(docs):
            doc_extras = extras[d] if extras is not None else None
            if doc_extras is not None and len(doc_extras) != len(doc.records):
                raise ValueError(
                    f"extras for document {doc.doc_id!r} must match its record count"
                )
            for i, rec in enumerate(doc.records):
                extra = doc_extras[i] if doc_extras is not None else None
                fh.write(format_dump_line(doc.doc_id, rec, extra) + "\n")


def _field(obj: dict, name: str, lineno: int):
    if name not in obj:
        raise DumpFormatError(f"missing field {name!r}", line_number=lineno)
    return obj[name]


def _int_field(obj: dict, name: str, lineno: int) -> int:
    value = _field(obj, name, lineno)
    if isinstance(value, bool) or not isinstance(value, int):
        raise DumpFormatError(
            f"field {name!r} must be an integer, got {value!r}", line_number=lineno
        )
    return value


def _float_field(obj: dict, name: str, lineno: int) -> float:
    value = _field(obj, name, lineno)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DumpFormatError(
            f"field {name!r} must be a number, got {value!r}", line_number=lineno
        )
    return float(value)


def _str_field(obj: dict, name: str, lineno: int) -> str:
    value = _field(obj, name, lineno)
    if not isinstance(value, str):
        raise DumpFormatError(
            f"field {name!r} must be a string, got {value!r}", line_number=lineno
        )
    return value


def read_dump(path: str | Path) -> list[ScoredDoc]:
    """Parse a dump file back into scored documents.

    Raises ``DumpFormatError`` carrying the 1-based line number for any
    schema violation: unparseable JSON, missing or mistyped fields,
    positive log-probabilities, non-contiguous token indices, or a
    short score that disagrees with the long score on a full prefix.
    """
    per_doc: dict[str, list[TokenScoreRecord]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                raise DumpFormatError("blank line in dump", line_number=lineno)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"invalid JSON: {exc}", line_number=lineno)
            if not isinstance(obj, dict):
                raise DumpFormatError("line is not a JSON object", line_number=lineno)
            doc_id = _str_field(obj, "doc_id", lineno)
            token_index = _int_field(obj, "token_index", lineno)
            token_text = _str_field(obj, "token_text", lineno)
            span = _field(obj, "span", lineno)
            if (
                not isinstance(span, list)
                or len(span) != 2
                or any(isinstance(v, bool) or not isinstance(v, int) for v in span)
            ):
                raise DumpFormatError(
                    f"field 'span' must be a pair of integers, got {span!r}",
                    line_number=lineno,
                )
            logp_long = _float_field(obj, "logp_long", lineno)
            logp_short = _float_field(obj, "logp_short", lineno)
            short_ctx_len = _int_field(obj, "short_ctx_len", lineno)
            records = per_doc.setdefault(doc_id, [])
            if token_index != len(records):
                raise DumpFormatError(
                    f"document {doc_id!r}: token_index {token_index} out of order, "
                    f"expected {len(records)}",
                    line_number=lineno,
                )
            try:
                record = TokenScoreRecord(
                    token_index=token_index,
                    token_text=token_text,
                    span=(span[0], span[1]),
                    logp_long=logp_long,
                    logp_short=logp_short,
                    short_ctx_len=short_ctx_len,
                )
            except ValueError as exc:
                raise DumpFormatError(str(exc), line_number=lineno)
            records.append(record)
    return [
        ScoredDoc(doc_id=doc_id, records=tuple(records))
        for doc_id, records in per_doc.items()
    ]


def validate_dump(path: str | Path) -> dict:
    """Check a dump file and return a summary ``{"n_docs", "n_tokens"}``."""
    docs = read_dump(path)
    return {"n_docs": len(docs), "n_tokens": sum(len(d) for d in docs)}
