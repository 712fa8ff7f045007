"""Projecting key tokens and weights across different tokenizations.

An evaluator model selects key tokens under its own tokenizer; the
evaluated model may tokenize the same text differently. Both
projections here go through the character level, which is exact because
tokenizations are lossless span tilings of one shared source text:

* Hard projection: an evaluated token is key iff every character of its
  span lies inside the union of key evaluator-token spans. This is the
  maximal evaluated-token subset whose decoded text is contained in the
  evaluator's key text.
* Soft projection: an evaluated token's weight is the arithmetic mean,
  over its characters, of the weight of the evaluator token containing
  each character.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import AlignmentError
from .metrics import KeyTokenMask
from .tokenizers import TokenizedDoc

__all__ = [
    "char_flag_index",
    "char_weight_index",
    "project_flags",
    "project_weights",
    "project_key_tokens_hard",
    "project_weights_soft",
]


def _check_tiling(spans: Sequence[tuple[int, int]], text_len: int, who: str) -> None:
    pos = 0
    for start, end in spans:
        if start != pos or end <= start:
            raise AlignmentError(
                f"{who} spans must tile the text contiguously; "
                f"got span ({start}, {end}) at position {pos}"
            )
        pos = end
    if pos != text_len:
        raise AlignmentError(
            f"{who} spans cover {pos} characters, text has {text_len}"
        )


def char_flag_index(
    spans: Sequence[tuple[int, int]], flags: Sequence[bool], text_len: int
) -> np.ndarray:
    """Per-character key flags: character j carries the flag of the
    token whose span contains j."""
    if len(spans) != len(flags):
        raise AlignmentError("need one flag per span")
    _check_tiling(spans, text_len, "evaluator")
    out = np.zeros(text_len, dtype=bool)
    for (start, end), flag in zip(spans, flags):
        if flag:
            out[start:end] = True
    return out


def char_weight_index(
    spans: Sequence[tuple[int, int]], weights: Sequence[float], text_len: int
) -> np.ndarray:
    """Per-character weights: character j carries the weight of the
    token whose span contains j."""
    if len(spans) != len(weights):
        raise AlignmentError("need one weight per span")
    _check_tiling(spans, text_len, "evaluator")
    out = np.zeros(text_len, dtype=np.float64)
    for (start, end), weight in zip(spans, weights):
        out[start:end] = weight
    return out


def project_flags(
    src_spans: Sequence[tuple[int, int]],
    src_flags: Sequence[bool],
    dst_spans: Sequence[tuple[int, int]],
    text_len: int,
) -> np.ndarray:
    """Hard projection on raw span lists; see the module docstring."""
    char_flags = char_flag_index(src_spans, src_flags, text_len)
    _check_tiling(dst_spans, text_len, "evaluated")
    return np.array(
        [bool(char_flags[start:end].all()) for start, end in dst_spans], dtype=bool
    )


def project_weights(
    src_spans: Sequence[tuple[int, int]],
    src_weights: Sequence[float],
    dst_spans: Sequence[tuple[int, int]],
    text_len: int,
) -> np.ndarray:
    """Soft projection on raw span lists; see the module docstring."""
    char_weights = char_weight_index(src_spans, src_weights, text_len)
    _check_tiling(dst_spans, text_len, "evaluated")
    return np.array(
        [float(char_weights[start:end].mean()) for start, end in dst_spans],
        dtype=np.float64,
    )


def _check_same_text(evaluator_doc: TokenizedDoc, evaluated_doc: TokenizedDoc) -> None:
    if evaluator_doc.source_text != evaluated_doc.source_text:
        raise AlignmentError(
            f"cannot align documents with different source texts "
            f"({evaluator_doc.doc_id!r} vs {evaluated_doc.doc_id!r})"
        )


def project_key_tokens_hard(
    evaluator_doc: TokenizedDoc, mask: KeyTokenMask, evaluated_doc: TokenizedDoc
) -> KeyTokenMask:
    """Project a key-token mask onto another tokenization of the same
    text; returns the projected flags with fresh equal weights."""
    _check_same_text(evaluator_doc, evaluated_doc)
    if len(mask) != len(evaluator_doc):
        raise AlignmentError("mask length does not match the evaluator tokenization")
    flags = project_flags(
        evaluator_doc.spans(),
        mask.flags,
        evaluated_doc.spans(),
        len(evaluator_doc.source_text),
    )
    n_key = int(flags.sum())
    weights = (
        flags.astype(np.float64) / n_key
        if n_key
        else np.zeros(len(flags), dtype=np.float64)
    )
    return KeyTokenMask(flags=flags, weights=weights)


def project_weights_soft(
    evaluator_doc: TokenizedDoc,
    weights: Sequence[float],
    evaluated_doc: TokenizedDoc,
) -> np.ndarray:
    """Project per-token weights onto another tokenization of the same
    text by character-level averaging."""
    _check_same_text(evaluator_doc, evaluated_doc)
    if len(weights) != len(evaluator_doc):
        raise AlignmentError("weights length does not match the evaluator tokenization")
    return project_weights(
        evaluator_doc.spans(),
        weights,
        evaluated_doc.spans(),
        len(evaluator_doc.source_text),
    )
