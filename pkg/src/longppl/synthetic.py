"""Synthetic long-context retrieval tasks with known answer tokens.

Documents follow a fixed "lines" template::

    line <name>: REGISTER_CONTENT is <value>\n     (x n_lines)
    Tell me the REGISTER_CONTENT in line <name>.\n
    The REGISTER_CONTENT in line <name> is <value>

The final value is the gold answer; its token positions are the
labeled answer tokens. Predicting them requires retrieving the target
line, so they are exactly the tokens whose score should improve with
long context.

The oracle scorer makes that behavior analytic instead of learned: it
assigns fixed probabilities per token class (answer, optional "hard",
filler) depending only on whether the scoring context reaches back to
the target line's value. Filler tokens score identically under any
context, so their log-probability gain is exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import math

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .scoring import Scorer
from .tokenizers import ByteTokenizer, TokenizedDoc, Tokenizer, WhitespaceTokenizer

__all__ = [
    "LinesTaskSpec",
    "LabeledDoc",
    "OracleSpec",
    "OracleScorer",
    "SelectionMetrics",
    "generate_lines_text",
    "generate_lines_task",
    "label_document",
    "oracle_scorer",
    "selection_accuracy",
    "make_lines_corpus",
    "write_lines_tasks",
    "read_lines_tasks",
]

_NAME_WORDS = (
    "amber", "basil", "cedar", "delta", "ember", "fjord", "gable", "heron",
    "ivory", "jasper", "kelp", "lotus", "maple", "nectar", "onyx", "pearl",
    "quartz", "raven", "sable", "topaz", "umber", "violet", "willow", "xenon",
    "yarrow", "zephyr", "alder", "birch", "coral", "dune", "elm", "fern",
    "garnet", "hazel", "iris", "juniper", "kite", "linden", "moss", "nimbus",
)

_LINE_TEMPLATE = "line {name}: REGISTER_CONTENT is {value}\n"
_QUESTION_TEMPLATE = "Tell me the REGISTER_CONTENT in line {name}.\n"
_ANSWER_TEMPLATE = "The REGISTER_CONTENT in line {name} is {value}"


@dataclass(frozen=True)
class LinesTaskSpec:
    """Parameters for one lines-task document.

    ``target_line`` may be ``None`` to draw it from the seed. The name
    pool defaults to a built-in word list; names are single pool words
    while ``n_lines`` fits in the pool and hyphenated word pairs
    otherwise.
    """

    n_lines: int
    value_digits: int = 5
    target_line: int | None = None
    seed: int = 0
    name_pool: tuple[str, ...] = _NAME_WORDS

    def __post_init__(self):
        if self.n_lines < 1:
            raise ConfigError(f"n_lines must be >= 1, got {self.n_lines}")
        if self.value_digits < 1:
            raise ConfigError(f"value_digits must be >= 1, got {self.value_digits}")
        if self.target_line is not None and not 0 <= self.target_line < self.n_lines:
            raise ConfigError(
                f"target_line {self.target_line} outside [0, {self.n_lines})"
            )
        pool = tuple(self.name_pool)
        if len(set(pool)) != len(pool) or not pool:
            raise ConfigError("name_pool must be non-empty without duplicates")
        capacity = len(pool) if self.n_lines <= len(pool) else len(pool) * (len(pool) - 1)
        if self.n_lines > capacity:
            raise ConfigError(
                f"name pool of {len(pool)} words supports at most {capacity} lines"
            )
        object.__setattr__(self, "name_pool", pool)


@dataclass(frozen=True)
class LabeledDoc:
    """A tokenized document plus ground-truth answer-token labels.

    ``line_value_span`` is the character span of the target value where
    it appears inside its line (needed by the oracle scorer; absent
    when a task was reloaded from JSONL).
    """

    doc: TokenizedDoc
    answer_token_indices: frozenset[int]
    answer_value: str
    answer_span: tuple[int, int]
    line_value_span: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "answer_token_indices", frozenset(self.answer_token_indices)
        )
        start, end = self.answer_span
        if not 0 <= start < end <= len(self.doc.source_text):
            raise ValueError(f"answer_span {self.answer_span} out of bounds")
        decoded = "".join(
            self.doc.tokens[i].text for i in sorted(self.answer_token_indices)
        )
        if decoded != self.answer_value:
            raise ValueError(
                f"answer tokens decode to {decoded!r}, expected {self.answer_value!r}"
            )

    def __len__(self) -> int:
        return len(self.doc)


def generate_lines_text(spec: LinesTaskSpec) -> tuple[str, tuple[int, int], str, tuple[int, int]]:
    """Generate the raw document text for a spec.

    Returns ``(text, answer_span, answer_value, line_value_span)``,
    where ``answer_span`` locates the gold value at the end of the text
    and ``line_value_span`` locates the same value inside its line.
    Deterministic in the seed.
    """
    rng = np.random.default_rng(spec.seed)
    pool = spec.name_pool
    if spec.n_lines <= len(pool):
        order = rng.permutation(len(pool))
        names = [pool[i] for i in order[: spec.n_lines]]
    else:
        pairs = [(a, b) for a in range(len(pool)) for b in range(len(pool)) if a != b]
        order = rng.permutation(len(pairs))
        names = [
            f"{pool[pairs[i][0]]}-{pool[pairs[i][1]]}" for i in order[: spec.n_lines]
        ]
    values = []
    for _ in range(spec.n_lines):
        digits = [str(rng.integers(1, 10))]
        digits += [str(rng.integers(0, 10)) for _ in range(spec.value_digits - 1)]
        values.append("".join(digits))
    target = (
        spec.target_line
        if spec.target_line is not None
        else int(rng.integers(0, spec.n_lines))
    )
    pieces = []
    offset = 0
    line_value_span = None
    for i, (name, value) in enumerate(zip(names, values)):
        line = _LINE_TEMPLATE.format(name=name, value=value)
        if i == target:
            inner = line.index(value)
            line_value_span = (offset + inner, offset + inner + len(value))
        pieces.append(line)
        offset += len(line)
    question = _QUESTION_TEMPLATE.format(name=names[target])
    answer = _ANSWER_TEMPLATE.format(name=names[target], value=values[target])
    text = "".join(pieces) + question + answer
    answer_span = (len(text) - len(values[target]), len(text))
    return text, answer_span, values[target], line_value_span


def label_document(
    doc: TokenizedDoc,
    answer_span: tuple[int, int],
    answer_value: str,
    line_value_span: tuple[int, int] | None = None,
) -> LabeledDoc:
    """Mark as answer tokens every token lying fully inside the answer
    span. The tokenization must not merge across the span boundary;
    if it does, the answer tokens cannot decode to the value and this
    raises ``ValueError``."""
    start, end = answer_span
    indices = frozenset(
        i for i, tok in enumerate(doc.tokens) if tok.span[0] >= start and tok.span[1] <= end
    )
    return LabeledDoc(
        doc=doc,
        answer_token_indices=indices,
        answer_value=answer_value,
        answer_span=answer_span,
        line_value_span=line_value_span,
    )


def generate_lines_task(
    spec: LinesTaskSpec, tokenizer: Tokenizer | None = None, doc_id: str | None = None
) -> LabeledDoc:
    """Generate and tokenize one lines task (byte tokenizer by default)."""
    text, answer_span, value, line_value_span = generate_lines_text(spec)
    if tokenizer is None:
        tokenizer = ByteTokenizer()
    if doc_id is None:
        doc_id = f"lines-{spec.seed}"
    doc = tokenizer.encode(text, doc_id=doc_id)
    return label_document(doc, answer_span, value, line_value_span)


@dataclass(frozen=True)
class OracleSpec:
    """Probabilities assigned by the oracle scorer.

    Answer tokens get ``p_answer_long`` when the context reaches the
    target line's value and ``p_answer_short`` otherwise. Filler tokens
    always get ``p_filler``. The optional hard class behaves like the
    answer class with its own pair of probabilities; giving it a high
    long/short ratio but low absolute probability creates tokens that
    pass an LPG-only filter yet fail the LPV condition.
    """

    p_answer_long: float
    p_answer_short: float
    p_filler: float = 0.5
    p_hard_long: float | None = None
    p_hard_short: float | None = None

    def __post_init__(self):
        for name in ("p_answer_long", "p_answer_short", "p_filler"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if not self.p_answer_long > self.p_answer_short:
            raise ConfigError("p_answer_long must exceed p_answer_short")
        hard = (self.p_hard_long, self.p_hard_short)
        if (hard[0] is None) != (hard[1] is None):
            raise ConfigError("p_hard_long and p_hard_short must be set together")
        if hard[0] is not None:
            for name in ("p_hard_long", "p_hard_short"):
                value = getattr(self, name)
                if not 0 < value <= 1:
                    raise ConfigError(f"{name} must lie in (0, 1], got {value}")
            if not self.p_hard_long > self.p_hard_short:
                raise ConfigError("p_hard_long must exceed p_hard_short")


class OracleScorer(Scorer):
    """Analytic scorer bound to one labeled document.

    The reported probability covers only the token actually present at
    each position; the remaining mass is implicitly spread over the
    rest of the vocabulary, which never needs to be materialized
    because only realized next tokens are scored.

    A context "reaches" the target line when it starts at or before the
    first token of the line's value, which is what decides between the
    long and short probabilities for answer and hard tokens.
    """

    def __init__(
        self,
        labeled: LabeledDoc,
        ospec: OracleSpec,
        hard_token_indices: Iterable[int] = (),
    ):
        if labeled.line_value_span is None:
            raise ConfigError(
                "oracle scorer needs line_value_span; regenerate the task rather "
                "than loading it from JSONL"
            )
        self.labeled = labeled
        self.ospec = ospec
        self._ids = labeled.doc.token_ids()
        self._answers = labeled.answer_token_indices
        self._hard = frozenset(hard_token_indices)
        lv_start = labeled.line_value_span[0]
        value_pos = None
        for i, tok in enumerate(labeled.doc.tokens):
            if tok.span[0] <= lv_start < tok.span[1]:
                value_pos = i
                break
        if value_pos is None:
            raise ConfigError("line_value_span does not fall on any token")
        self.value_pos = value_pos
        if self._hard and ospec.p_hard_long is None:
            raise ConfigError("hard token indices given but OracleSpec has no hard class")
        for i in self._hard:
            if i <= value_pos:
                raise ConfigError(
                    "hard tokens must come after the target line's value"
                )
        for i in self._answers:
            if i <= value_pos:
                raise ConfigError("answer tokens must come after the target line's value")

    def _position_logprob(self, pos: int, context_start: int) -> float:
        reaches = context_start <= self.value_pos
        if pos in self._answers:
            p = self.ospec.p_answer_long if reaches else self.ospec.p_answer_short
        elif pos in self._hard:
            p = self.ospec.p_hard_long if reaches else self.ospec.p_hard_short
        else:
            p = self.ospec.p_filler
        return math.log(p)

    def batch_logprobs(self, ids: Sequence[int], start: int = 0) -> list[float]:
        expected = self._ids[start : start + len(ids)]
        if list(ids) != expected:
            raise ValueError(
                "oracle scorer was queried with ids that do not match its document"
            )
        return [self._position_logprob(start + j, start) for j in range(len(ids))]

    def logprob(self, context: Sequence[int], target: int) -> float:
        # Interprets the context as the document prefix ending at the
        # target position, so it always reaches the target line.
        pos = len(context)
        if self._ids[pos] != target:
            raise ValueError(
                "oracle scorer was queried with ids that do not match its document"
            )
        return self._position_logprob(pos, 0)


def oracle_scorer(
    labeled: LabeledDoc, ospec: OracleSpec, hard_token_indices: Iterable[int] = ()
) -> OracleScorer:
    return OracleScorer(labeled, ospec, hard_token_indices)


@dataclass(frozen=True)
class SelectionMetrics:
    """Balanced accuracy, precision, and recall of a key-token mask
    against the answer-token labels."""

    accuracy: float
    precision: float
    recall: float


def selection_accuracy(mask, labeled: LabeledDoc) -> SelectionMetrics:
    """Score a key-token mask as a classifier for answer tokens.

    Accuracy is balanced: the mean of the true-positive rate over
    answer tokens and the true-negative rate over the rest. Precision
    is 0 when the mask selects nothing.
    """
    flags = np.asarray(mask.flags, dtype=bool)
    if len(flags) != len(labeled.doc):
        raise ValueError("mask length does not match the labeled document")
    positives = np.zeros(len(flags), dtype=bool)
    positives[sorted(labeled.answer_token_indices)] = True
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise UndefinedMetricError("labeled document has no answer tokens")
    tp = int((flags & positives).sum())
    fp = int((flags & ~positives).sum())
    n_neg = len(flags) - n_pos
    tpr = tp / n_pos
    tnr = (n_neg - fp) / n_neg if n_neg else 1.0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    return SelectionMetrics(
        accuracy=(tpr + tnr) / 2, precision=precision, recall=tpr
    )


def make_lines_corpus(
    n_docs: int,
    n_lines: int,
    value_digits: int = 2,
    seed: int = 0,
    target_max: int | None = None,
    name_pool: tuple[str, ...] = _NAME_WORDS,
) -> tuple[list[LabeledDoc], WhitespaceTokenizer]:
    """Generate a corpus of lines tasks sharing one whitespace tokenizer.

    Per-document seeds are ``seed, seed+1, ...``; ``target_max`` caps
    the target line index (exclusive) so the target always sits early
    in the document. Under the whitespace tokenizer every document has
    the same token count, which downstream batching relies on.
    """
    if n_docs < 1:
        raise ConfigError(f"n_docs must be >= 1, got {n_docs}")
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_docs):
        upper = n_lines if target_max is None else min(target_max, n_lines)
        target = int(rng.integers(0, upper))
        specs.append(
            LinesTaskSpec(
                n_lines=n_lines,
                value_digits=value_digits,
                target_line=target,
                seed=seed + i,
                name_pool=name_pool,
            )
        )
    texts = [generate_lines_text(s) for s in specs]
    tokenizer = WhitespaceTokenizer.from_texts(t[0] for t in texts)
    labeled = []
    for i, (text, answer_span, value, lv_span) in enumerate(texts):
        doc = tokenizer.encode(text, doc_id=f"lines-{seed}-{i}")
        labeled.append(label_document(doc, answer_span, value, lv_span))
    lengths = {len(d) for d in labeled}
    if len(lengths) != 1:
        raise RuntimeError(f"expected uniform document lengths, got {sorted(lengths)}")
    return labeled, tokenizer


def write_lines_tasks(docs: Iterable[LabeledDoc], path: str | Path) -> None:
    """Serialize tasks as JSONL: doc_id, text, answer_span, answer_value."""
    with open(path, "w", encoding="utf-8") as fh:
        for labeled in docs:
            fh.write(
                json.dumps(
                    {
                        "doc_id": labeled.doc.doc_id,
                        "text": labeled.doc.source_text,
                        "answer_span": list(labeled.answer_span),
                        "answer_value": labeled.answer_value,
                    }
                )
                + "\n"
            )


def read_lines_tasks(path: str | Path, tokenizer: Tokenizer) -> list[LabeledDoc]:
    """Reload tasks from JSONL, re-tokenizing with ``tokenizer``.

    The reloaded docs carry no ``line_value_span``, so they support
    training and selection scoring but not the oracle scorer.
    """
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text = obj["text"]
                doc_id = obj["doc_id"]
                span = tuple(obj["answer_span"])
                value = obj["answer_value"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"lines-task file line {lineno}: {exc}")
            doc = tokenizer.encode(text, doc_id=doc_id)
            out.append(label_document(doc, (span[0], span[1]), value))
    return out
