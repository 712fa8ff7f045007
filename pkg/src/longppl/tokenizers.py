"""Lossless tokenizers with exact character-span provenance.

Every tokenizer here maps text to a sequence of tokens that tile the
source string: spans are contiguous, non-overlapping, cover every
character, and concatenating the token texts reproduces the input
exactly. That property is what makes cross-tokenizer alignment and
dump round-trips possible, so it is validated eagerly.

Three families are provided:

* ``ByteTokenizer``: one token per character, id = Latin-1 code point.
* ``WhitespaceTokenizer``: alternating runs of whitespace and
  non-whitespace, each run one token, over a closed vocabulary.
* ``BpeTokenizer``: greedy byte-pair merges applied in priority order
  over the character sequence.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

__all__ = [
    "Token",
    "TokenizedDoc",
    "TokenizerSpec",
    "Tokenizer",
    "ByteTokenizer",
    "WhitespaceTokenizer",
    "BpeTokenizer",
    "make_tokenizer",
    "load_bpe_files",
    "save_bpe_files",
    "decode",
]


@dataclass(frozen=True)
class Token:
    """A single token: vocabulary id, surface text, and the half-open
    character span ``[start, end)`` it occupies in the source."""

    id: int
    text: str
    span: tuple[int, int]

    def __post_init__(self):
        start, end = self.span
        if self.id < 0:
            raise ValueError(f"token id must be non-negative, got {self.id}")
        if start < 0 or end <= start:
            raise ValueError(f"token span must be non-empty and ordered, got {self.span}")
        if end - start != len(self.text):
            raise ValueError(
                f"span width {end - start} does not match text length {len(self.text)}"
            )


@dataclass(frozen=True)
class TokenizedDoc:
    """A document plus its tokenization.

    Invariants (checked on construction): token spans are contiguous
    starting at 0, they cover the whole source text, and the
    concatenated token texts equal ``source_text``.
    """

    doc_id: str
    source_text: str
    tokens: tuple[Token, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        pos = 0
        for i, tok in enumerate(self.tokens):
            start, end = tok.span
            if start != pos:
                raise ValueError(
                    f"token {i} starts at {start}, expected {pos}: spans must tile the text"
                )
            if self.source_text[start:end] != tok.text:
                raise ValueError(
                    f"token {i} text {tok.text!r} does not match source slice "
                    f"{self.source_text[start:end]!r}"
                )
            pos = end
        if pos != len(self.source_text):
            raise ValueError(
                f"tokens cover {pos} characters but source has {len(self.source_text)}"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def token_ids(self) -> list[int]:
        return [tok.id for tok in self.tokens]

    def spans(self) -> list[tuple[int, int]]:
        return [tok.span for tok in self.tokens]


def decode(tokens: Iterable[Token]) -> str:
    """Concatenate token texts; the inverse of any tokenizer here."""
    return "".join(tok.text for tok in tokens)


@dataclass(frozen=True)
class TokenizerSpec:
    """Declarative description of a tokenizer: its kind, vocabulary
    (index = token id), and merge table for the BPE kind."""

    kind: str
    vocabulary: tuple[str, ...]
    merges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "merges", tuple(tuple(m) for m in self.merges))
        if self.kind not in ("byte", "whitespace", "bpe"):
            raise ConfigError(f"unknown tokenizer kind {self.kind!r}")
        seen: dict[str, int] = {}
        for i, tok in enumerate(self.vocabulary):
            if tok == "":
                raise ConfigError(f"vocabulary entry {i} is empty")
            if tok in seen:
                raise ConfigError(
                    f"duplicate vocabulary string {tok!r} at ids {seen[tok]} and {i}"
                )
            seen[tok] = i
        if self.kind != "bpe" and self.merges:
            raise ConfigError(f"merges are only valid for kind 'bpe', not {self.kind!r}")
        for j, pair in enumerate(self.merges):
            if len(pair) != 2:
                raise ConfigError(f"merge {j} must be a pair, got {pair!r}")
            left, right = pair
            if left not in seen or right not in seen:
                raise ConfigError(f"merge {j} references unknown token: {pair!r}")
            if left + right not in seen:
                raise ConfigError(
                    f"merge {j} produces {left + right!r} which is not in the vocabulary"
                )

    def token_to_id(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocabulary)}


class Tokenizer:
    """Base class: deterministic text -> TokenizedDoc encoding."""

    spec: TokenizerSpec

    def encode(self, text: str, doc_id: str = "doc") -> TokenizedDoc:
        raise NotImplementedError

    @property
    def vocab_size(self) -> int:
        return len(self.spec.vocabulary)


class ByteTokenizer(Tokenizer):
    """One token per character; the id is the Latin-1 code point, so the
    vocabulary is exactly the 256 single-byte characters."""

    def __init__(self):
        self.spec = TokenizerSpec(
            kind="byte", vocabulary=tuple(chr(i) for i in range(256))
        )

    def encode(self, text: str, doc_id: str = "doc") -> TokenizedDoc:
        tokens = []
        for i, ch in enumerate(text):
            cp = ord(ch)
            if cp > 255:
                raise ValueError(
                    f"character {ch!r} at position {i} is outside the byte range"
                )
            tokens.append(Token(id=cp, text=ch, span=(i, i + 1)))
        return TokenizedDoc(doc_id=doc_id, source_text=text, tokens=tuple(tokens))


_RUN_RE = re.compile(r"\s+|\S+")


class WhitespaceTokenizer(Tokenizer):
    """Splits text into alternating runs of whitespace and
    non-whitespace; both kinds of run are tokens, so decoding is exact.

    The vocabulary is closed: encoding a run that is not in the
    vocabulary raises ``ValueError``. Build a vocabulary from a corpus
    with :meth:`from_texts`.
    """

    def __init__(self, spec: TokenizerSpec):
        if spec.kind != "whitespace":
            raise ConfigError(f"expected kind 'whitespace', got {spec.kind!r}")
        self.spec = spec
        self._ids = spec.token_to_id()

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WhitespaceTokenizer":
        """Build a closed vocabulary from every run occurring in ``texts``.

        Ids are assigned in sorted order of the run strings, so the
        vocabulary does not depend on document order.
        """
        runs: set[str] = set()
        for text in texts:
            runs.update(_RUN_RE.findall(text))
        if not runs:
            raise ConfigError("cannot build a vocabulary from empty texts")
        return cls(TokenizerSpec(kind="whitespace", vocabulary=tuple(sorted(runs))))

    def encode(self, text: str, doc_id: str = "doc") -> TokenizedDoc:
        tokens = []
        for m in _RUN_RE.finditer(text):
            run = m.group(0)
            tid = self._ids.get(run)
            if tid is None:
                raise ValueError(
                    f"run {run!r} at position {m.start()} is not in the vocabulary"
                )
            tokens.append(Token(id=tid, text=run, span=(m.start(), m.end())))
        return TokenizedDoc(doc_id=doc_id, source_text=text, tokens=tuple(tokens))


class BpeTokenizer(Tokenizer):
    """Greedy merge tokenizer.

    Encoding starts from single characters and applies each merge rule
    in table order: one full left-to-right pass per rule, replacing
    every adjacent occurrence of the pair. The result is deterministic
    and spans are tracked through every merge.
    """

    def __init__(self, spec: TokenizerSpec):
        if spec.kind != "bpe":
            raise ConfigError(f"expected kind 'bpe', got {spec.kind!r}")
        self.spec = spec
        self._ids = spec.token_to_id()

    def encode(self, text: str, doc_id: str = "doc") -> TokenizedDoc:
        pieces: list[tuple[str, int, int]] = [
            (ch, i, i + 1) for i, ch in enumerate(text)
        ]
        for ch, start, _ in pieces:
            if ch not in self._ids:
                raise ValueError(
                    f"character {ch!r} at position {start} is not in the vocabulary"
                )
        for left, right in self.spec.merges:
            merged: list[tuple[str, int, int]] = []
            i = 0
            while i < len(pieces):
                if (
                    i + 1 < len(pieces)
                    and pieces[i][0] == left
                    and pieces[i + 1][0] == right
                ):
                    merged.append((left + right, pieces[i][1], pieces[i + 1][2]))
                    i += 2
                else:
                    merged.append(pieces[i])
                    i += 1
            pieces = merged
        tokens = tuple(
            Token(id=self._ids[text_], text=text_, span=(s, e))
            for text_, s, e in pieces
        )
        return TokenizedDoc(doc_id=doc_id, source_text=text, tokens=tokens)


def make_tokenizer(spec: TokenizerSpec) -> Tokenizer:
    """Instantiate the tokenizer described by ``spec``."""
    if spec.kind == "byte":
        tok = ByteTokenizer()
        if spec.vocabulary != tok.spec.vocabulary:
            raise ConfigError("byte tokenizer vocabulary must be the 256 byte characters")
        return tok
    if spec.kind == "whitespace":
        return WhitespaceTokenizer(spec)
    if spec.kind == "bpe":
        return BpeTokenizer(spec)
    raise ConfigError(f"unknown tokenizer kind {spec.kind!r}")


# --- vocab / merges file format -------------------------------------------
#
# Vocab file: one token per line; the line number (0-based) is the id.
# Merges file: one merge per line, the two parent tokens separated by a
# single space. Because tokens may themselves contain newlines, spaces,
# or backslashes, those three characters are escaped as \n, \s, and \\.

_ESCAPES = {"\\": "\\\\", "\n": "\\n", " ": "\\s"}
_UNESCAPES = {"\\\\": "\\", "\\n": "\n", "\\s": " "}


def _escape(token: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in token)


def _unescape(raw: str, where: str) -> str:
    out = []
    i = 0
    while i < len(raw):
        if raw[i] == "\\":
            pair = raw[i : i + 2]
            if pair not in _UNESCAPES:
                raise ConfigError(f"{where}: bad escape {pair!r}")
            out.append(_UNESCAPES[pair])
            i += 2
        else:
            out.append(raw[i])
            i += 1
    return "".join(out)


def save_bpe_files(spec: TokenizerSpec, vocab_path: str | Path, merges_path: str | Path) -> None:
    """Write a BPE spec to the plain-text vocab and merges files."""
    if spec.kind != "bpe":
        raise ConfigError(f"expected kind 'bpe', got {spec.kind!r}")
    Path(vocab_path).write_text(
        "".join(_escape(tok) + "\n" for tok in spec.vocabulary), encoding="utf-8"
    )
    Path(merges_path).write_text(
        "".join(f"{_escape(a)} {_escape(b)}\n" for a, b in spec.merges),
        encoding="utf-8",
    )


def load_bpe_files(vocab_path: str | Path, merges_path: str | Path) -> BpeTokenizer:
    """Load a BPE tokenizer from its vocab and merges files.

    Raises ``ConfigError`` on duplicate vocabulary strings, merges that
    reference or produce unknown tokens, or malformed lines.
    """
    vocab = []
    for lineno, line in enumerate(
        Path(vocab_path).read_text(encoding="utf-8").splitlines()
    ):
        vocab.append(_unescape(line, f"vocab line {lineno + 1}"))
    merges = []
    for lineno, line in enumerate(
        Path(merges_path).read_text(encoding="utf-8").splitlines()
    ):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise ConfigError(
                f"merges line {lineno + 1}: expected two space-separated tokens, "
                f"got {line!r}"
            )
        where = f"merges line {lineno + 1}"
        merges.append((_unescape(parts[0], where), _unescape(parts[1], where)))
    return BpeTokenizer(TokenizerSpec(kind="bpe", vocabulary=tuple(vocab), merges=tuple(merges)))
