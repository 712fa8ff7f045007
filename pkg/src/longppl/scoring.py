"""Token scoring: long-context and truncated short-context log-probabilities.

The central object is the :class:`TokenScoreRecord`, which stores for one
token position both

* ``logp_long``: log P(token | full document prefix), and
* ``logp_short``: log P(token | truncated prefix), where the truncation
  follows a sliding block rule, below.

Sliding block rule. With window size ``K`` and block size ``d``, token
``t`` belongs to block ``floor(t / d)``. Every token in a block shares
one context start: ``ctx_start = max(0, block_start - K)`` where
``block_start`` is the first token index of the block. The short context
for token ``t`` is ``ids[ctx_start : t]``, so its length is
``t - ctx_start``. Consequences:

* ``d = 1`` degenerates to exact truncation at ``K`` tokens of context.
* For ``t >= K + d`` the short context length lies in ``[K, K + d)``.
* Tokens whose block has ``ctx_start == 0`` see their full prefix, so
  their short score equals their long score by definition; the pipeline
  reuses the long value there rather than recomputing it.

All log-probabilities are natural logs and must be finite and <= 0.
"""

from __future__ import annotations

import abc
import json
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import requests

from .errors import ConfigError, ProtocolError, ScoringError
from .tokenizers import TokenizedDoc

__all__ = [
    "Scorer",
    "UniformScorer",
    "NgramScorer",
    "RemoteScorer",
    "WindowConfig",
    "TokenScoreRecord",
    "ScoredDoc",
    "iter_blocks",
    "score_long",
    "score_short_sliding",
    "score_doc",
]


class Scorer(abc.ABC):
    """Produces conditional next-token log-probabilities.

    ``batch_logprobs(ids, start)`` returns one entry per position:
    entry ``j`` is ``log P(ids[j] | ids[:j])`` where the conditioning
    context is limited to the ids passed in this call. ``start`` is the
    absolute document position of ``ids[0]``; position-aware scorers
    (models with positional state) use it, stateless scorers ignore it.
    """

    @abc.abstractmethod
    def logprob(self, context: Sequence[int], target: int) -> float:
        """log P(target | context), natural log."""

    def batch_logprobs(self, ids: Sequence[int], start: int = 0) -> list[float]:
        return [self.logprob(ids[:j], ids[j]) for j in range(len(ids))]


class UniformScorer(Scorer):
    """Assigns every in-vocabulary token probability ``1 / vocab_size``."""

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {vocab_size}")
        self.vocab_size = vocab_size
        self._logp = -math.log(vocab_size)

    def logprob(self, context: Sequence[int], target: int) -> float:
        if not 0 <= target < self.vocab_size:
            raise ValueError(f"target id {target} outside vocabulary of size {self.vocab_size}")
        return self._logp


class NgramScorer(Scorer):
    """Count-based n-gram model with add-k smoothing.

    ``P(t | ctx) = (count(ctx, t) + k) / (count(ctx) + k * V)`` where
    ``ctx`` is the last ``order - 1`` ids of the context (fewer near the
    start of a document, matching how counts are collected). Fitting is
    a single counting pass, so results are deterministic.
    """

    def __init__(self, order: int = 2, smoothing_k: float = 1.0):
        if not isinstance(order, int) or order < 1:
            raise ConfigError(f"order must be an integer >= 1, got {order!r}")
        if not smoothing_k > 0:
            raise ConfigError(f"smoothing_k must be > 0, got {smoothing_k}")
        self.order = order
        self.smoothing_k = smoothing_k
        self.vocab_size: int | None = None
        self._counts: dict[tuple[int, ...], Counter] | None = None
        self._totals: dict[tuple[int, ...], int] | None = None

    def fit(
        self,
        corpus: Iterable[TokenizedDoc | Sequence[int]],
        vocab_size: int | None = None,
    ) -> "NgramScorer":
        counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
        totals: dict[tuple[int, ...], int] = defaultdict(int)
        max_id = -1
        n_tokens = 0
        for doc in corpus:
            ids = doc.token_ids() if isinstance(doc, TokenizedDoc) else list(doc)
            for i, tid in enumerate(ids):
                ctx = tuple(ids[max(0, i - self.order + 1) : i])
                counts[ctx][tid] += 1
                totals[ctx] += 1
                if tid > max_id:
                    max_id = tid
                n_tokens += 1
        if n_tokens == 0:
            raise ConfigError("cannot fit an n-gram scorer on an empty corpus")
        if vocab_size is None:
            vocab_size = max_id + 1
        elif vocab_size < max_id + 1:
            raise ConfigError(
                f"vocab_size {vocab_size} is smaller than the largest id {max_id} seen"
            )
        self.vocab_size = vocab_size
        self._counts = dict(counts)
        self._totals = dict(totals)
        return self

    def logprob(self, context: Sequence[int], target: int) -> float:
        if self._counts is None:
            raise ConfigError("n-gram scorer must be fitted before scoring")
        if not 0 <= target < self.vocab_size:
            raise ValueError(f"target id {target} outside vocabulary of size {self.vocab_size}")
        ctx = tuple(context[len(context) - self.order + 1 :]) if self.order > 1 else ()
        count = self._counts.get(ctx, {}).get(target, 0)
        total = self._totals.get(ctx, 0)
        k = self.smoothing_k
        return math.log((count + k) / (total + k * self.vocab_size))


class RemoteScorer(Scorer):
    """Scores tokens through an HTTP endpoint that echoes log-probs.

    Request: POST JSON ``{"model", "prompt_token_ids", "echo_logprobs": true}``.
    Response: JSON ``{"token_logprobs": [...]}`` with exactly one entry
    per prompt token. Entry 0 may be ``null`` (no context exists for the
    first token); it is surfaced as NaN and converted into a
    ``ScoringError`` only if a consumer actually needs that position.
    Any other ``null``, a length mismatch, or an out-of-range value is a
    ``ProtocolError``.

    Transport failures and HTTP 5xx are retried with exponential
    backoff (``max_retries`` retries after the first attempt); running
    out of attempts raises ``ScoringError``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.25,
        session: requests.Session | None = None,
    ):
        if max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {max_retries}")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._session = session or requests.Session()

    def _post(self, payload: dict) -> requests.Response:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_failure = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_failure = f"transport error: {exc}"
                continue
            if resp.status_code >= 500:
                last_failure = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ScoringError(f"endpoint returned HTTP {resp.status_code}")
            return resp
        raise ScoringError(
            f"request failed after {self.max_retries + 1} attempts ({last_failure})"
        )

    def batch_logprobs(self, ids: Sequence[int], start: int = 0) -> list[float]:
        payload = {
            "model": self.model,
            "prompt_token_ids": [int(t) for t in ids],
            "echo_logprobs": True,
        }
        resp = self._post(payload)
        try:
            data = resp.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise ProtocolError(f"response is not valid JSON: {exc}") from exc
        values = data.get("token_logprobs") if isinstance(data, dict) else None
        if not isinstance(values, list):
            raise ProtocolError("response is missing the 'token_logprobs' list")
        if len(values) != len(ids):
            raise ProtocolError(
                f"expected {len(ids)} token logprobs, got {len(values)}"
            )
        out: list[float] = []
        for j, value in enumerate(values):
            if value is None:
                if j == 0:
                    out.append(math.nan)
                    continue
                raise ProtocolError(f"null logprob at entry {j} (only entry 0 may be null)")
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ProtocolError(f"non-numeric logprob at entry {j}: {value!r}")
            value = float(value)
            if not math.isfinite(value) or value > 0:
                raise ProtocolError(f"out-of-range logprob at entry {j}: {value!r}")
            out.append(value)
        return out

    def logprob(self, context: Sequence[int], target: int) -> float:
        values = self.batch_logprobs([*context, target], start=0)
        value = values[-1]
        if math.isnan(value):
            raise ScoringError(
                "endpoint returned no logprob for a token with empty context",
                token_index=0,
            )
        return value


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window parameters: context size ``K`` and block size ``d``."""

    K: int = 4096
    d: int = 1024

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 1 <= self.d <= self.K:
            raise ConfigError(f"d must satisfy 1 <= d <= K, got d={self.d}, K={self.K}")


@dataclass(frozen=True)
class TokenScoreRecord:
    """Scores for one token position.

    ``short_ctx_len`` is the number of context tokens the short pass
    saw. When it equals ``token_index`` the short context is the full
    prefix, so ``logp_short`` must equal ``logp_long`` exactly.
    """

    token_index: int
    token_text: str
    span: tuple[int, int]
    logp_long: float
    logp_short: float
    short_ctx_len: int

    def __post_init__(self):
        if self.token_index < 0:
            raise ValueError(f"token_index must be >= 0, got {self.token_index}")
        for name in ("logp_long", "logp_short"):
            value = getattr(self, name)
            if not math.isfinite(value) or value > 0:
                raise ValueError(f"{name} must be finite and <= 0, got {value!r}")
        if not 0 <= self.short_ctx_len <= self.token_index:
            raise ValueError(
                f"short_ctx_len {self.short_ctx_len} outside [0, {self.token_index}]"
            )
        if self.short_ctx_len == self.token_index and self.logp_short != self.logp_long:
            raise ValueError(
                "logp_short must equal logp_long when the short context is the full prefix"
            )


@dataclass(frozen=True)
class ScoredDoc:
    """All token score records for one document, in token order."""

    doc_id: str
    records: tuple[TokenScoreRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for i, rec in enumerate(self.records):
            if rec.token_index != i:
                raise ValueError(
                    f"record {i} has token_index {rec.token_index}; indices must be "
                    "contiguous from 0"
                )

    def __len__(self) -> int:
        return len(self.records)

    def logps_long(self) -> list[float]:
        return [rec.logp_long for rec in self.records]

    def logps_short(self) -> list[float]:
        return [rec.logp_short for rec in self.records]


def iter_blocks(n_tokens: int, window: WindowConfig) -> Iterator[tuple[int, int, int]]:
    """Yield ``(block_start, block_end, ctx_start)`` triples covering
    ``range(n_tokens)`` in blocks of ``window.d`` tokens."""
    for block_start in range(0, n_tokens, window.d):
        block_end = min(block_start + window.d, n_tokens)
        ctx_start = max(0, block_start - window.K)
        yield block_start, block_end, ctx_start


def _checked(values: Sequence[float], n_expected: int, first_index: int) -> list[float]:
    """Validate a scorer's output: right length, finite, <= 0."""
    if len(values) != n_expected:
        raise ScoringError(
            f"scorer returned {len(values)} values, expected {n_expected}"
        )
    out = []
    for j, value in enumerate(values):
        value = float(value)
        if not math.isfinite(value) or value > 0:
            raise ScoringError(
                f"scorer returned invalid log-probability {value!r}",
                token_index=first_index + j,
            )
        out.append(value)
    return out


def score_long(doc: TokenizedDoc, scorer: Scorer) -> list[float]:
    """Full-context log-probability for every token of ``doc``."""
    if len(doc) == 0:
        raise ValueError("cannot score an empty document")
    ids = doc.token_ids()
    return _checked(scorer.batch_logprobs(ids, start=0), len(ids), 0)


def score_short_sliding(
    doc: TokenizedDoc, scorer: Scorer, window: WindowConfig
) -> list[tuple[float, int]]:
    """Truncated-context score and context length for every token.

    Returns ``(logp_short, short_ctx_len)`` per token, computed block by
    block under the sliding rule described in the module docstring.
    """
    if len(doc) == 0:
        raise ValueError("cannot score an empty document")
    ids = doc.token_ids()
    out: list[tuple[float, int]] = []
    for block_start, block_end, ctx_start in iter_blocks(len(ids), window):
        window_ids = ids[ctx_start:block_end]
        values = scorer.batch_logprobs(window_ids, start=ctx_start)
        values = _checked(values, len(window_ids), ctx_start)[block_start - ctx_start :]
        for offset, value in enumerate(values):
            t = block_start + offset
            out.append((value, t - ctx_start))
    return out


def score_doc(doc: TokenizedDoc, scorer: Scorer, window: WindowConfig) -> ScoredDoc:
    """Run the long and short passes and assemble one record per token.

    Blocks whose context start is 0 see their full prefix in the short
    pass, so the long values are reused there; this both skips redundant
    work and makes the short == long invariant hold exactly.
    """
    if len(doc) == 0:
        raise ValueError("cannot score an empty document")
    ids = doc.token_ids()
    lps_long = score_long(doc, scorer)
    shorts: list[tuple[float, int]] = []
    for block_start, block_end, ctx_start in iter_blocks(len(ids), window):
        if ctx_start == 0:
            for t in range(block_start, block_end):
                shorts.append((lps_long[t], t))
        else:
            window_ids = ids[ctx_start:block_end]
            values = scorer.batch_logprobs(window_ids, start=ctx_start)
            values = _checked(values, len(window_ids), ctx_start)[
                block_start - ctx_start :
            ]
            for offset, value in enumerate(values):
                t = block_start + offset
                shorts.append((value, t - ctx_start))
    records = tuple(
        TokenScoreRecord(
            token_index=i,
            token_text=tok.text,
            span=tok.span,
            logp_long=lps_long[i],
            logp_short=shorts[i][0],
            short_ctx_len=shorts[i][1],
        )
        for i, tok in enumerate(doc.tokens)
    )
    return ScoredDoc(doc_id=doc.doc_id, records=records)
