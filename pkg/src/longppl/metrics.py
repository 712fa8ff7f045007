"""Perplexity variants built on long/short context contrast.

Definitions (all logs natural):

* ``PPL = exp(-mean(logp_long))``: classic perplexity.
* ``LPG = logp_long - logp_short``: log-probability gain, how much the
  full context improves a token's prediction over the truncated one.
* ``LPV = logp_long``: log-probability value under the full context.
* Key token: ``LPG > alpha`` and ``LPV > beta``, both strict. The first
  condition finds tokens that need long context; the second drops
  tokens the model gets wrong regardless of context.
* ``LongPPL = exp(-sum(w_i * logp_long_i))`` with equal normalized
  weights ``w_i = 1 / n_key`` over key tokens: perplexity restricted to
  the key set.
* Soft influence ``I_soft = min(exp(LPG), gamma)``; LongPPL-soft uses
  ``I_soft / sum(I_soft)`` as weights instead of the hard mask.

Corpus-level aggregation pools every document's tokens into one
weighted mean rather than averaging per-document values, so small
documents do not get outsized weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .scoring import ScoredDoc

__all__ = [
    "InfluenceConfig",
    "KeyTokenMask",
    "MetricReport",
    "compute_ppl",
    "compute_lpg",
    "compute_lpv",
    "lpg_array",
    "lpv_array",
    "soft_influence",
    "select_key_tokens",
    "weighted_perplexity",
    "compute_longppl",
    "compute_longppl_soft",
    "diagnostics",
    "summarize",
    "summarize_corpus",
]


@dataclass(frozen=True)
class InfluenceConfig:
    """Thresholds for key-token selection and the soft-weight clamp.

    ``alpha``: LPG threshold in nats. ``beta``: LPV threshold in nats
    (``-inf`` disables the LPV condition). ``gamma``: clamp on the soft
    influence ratio, must be positive and finite.
    """

    alpha: float = 2.0
    beta: float = -2.0
    gamma: float = 5.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if np.isnan(value):
                raise ConfigError(f"{name} must not be NaN")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigError(f"gamma must be finite and > 0, got {self.gamma}")


@dataclass(frozen=True)
class KeyTokenMask:
    """Per-token key flags plus their normalized equal weights.

    ``weights`` is zero everywhere when no token is key, otherwise it is
    ``flags / n_key`` and sums to 1.
    """

    flags: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        weights = np.asarray(self.weights, dtype=np.float64)
        if flags.shape != weights.shape or flags.ndim != 1:
            raise ValueError("flags and weights must be 1-d arrays of equal length")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        if np.any(weights[~flags] != 0):
            raise ValueError("weights must be zero where the flag is unset")
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def n_key(self) -> int:
        return int(self.flags.sum())


@dataclass(frozen=True)
class MetricReport:
    """Corpus metrics in one record. ``longppl`` is ``None`` when no
    token was selected as key (an explicit undefined outcome, not NaN)."""

    ppl: float
    longppl: float | None
    longppl_soft: float
    n_tokens: int
    n_key_tokens: int
    key_fraction: float

    def to_dict(self) -> dict:
        return {
            "ppl": self.ppl,
            "longppl": self.longppl,
            "longppl_soft": self.longppl_soft,
            "n_tokens": self.n_tokens,
            "n_key_tokens": self.n_key_tokens,
            "key_fraction": self.key_fraction,
        }


def _as_logp_array(logps: Sequence[float]) -> np.ndarray:
    arr = np.asarray(logps, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("log-probabilities must form a 1-d sequence")
    if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr > 0)):
        raise ValueError("log-probabilities must be finite and <= 0")
    return arr


def compute_ppl(logps_long: Sequence[float]) -> float:
    """exp of the mean negative log-probability."""
    arr = _as_logp_array(logps_long)
    if arr.size == 0:
        raise UndefinedMetricError("perplexity of an empty token list is undefined")
    return float(np.exp(-arr.mean()))


def compute_lpg(record) -> float:
    """Log-probability gain of one record: logp_long - logp_short."""
    return record.logp_long - record.logp_short


def compute_lpv(record) -> float:
    """Log-probability value of one record: logp_long."""
    return record.logp_long


def lpg_array(scored: ScoredDoc) -> np.ndarray:
    return np.array(
        [rec.logp_long - rec.logp_short for rec in scored.records], dtype=np.float64
    )


def lpv_array(scored: ScoredDoc) -> np.ndarray:
    return np.array([rec.logp_long for rec in scored.records], dtype=np.float64)


def soft_influence(lpg, gamma: float):
    """Clamped likelihood ratio ``min(exp(lpg), gamma)``; accepts a
    scalar or an array. Always positive, at most ``gamma``."""
    with np.errstate(over="ignore"):
        return np.minimum(np.exp(lpg), gamma)


def compute_soft_influence(record, cfg: InfluenceConfig) -> float:
    return float(soft_influence(compute_lpg(record), cfg.gamma))


def select_key_tokens(scored: ScoredDoc, cfg: InfluenceConfig) -> KeyTokenMask:
    """Flag tokens with LPG > alpha and LPV > beta (both strict) and
    attach equal normalized weights. An empty selection is legal."""
    lpg = lpg_array(scored)
    lpv = lpv_array(scored)
    flags = (lpg > cfg.alpha) & (lpv > cfg.beta)
    n_key = int(flags.sum())
    if n_key:
        weights = flags.astype(np.float64) / n_key
    else:
        weights = np.zeros(len(flags), dtype=np.float64)
    return KeyTokenMask(flags=flags, weights=weights)


def weighted_perplexity(logps_long: Sequence[float], weights: Sequence[float]) -> float:
    """exp(-sum(w_hat * logp)) with ``w_hat = weights / sum(weights)``.

    Raises ``UndefinedMetricError`` when the weights sum to zero.
    """
    logps = _as_logp_array(logps_long)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != logps.shape:
        raise ValueError(
            f"weights length {weights.shape} does not match logps {logps.shape}"
        )
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    total = weights.sum()
    if total <= 0:
        raise UndefinedMetricError("all weights are zero", n_key_tokens=0)
    return float(np.exp(-np.dot(weights / total, logps)))


def compute_longppl(scored: ScoredDoc, mask: KeyTokenMask) -> float:
    """Perplexity restricted to the masked key tokens.

    ``scored`` carries the evaluated model's log-probabilities; ``mask``
    comes from the evaluator model (projected through the alignment
    module when the tokenizers differ).
    """
    if len(mask) != len(scored):
        raise ValueError(
            f"mask length {len(mask)} does not match document length {len(scored)}"
        )
    if mask.n_key == 0:
        raise UndefinedMetricError(
            "no key tokens selected; LongPPL is undefined", n_key_tokens=0
        )
    return weighted_perplexity(scored.logps_long(), mask.weights)


def compute_longppl_soft(
    scored: ScoredDoc,
    cfg: InfluenceConfig,
    soft_weights: Sequence[float] | None = None,
) -> float:
    """Soft-weighted perplexity.

    By default the weights are the document's own soft influences;
    pass ``soft_weights`` to use weights projected from a separate
    evaluator model instead.
    """
    if soft_weights is None:
        soft_weights = soft_influence(lpg_array(scored), cfg.gamma)
    return weighted_perplexity(scored.logps_long(), soft_weights)


def diagnostics(scored: ScoredDoc, cfg: InfluenceConfig) -> list[dict]:
    """Per-token diagnostic fields for dump augmentation.

    ``soft_w`` is the unnormalized soft influence ``min(exp(lpg),
    gamma)``; normalization depends on the aggregation scope, so it is
    left to consumers.
    """
    lpg = lpg_array(scored)
    lpv = lpv_array(scored)
    mask = select_key_tokens(scored, cfg)
    soft = soft_influence(lpg, cfg.gamma)
    return [
        {
            "lpg": float(lpg[i]),
            "lpv": float(lpv[i]),
            "is_key": bool(mask.flags[i]),
            "soft_w": float(soft[i]),
        }
        for i in range(len(scored))
    ]


def summarize_corpus(
    scoreds: Sequence[ScoredDoc],
    masks: Sequence[KeyTokenMask],
    cfg: InfluenceConfig,
    soft_weights: Sequence[Sequence[float]] | None = None,
) -> MetricReport:
    """Pooled metrics over a corpus.

    All documents' tokens enter one weighted mean: PPL over every
    token, LongPPL with equal weights over the union of key tokens,
    LongPPL-soft with soft influences normalized over the pool.
    """
    if len(scoreds) != len(masks):
        raise ValueError("need one mask per scored document")
    if soft_weights is not None and len(soft_weights) != len(scoreds):
        raise ValueError("need one soft-weight vector per scored document")
    all_logps: list[np.ndarray] = []
    all_flags: list[np.ndarray] = []
    all_soft: list[np.ndarray] = []
    for i, (scored, mask) in enumerate(zip(scoreds, masks)):
        if len(mask) != len(scored):
            raise ValueError(
                f"mask length {len(mask)} does not match document "
                f"{scored.doc_id!r} length {len(scored)}"
            )
        logps = np.asarray(scored.logps_long(), dtype=np.float64)
        all_logps.append(logps)
        all_flags.append(mask.flags)
        if soft_weights is not None:
            sw = np.asarray(soft_weights[i], dtype=np.float64)
            if sw.shape != logps.shape:
                raise ValueError(
                    f"soft weights for document {scored.doc_id!r} have wrong length"
                )
            all_soft.append(sw)
        else:
            all_soft.append(soft_influence(lpg_array(scored), cfg.gamma))
    logps = np.concatenate(all_logps) if all_logps else np.empty(0)
    flags = np.concatenate(all_flags) if all_flags else np.empty(0, dtype=bool)
    soft = np.concatenate(all_soft) if all_soft else np.empty(0)
    n_tokens = int(logps.size)
    if n_tokens == 0:
        raise UndefinedMetricError("corpus contains no tokens")
    n_key = int(flags.sum())
    ppl = float(np.exp(-logps.mean()))
    longppl = (
        weighted_perplexity(logps, flags.astype(np.float64)) if n_key else None
    )
    longppl_soft = weighted_perplexity(logps, soft)
    return MetricReport(
        ppl=ppl,
        longppl=longppl,
        longppl_soft=longppl_soft,
        n_tokens=n_tokens,
        n_key_tokens=n_key,
        key_fraction=n_key / n_tokens,
    )


def summarize(
    scored: ScoredDoc,
    mask: KeyTokenMask,
    cfg: InfluenceConfig,
    soft_weights: Sequence[float] | None = None,
) -> MetricReport:
    """Single-document metrics; see :func:`summarize_corpus`."""
    sw = [soft_weights] if soft_weights is not None else None
    return summarize_corpus([scored], [mask], cfg, soft_weights=sw)
