"""Reweighted cross-entropy training on a desk-scale causal LM.

The loss family:

* CE: ``-mean(logp_long)``, the usual token-average cross entropy.
* LongCE: ``-sum(w_i * logp_long_i)`` with per-token weights
  ``w_i = min(exp(logp_long_i - logp_short_i), gamma)`` computed from
  the *same* model's full-context and truncated-context passes. The
  weights are detached: gradients flow through ``logp_long`` only, so
  each step re-estimates which tokens depend on long context and then
  upweights exactly those. By default the sum is divided by the token
  count (``normalization="mean"``) so CE and LongCE are comparable at
  one learning rate; the raw sum form stays available via config.

The short pass reuses the same block sliding-window rule as scoring:
one extra forward per block whose context start is positive, with the
full-prefix blocks reusing the (detached) long-pass values.

The model is a small pre-norm transformer in float64 with learned
absolute positions and a learned unconditional distribution for
position 0. Float64 keeps finite-difference gradient checks sharp;
everything runs on CPU. The optimizer is plain SGD with optional
momentum, which is sufficient at this scale.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, TrainingError
from .scoring import Scorer, WindowConfig, iter_blocks

# Single-threaded torch keeps reductions bit-reproducible across runs,
# which the determinism guarantees below rely on; at this model scale
# extra threads would not help anyway.
torch.set_num_threads(1)

__all__ = [
    "TinyLMConfig",
    "TinyLM",
    "TinyLMScorer",
    "TrainConfig",
    "LossBreakdown",
    "StepRecord",
    "TrainResult",
    "compute_ce",
    "compute_longce",
    "weighted_loss",
    "tiny_lm_gradients",
    "longce_step_loss",
    "train",
    "evaluate_answer_nll",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
    "read_training_log",
]


@dataclass(frozen=True)
class TinyLMConfig:
    """Architecture hyperparameters, all deliberately small."""

    vocab_size: int
    context_window: int = 256
    embedding_dim: int = 64
    hidden_dim: int = 128
    n_layers: int = 2
    n_heads: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.vocab_size <= 512:
            raise ConfigError(f"vocab_size must be in [1, 512], got {self.vocab_size}")
        if not 1 <= self.context_window <= 512:
            raise ConfigError(
                f"context_window must be in [1, 512], got {self.context_window}"
            )
        if self.embedding_dim < 1 or self.hidden_dim < 1 or self.n_layers < 1:
            raise ConfigError("embedding_dim, hidden_dim, n_layers must be >= 1")
        if self.n_heads < 1 or self.embedding_dim % self.n_heads != 0:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} must be divisible by "
                f"n_heads {self.n_heads}"
            )


class _Block(nn.Module):
    """Pre-norm transformer block: causal self-attention then MLP."""

    def __init__(self, dim: int, hidden: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        hd = d // self.n_heads
        q = q.view(b, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, t, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(2, 3)) / math.sqrt(hd)
        causal = torch.triu(
            torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1
        )
        att = att.masked_fill(causal, float("-inf"))
        att = torch.softmax(att, dim=3)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.ln2(x))
        return x


class TinyLM(nn.Module):
    """Causal transformer LM in float64.

    ``sequence_logprobs`` gives one log-probability per input position:
    entry 0 comes from a learned unconditional distribution
    (``init_logits``), entry j > 0 from the transformer conditioned on
    the preceding ids. ``start`` is the absolute position of the first
    id, used to index the positional embeddings for window slices.
    """

    def __init__(self, config: TinyLMConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.embed = nn.Embedding(config.vocab_size, config.embedding_dim)
        self.pos = nn.Embedding(config.context_window, config.embedding_dim)
        self.blocks = nn.ModuleList(
            _Block(config.embedding_dim, config.hidden_dim, config.n_heads)
            for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.embedding_dim)
        self.head = nn.Linear(config.embedding_dim, config.vocab_size)
        self.init_logits = nn.Parameter(torch.zeros(config.vocab_size))
        self.double()
        n_params = sum(p.numel() for p in self.parameters())
        if n_params > 1_000_000:
            raise ConfigError(f"model has {n_params} parameters, limit is 1e6")

    def next_token_logprobs(self, ids: torch.Tensor, start: int = 0) -> torch.Tensor:
        """[B, T, V] log-distributions over the token following each position."""
        b, t = ids.shape
        if start < 0 or start + t > self.config.context_window:
            raise ValueError(
                f"positions [{start}, {start + t}) exceed context window "
                f"{self.config.context_window}"
            )
        positions = torch.arange(start, start + t, device=ids.device)
        x = self.embed(ids) + self.pos(positions)[None]
        for block in self.blocks:
            x = block(x)
        return torch.log_softmax(self.head(self.ln_f(x)), dim=2)

    def sequence_logprobs(self, ids: torch.Tensor, start: int = 0) -> torch.Tensor:
        """[B, T] log-probability of each id given the ids before it."""
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError("ids must be [batch, time] with time >= 1")
        first = torch.log_softmax(self.init_logits, dim=0)[ids[:, 0]]
        if ids.shape[1] == 1:
            return first[:, None]
        dists = self.next_token_logprobs(ids[:, :-1], start=start)
        tail = dists.gather(2, ids[:, 1:, None])[:, :, 0]
        return torch.cat([first[:, None], tail], dim=1)


class TinyLMScorer(Scorer):
    """Adapts a TinyLM to the scoring interface (position-aware)."""

    def __init__(self, model: TinyLM):
        self.model = model

    def batch_logprobs(self, ids: Sequence[int], start: int = 0) -> list[float]:
        tensor = torch.tensor([list(ids)], dtype=torch.long)
        with torch.no_grad():
            lps = self.model.sequence_logprobs(tensor, start=start)
        return lps[0].tolist()

    def logprob(self, context: Sequence[int], target: int) -> float:
        return self.batch_logprobs([*context, target], start=0)[-1]


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop settings.

    ``K_short`` and ``d`` are the short-context window and block step
    used for weight computation, scaled to the tiny model's context
    window. ``unit_weights`` forces every weight to 1 under LongCE (a
    diagnostic mode that must reproduce CE exactly).
    """

    loss_kind: str = "longce"
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 8
    K_short: int = 64
    d: int = 64
    gamma: float = 5.0
    normalization: str = "mean"
    momentum: float = 0.0
    unit_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("ce", "longce"):
            raise ConfigError(f"loss_kind must be 'ce' or 'longce', got {self.loss_kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 1 <= self.d <= self.K_short:
            raise ConfigError(
                f"d must satisfy 1 <= d <= K_short, got d={self.d}, K_short={self.K_short}"
            )
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigError(f"gamma must be finite and > 0, got {self.gamma}")
        if self.normalization not in ("sum", "mean"):
            raise ConfigError(
                f"normalization must be 'sum' or 'mean', got {self.normalization!r}"
            )
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class LossBreakdown:
    """One loss evaluation: total, per-token weights and NLLs, and the
    mean answer-token NLL when labels were supplied."""

    total: float
    weights: np.ndarray
    nlls: np.ndarray
    answer_nll: float | None = None


def compute_ce(logps: Sequence[float]) -> float:
    """Uniform-average cross entropy: -mean(logps)."""
    arr = np.asarray(logps, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot average an empty loss")
    return float(-arr.mean())


def compute_longce(
    logps_long: Sequence[float],
    logps_short: Sequence[float],
    gamma: float = 5.0,
    normalization: str = "mean",
) -> LossBreakdown:
    """Reweighted cross entropy on plain float sequences.

    Weights are ``min(exp(logp_long - logp_short), gamma)``; the loss
    is ``sum(w * -logp_long)``, divided by the token count under mean
    normalization.
    """
    long_arr = np.asarray(logps_long, dtype=np.float64)
    short_arr = np.asarray(logps_short, dtype=np.float64)
    if long_arr.shape != short_arr.shape or long_arr.ndim != 1:
        raise ValueError("logps_long and logps_short must be 1-d and equally long")
    if long_arr.size == 0:
        raise ValueError("cannot compute a loss over zero tokens")
    if normalization not in ("sum", "mean"):
        raise ValueError(f"normalization must be 'sum' or 'mean', got {normalization!r}")
    with np.errstate(over="ignore"):
        weights = np.minimum(np.exp(long_arr - short_arr), gamma)
    nlls = -long_arr
    total = float((weights * nlls).sum())
    if normalization == "mean":
        total /= long_arr.size
    return LossBreakdown(total=total, weights=weights, nlls=nlls)


def weighted_loss(
    model: TinyLM,
    batch: torch.Tensor,
    weights: torch.Tensor,
    start: int = 0,
    normalization: str = "mean",
) -> torch.Tensor:
    """Differentiable ``sum(w * -logp)`` with ``weights`` held constant."""
    if weights.shape != batch.shape:
        raise ValueError("weights must match the batch shape")
    lps = model.sequence_logprobs(batch, start=start)
    total = (weights.detach() * -lps).sum()
    if normalization == "mean":
        total = total / batch.numel()
    return total


def tiny_lm_gradients(
    model: TinyLM,
    batch: torch.Tensor,
    weights: torch.Tensor,
    normalization: str = "mean",
) -> dict[str, torch.Tensor]:
    """Gradients of the weighted loss for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = weighted_loss(model, batch, weights, normalization=normalization)
    loss.backward()
    grads = {}
    for name, param in model.named_parameters():
        grads[name] = (
            param.grad.detach().clone()
            if param.grad is not None
            else torch.zeros_like(param)
        )
    model.zero_grad(set_to_none=True)
    return grads


def _short_logprobs(
    model: TinyLM, batch: torch.Tensor, lp_long_detached: torch.Tensor, window: WindowConfig
) -> torch.Tensor:
    """Truncated-context log-probs for a batch under the block rule.

    Full-prefix blocks reuse the detached long-pass values (the same
    quantity by definition); truncated blocks get one no-grad forward
    each over their window.
    """
    short = lp_long_detached.clone()
    t = batch.shape[1]
    with torch.no_grad():
        for block_start, block_end, ctx_start in iter_blocks(t, window):
            if ctx_start == 0:
                continue
            window_lps = model.sequence_logprobs(
                batch[:, ctx_start:block_end], start=ctx_start
            )
            short[:, block_start:block_end] = window_lps[:, block_start - ctx_start :]
    return short


def longce_step_loss(
    model: TinyLM,
    batch: torch.Tensor,
    cfg: TrainConfig,
    answer_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """One loss evaluation for a batch under ``cfg``.

    Returns the differentiable loss tensor plus a detached breakdown.
    Under CE (or ``unit_weights``) every weight is 1 and the short pass
    is skipped; both branches reduce with the same sum/size expression
    so they match bit-for-bit when the weights agree.
    """
    lp_long = model.sequence_logprobs(batch, start=0)
    detached = lp_long.detach()
    if cfg.loss_kind == "longce" and not cfg.unit_weights:
        window = WindowConfig(K=cfg.K_short, d=cfg.d)
        lp_short = _short_logprobs(model, batch, detached, window)
        weights = (detached - lp_short).exp().clamp(max=cfg.gamma)
    else:
        weights = torch.ones_like(detached)
    total = (weights * -lp_long).sum()
    if cfg.normalization == "mean":
        total = total / batch.numel()
    answer_nll = None
    if answer_mask is not None and bool(answer_mask.any()):
        answer_nll = float(-detached[answer_mask].mean())
    breakdown = LossBreakdown(
        total=float(total.detach()),
        weights=weights.numpy().reshape(-1),
        nlls=(-detached).numpy().reshape(-1),
        answer_nll=answer_nll,
    )
    return total, breakdown


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    mean_weight: float
    max_weight: float
    answer_nll: float | None = None

    def to_dict(self) -> dict:
        out = {
            "step": self.step,
            "loss": self.loss,
            "mean_weight": self.mean_weight,
            "max_weight": self.max_weight,
        }
        if self.answer_nll is not None:
            out["answer_nll"] = self.answer_nll
        return out


@dataclass
class TrainResult:
    model: TinyLM
    log: list[StepRecord]


def _corpus_tensor(
    model: TinyLM, corpus: Sequence[Sequence[int]]
) -> torch.Tensor:
    if len(corpus) == 0:
        raise ConfigError("training corpus is empty")
    lengths = {len(ids) for ids in corpus}
    if len(lengths) != 1:
        raise ConfigError(
            f"training corpus must have uniform document length, got {sorted(lengths)}"
        )
    (length,) = lengths
    if length < 1:
        raise ConfigError("training documents must be non-empty")
    if length > model.config.context_window:
        raise ConfigError(
            f"documents of {length} tokens exceed the context window "
            f"{model.config.context_window}"
        )
    tensor = torch.tensor([list(ids) for ids in corpus], dtype=torch.long)
    if int(tensor.min()) < 0 or int(tensor.max()) >= model.config.vocab_size:
        raise ConfigError("corpus contains ids outside the model vocabulary")
    return tensor


def train(
    model: TinyLM,
    corpus: Sequence[Sequence[int]],
    cfg: TrainConfig,
    answer_positions: Sequence[Iterable[int]] | None = None,
) -> TrainResult:
    """Run the training loop; deterministic given the config seed.

    ``corpus`` is a list of equal-length id sequences. Batches are
    drawn with replacement from a seeded generator, so CE and LongCE
    runs with the same seed see identical data. ``answer_positions``
    (one index collection per document) enables the per-step
    answer-token NLL diagnostic. A non-finite loss aborts with
    ``TrainingError`` carrying the step index.
    """
    data = _corpus_tensor(model, corpus)
    if cfg.K_short >= model.config.context_window:
        raise ConfigError(
            f"K_short {cfg.K_short} must be smaller than the context window "
            f"{model.config.context_window}"
        )
    answer_mask_all = None
    if answer_positions is not None:
        if len(answer_positions) != len(corpus):
            raise ConfigError("need one answer-position collection per document")
        answer_mask_all = torch.zeros(data.shape, dtype=torch.bool)
        for row, positions in enumerate(answer_positions):
            for pos in positions:
                answer_mask_all[row, pos] = True
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum
    )
    log: list[StepRecord] = []
    for step in range(cfg.steps):
        idx = rng.integers(0, data.shape[0], size=cfg.batch_size)
        batch = data[torch.from_numpy(idx)]
        answer_mask = (
            answer_mask_all[torch.from_numpy(idx)] if answer_mask_all is not None else None
        )
        loss, breakdown = longce_step_loss(model, batch, cfg, answer_mask)
        if not math.isfinite(breakdown.total):
            raise TrainingError(
                f"non-finite loss {breakdown.total!r} at step {step}", step=step
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        log.append(
            StepRecord(
                step=step,
                loss=breakdown.total,
                mean_weight=float(breakdown.weights.mean()),
                max_weight=float(breakdown.weights.max()),
                answer_nll=breakdown.answer_nll,
            )
        )
    return TrainResult(model=model, log=log)


def evaluate_answer_nll(
    model: TinyLM,
    corpus: Sequence[Sequence[int]],
    answer_positions: Sequence[Iterable[int]],
) -> float:
    """Mean NLL over every labeled answer token in the corpus."""
    data = _corpus_tensor(model, corpus)
    mask = torch.zeros(data.shape, dtype=torch.bool)
    for row, positions in enumerate(answer_positions):
        for pos in positions:
            mask[row, pos] = True
    if not bool(mask.any()):
        raise ConfigError("no answer positions given")
    with torch.no_grad():
        lps = model.sequence_logprobs(data, start=0)
    return float(-lps[mask].mean())


# --- checkpoint format -----------------------------------------------------
#
# [8-byte little-endian header length][header JSON][raw parameter bytes]
# The header carries format_version, seed, and the model config; the
# parameter bytes are the float64 state-dict tensors concatenated in
# state-dict order.

_FORMAT_VERSION = 1


def save_checkpoint(model: TinyLM, path: str | Path) -> None:
    header = {
        "format_version": _FORMAT_VERSION,
        "seed": model.config.seed,
        "config": asdict(model.config),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for tensor in model.state_dict().values():
            fh.write(tensor.numpy().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> TinyLM:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ConfigError("checkpoint truncated before header length")
        (header_len,) = struct.unpack("<Q", raw)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise ConfigError("checkpoint truncated inside header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"checkpoint header is not valid JSON: {exc}")
        if header.get("format_version") != _FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format_version {header.get('format_version')!r}"
            )
        config = TinyLMConfig(**header["config"])
        model = TinyLM(config)
        state = model.state_dict()
        for name, tensor in state.items():
            n_bytes = tensor.numel() * 8
            blob = fh.read(n_bytes)
            if len(blob) != n_bytes:
                raise ConfigError(f"checkpoint truncated inside parameter {name!r}")
            array = np.frombuffer(blob, dtype="<f8").reshape(tensor.shape).copy()
            state[name] = torch.from_numpy(array)
        if fh.read(1):
            raise ConfigError("checkpoint has trailing bytes")
    model.load_state_dict(state)
    return model


def write_training_log(records: Iterable[StepRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict()) + "\n")


def read_training_log(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
