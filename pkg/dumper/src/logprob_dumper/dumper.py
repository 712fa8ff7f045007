"""Extract long- and short-context token log-probabilities from a checkpoint.

Output format: one JSON object per token,

    {"doc_id": str, "token_index": int, "token_text": str,
     "span": [int, int], "logp_long": float, "logp_short": float,
     "short_ctx_len": int}

with floats serialized at full double precision so they round-trip
exactly. ``token_text`` and ``span`` come from the model tokenizer's
own character offsets into the source text.

The short pass uses the block schedule: token ``t`` belongs to block
``floor(t / d)`` and its truncated context starts at
``max(0, floor(t / d) * d - K)``, so one forward pass scores ``d``
tokens. Blocks whose context start is 0 see their full prefix; their
short scores are copied from the long pass, which makes the
``logp_short == logp_long`` invariant on full prefixes exact.

Every forward pass conditions on the tokenizer's BOS token followed by
the (possibly truncated) context, which is what lets the very first
token of a document be scored at all.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Iterator, Sequence

import torch

__all__ = ["DumperError", "DumpJobSpec", "dump_logprobs", "read_corpus_file"]


class DumperError(Exception):
    """Unusable job, corpus, checkpoint, or a failed inference run."""


@dataclasses.dataclass(frozen=True)
class DumpJobSpec:
    """One extraction job.

    ``max_context_tokens`` bounds the long pass including the BOS slot;
    leave it ``None`` to use the model's own position limit. ``device``
    is a torch device hint such as ``"cpu"`` or ``"cuda:0"``.
    """

    model: str
    corpus: str | Path
    K: int = 4096
    d: int = 1024
    max_context_tokens: int | None = None
    device: str = "cpu"
    batch_size: int = 8

    def __post_init__(self):
        if self.K < 1:
            raise DumperError(f"K must be >= 1, got {self.K}")
        if not 1 <= self.d <= self.K:
            raise DumperError(
                f"d must satisfy 1 <= d <= K, got d={self.d}, K={self.K}"
            )
        if self.max_context_tokens is not None and not self.K < self.max_context_tokens:
            raise DumperError(
                f"K ({self.K}) must be smaller than max_context_tokens "
                f"({self.max_context_tokens})"
            )
        if self.batch_size < 1:
            raise DumperError(f"batch_size must be >= 1, got {self.batch_size}")


def read_corpus_file(path: str | Path) -> list[tuple[str, str]]:
    """Read ``(doc_id, text)`` pairs.

    ``.jsonl``/``.ndjson`` files carry one ``{"doc_id", "text"}`` object
    per line; any other file is one document named after the file.
    """
    path = Path(path)
    if path.suffix not in (".jsonl", ".ndjson"):
        return [(path.name, path.read_text(encoding="utf-8"))]
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id, text = obj["doc_id"], obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DumperError(f"corpus line {lineno}: {exc}")
            if not isinstance(doc_id, str) or not isinstance(text, str):
                raise DumperError(
                    f"corpus line {lineno}: doc_id and text must be strings"
                )
            if doc_id in seen:
                raise DumperError(f"corpus line {lineno}: duplicate doc_id {doc_id!r}")
            seen.add(doc_id)
            out.append((doc_id, text))
    return out


def iter_blocks(n_tokens: int, K: int, d: int) -> Iterator[tuple[int, int, int]]:
    """Yield ``(block_start, block_end, ctx_start)`` for each d-token block."""
    for block_start in range(0, n_tokens, d):
        block_end = min(block_start + d, n_tokens)
        ctx_start = max(0, block_start - K)
        yield block_start, block_end, ctx_start


def _load_model(model_id: str, device: str):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        from transformers.utils import logging as hf_logging

        hf_logging.disable_progress_bar()
    except ImportError:
        pass
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id)
    except OSError as exc:
        raise DumperError(f"cannot load checkpoint {model_id!r}: {exc}")
    model.to(device)
    model.eval()
    if tokenizer.bos_token_id is None:
        raise DumperError(
            f"tokenizer of {model_id!r} defines no BOS token, so the first "
            "token of a document cannot be scored"
        )
    return tokenizer, model


def _token_logprobs(model, rows: torch.Tensor) -> torch.Tensor:
    """Log-probability of every non-leading token in each row.

    Rows must start with the BOS id; the result has one column per
    remaining token. Log-softmax runs in float64 for stable, exactly
    reproducible values.
    """
    with torch.no_grad():
        logits = model(rows).logits
    lps = logits.double().log_softmax(-1)
    targets = rows[:, 1:]
    return lps[:, :-1].gather(2, targets.unsqueeze(-1)).squeeze(-1)


def _is_oom(exc: BaseException) -> bool:
    if isinstance(exc, MemoryError):
        return True
    for holder in (torch, torch.cuda):
        oom = getattr(holder, "OutOfMemoryError", None)
        if oom is not None and isinstance(exc, oom):
            return True
    return isinstance(exc, RuntimeError) and "out of memory" in str(exc).lower()


def _chunks(items: list, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _score_document(
    model, bos_id: int, ids: Sequence[int], K: int, d: int, batch_size: int, device: str
) -> tuple[list[float], list[float], list[int]]:
    """Long scores, short scores, and short context lengths for one doc."""
    n = len(ids)
    full = torch.tensor([[bos_id, *ids]], dtype=torch.long, device=device)
    lps_long = _token_logprobs(model, full)[0]
    lps_short = lps_long.clone()
    short_ctx_len = [0] * n
    truncated: dict[int, list[tuple[int, int, int]]] = {}
    for block_start, block_end, ctx_start in iter_blocks(n, K, d):
        for t in range(block_start, block_end):
            short_ctx_len[t] = t - ctx_start
        if ctx_start == 0:
            continue
        length = block_end - ctx_start
        truncated.setdefault(length, []).append((block_start, block_end, ctx_start))
    for blocks in truncated.values():
        for chunk in _chunks(blocks, batch_size):
            rows = torch.tensor(
                [[bos_id, *ids[cs:be]] for _, be, cs in chunk],
                dtype=torch.long,
                device=device,
            )
            out = _token_logprobs(model, rows)
            for r, (bs, be, cs) in enumerate(chunk):
                lps_short[bs:be] = out[r, bs - cs : be - cs]
    return lps_long.tolist(), lps_short.tolist(), short_ctx_len


def _dump_lines(
    tokenizer, model, corpus: list[tuple[str, str]], job: DumpJobSpec, batch_size: int
) -> tuple[list[str], int]:
    model_limit = getattr(model.config, "max_position_embeddings", None)
    limits = [v for v in (job.max_context_tokens, model_limit) if v is not None]
    if not limits:
        raise DumperError(
            "the model config does not expose a position limit; "
            "set max_context_tokens explicitly"
        )
    max_context = min(limits)
    if not job.K < max_context:
        raise DumperError(
            f"K ({job.K}) must be smaller than the usable context ({max_context})"
        )
    bos_id = tokenizer.bos_token_id
    lines: list[str] = []
    n_tokens = 0
    for doc_id, text in corpus:
        enc = tokenizer(text, add_special_tokens=False, return_offsets_mapping=True)
        ids = list(enc["input_ids"])
        offsets = [tuple(pair) for pair in enc["offset_mapping"]]
        if not ids:
            raise DumperError(f"document {doc_id!r} produced no tokens")
        if len(ids) + 1 > max_context:
            raise DumperError(
                f"document {doc_id!r} has {len(ids)} tokens; with the BOS slot "
                f"that exceeds the usable context of {max_context}"
            )
        lps_long, lps_short, short_ctx_len = _score_document(
            model, bos_id, ids, job.K, job.d, batch_size, job.device
        )
        for t in range(len(ids)):
            if not (math.isfinite(lps_long[t]) and math.isfinite(lps_short[t])):
                raise DumperError(
                    f"document {doc_id!r}: non-finite log-probability at token {t}"
                )
            start, end = offsets[t]
            lines.append(
                json.dumps(
                    {
                        "doc_id": doc_id,
                        "token_index": t,
                        "token_text": text[start:end],
                        "span": [start, end],
                        "logp_long": lps_long[t],
                        "logp_short": lps_short[t],
                        "short_ctx_len": short_ctx_len[t],
                    },
                    ensure_ascii=False,
                )
            )
            n_tokens += 1
    return lines, n_tokens


def dump_logprobs(job: DumpJobSpec, out_path: str | Path) -> dict:
    """Run ``job`` and write the dump to ``out_path``.

    An out-of-memory failure triggers a single retry at half the batch
    size; a second failure raises a diagnostic. Returns a summary with
    document/token counts and the batch size that succeeded.
    """
    corpus = read_corpus_file(job.corpus)
    tokenizer, model = _load_model(job.model, job.device)
    attempts = [job.batch_size]
    if job.batch_size > 1:
        attempts.append(max(1, job.batch_size // 2))
    last_oom: BaseException | None = None
    for batch_size in attempts:
        try:
            lines, n_tokens = _dump_lines(tokenizer, model, corpus, job, batch_size)
            break
        except Exception as exc:
            if not _is_oom(exc):
                raise
            last_oom = exc
    else:
        raise DumperError(
            f"inference ran out of memory even at batch size {attempts[-1]} "
            f"(started at {job.batch_size}): {last_oom}"
        )
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    return {
        "out": str(out_path),
        "n_docs": len(corpus),
        "n_tokens": n_tokens,
        "batch_size": batch_size,
    }
