"""Fixtures: a tiny deterministic local checkpoint and corpus writers."""

import json
import os
import string

import pytest
import torch
from tokenizers import Regex, Tokenizer, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")


def _build_checkpoint(path, with_bos=True):
    """Character-level tokenizer (exact 1-char offsets) plus a small
    randomly initialized GPT-2, both saved under ``path``."""
    chars = sorted(set(string.printable))
    vocab = {"<s>": 0, "<unk>": 1}
    for ch in chars:
        vocab[ch] = len(vocab)
    raw = Tokenizer(models.WordLevel(vocab=vocab, unk_token="<unk>"))
    raw.pre_tokenizer = pre_tokenizers.Split(Regex(r"[\s\S]"), behavior="isolated")
    fast = PreTrainedTokenizerFast(
        tokenizer_object=raw,
        bos_token="<s>" if with_bos else None,
        unk_token="<unk>",
    )
    fast.save_pretrained(path)
    config = GPT2Config(
        vocab_size=len(vocab),
        n_positions=512,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=0,
        eos_token_id=0,
    )
    torch.manual_seed(0)
    GPT2LMHeadModel(config).save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    return _build_checkpoint(tmp_path_factory.mktemp("ckpt"))


@pytest.fixture(scope="session")
def tiny_checkpoint_without_bos(tmp_path_factory):
    return _build_checkpoint(tmp_path_factory.mktemp("ckpt-nobos"), with_bos=False)


@pytest.fixture
def write_corpus(tmp_path):
    """Write ``{"doc_id", "text"}`` rows as a corpus JSONL, return its path."""

    def _write(rows, name="corpus.jsonl"):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as fh:
            for doc_id, text in rows:
                fh.write(json.dumps({"doc_id": doc_id, "text": text}) + "\n")
        return path

    return _write
