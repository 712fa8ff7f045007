"""Per-token log-probability extraction from pretrained causal LMs.

Runs a long (full-prefix) pass and a block-scheduled truncated pass
over each corpus document and writes score-dump JSONL that downstream
perplexity tooling can read. No metric is computed here; this package
only produces the raw per-token scores.
"""

from .dumper import DumperError, DumpJobSpec, dump_logprobs, read_corpus_file

__all__ = ["DumperError", "DumpJobSpec", "dump_logprobs", "read_corpus_file"]

__version__ = "0.1.0"
