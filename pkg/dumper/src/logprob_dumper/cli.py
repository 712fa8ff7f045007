"""Command line front end: score a corpus with a checkpoint, write the dump.

Exit codes: 0 on success, 1 for usage problems (bad flags, missing
files), 2 for job or inference failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from .dumper import DumperError, DumpJobSpec, dump_logprobs


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="logprob-dump",
        description=(
            "Extract per-token long- and short-context log-probabilities "
            "from a causal LM checkpoint and write score-dump JSONL."
        ),
    )
    parser.add_argument("--model", required=True, help="checkpoint path or model id")
    parser.add_argument("--corpus", required=True, help="JSONL corpus or plain text file")
    parser.add_argument("--out", required=True, help="output dump path")
    parser.add_argument("--K", type=int, default=4096, help="short context size")
    parser.add_argument("--d", type=int, default=1024, help="block size")
    parser.add_argument(
        "--max-context", type=int, default=None,
        help="long-pass token budget incl. BOS (default: model limit)",
    )
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        job = DumpJobSpec(
            model=args.model,
            corpus=args.corpus,
            K=args.K,
            d=args.d,
            max_context_tokens=args.max_context,
            device=args.device,
            batch_size=args.batch_size,
        )
        report = dump_logprobs(job, args.out)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return 1
    except DumperError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
