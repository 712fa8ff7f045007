"""Command-line interface.

Subcommands: ``eval`` (score a corpus or a dump into metric reports),
``select`` (append per-token key-token diagnostics to a dump),
``synth`` (generate lines-task documents), ``train`` (tiny-LM CE or
LongCE training), ``correlate`` (metric vs benchmark score table),
``annotate`` (render key-token highlights), ``dump-validate``.

Exit codes: 0 success, 1 usage error (bad flags, missing files),
2 data or contract error (schema violations, undefined metrics, bad
config values). Remote-scorer credentials are read from the
``LONGPPL_API_KEY`` environment variable, never from config files.

The JSON config has sections {tokenizer, scorer, window, influence,
train}; missing sections fall back to defaults (byte tokenizer,
self-fitted bigram scorer, K=4096 d=1024, alpha=2 beta=-2 gamma=5).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import alignment, analysis, dump, metrics, scoring, synthetic, tokenizers, training
from .errors import ConfigError, LongpplError

log = logging.getLogger("longppl")

_DEFAULT_CONFIG = {
    "tokenizer": {"kind": "byte"},
    "scorer": {"kind": "ngram", "order": 2, "smoothing_k": 1.0},
    "window": {},
    "influence": {},
    "train": {},
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def load_config(path: str | None) -> dict:
    config = {section: dict(values) for section, values in _DEFAULT_CONFIG.items()}
    if path is None:
        return config
    with open(path, "r", encoding="utf-8") as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(user, dict):
        raise ConfigError("config file must contain a JSON object")
    for section, values in user.items():
        if section not in config:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        config[section].update(values)
    return config


def _build(constructor, section: dict, what: str):
    try:
        return constructor(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}")


def build_tokenizer(section: dict, texts: list[str]) -> tokenizers.Tokenizer:
    kind = section.get("kind", "byte")
    if kind == "byte":
        return tokenizers.ByteTokenizer()
    if kind == "whitespace":
        return tokenizers.WhitespaceTokenizer.from_texts(texts)
    if kind == "bpe":
        try:
            vocab_file = section["vocab_file"]
            merges_file = section["merges_file"]
        except KeyError as exc:
            raise ConfigError(f"bpe tokenizer config needs {exc.args[0]!r}")
        return tokenizers.load_bpe_files(vocab_file, merges_file)
    raise ConfigError(f"unknown tokenizer kind {kind!r}")


def build_scorer(section: dict, docs: list[tokenizers.TokenizedDoc], vocab_size: int):
    kind = section.get("kind", "ngram")
    params = {k: v for k, v in section.items() if k != "kind"}
    if kind == "uniform":
        return scoring.UniformScorer(params.pop("vocab_size", vocab_size))
    if kind == "ngram":
        scorer = _build(scoring.NgramScorer, params, "ngram scorer")
        return scorer.fit(docs, vocab_size=vocab_size)
    if kind == "remote":
        params.setdefault("api_key", os.environ.get("LONGPPL_API_KEY"))
        return _build(scoring.RemoteScorer, params, "remote scorer")
    raise ConfigError(f"unknown scorer kind {kind!r}")


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Read a corpus: JSONL with doc_id and text fields, or a plain
    text file treated as one document."""
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        out = []
        seen = set()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    doc_id, text = obj["doc_id"], obj["text"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"corpus line {lineno}: {exc}")
                if not isinstance(doc_id, str) or not isinstance(text, str):
                    raise ValueError(f"corpus line {lineno}: doc_id and text must be strings")
                if doc_id in seen:
                    raise ValueError(f"corpus line {lineno}: duplicate doc_id {doc_id!r}")
                seen.add(doc_id)
                out.append((doc_id, text))
        return out
    return [(path.name, path.read_text(encoding="utf-8"))]


def _write_out(payload: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(payload)
        if not payload.endswith("\n"):
            sys.stdout.write("\n")
    else:
        Path(out).write_text(payload, encoding="utf-8")


def _report_json(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _doc_text(scored: scoring.ScoredDoc) -> str:
    pos = 0
    for rec in scored.records:
        if rec.span[0] != pos:
            raise ValueError(
                f"document {scored.doc_id!r}: token spans do not tile the text"
            )
        pos = rec.span[1]
    return "".join(rec.token_text for rec in scored.records)


def _evaluator_masks(
    scoreds: list[scoring.ScoredDoc],
    evaluator_path: str,
    influence: metrics.InfluenceConfig,
) -> tuple[list[metrics.KeyTokenMask], list[np.ndarray]]:
    """Masks and soft weights selected under an evaluator dump and
    projected onto the evaluated tokenization via character spans."""
    evaluator_docs = {d.doc_id: d for d in dump.read_dump(evaluator_path)}
    masks = []
    softs = []
    for scored in scoreds:
        if scored.doc_id not in evaluator_docs:
            raise ValueError(
                f"evaluator dump is missing document {scored.doc_id!r}"
            )
        ev = evaluator_docs[scored.doc_id]
        text = _doc_text(scored)
        ev_text = _doc_text(ev)
        if text != ev_text:
            raise ValueError(
                f"evaluator and evaluated texts differ for document {scored.doc_id!r}"
            )
        ev_mask = metrics.select_key_tokens(ev, influence)
        ev_spans = [rec.span for rec in ev.records]
        spans = [rec.span for rec in scored.records]
        flags = alignment.project_flags(ev_spans, ev_mask.flags, spans, len(text))
        n_key = int(flags.sum())
        weights = (
            flags.astype(np.float64) / n_key
            if n_key
            else np.zeros(len(flags), dtype=np.float64)
        )
        masks.append(metrics.KeyTokenMask(flags=flags, weights=weights))
        ev_soft = metrics.soft_influence(metrics.lpg_array(ev), influence.gamma)
        softs.append(alignment.project_weights(ev_spans, ev_soft, spans, len(text)))
    return masks, softs


def cmd_eval(args) -> int:
    if (args.corpus is None) == (args.dump is None):
        raise _UsageError("eval needs exactly one of --corpus or --dump")
    config = load_config(args.config)
    window = _build(scoring.WindowConfig, config["window"], "window")
    influence = _build(metrics.InfluenceConfig, config["influence"], "influence")
    if args.dump is not None:
        scoreds = dump.read_dump(args.dump)
    else:
        corpus = read_corpus(args.corpus)
        texts = [text for _, text in corpus]
        tokenizer = build_tokenizer(config["tokenizer"], texts)
        docs = [tokenizer.encode(text, doc_id=doc_id) for doc_id, text in corpus]
        scorer = build_scorer(config["scorer"], docs, tokenizer.vocab_size)
        scoreds = [scoring.score_doc(doc, scorer, window) for doc in docs]
    scoreds = sorted(scoreds, key=lambda d: d.doc_id)
    if args.dump_out is not None:
        dump.write_dump(scoreds, args.dump_out)
    masks = [metrics.select_key_tokens(s, influence) for s in scoreds]
    softs = None
    if args.evaluator_dump is not None:
        masks, softs = _evaluator_masks(scoreds, args.evaluator_dump, influence)
    per_doc = {}
    for i, (scored, mask) in enumerate(zip(scoreds, masks)):
        sw = [softs[i]] if softs is not None else None
        report = metrics.summarize_corpus([scored], [mask], influence, soft_weights=sw)
        per_doc[scored.doc_id] = report.to_dict()
    corpus_report = metrics.summarize_corpus(
        scoreds, masks, influence, soft_weights=softs
    )
    if corpus_report.longppl is None:
        log.warning("no key tokens selected; longppl is undefined for this corpus")
    payload = _report_json(
        {
            "window": {"K": window.K, "d": window.d},
            "influence": {
                "alpha": influence.alpha,
                "beta": influence.beta,
                "gamma": influence.gamma,
            },
            "per_doc": per_doc,
            "corpus": corpus_report.to_dict(),
        }
    )
    _write_out(payload, args.out)
    return 0


def cmd_select(args) -> int:
    config = load_config(args.config)
    influence = _build(metrics.InfluenceConfig, config["influence"], "influence")
    scoreds = dump.read_dump(args.dump)
    extras = [metrics.diagnostics(s, influence) for s in scoreds]
    lines = []
    for scored, doc_extras in zip(scoreds, extras):
        for rec, extra in zip(scored.records, doc_extras):
            lines.append(dump.format_dump_line(scored.doc_id, rec, extra))
    _write_out("\n".join(lines) + ("\n" if lines else ""), args.out)
    return 0


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for i in range(args.n_docs):
        upper = args.n_lines if args.target_max is None else min(args.target_max, args.n_lines)
        spec = synthetic.LinesTaskSpec(
            n_lines=args.n_lines,
            value_digits=args.value_digits,
            target_line=int(rng.integers(0, upper)),
            seed=args.seed + i,
        )
        text, answer_span, value, _ = synthetic.generate_lines_text(spec)
        rows.append(
            {
                "doc_id": f"lines-{args.seed}-{i}",
                "text": text,
                "answer_span": list(answer_span),
                "answer_value": value,
            }
        )
    payload = "\n".join(json.dumps(row) for row in rows) + "\n"
    _write_out(payload, args.out)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    train_section = dict(config["train"])
    model_section = train_section.pop("model", {})
    if args.seed is not None:
        train_section["seed"] = args.seed
    train_cfg = _build(training.TrainConfig, train_section, "train")
    corpus_rows = read_corpus(args.corpus)
    tokenizer = tokenizers.WhitespaceTokenizer.from_texts(t for _, t in corpus_rows)
    labeled = synthetic.read_lines_tasks(args.corpus, tokenizer)
    ids = [doc.doc.token_ids() for doc in labeled]
    answers = [sorted(doc.answer_token_indices) for doc in labeled]
    model_cfg = _build(
        training.TinyLMConfig,
        {"vocab_size": tokenizer.vocab_size, **model_section},
        "model",
    )
    model = training.TinyLM(model_cfg)
    result = training.train(model, ids, train_cfg, answer_positions=answers)
    if args.log_out is not None:
        training.write_training_log(result.log, args.log_out)
    if args.checkpoint_out is not None:
        training.save_checkpoint(result.model, args.checkpoint_out)
    final_answer_nll = training.evaluate_answer_nll(result.model, ids, answers)
    payload = _report_json(
        {
            "loss_kind": train_cfg.loss_kind,
            "steps": train_cfg.steps,
            "final_loss": result.log[-1].loss if result.log else None,
            "final_answer_nll": final_answer_nll,
            "n_docs": len(ids),
            "vocab_size": tokenizer.vocab_size,
        }
    )
    _write_out(payload, args.out)
    return 0


def cmd_correlate(args) -> int:
    table = analysis.load_score_table(args.table)
    report = analysis.correlate(table)
    _write_out(_report_json(report.to_dict()), args.out)
    return 0


def cmd_annotate(args) -> int:
    config = load_config(args.config)
    influence = _build(metrics.InfluenceConfig, config["influence"], "influence")
    scoreds = dump.read_dump(args.dump)
    if args.doc_id is not None:
        scoreds = [s for s in scoreds if s.doc_id == args.doc_id]
        if not scoreds:
            raise ValueError(f"dump has no document {args.doc_id!r}")
    rendered = []
    for scored in scoreds:
        text = _doc_text(scored)
        mask = metrics.select_key_tokens(scored, influence)
        ann = analysis.annotate_records(
            text,
            [rec.span for rec in scored.records],
            list(mask.flags),
            [metrics.compute_lpg(rec) for rec in scored.records],
            [metrics.compute_lpv(rec) for rec in scored.records],
        )
        rendered.append(analysis.render(ann, args.format))
    _write_out("\n".join(rendered), args.out)
    return 0


def cmd_dump_validate(args) -> int:
    summary = dump.validate_dump(args.dump)
    _write_out(_report_json(summary), args.out)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="longppl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="score a corpus or dump and report metrics")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--dump", default=None)
    p.add_argument("--dump-out", default=None, help="also write the scored dump here")
    p.add_argument("--evaluator-dump", default=None,
                   help="select key tokens from this dump and project them")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", help="append key-token diagnostics to a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("synth", help="generate lines-task documents as JSONL")
    p.add_argument("--out", default=None)
    p.add_argument("--n-docs", type=int, default=10)
    p.add_argument("--n-lines", type=int, default=60)
    p.add_argument("--value-digits", type=int, default=5)
    p.add_argument("--target-max", type=int, default=None,
                   help="exclusive cap on the target line index")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the tiny LM with CE or LongCE")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True, help="lines-task JSONL (see synth)")
    p.add_argument("--log-out", default=None)
    p.add_argument("--checkpoint-out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correlate", help="Pearson r of a metric/score table")
    p.add_argument("--table", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("annotate", help="render key-token highlights")
    p.add_argument("--dump", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--format", choices=("ansi", "html"), default="ansi")
    p.add_argument("--doc-id", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("dump-validate", help="check a dump against the schema")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_dump_validate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except (LongpplError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
