"""Long-context perplexity toolkit.

Computes perplexity restricted to "key tokens" - tokens whose
prediction genuinely improves when the model sees long context,
identified by contrasting full-context and truncated-context
log-probabilities - plus the reweighted cross-entropy training loss
built on the same contrast, tokenizer alignment, a synthetic retrieval
benchmark, and analysis tooling.
"""

from .errors import (
    AlignmentError,
    ConfigError,
    DumpFormatError,
    LongpplError,
    ProtocolError,
    ScoringError,
    TrainingError,
    UndefinedMetricError,
)
from .tokenizers import (
    BpeTokenizer,
    ByteTokenizer,
    Token,
    TokenizedDoc,
    TokenizerSpec,
    WhitespaceTokenizer,
    decode,
    load_bpe_files,
    make_tokenizer,
    save_bpe_files,
)
from .scoring import (
    NgramScorer,
    RemoteScorer,
    ScoredDoc,
    Scorer,
    TokenScoreRecord,
    UniformScorer,
    WindowConfig,
    score_doc,
    score_long,
    score_short_sliding,
)
from .dump import read_dump, validate_dump, write_dump
from .metrics import (
    InfluenceConfig,
    KeyTokenMask,
    MetricReport,
    compute_longppl,
    compute_longppl_soft,
    compute_lpg,
    compute_lpv,
    compute_ppl,
    compute_soft_influence,
    select_key_tokens,
    soft_influence,
    summarize,
    summarize_corpus,
    weighted_perplexity,
)
from .alignment import (
    project_flags,
    project_key_tokens_hard,
    project_weights,
    project_weights_soft,
)
from .synthetic import (
    LabeledDoc,
    LinesTaskSpec,
    OracleSpec,
    generate_lines_task,
    generate_lines_text,
    label_document,
    make_lines_corpus,
    oracle_scorer,
    selection_accuracy,
)
from .training import (
    LossBreakdown,
    TinyLM,
    TinyLMConfig,
    TinyLMScorer,
    TrainConfig,
    compute_ce,
    compute_longce,
    evaluate_answer_nll,
    load_checkpoint,
    save_checkpoint,
    tiny_lm_gradients,
    train,
)
from .analysis import (
    AnnotatedDoc,
    BenchmarkScoreTable,
    CorrelationReport,
    ScoreRow,
    annotate,
    correlate,
    load_score_table,
    parse_highlight_spans,
    pearson,
    render,
)

__version__ = "0.1.0"
