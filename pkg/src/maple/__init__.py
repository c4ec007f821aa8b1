"""Two-stage next-app prediction pipeline and evaluation harness.

The package converts raw app-usage logs into contextual prompt sentences,
builds next-category prompts from empirical sequence statistics, runs
two-stage next-app prediction through pluggable text-to-text predictors, and
scores the results against frequency and recency baselines.
"""

from maple.backend import Candidate, GenerationRequest, Predictor, ReferenceBackend
from maple.corpus import (
    Dataset,
    Session,
    SplitCorpus,
    UsageRecord,
    Vocab,
    filter_noise,
    ingest_records,
    parse_log,
    sessionize,
    split_chronological,
)
from maple.evaluation import accuracy_at_k, make_report, mrr_at_k
from maple.pipeline import (
    AblationFlags,
    RankedPrediction,
    StagePredictors,
    predict_case,
    run_predictions,
)
from maple.templater import (
    ContextBundle,
    ParseFailure,
    PromptSentence,
    parse_context,
    parse_prediction,
    parse_type_result,
    render_context,
    render_target,
    render_type_result,
)
from maple.typeprompt import (
    TypeDistribution,
    TypeEntry,
    TypeTable,
    build_type_table,
    emit_stage1_targets,
    lookup_with_backoff,
)
from maple.wire import ExternalClient, ProtocolError, TransportError

__version__ = "0.1.0"
