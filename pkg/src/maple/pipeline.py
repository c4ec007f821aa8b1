"""Two-stage orchestration: training pairs, per-case prediction, ablations.

Stage 1 predicts the next app's category as a rendered probability sentence;
stage 2 predicts the concrete app from the full context prompt with the
stage-1 sentence appended. Training pairs for both stages are emitted from
the training split; at inference the stage-1 sentence comes from the stage-1
predictor, falling back to the category table when the generation does not
parse.

Every test case is independent, so prediction runs on a bounded worker pool
and results are gathered in case order; output is byte-identical for any
worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from maple import templater
from maple.backend import GenerationRequest, Predictor
from maple.corpus import Dataset, UsageRecord, Vocab
from maple.templater import ContextBundle, ParseFailure, PromptSentence
from maple.typeprompt import TypeTable, lookup_with_backoff

__all__ = [
    "ABLATION_ROWS",
    "AblationFlags",
    "RankedPrediction",
    "StagePredictors",
    "TestCase",
    "build_bundle",
    "build_stage1_pairs",
    "build_stage2_pairs",
    "enumerate_test_cases",
    "fit_reference_predictors",
    "installed_apps_map",
    "predict_case",
    "read_pair_file",
    "run_predictions",
    "write_pair_file",
]

DEFAULT_WINDOW = 15

# Seconds per day/hour for UTC weekday-hour buckets; day 0 of the epoch was
# a Thursday, hence the +3 rotation to make Monday 0.
_EPOCH_WEEKDAY_OFFSET = 3


@dataclass(frozen=True)
class AblationFlags:
    """Which context sources feed the prompts; each study row disables one."""

    use_stage1: bool = True
    use_app_history: bool = True
    use_installed_apps: bool = True
    use_optional_context: bool = True

    def __post_init__(self) -> None:
        if not (
            self.use_stage1
            or self.use_app_history
            or self.use_installed_apps
            or self.use_optional_context
        ):
            raise ValueError("at least one context source must stay enabled")


FULL_FLAGS = AblationFlags()

ABLATION_ROWS: dict[str, AblationFlags] = {
    "full": FULL_FLAGS,
    "w/o first-stage": replace(FULL_FLAGS, use_stage1=False),
    "w/o app-history": replace(FULL_FLAGS, use_app_history=False),
    "w/o installed-apps": replace(FULL_FLAGS, use_installed_apps=False),
    "w/o optional-context": replace(FULL_FLAGS, use_optional_context=False),
}


@dataclass(frozen=True)
class RankedPrediction:
    """Distinct candidate app ids for one test case, best first."""

    test_case_id: str
    app_ids: tuple[int, ...]
    scores: tuple[float, ...]
    attempts_used: int

    def __post_init__(self) -> None:
        if len(set(self.app_ids)) != len(self.app_ids):
            raise ValueError("predicted app ids must be distinct")
        if len(self.app_ids) != len(self.scores):
            raise ValueError("every app id needs a score")


@dataclass(frozen=True)
class TestCase:
    test_case_id: str
    user_id: str
    bundle: ContextBundle
    truth_app_id: int


@dataclass
class StagePredictors:
    """The predictors serving a run, plus the stage-1 fallback table."""

    stage2: Predictor
    stage1: Predictor | None = None
    type_table: TypeTable | None = None


def timestamp_bucket(timestamp: int) -> tuple[int, int]:
    """UTC (weekday, hour) of an epoch timestamp, Monday = 0."""
    days, seconds = divmod(timestamp, 86400)
    return (days + _EPOCH_WEEKDAY_OFFSET) % 7, seconds // 3600


def installed_apps_map(train_records: Sequence[UsageRecord], vocab: Vocab) -> dict[str, tuple[int, ...]]:
    """A user's distinct training apps grouped by category name."""
    groups: dict[str, set[int]] = {}
    for record in train_records:
        name = vocab.category_name(record.category_id)
        groups.setdefault(name, set()).add(record.app_id)
    return {name: tuple(sorted(apps)) for name, apps in sorted(groups.items())}


def _poi_for(history: Sequence[UsageRecord], target: UsageRecord) -> tuple[str, ...]:
    # Use the most recent record that carries labels, target first, capped at
    # the three label slots the sentence offers.
    for record in (target, *reversed(history)):
        if record.poi_labels:
            return record.poi_labels[: templater.MAX_POI_LABELS]
    return ()


def build_bundle(
    history: Sequence[UsageRecord],
    target: UsageRecord,
    vocab: Vocab,
    installed: dict[str, tuple[int, ...]] | None = None,
    window: int = DEFAULT_WINDOW,
) -> ContextBundle:
    """Assemble the context for predicting ``target`` after ``history``."""
    recent = list(history)[-window:]
    return ContextBundle(
        app_history=tuple(r.app_id for r in recent),
        category_history=tuple(vocab.category_name(r.category_id) for r in recent),
        prediction_time=timestamp_bucket(target.timestamp),
        poi_labels=_poi_for(recent, target),
        installed_apps=installed or {},
    )


def _training_positions(
    records: Sequence[UsageRecord], window: int
) -> Iterable[tuple[Sequence[UsageRecord], UsageRecord]]:
    # Position 0 has no history and is skipped.
    for i in range(1, len(records)):
        yield records[max(0, i - window) : i], records[i]


def build_stage1_pairs(
    dataset: Dataset,
    table: TypeTable,
    window: int = DEFAULT_WINDOW,
    flags: AblationFlags = FULL_FLAGS,
) -> list[tuple[PromptSentence, PromptSentence]]:
    """Training pairs for category prediction.

    Input is the rendered category history plus time (and place labels when
    available); target is the table's sentence for the position's category
    key, resolved with backoff.
    """
    pairs = []
    corpus = dataset.corpus
    for user_id in sorted(corpus.users):
        for history, target in _training_positions(corpus.users[user_id].train, window):
            bundle = build_bundle(history, target, dataset.vocab, None, window)
            prompt = templater.render_context(bundle, stage=1, flags=flags)
            dist = lookup_with_backoff(table, bundle.category_history)
            pairs.append((prompt, templater.render_type_result(dist)))
    return pairs


def build_stage2_pairs(
    dataset: Dataset,
    table: TypeTable,
    window: int = DEFAULT_WINDOW,
    flags: AblationFlags = FULL_FLAGS,
) -> list[tuple[PromptSentence, PromptSentence]]:
    """Training pairs for app prediction.

    Input is the app-history sentence, the user's installed-apps block, time,
    optional place labels, and the gold stage-1 sentence for the position's
    category key; target names the next app.
    """
    pairs = []
    corpus = dataset.corpus
    for user_id in sorted(corpus.users):
        split = corpus.users[user_id]
        installed = installed_apps_map(split.train, dataset.vocab)
        for history, target in _training_positions(split.train, window):
            bundle = build_bundle(history, target, dataset.vocab, installed, window)
            prompt = templater.render_context(bundle, stage=2, flags=flags)
            text = prompt.text
            if flags.use_stage1:
                dist = lookup_with_backoff(table, bundle.category_history)
                text = f"{text} {templater.render_type_result(dist).text}"
            pairs.append(
                (
                    PromptSentence(text, "stage2_input"),
                    templater.render_target(target.app_id),
                )
            )
    return pairs


def fit_reference_predictors(
    datasets: Sequence[Dataset],
    n: int = 3,
    type_k: int = 3,
    window: int = DEFAULT_WINDOW,
    flags: AblationFlags = FULL_FLAGS,
    seed: int = 0,
    weights: Sequence[float] | None = None,
) -> StagePredictors:
    """Build the category table and fit reference models for both stages."""
    from maple.backend import DEFAULT_WEIGHTS, ReferenceBackend
    from maple.typeprompt import build_type_table

    weights = tuple(weights) if weights is not None else DEFAULT_WEIGHTS
    table = build_type_table(datasets, n, type_k)
    pairs2: list[tuple[PromptSentence, PromptSentence]] = []
    pairs1: list[tuple[PromptSentence, PromptSentence]] = []
    for dataset in datasets:
        pairs2.extend(build_stage2_pairs(dataset, table, window, flags))
        if flags.use_stage1:
            pairs1.extend(build_stage1_pairs(dataset, table, window, flags))
    stage2 = ReferenceBackend.fit(pairs2, stage=2, seed=seed, weights=weights)
    stage1 = (
        ReferenceBackend.fit(pairs1, stage=1, seed=seed, weights=weights)
        if flags.use_stage1
        else None
    )
    return StagePredictors(stage2=stage2, stage1=stage1, type_table=table)


def enumerate_test_cases(dataset: Dataset, window: int = DEFAULT_WINDOW) -> list[TestCase]:
    """One case per test record, with history drawn from the true preceding
    stream (train, validation, and earlier test records)."""
    cases = []
    corpus = dataset.corpus
    for user_id in sorted(corpus.users):
        split = corpus.users[user_id]
        stream = split.all_records
        installed = installed_apps_map(split.train, dataset.vocab)
        first_test = len(split.train) + len(split.validation)
        for seq, position in enumerate(range(first_test, len(stream))):
            history = stream[max(0, position - window) : position]
            bundle = build_bundle(
                history, stream[position], dataset.vocab, installed, window
            )
            cases.append(
                TestCase(
                    test_case_id=f"{user_id}/{seq:06d}",
                    user_id=user_id,
                    bundle=bundle,
                    truth_app_id=stream[position].app_id,
                )
            )
    return cases


def _stage1_sentence(
    bundle: ContextBundle,
    predictors: StagePredictors,
    flags: AblationFlags,
    request_id: int,
) -> str:
    if predictors.stage1 is not None:
        prompt = templater.render_context(bundle, stage=1, flags=flags)
        candidates = predictors.stage1.generate(
            GenerationRequest(request_id, prompt.text, num_candidates=1, stage=1)
        )
        if candidates:
            try:
                templater.parse_type_result(candidates[0].text)
                return candidates[0].text
            except ParseFailure:
                pass
    if predictors.type_table is None or not bundle.category_history:
        raise ValueError(
            "stage-1 enabled but no parseable generation and no fallback table"
        )
    dist = lookup_with_backoff(predictors.type_table, bundle.category_history)
    return templater.render_type_result(dist).text


def predict_case(
    bundle: ContextBundle,
    predictors: StagePredictors,
    flags: AblationFlags = FULL_FLAGS,
    k: int = 5,
    test_case_id: str = "",
    request_id_base: int = 0,
    attempt_cap: int | None = None,
) -> RankedPrediction:
    """Collect the top-k distinct apps for one case.

    The stage-2 predictor is asked for candidates in growing batches until k
    distinct parseable app ids have appeared or the attempt cap (default 4k
    generations) is reached; unparseable and duplicate candidates are
    discarded. Results keep first-appearance scores.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    cap = attempt_cap if attempt_cap is not None else 4 * k
    prompt = templater.render_context(bundle, stage=2, flags=flags).text
    if flags.use_stage1:
        sentence = _stage1_sentence(bundle, predictors, flags, request_id_base)
        prompt = f"{prompt} {sentence}"

    collected: dict[int, float] = {}
    attempts = 0
    batch = min(k, cap)
    seq = 1
    while True:
        candidates = predictors.stage2.generate(
            GenerationRequest(request_id_base + seq, prompt, num_candidates=batch, stage=2)
        )
        seq += 1
        attempts = batch
        for candidate in candidates:
            try:
                app_id = templater.parse_prediction(candidate.text)
            except ParseFailure:
                continue
            if app_id not in collected:
                collected[app_id] = candidate.score
            if len(collected) >= k:
                break
        if len(collected) >= k or batch >= cap or len(candidates) < batch:
            break
        batch = min(batch * 2, cap)
    ranked = list(collected.items())[:k]
    return RankedPrediction(
        test_case_id=test_case_id,
        app_ids=tuple(app for app, _ in ranked),
        scores=tuple(score for _, score in ranked),
        attempts_used=attempts,
    )


def run_predictions(
    dataset: Dataset,
    predictors: StagePredictors,
    flags: AblationFlags = FULL_FLAGS,
    k: int = 5,
    window: int = DEFAULT_WINDOW,
    workers: int = 1,
) -> tuple[list[TestCase], list[RankedPrediction], float]:
    """Predict every test case of a dataset; deterministic for any worker
    count. Returns cases, predictions in case order, and the elapsed time."""
    cases = enumerate_test_cases(dataset, window)
    started = time.monotonic()

    def run_one(indexed: tuple[int, TestCase]) -> RankedPrediction:
        index, case = indexed
        return predict_case(
            case.bundle,
            predictors,
            flags,
            k,
            test_case_id=case.test_case_id,
            request_id_base=index * 16,
        )

    if workers <= 1:
        predictions = [run_one(item) for item in enumerate(cases)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(run_one, enumerate(cases)))
    return cases, predictions, time.monotonic() - started


# -- pair-file artifacts ---------------------------------------------------


def write_pair_file(
    path: str | Path,
    pairs: Sequence[tuple[PromptSentence, PromptSentence]],
    kind: str,
    config_hash: str,
) -> None:
    """Tab-separated input/target lines with a commented metadata header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# kind={kind} config_hash={config_hash}\n")
        for prompt, target in pairs:
            fh.write(f"{prompt.text}\t{target.text}\n")


def read_pair_file(path: str | Path) -> tuple[dict[str, str], list[tuple[str, str]]]:
    """Read a pair file; returns its header fields and the text pairs."""
    path = Path(path)
    meta: dict[str, str] = {}
    pairs: list[tuple[str, str]] = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        meta[key] = value
                continue
            left, sep, right = line.partition("\t")
            if not sep:
                raise ValueError(f"pair line without a tab in {path}: {line!r}")
            pairs.append((left, right))
    return meta, pairs
