"""Text-to-text predictor contract and the reference backoff predictor.

Every predictor, local or remote, exposes one operation: take a prompt and
return ranked candidate sentences. The reference backend implements it with
a conditional frequency model over features it re-parses out of the prompt
through the public grammar, so the pipeline exercises exactly the text
interface a remote generation model would see, while staying analyzable.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, runtime_checkable

from maple import templater
from maple.templater import ParseFailure, PromptSentence

__all__ = [
    "Candidate",
    "DEFAULT_WEIGHTS",
    "FitError",
    "GenerationRequest",
    "Predictor",
    "ReferenceBackend",
]

# Interpolation weights over the backoff chain, longest-suffix level first:
# app-history suffix, first-stage category key, time bucket, global frequency.
DEFAULT_WEIGHTS = (0.5, 0.25, 0.15, 0.1)

LEVEL_NAMES = ("history", "type_key", "time", "global")


@dataclass(frozen=True)
class GenerationRequest:
    """One prompt to complete, with how many ranked candidates to return."""

    request_id: int
    prompt: str
    num_candidates: int = 1
    stage: int = 2

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be at least 1")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage!r}")


@dataclass(frozen=True)
class Candidate:
    """A generated sentence with its score; higher scores rank earlier."""

    text: str
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"candidate score must be finite: {self.score!r}")


@runtime_checkable
class Predictor(Protocol):
    def generate(self, request: GenerationRequest) -> list[Candidate]:
        """Return up to ``num_candidates`` candidates, scores non-increasing,
        deterministic for a fixed model state."""
        ...


class FitError(Exception):
    """Training pairs were unusable (empty, or too many unparseable)."""


FeatureKey = tuple


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def context_features(parsed: templater.ParsedContext) -> list[FeatureKey]:
    """All countable feature contexts of one parsed prompt.

    History suffixes of lengths one to three, the category tuple of an
    embedded first-stage sentence, the (weekday, hour) bucket, the
    installed-apps fingerprint, and the global context that every prompt
    shares.
    """
    keys: list[FeatureKey] = [("global",)]
    history = parsed.history or ()
    for length in (1, 2, 3):
        if len(history) >= length:
            keys.append(("history", length, history[-length:]))
    if parsed.type_result is not None:
        keys.append(("type_key", tuple(e.category for e in parsed.type_result.entries)))
    if parsed.time is not None:
        keys.append(("time", parsed.time[0], parsed.time[1]))
    if parsed.installed is not None:
        keys.append(("installed", parsed.installed))
    return keys


class ReferenceBackend:
    """Interpolated backoff predictor over grammar-parsed prompt features.

    Fitting counts target sentences per feature context. Generation scores
    every target seen under the active contexts by linear interpolation over
    the backoff chain: the longest supported app-history suffix, then the
    category key of the embedded first-stage sentence, then the time bucket,
    then the global frequencies. Levels without support contribute nothing,
    so dropping them and renormalizing cannot change the ranking.
    """

    def __init__(
        self,
        stage: int,
        contexts: dict[FeatureKey, Counter],
        weights: Sequence[float] = DEFAULT_WEIGHTS,
        seed: int = 0,
    ):
        if len(weights) != len(LEVEL_NAMES):
            raise ValueError(f"expected {len(LEVEL_NAMES)} interpolation weights")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"interpolation weights must sum to 1: {weights!r}")
        self.stage = stage
        self.weights = tuple(float(w) for w in weights)
        self.seed = seed  # reserved; generation is count-deterministic
        self._contexts = contexts
        self._totals = {key: sum(counter.values()) for key, counter in contexts.items()}

    @classmethod
    def fit(
        cls,
        pairs: Sequence[tuple[PromptSentence | str, PromptSentence | str]],
        stage: int = 2,
        seed: int = 0,
        weights: Sequence[float] = DEFAULT_WEIGHTS,
        max_unparseable: float = 0.01,
    ) -> "ReferenceBackend":
        """Count targets per feature context over parseable training pairs.

        Unparseable pairs are skipped and counted; more than
        ``max_unparseable`` of them fails the fit.
        """
        if not pairs:
            raise FitError("cannot fit on an empty pair list")
        contexts: dict[FeatureKey, Counter] = {}
        skipped = 0
        for raw_input, raw_target in pairs:
            input_text = raw_input.text if isinstance(raw_input, PromptSentence) else raw_input
            target_text = (
                raw_target.text if isinstance(raw_target, PromptSentence) else raw_target
            )
            try:
                parsed = templater.parse_context(input_text)
                if stage == 2:
                    templater.parse_prediction(target_text)
                else:
                    templater.parse_type_result(target_text)
            except ParseFailure:
                skipped += 1
                continue
            for key in context_features(parsed):
                contexts.setdefault(key, Counter())[target_text] += 1
        if skipped / len(pairs) > max_unparseable:
            raise FitError(
                f"{skipped} of {len(pairs)} pairs unparseable, above the "
                f"{max_unparseable:.2%} limit"
            )
        if not contexts:
            raise FitError("no parseable pairs to fit on")
        return cls(stage, contexts, weights, seed)

    def _active_levels(self, parsed: templater.ParsedContext | None) -> list[tuple[float, FeatureKey]]:
        levels: list[tuple[float, FeatureKey]] = []
        w_history, w_type, w_time, w_global = self.weights
        if parsed is not None:
            history = parsed.history or ()
            for length in (3, 2, 1):  # back off within the history level
                if len(history) >= length:
                    key = ("history", length, history[-length:])
                    if key in self._contexts:
                        levels.append((w_history, key))
                        break
            if parsed.type_result is not None:
                key = ("type_key", tuple(e.category for e in parsed.type_result.entries))
                if key in self._contexts:
                    levels.append((w_type, key))
            if parsed.time is not None:
                key = ("time", parsed.time[0], parsed.time[1])
                if key in self._contexts:
                    levels.append((w_time, key))
        if ("global",) in self._contexts:
            levels.append((w_global, ("global",)))
        return levels

    def score_targets(self, prompt: str) -> dict[str, float]:
        """Interpolated probability mass per known target for one prompt."""
        try:
            parsed = templater.parse_context(prompt)
        except ParseFailure:
            parsed = None
        scores: dict[str, float] = {}
        for weight, key in self._active_levels(parsed):
            counter = self._contexts[key]
            total = self._totals[key]
            for target, count in counter.items():
                scores[target] = scores.get(target, 0.0) + weight * count / total
        return scores

    def _tiebreak(self, text: str):
        if self.stage == 2:
            try:
                return (0, templater.parse_prediction(text), text)
            except ParseFailure:  # pragma: no cover - fitted targets always parse
                return (1, 0, text)
        return (0, 0, text)

    def generate(self, request: GenerationRequest) -> list[Candidate]:
        if request.stage != self.stage:
            raise ValueError(
                f"model fitted for stage {self.stage}, got a stage {request.stage} request"
            )
        scores = self.score_targets(request.prompt)
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1],) + self._tiebreak(kv[0]))
        return [Candidate(text, score) for text, score in ranked[: request.num_candidates]]

    # -- persistence ----------------------------------------------------

    def to_json(self) -> str:
        rows = [
            {
                "feature": list(_unfreeze(key)),
                "targets": sorted(counter.items()),
            }
            for key, counter in sorted(
                self._contexts.items(), key=lambda kv: json.dumps(_unfreeze(kv[0]))
            )
        ]
        return json.dumps(
            {
                "kind": "reference_backend",
                "stage": self.stage,
                "seed": self.seed,
                "weights": list(self.weights),
                "contexts": rows,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ReferenceBackend":
        data = json.loads(text)
        contexts = {
            _freeze(row["feature"]): Counter(dict((t, c) for t, c in row["targets"]))
            for row in data["contexts"]
        }
        return cls(data["stage"], contexts, tuple(data["weights"]), data["seed"])


def _unfreeze(value):
    if isinstance(value, tuple):
        return [_unfreeze(v) for v in value]
    return value
