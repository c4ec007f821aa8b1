"""Synthetic corpora for demos and verification.

Two generators: uniformly random logs for exercising the preprocessing
invariants, and per-user second-order Markov app processes whose next app
depends on the two previous apps, which the context-aware predictor should
beat frequency and recency baselines on. Both are deterministic in their
seed.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from maple.corpus import Dataset, UsageRecord, Vocab, ingest_records

__all__ = [
    "markov_dataset",
    "random_records",
    "write_log_csv",
]

POI_POOL = (
    "service",
    "shopping",
    "restaurants",
    "transport",
    "education",
    "entertainment",
)


def _vocab_for(n_apps: int, n_categories: int) -> Vocab:
    """Apps named App0..App{n-1}, spread evenly over cat0..cat{m-1}."""
    vocab = Vocab()
    for app in range(n_apps):
        vocab.add_app(f"App{app}", f"cat{app * n_categories // n_apps}")
    return vocab


def random_records(
    seed: int,
    n_users: int = 50,
    n_records: int = 5000,
    n_apps: int = 40,
    n_categories: int = 8,
    max_gap: int = 900,
    poi_rate: float = 0.2,
) -> tuple[list[UsageRecord], Vocab]:
    """Random usage logs with gaps crossing the session boundary both ways."""
    rng = np.random.default_rng(seed)
    vocab = _vocab_for(n_apps, n_categories)
    records: list[UsageRecord] = []
    per_user = np.maximum(1, rng.multinomial(n_records, np.full(n_users, 1 / n_users)))
    for u in range(n_users):
        ts = int(rng.integers(0, 10**6))
        for _ in range(int(per_user[u])):
            ts += int(rng.integers(0, max_gap))
            app = int(rng.integers(0, n_apps))
            poi: tuple[str, ...] = ()
            if rng.random() < poi_rate:
                poi = tuple(
                    sorted(rng.choice(POI_POOL, size=int(rng.integers(1, 4)), replace=False))
                )
            records.append(
                UsageRecord(f"u{u:03d}", ts, app, vocab.category_of_app(app), poi)
            )
    return records, vocab


def markov_dataset(
    seed: int,
    n_users: int = 20,
    total_events: int = 5000,
    n_apps: int = 30,
    n_categories: int = 6,
    apps_per_user: int = 12,
    dataset_id: str = "markov",
    transition_probs: Sequence[float] = (0.7, 0.2, 0.1),
    poi_rate: float = 0.25,
) -> Dataset:
    """Per-user second-order Markov processes over a personal app subset.

    Each user owns ``apps_per_user`` of the shared apps; every (previous two
    apps) state maps to three candidate next apps with fixed probabilities.
    Timestamps advance by one minute, so each user contributes long sessions
    and survives noise filtering.
    """
    rng = np.random.default_rng(seed)
    vocab = _vocab_for(n_apps, n_categories)
    probs = np.asarray(transition_probs, dtype=float)
    probs = probs / probs.sum()
    events_per_user = total_events // n_users
    records: list[UsageRecord] = []
    for u in range(n_users):
        user_id = f"u{u:03d}"
        apps = rng.choice(n_apps, size=apps_per_user, replace=False)
        home_poi = tuple(
            sorted(rng.choice(POI_POOL, size=int(rng.integers(2, 4)), replace=False))
        )
        transitions: dict[tuple[int, int], np.ndarray] = {}
        ts = 1_600_000_000 + u * 1_000_000
        prev2, prev1 = (int(a) for a in rng.choice(apps, size=2, replace=True))
        history = [prev2, prev1]
        for app in history:
            poi = home_poi if rng.random() < poi_rate else ()
            records.append(UsageRecord(user_id, ts, app, vocab.category_of_app(app), poi))
            ts += 60
        for _ in range(events_per_user - 2):
            state = (history[-2], history[-1])
            if state not in transitions:
                transitions[state] = rng.choice(apps, size=len(probs), replace=False)
            nxt = int(rng.choice(transitions[state], p=probs))
            poi = home_poi if rng.random() < poi_rate else ()
            records.append(UsageRecord(user_id, ts, nxt, vocab.category_of_app(nxt), poi))
            ts += 60
            history.append(nxt)
    corpus = ingest_records(records, dataset_id)
    return Dataset(corpus, vocab)


def write_log_csv(
    directory: str | Path,
    records: Sequence[UsageRecord],
    vocab: Vocab,
    dataset_id: str = "synthetic",
) -> Path:
    """Materialize records as a CSV log plus a dataset manifest; returns the
    manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    log_path = directory / f"{dataset_id}.csv"
    with log_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "timestamp", "app", "category", "poi"])
        for record in records:
            writer.writerow(
                [
                    record.user_id,
                    record.timestamp,
                    vocab.app_name(record.app_id),
                    vocab.category_name(record.category_id),
                    ";".join(record.poi_labels),
                ]
            )
    manifest_path = directory / f"{dataset_id}.manifest.json"
    manifest = {
        "dataset_id": dataset_id,
        "files": [log_path.name],
        "format": {"delimiter": ",", "poi_separator": ";"},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path
