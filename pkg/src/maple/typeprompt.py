"""Next-category distributions over category-sequence keys.

Builds the map from a category-sequence key (the ``n-1`` categories preceding
a usage event) to the empirical distribution of the category that follows,
aggregated over every user of every supplied dataset. Shorter-suffix tables
and the global category marginal are built alongside so that lookups always
resolve: exact key first, then the longest seen suffix, then the marginal.

Categories are identified by name throughout: app ids are dataset-local but
category names form the shared space when several datasets are combined.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from maple.templater import PromptSentence, render_type_result

if TYPE_CHECKING:  # pragma: no cover
    from maple.corpus import Dataset

__all__ = [
    "TypeDistribution",
    "TypeEntry",
    "TypeTable",
    "build_type_table",
    "emit_stage1_targets",
    "integer_percents",
    "lookup_with_backoff",
]

Key = tuple[str, ...]


@dataclass(frozen=True)
class TypeEntry:
    category: str
    probability: float
    percent: int


@dataclass(frozen=True)
class TypeDistribution:
    """Ranked next-category entries for one category-sequence key.

    Entries are sorted by probability descending, ties by category name
    ascending, and truncated to the table's top-k. ``support_count`` is the
    number of observations behind the full, pre-truncation distribution.
    """

    key: Key
    entries: tuple[TypeEntry, ...]
    support_count: int


def integer_percents(counts: Sequence[int], total: int) -> list[int]:
    """Integer display percents for ``counts`` out of ``total`` observations.

    Round-half-up per entry (exact rational arithmetic), clamp to at least
    1%, then walk back any overshoot past 100 by decrementing the entries
    with the largest rounding gain, latest entry first on ties, so the
    rendered values stay non-increasing and within one point of the truth.
    """
    if total <= 0 or any(c <= 0 for c in counts):
        raise ValueError("counts must be positive with a positive total")
    exact = [Fraction(100 * c, total) for c in counts]
    percents = [max(1, math.floor(x + Fraction(1, 2))) for x in exact]
    while sum(percents) > 100:
        gains = [percents[i] - exact[i] for i in range(len(percents))]
        best = None
        for i in range(len(percents)):
            if percents[i] <= 1:
                continue
            if best is None or gains[i] >= gains[best]:
                best = i
        if best is None:
            break
        percents[best] -= 1
    return percents


class TypeTable:
    """Per-order next-category distributions plus the global marginal.

    ``orders[m]`` maps keys of length ``m`` (1 <= m <= n-1) to their
    distribution; ``marginal`` is the order-0 fallback. ``mapping`` exposes
    the full-length keys, which is the table proper.
    """

    def __init__(
        self,
        n: int,
        k: int,
        orders: Mapping[int, Mapping[Key, TypeDistribution]],
        marginal: TypeDistribution | None,
    ):
        self.n = n
        self.k = k
        self.orders = {m: dict(table) for m, table in orders.items()}
        self.marginal = marginal

    @property
    def mapping(self) -> dict[Key, TypeDistribution]:
        return self.orders.get(self.n - 1, {})

    def __len__(self) -> int:
        return len(self.mapping)


def _distribution(key: Key, counter: Counter, k: int) -> TypeDistribution:
    total = sum(counter.values())
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    top = ranked[:k]
    percents = integer_percents([c for _, c in top], total)
    entries = tuple(
        TypeEntry(name, count / total, pct)
        for (name, count), pct in zip(top, percents)
    )
    return TypeDistribution(key=key, entries=entries, support_count=total)


def _category_streams(datasets: Sequence["Dataset"]) -> Iterable[list[str]]:
    for dataset in datasets:
        corpus = dataset.corpus
        for user_id in sorted(corpus.users):
            records = corpus.users[user_id].train
            yield [dataset.vocab.category_name(r.category_id) for r in records]


def build_type_table(datasets: Sequence["Dataset"], n: int = 3, k: int = 3) -> TypeTable:
    """Count next categories after every category sequence of length ``n-1``.

    Only training splits are consulted. Counts accumulate across all users of
    all datasets; each key's followers are ranked by probability (count over
    total) and truncated to the top ``k``. Suffix tables for every shorter
    order are built from the same pass to back the lookup chain.
    """
    if n < 2:
        raise ValueError(f"sequence length n must be at least 2, got {n}")
    if k < 1:
        raise ValueError(f"top count k must be at least 1, got {k}")

    counts: dict[int, dict[Key, Counter]] = {
        m: defaultdict(Counter) for m in range(1, n)
    }
    marginal_counts: Counter = Counter()
    for stream in _category_streams(datasets):
        marginal_counts.update(stream)
        for m in range(1, n):
            for i in range(m, len(stream)):
                counts[m][tuple(stream[i - m : i])][stream[i]] += 1

    orders = {
        m: {key: _distribution(key, counter, k) for key, counter in table.items()}
        for m, table in counts.items()
    }
    marginal = (
        _distribution((), marginal_counts, k) if marginal_counts else None
    )
    return TypeTable(n, k, orders, marginal)


def lookup_with_backoff(table: TypeTable, category_history: Sequence[str]) -> TypeDistribution:
    """Resolve a category history against the table, backing off to shorter
    suffixes and finally the global marginal."""
    history = tuple(category_history)
    if not history:
        raise ValueError("category history must be non-empty")
    for m in range(min(len(history), table.n - 1), 0, -1):
        dist = table.orders.get(m, {}).get(history[-m:])
        if dist is not None:
            return dist
    if table.marginal is None:
        raise LookupError("type table was built from an empty corpus")
    return table.marginal


def emit_stage1_targets(
    datasets: Sequence["Dataset"], n: int = 3, k: int = 3
) -> list[tuple[Key, PromptSentence]]:
    """Render the first-stage target sentence for every full-length key."""
    table = build_type_table(datasets, n, k)
    return [
        (key, render_type_result(table.mapping[key]))
        for key in sorted(table.mapping)
    ]


# -- persistence ------------------------------------------------------------


def _dist_row(dist: TypeDistribution) -> dict:
    return {
        "key": list(dist.key),
        "support": dist.support_count,
        "entries": [[e.category, e.probability, e.percent] for e in dist.entries],
    }


def _dist_from_row(row: Mapping) -> TypeDistribution:
    return TypeDistribution(
        key=tuple(row["key"]),
        entries=tuple(TypeEntry(c, p, pct) for c, p, pct in row["entries"]),
        support_count=row["support"],
    )


def write_type_table(path, table: TypeTable, config_hash: str) -> None:
    """Line-delimited table file: metadata line, then one distribution per
    line, orders descending and keys sorted (schema in docs/formats.md)."""
    import json
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        meta = {
            "kind": "type_table",
            "config_hash": config_hash,
            "n": table.n,
            "k": table.k,
        }
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for order in sorted(table.orders, reverse=True):
            for key in sorted(table.orders[order]):
                row = {"order": order, **_dist_row(table.orders[order][key])}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if table.marginal is not None:
            fh.write(
                json.dumps({"order": 0, **_dist_row(table.marginal)}, sort_keys=True)
                + "\n"
            )


def read_type_table(path) -> tuple[TypeTable, str]:
    """Read a table file; returns the table and the config hash that built it."""
    import json
    from pathlib import Path

    with Path(path).open(encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        if meta.get("kind") != "type_table":
            raise ValueError(f"{path} is not a type table file")
        orders: dict[int, dict[Key, TypeDistribution]] = {}
        marginal = None
        for line in fh:
            row = json.loads(line)
            dist = _dist_from_row(row)
            if row["order"] == 0:
                marginal = dist
            else:
                orders.setdefault(row["order"], {})[dist.key] = dist
    return TypeTable(meta["n"], meta["k"], orders, marginal), meta["config_hash"]
