import random

import pytest
from hypothesis import strategies as st

from maple.corpus import Dataset, UsageRecord, Vocab, ingest_records
from maple.templater import ContextBundle

# -- hypothesis strategies ---------------------------------------------------

_WORD = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=6)


def _joinable(words: list[str]) -> bool:
    name = " ".join(words)
    return " and " not in name and " or " not in name and " apps : " not in name


safe_names = st.lists(_WORD, min_size=1, max_size=2).filter(_joinable).map(" ".join)

prediction_times = st.tuples(st.integers(0, 6), st.integers(0, 23))


@st.composite
def context_bundles(draw):
    length = draw(st.integers(1, 15))
    apps = draw(st.lists(st.integers(0, 500), min_size=length, max_size=length))
    cats = draw(st.lists(safe_names, min_size=length, max_size=length))
    poi = draw(st.lists(safe_names, min_size=0, max_size=3, unique=True))
    installed_names = draw(st.lists(safe_names, min_size=0, max_size=4, unique=True))
    installed = {}
    for name in installed_names:
        installed[name] = tuple(
            draw(st.lists(st.integers(0, 500), min_size=1, max_size=5, unique=True))
        )
    return ContextBundle(
        app_history=tuple(apps),
        category_history=tuple(cats),
        prediction_time=draw(prediction_times),
        poi_labels=tuple(poi),
        installed_apps=installed,
    )


@st.composite
def percent_distributions(draw):
    """Distributions whose entries carry consistent integer percents."""
    from maple.typeprompt import TypeDistribution, TypeEntry

    count = draw(st.integers(1, 4))
    names = draw(
        st.lists(safe_names, min_size=count, max_size=count, unique=True)
    )
    percents = sorted(
        draw(st.lists(st.integers(1, 100), min_size=count, max_size=count)),
        reverse=True,
    )
    entries = tuple(
        TypeEntry(name, pct / 100.0, pct) for name, pct in zip(names, percents)
    )
    return TypeDistribution(key=(), entries=entries, support_count=0)


# -- deterministic corpus builders -------------------------------------------


def make_records(user_id: str, apps: list[int], vocab: Vocab, start_ts: int = 0, step: int = 60):
    return [
        UsageRecord(user_id, start_ts + i * step, app, vocab.category_of_app(app))
        for i, app in enumerate(apps)
    ]


def small_vocab(n_apps: int = 12, n_categories: int = 4) -> Vocab:
    vocab = Vocab()
    for app in range(n_apps):
        vocab.add_app(f"App{app}", f"cat{app * n_categories // n_apps}")
    return vocab


@pytest.fixture
def vocab():
    return small_vocab()


def toy_dataset(streams: dict[str, list[int]], vocab: Vocab, dataset_id: str = "toy") -> Dataset:
    records = []
    for user_id, apps in streams.items():
        records.extend(make_records(user_id, apps, vocab))
    return Dataset(ingest_records(records, dataset_id), vocab)


def random_app_streams(seed: int, n_users: int, length: int, n_apps: int) -> dict[str, list[int]]:
    rng = random.Random(seed)
    return {
        f"u{i:03d}": [rng.randrange(n_apps) for _ in range(length)]
        for i in range(n_users)
    }
