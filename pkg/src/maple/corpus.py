"""Raw usage-log ingestion: parsing, sessionization, filtering, splitting.

The canonical corpus is built per dataset: delimiter-separated log files are
parsed into :class:`UsageRecord` lists with dataset-scoped integer ids,
segmented into sessions on a five-minute gap, cleaned of oversized sessions
and under-observed users, and split chronologically per user into
train/validation/test at 70/10/20.

All operations are pure functions of their inputs and deterministic: users
are always processed in sorted order and timestamp ties keep input order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

__all__ = [
    "Dataset",
    "LogFormat",
    "LogParseError",
    "ParseResult",
    "RejectedLine",
    "Session",
    "SplitCorpus",
    "UsageRecord",
    "UserSplit",
    "Vocab",
    "build_split_corpus",
    "filter_noise",
    "ingest_records",
    "parse_log",
    "sessionize",
    "split_chronological",
]

SESSION_GAP_SECONDS = 300
MAX_SESSION_RECORDS = 5000
MIN_USER_RECORDS = 10
TRAIN_SHARE = (7, 10)  # numerator, denominator of the training fraction
VALIDATION_SHARE = (1, 10)


@dataclass(frozen=True)
class UsageRecord:
    """One timestamped app-usage event for one user."""

    user_id: str
    timestamp: int
    app_id: int
    category_id: int
    poi_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be non-negative: {self.timestamp}")
        if self.app_id < 0 or self.category_id < 0:
            raise ValueError("ids must be non-negative")


@dataclass(frozen=True)
class Session:
    """A maximal run of one user's records with inter-event gaps <= the
    session gap."""

    user_id: str
    records: tuple[UsageRecord, ...]
    session_index: int

    def __post_init__(self) -> None:
        if not self.records:
            raise ValueError("session must contain at least one record")


class Vocab:
    """Dataset-scoped canonical ids for apps, categories and place labels.

    App names and ids are bijective; every app has exactly one category.
    Ids are assigned in first-seen order, which makes parsing deterministic
    for a fixed input.
    """

    def __init__(self) -> None:
        self._app_ids: dict[str, int] = {}
        self._app_names: list[str] = []
        self._app_categories: list[int] = []
        self._category_ids: dict[str, int] = {}
        self._category_names: list[str] = []
        self.poi_labels: set[str] = set()

    def __len__(self) -> int:
        return len(self._app_names)

    @property
    def num_categories(self) -> int:
        return len(self._category_names)

    def add_app(self, app_name: str, category_name: str) -> int:
        """Return the app id, assigning fresh app/category ids on first sight.

        A known app re-declared under a different category raises ValueError:
        every app resolves to exactly one category.
        """
        cat_id = self._category_ids.get(category_name)
        if cat_id is None:
            cat_id = len(self._category_names)
            self._category_ids[category_name] = cat_id
            self._category_names.append(category_name)
        app_id = self._app_ids.get(app_name)
        if app_id is None:
            app_id = len(self._app_names)
            self._app_ids[app_name] = app_id
            self._app_names.append(app_name)
            self._app_categories.append(cat_id)
        elif self._app_categories[app_id] != cat_id:
            raise ValueError(
                f"app {app_name!r} already mapped to category "
                f"{self._category_names[self._app_categories[app_id]]!r}"
            )
        return app_id

    def app_id(self, app_name: str) -> int:
        return self._app_ids[app_name]

    def app_name(self, app_id: int) -> str:
        return self._app_names[app_id]

    def category_of_app(self, app_id: int) -> int:
        return self._app_categories[app_id]

    def category_id(self, category_name: str) -> int:
        return self._category_ids[category_name]

    def category_name(self, category_id: int) -> str:
        return self._category_names[category_id]

    def category_names(self) -> list[str]:
        return list(self._category_names)

    def to_dict(self) -> dict:
        return {
            "apps": self._app_names,
            "app_categories": self._app_categories,
            "categories": self._category_names,
            "poi_labels": sorted(self.poi_labels),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocab":
        vocab = cls()
        vocab._category_names = list(data["categories"])
        vocab._category_ids = {name: i for i, name in enumerate(vocab._category_names)}
        vocab._app_names = list(data["apps"])
        vocab._app_ids = {name: i for i, name in enumerate(vocab._app_names)}
        vocab._app_categories = list(data["app_categories"])
        vocab.poi_labels = set(data.get("poi_labels", ()))
        return vocab


@dataclass
class LogFormat:
    """Column mapping and parsing knobs for one family of log files."""

    delimiter: str = ","
    user_col: str = "user"
    timestamp_col: str = "timestamp"
    app_col: str = "app"
    category_col: str = "category"
    poi_col: str | None = "poi"
    poi_separator: str = ";"
    max_reject_ratio: float = 0.01

    @classmethod
    def from_dict(cls, data: Mapping) -> "LogFormat":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise LogParseError(f"unknown log format keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class RejectedLine:
    line_no: int
    line: str
    reason: str


class LogParseError(Exception):
    """Unusable input: bad header, or too many rejected lines."""


@dataclass
class ParseResult:
    records: list[UsageRecord]
    vocab: Vocab
    rejects: list[RejectedLine]


def parse_log(
    stream: IO[bytes] | IO[str] | Iterable[str],
    fmt: LogFormat | None = None,
    vocab: Vocab | None = None,
) -> ParseResult:
    """Parse one delimiter-separated log file with a header row.

    Well-formed lines become records in input order; unknown app names are
    added to the vocabulary in first-seen order. Malformed lines land in the
    rejects report with their line number, and the whole parse fails if the
    reject ratio exceeds ``fmt.max_reject_ratio``.
    """
    fmt = fmt or LogFormat()
    vocab = vocab if vocab is not None else Vocab()
    if isinstance(stream, (bytes, str)):
        raise TypeError("parse_log expects a stream or line iterable, not raw text")
    if hasattr(stream, "read") and isinstance(stream.read(0), bytes):  # type: ignore[union-attr]
        stream = io.TextIOWrapper(stream, encoding="utf-8")  # type: ignore[arg-type]

    reader = csv.reader(stream, delimiter=fmt.delimiter)
    records: list[UsageRecord] = []
    rejects: list[RejectedLine] = []
    header: dict[str, int] | None = None
    data_rows = 0

    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        if header is None:
            header = {name.strip(): i for i, name in enumerate(row)}
            needed = [fmt.user_col, fmt.timestamp_col, fmt.app_col, fmt.category_col]
            missing = [c for c in needed if c not in header]
            if missing:
                raise LogParseError(f"header is missing columns {missing}: {row}")
            continue
        data_rows += 1
        line_no = reader.line_num
        raw = fmt.delimiter.join(row)

        def reject(reason: str) -> None:
            rejects.append(RejectedLine(line_no, raw, reason))

        try:
            user = row[header[fmt.user_col]].strip()
            ts_text = row[header[fmt.timestamp_col]].strip()
            app_name = row[header[fmt.app_col]].strip()
            category = row[header[fmt.category_col]].strip()
        except IndexError:
            reject("missing columns")
            continue
        if not user or not app_name or not category:
            reject("empty user, app or category field")
            continue
        try:
            timestamp = int(ts_text)
        except ValueError:
            reject(f"non-integer timestamp {ts_text!r}")
            continue
        if timestamp < 0:
            reject(f"negative timestamp {timestamp}")
            continue
        poi: tuple[str, ...] = ()
        if fmt.poi_col is not None and fmt.poi_col in header:
            idx = header[fmt.poi_col]
            cell = row[idx].strip() if idx < len(row) else ""
            if cell:
                poi = tuple(
                    label.strip() for label in cell.split(fmt.poi_separator) if label.strip()
                )
        try:
            app_id = vocab.add_app(app_name, category)
        except ValueError as exc:
            reject(str(exc))
            continue
        vocab.poi_labels.update(poi)
        records.append(
            UsageRecord(user, timestamp, app_id, vocab.category_of_app(app_id), poi)
        )

    if header is None and data_rows == 0 and not rejects:
        return ParseResult(records, vocab, rejects)
    if data_rows and len(rejects) / data_rows > fmt.max_reject_ratio:
        raise LogParseError(
            f"{len(rejects)} of {data_rows} lines rejected, above the "
            f"{fmt.max_reject_ratio:.2%} limit; first: {rejects[0]}"
        )
    return ParseResult(records, vocab, rejects)


def sessionize(
    records: Sequence[UsageRecord], gap_seconds: int = SESSION_GAP_SECONDS
) -> list[Session]:
    """Partition one user's time-ordered records into sessions.

    A new session starts exactly when the gap to the previous record is
    strictly greater than ``gap_seconds``; a gap of exactly ``gap_seconds``
    keeps the records together.
    """
    if not records:
        return []
    users = {r.user_id for r in records}
    if len(users) != 1:
        raise ValueError(f"sessionize expects a single user's records, got {sorted(users)}")
    for prev, cur in zip(records, records[1:]):
        if cur.timestamp < prev.timestamp:
            raise ValueError("records must be sorted by timestamp before sessionizing")

    sessions: list[Session] = []
    start = 0
    for i in range(1, len(records)):
        if records[i].timestamp - records[i - 1].timestamp > gap_seconds:
            sessions.append(
                Session(records[0].user_id, tuple(records[start:i]), len(sessions))
            )
            start = i
    sessions.append(Session(records[0].user_id, tuple(records[start:]), len(sessions)))
    return sessions


def filter_noise(
    sessions_by_user: Mapping[str, Sequence[Session]],
    max_session_records: int = MAX_SESSION_RECORDS,
    min_user_records: int = MIN_USER_RECORDS,
) -> dict[str, list[Session]]:
    """Drop oversized sessions, then users left with too few records.

    Sessions with strictly more than ``max_session_records`` records go
    first; users whose remaining total is below ``min_user_records`` are
    removed entirely. Surviving sessions are renumbered per user. The
    operation is idempotent.
    """
    kept: dict[str, list[Session]] = {}
    for user_id in sorted(sessions_by_user):
        sessions = [
            s for s in sessions_by_user[user_id] if len(s.records) <= max_session_records
        ]
        total = sum(len(s.records) for s in sessions)
        if total < min_user_records:
            continue
        kept[user_id] = [
            Session(s.user_id, s.records, i) for i, s in enumerate(sessions)
        ]
    return kept


@dataclass
class UserSplit:
    train: tuple[UsageRecord, ...]
    validation: tuple[UsageRecord, ...]
    test: tuple[UsageRecord, ...]

    @property
    def all_records(self) -> tuple[UsageRecord, ...]:
        return self.train + self.validation + self.test


@dataclass
class SplitCorpus:
    dataset_id: str
    users: dict[str, UserSplit] = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        return sum(len(u.all_records) for u in self.users.values())


@dataclass
class Dataset:
    """A split corpus together with the vocabulary its ids resolve in."""

    corpus: SplitCorpus
    vocab: Vocab

    @property
    def dataset_id(self) -> str:
        return self.corpus.dataset_id


def split_chronological(
    records: Sequence[UsageRecord], min_records: int = MIN_USER_RECORDS
) -> UserSplit:
    """Split one user's records chronologically into 70/10/20 shares.

    Sizes are ``floor(0.7 n)`` and ``floor(0.1 n)`` with the remainder as
    test. Records are stably sorted by timestamp first, so ties keep their
    input order.
    """
    n = len(records)
    if n < min_records:
        raise ValueError(
            f"user has {n} records, below the minimum of {min_records}; "
            "filter_noise should have removed it"
        )
    ordered = sorted(records, key=lambda r: r.timestamp)
    n_train = n * TRAIN_SHARE[0] // TRAIN_SHARE[1]
    n_val = n * VALIDATION_SHARE[0] // VALIDATION_SHARE[1]
    return UserSplit(
        train=tuple(ordered[:n_train]),
        validation=tuple(ordered[n_train : n_train + n_val]),
        test=tuple(ordered[n_train + n_val :]),
    )


def build_split_corpus(
    dataset_id: str, sessions_by_user: Mapping[str, Sequence[Session]]
) -> SplitCorpus:
    """Assemble the per-user chronological splits of a filtered corpus."""
    corpus = SplitCorpus(dataset_id)
    for user_id in sorted(sessions_by_user):
        flat: list[UsageRecord] = []
        for session in sessions_by_user[user_id]:
            flat.extend(session.records)
        corpus.users[user_id] = split_chronological(flat)
    return corpus


def ingest_records(
    records: Iterable[UsageRecord],
    dataset_id: str,
    gap_seconds: int = SESSION_GAP_SECONDS,
    max_session_records: int = MAX_SESSION_RECORDS,
    min_user_records: int = MIN_USER_RECORDS,
) -> SplitCorpus:
    """Full preprocessing chain: group by user, sessionize, filter, split."""
    by_user: dict[str, list[UsageRecord]] = {}
    for record in records:
        by_user.setdefault(record.user_id, []).append(record)
    sessions = {
        user_id: sessionize(
            sorted(user_records, key=lambda r: r.timestamp), gap_seconds
        )
        for user_id, user_records in sorted(by_user.items())
    }
    filtered = filter_noise(sessions, max_session_records, min_user_records)
    return build_split_corpus(dataset_id, filtered)


def write_corpus(directory: str | Path, dataset: Dataset, config_hash: str) -> None:
    """Write the canonical corpus directory: one line-delimited record file
    per split, plus the vocabulary and a metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corpus = dataset.corpus
    for split in ("train", "validation", "test"):
        path = directory / f"{split}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            meta = {
                "kind": "corpus_split",
                "config_hash": config_hash,
                "dataset_id": corpus.dataset_id,
                "split": split,
            }
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
            for user_id in sorted(corpus.users):
                for record in getattr(corpus.users[user_id], split):
                    row = {
                        "user": record.user_id,
                        "ts": record.timestamp,
                        "app": record.app_id,
                        "cat": record.category_id,
                        "poi": list(record.poi_labels),
                    }
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    (directory / "vocab.json").write_text(
        json.dumps(
            {"kind": "vocab", "config_hash": config_hash, **dataset.vocab.to_dict()},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    meta = {
        "kind": "corpus_meta",
        "config_hash": config_hash,
        "dataset_id": corpus.dataset_id,
        "users": len(corpus.users),
        "records": corpus.record_count,
    }
    (directory / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def read_corpus(directory: str | Path) -> tuple[Dataset, str]:
    """Read a canonical corpus directory; returns the dataset and the config
    hash it was written under."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    vocab_data = json.loads((directory / "vocab.json").read_text(encoding="utf-8"))
    vocab = Vocab.from_dict(vocab_data)
    corpus = SplitCorpus(meta["dataset_id"])
    splits: dict[str, dict[str, list[UsageRecord]]] = {
        "train": {},
        "validation": {},
        "test": {},
    }
    for split, per_user in splits.items():
        with (directory / f"{split}.jsonl").open(encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("config_hash") != meta["config_hash"]:
                raise ValueError(f"corpus split {split} does not match meta.json")
            for line in fh:
                row = json.loads(line)
                per_user.setdefault(row["user"], []).append(
                    UsageRecord(
                        row["user"], row["ts"], row["app"], row["cat"], tuple(row["poi"])
                    )
                )
    users = sorted(set().union(*[set(s) for s in splits.values()]) if any(splits.values()) else set())
    for user_id in users:
        corpus.users[user_id] = UserSplit(
            train=tuple(splits["train"].get(user_id, ())),
            validation=tuple(splits["validation"].get(user_id, ())),
            test=tuple(splits["test"].get(user_id, ())),
        )
    return Dataset(corpus, vocab), meta["config_hash"]
