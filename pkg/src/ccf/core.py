"""Interaction-log data model, TSV log format and dataset splitting.

A log records one user-system game per line: the user, the ordered list of
``l`` recommended items (the action) and the item the user took, or nothing.

Log format::

    #ccf-log v1
    N=<int>\tM=<int>\tl=<int>
    timestamp\tuser\ti1,i2,...,il\treaction-or-dash
"""

from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, TextIO, Union

import numpy as np

LOG_MAGIC = "#ccf-log v1"
NULL_TOKEN = "-"
SECONDS_PER_DATE = 86400


class LogFormatError(ValueError):
    """Raised for a malformed interaction log; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Catalog:
    num_users: int
    num_items: int
    action_length: int
    prices: Optional[tuple] = None
    loyalty: Optional[tuple] = None

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1 or self.action_length < 1:
            raise ValueError("num_users, num_items and action_length must be >= 1")
        if self.action_length > self.num_items:
            raise ValueError(
                f"action_length {self.action_length} exceeds num_items {self.num_items}"
            )
        if self.prices is not None:
            prices = tuple(float(c) for c in self.prices)
            if len(prices) != self.num_items:
                raise ValueError("prices must have one entry per item")
            if any(not np.isfinite(c) or c < 0 for c in prices):
                raise ValueError("prices must be finite and nonnegative")
            object.__setattr__(self, "prices", prices)
        if self.loyalty is not None:
            weights = np.asarray(self.loyalty, dtype=float)
            if weights.shape != (self.num_users,):
                raise ValueError("loyalty must have one entry per user")
            if np.any(weights < 0) or not np.isfinite(weights).all() or weights.sum() <= 0:
                raise ValueError("loyalty weights must be nonnegative with positive sum")
            object.__setattr__(self, "loyalty", tuple((weights / weights.sum()).tolist()))

    @property
    def N(self) -> int:
        return self.num_users

    @property
    def M(self) -> int:
        return self.num_items

    @property
    def l(self) -> int:  # noqa: E743
        return self.action_length


@dataclass(frozen=True)
class InteractionRecord:
    timestamp: int
    user: int
    action: tuple
    reaction: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "action", tuple(int(i) for i in self.action))
        if len(set(self.action)) != len(self.action):
            raise ValueError(f"duplicate item in action {self.action}")
        if self.reaction is not None and self.reaction not in self.action:
            raise ValueError(f"reaction {self.reaction} not in action {self.action}")
        if self.timestamp < 0:
            raise ValueError("timestamp must be nonnegative")

    @property
    def responded(self) -> bool:
        return self.reaction is not None

    @property
    def date(self) -> int:
        return self.timestamp // SECONDS_PER_DATE

    def position(self, item: int) -> int:
        """1-based slot of ``item`` in the action."""
        return self.action.index(item) + 1


@dataclass(frozen=True)
class Dataset:
    catalog: Catalog
    records: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        cat = self.catalog
        prev = -1
        for n, rec in enumerate(self.records):
            if not 0 <= rec.user < cat.num_users:
                raise ValueError(f"record {n}: user {rec.user} out of range")
            if len(rec.action) != cat.action_length:
                raise ValueError(f"record {n}: action length {len(rec.action)} != {cat.action_length}")
            if any(not 0 <= i < cat.num_items for i in rec.action):
                raise ValueError(f"record {n}: item id out of range")
            if rec.timestamp < prev:
                raise ValueError(f"record {n}: timestamps must be nondecreasing")
            prev = rec.timestamp

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[InteractionRecord]:
        return iter(self.records)

    def responded(self) -> "Dataset":
        return Dataset(self.catalog, [r for r in self.records if r.responded])

    def arrays(self):
        """Columnar view ``(users, actions, reaction_slots)`` for the numeric kernels.

        ``reaction_slots`` holds the 0-based slot of the taken item, or -1.
        """
        n, l = len(self.records), self.catalog.action_length
        users = np.empty(n, dtype=np.int64)
        actions = np.empty((n, l), dtype=np.int64)
        slots = np.full(n, -1, dtype=np.int64)
        for t, rec in enumerate(self.records):
            users[t] = rec.user
            actions[t] = rec.action
            if rec.reaction is not None:
                slots[t] = rec.action.index(rec.reaction)
        return users, actions, slots

    def visit_frequencies(self) -> np.ndarray:
        """Per-user visit share, normalized to sum to 1 (uniform if the log is empty)."""
        counts = np.zeros(self.catalog.num_users)
        for rec in self.records:
            counts[rec.user] += 1
        if counts.sum() == 0:
            return np.full(self.catalog.num_users, 1.0 / self.catalog.num_users)
        return counts / counts.sum()

    def date_pools(self) -> dict:
        """Items shown on each date, keyed by date."""
        pools: dict = {}
        for rec in self.records:
            pools.setdefault(rec.date, set()).update(rec.action)
        return pools


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise LogFormatError(lineno, f"{what} is not an integer: {token!r}") from None


def parse_log(stream: Union[TextIO, str, Iterable[str]]) -> Dataset:
    """Read an interaction log.

    Parameters
    ----------
    stream : file-like, str, or iterable of lines
        Log text. A plain ``str`` is treated as the full text, not a path.

    Returns
    -------
    Dataset
        Records in file order.

    Raises
    ------
    LogFormatError
        On the first malformed line, naming its line number.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = iter(stream)

    first = next(lines, None)
    if first is None or first.rstrip("\n") != LOG_MAGIC:
        raise LogFormatError(1, f"expected header {LOG_MAGIC!r}")
    second = next(lines, None)
    if second is None:
        raise LogFormatError(2, "missing catalog line")
    header = {}
    for token in second.rstrip("\n").split("\t"):
        key, sep, value = token.partition("=")
        if not sep:
            raise LogFormatError(2, f"bad catalog token {token!r}")
        header[key] = _parse_int(value, 2, key)
    if set(header) != {"N", "M", "l"}:
        raise LogFormatError(2, "catalog line must define exactly N, M and l")
    try:
        catalog = Catalog(header["N"], header["M"], header["l"])
    except ValueError as exc:
        raise LogFormatError(2, str(exc)) from None

    records = []
    prev_ts = -1
    for lineno, line in enumerate(lines, start=3):
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 4:
            raise LogFormatError(lineno, f"expected 4 columns, got {len(cols)}")
        ts = _parse_int(cols[0], lineno, "timestamp")
        user = _parse_int(cols[1], lineno, "user")
        action = [_parse_int(tok, lineno, "item") for tok in cols[2].split(",")]
        if ts < 0:
            raise LogFormatError(lineno, "negative timestamp")
        if ts < prev_ts:
            raise LogFormatError(lineno, "timestamps must be nondecreasing")
        if not 0 <= user < catalog.num_users:
            raise LogFormatError(lineno, f"user {user} out of range")
        if len(action) != catalog.action_length:
            raise LogFormatError(lineno, f"action has {len(action)} items, expected {catalog.action_length}")
        for item in action:
            if not 0 <= item < catalog.num_items:
                raise LogFormatError(lineno, f"item {item} out of range")
        dup = [i for i, c in Counter(action).items() if c > 1]
        if dup:
            raise LogFormatError(lineno, f"duplicate item {dup[0]} in action")
        if cols[3] == NULL_TOKEN:
            reaction = None
        else:
            reaction = _parse_int(cols[3], lineno, "reaction")
            if reaction not in action:
                raise LogFormatError(lineno, f"reaction {reaction} not in action")
        records.append(InteractionRecord(ts, user, tuple(action), reaction))
        prev_ts = ts
    return Dataset(catalog, records)


def write_log(dataset: Dataset) -> str:
    cat = dataset.catalog
    out = [LOG_MAGIC, f"N={cat.num_users}\tM={cat.num_items}\tl={cat.action_length}"]
    for rec in dataset.records:
        reaction = NULL_TOKEN if rec.reaction is None else str(rec.reaction)
        out.append(f"{rec.timestamp}\t{rec.user}\t{','.join(map(str, rec.action))}\t{reaction}")
    return "\n".join(out) + "\n"


def split_dataset(dataset: Dataset, train_fraction: float, seed) -> tuple:
    """Randomly partition records into (train, test), preserving log order in each."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    rng = np.random.default_rng(seed)
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.permutation(n)[:n_train]] = True
    train = [r for r, c in zip(dataset.records, chosen) if c]
    test = [r for r, c in zip(dataset.records, chosen) if not c]
    return Dataset(dataset.catalog, train), Dataset(dataset.catalog, test)


def read_id_map(stream: TextIO) -> dict:
    """Read an ``external-id<TAB>dense-id`` mapping file."""
    mapping = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        key, sep, value = line.rpartition("\t")
        if not sep:
            raise LogFormatError(lineno, "expected external-id<TAB>dense-id")
        mapping[key] = _parse_int(value, lineno, "dense id")
    return mapping


def write_id_map(mapping: dict) -> str:
    return "".join(f"{k}\t{v}\n" for k, v in sorted(mapping.items(), key=lambda kv: kv[1]))
