"""Logged trajectories: data model, canonical file format, ingestion, A(s) maps.

A :class:`TrajectorySet` stores one row per transition in column arrays so the
training and LP stages can stay vectorised; :class:`Transition` and
:class:`StateVector` are per-row views for callers that want records.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .errors import EmptyDataset, MalformedRow, SchemaMismatch, UnknownFeature, UnknownStateKey

FORMAT_NAME = "mmbm-trajectory"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    vocabulary: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.vocabulary)


@dataclass(frozen=True)
class FeatureSchema:
    """Names, order and categorical vocabularies shared by every state."""

    categorical: tuple[CategoricalFeature, ...] = ()
    numeric: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        names = [f.name for f in self.categorical] + list(self.numeric)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature names in schema: {names}")

    @property
    def categorical_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.categorical)

    @property
    def names(self) -> tuple[str, ...]:
        return self.categorical_names + self.numeric

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.categorical)

    def has(self, name: str) -> bool:
        return name in self.names

    def categorical_index(self, name: str) -> int:
        try:
            return self.categorical_names.index(name)
        except ValueError:
            raise UnknownFeature(f"no categorical feature {name!r} in schema {list(self.names)}") from None

    def numeric_index(self, name: str) -> int:
        try:
            return self.numeric.index(name)
        except ValueError:
            raise UnknownFeature(f"no numeric feature {name!r} in schema {list(self.names)}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "categorical": [{"name": f.name, "vocabulary": list(f.vocabulary)} for f in self.categorical],
            "numeric": list(self.numeric),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        return cls(
            categorical=tuple(CategoricalFeature(c["name"], tuple(c["vocabulary"])) for c in d["categorical"]),
            numeric=tuple(d["numeric"]),
        )

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class StateVector:
    categorical_features: tuple[tuple[str, int], ...]
    numeric_features: tuple[tuple[str, float], ...]
    timestamp: int

    def value(self, name: str) -> float:
        for n, v in self.categorical_features:
            if n == name:
                return v
        for n, v in self.numeric_features:
            if n == name:
                return v
        raise UnknownFeature(name)


@dataclass(frozen=True)
class Transition:
    state: StateVector
    action: int
    next_state: StateVector | None
    agent_id: str
    signals: tuple[float, ...]


def _readonly(arr: np.ndarray, dtype: Any) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


class TrajectorySet:
    """Immutable column store of transitions.

    ``next_*`` columns are undefined (``-1`` / NaN) where ``terminal`` is set.
    ``episode`` groups consecutive transitions of one agent into a session.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        *,
        cat: np.ndarray,
        num: np.ndarray,
        timestamp: np.ndarray,
        action: np.ndarray,
        agent: Sequence[str],
        episode: np.ndarray,
        next_cat: np.ndarray,
        next_num: np.ndarray,
        next_timestamp: np.ndarray,
        terminal: np.ndarray,
        action_names: Sequence[str],
        signals: np.ndarray | None = None,
        signal_names: Sequence[str] = (),
        meta: Mapping[str, Any] | None = None,
    ):
        T = len(action)
        n = len(signal_names)
        self.schema = schema
        self.cat = _readonly(np.reshape(cat, (T, len(schema.categorical))), np.int64)
        self.num = _readonly(np.reshape(num, (T, len(schema.numeric))), np.float64)
        self.timestamp = _readonly(timestamp, np.int64)
        self.action = _readonly(action, np.int64)
        self.agent = _readonly(np.asarray(agent, dtype=object), object)
        self.episode = _readonly(episode, np.int64)
        self.next_cat = _readonly(np.reshape(next_cat, self.cat.shape), np.int64)
        self.next_num = _readonly(np.reshape(next_num, self.num.shape), np.float64)
        self.next_timestamp = _readonly(next_timestamp, np.int64)
        self.terminal = _readonly(terminal, bool)
        self.action_names = tuple(str(a) for a in action_names)
        if signals is None:
            signals = np.zeros((T, n))
        self.signals = _readonly(np.reshape(signals, (T, n)), np.float64)
        self.signal_names = tuple(signal_names)
        self.meta = json.loads(json.dumps(dict(meta or {}), sort_keys=True))
        self._validate()

    def _validate(self) -> None:
        T = len(self)
        for name in ("timestamp", "agent", "episode", "next_timestamp", "terminal"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"column {name!r} has length {len(getattr(self, name))}, expected {T}")
        if len(set(self.signal_names)) != len(self.signal_names):
            raise ValueError(f"duplicate signal names {self.signal_names}")
        if T == 0:
            return
        card = np.asarray(self.schema.cardinalities, dtype=np.int64)
        if card.size:
            if (self.cat < 0).any() or (self.cat >= card).any():
                raise ValueError("category id outside declared cardinality")
            live = ~self.terminal
            nc = self.next_cat[live]
            if (nc < 0).any() or (nc >= card).any():
                raise ValueError("next-state category id outside declared cardinality")
        if (self.action < 0).any() or (self.action >= self.action_count).any():
            raise ValueError("action id outside the action vocabulary")
        order = np.lexsort((np.arange(T), self.agent.astype(str)))
        ag = self.agent[order]
        ts = self.timestamp[order]
        same = ag[1:] == ag[:-1]
        if (np.diff(ts)[same] < 0).any():
            raise ValueError("timestamps decrease within an agent")

    # ---- container protocol -------------------------------------------------
    def __len__(self) -> int:
        return int(self.action.shape[0])

    @property
    def n_signals(self) -> int:
        return len(self.signal_names)

    @property
    def action_count(self) -> int:
        return len(self.action_names)

    def state_vector(self, i: int, which: str = "state") -> StateVector | None:
        if which == "next":
            if self.terminal[i]:
                return None
            cat, num, t = self.next_cat[i], self.next_num[i], self.next_timestamp[i]
        else:
            cat, num, t = self.cat[i], self.num[i], self.timestamp[i]
        return StateVector(
            tuple(zip(self.schema.categorical_names, (int(c) for c in cat))),
            tuple(zip(self.schema.numeric, (float(v) for v in num))),
            int(t),
        )

    def __getitem__(self, i: int) -> Transition:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i = i % len(self)
        return Transition(
            state=self.state_vector(i),
            action=int(self.action[i]),
            next_state=self.state_vector(i, "next"),
            agent_id=str(self.agent[i]),
            signals=tuple(float(v) for v in self.signals[i]),
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrajectorySet):
            return NotImplemented
        if (self.schema, self.action_names, self.signal_names) != (other.schema, other.action_names, other.signal_names):
            return False
        if len(self) != len(other) or self.meta != other.meta:
            return False
        live = ~self.terminal
        pairs = [
            (self.cat, other.cat), (self.num, other.num), (self.timestamp, other.timestamp),
            (self.action, other.action), (self.episode, other.episode), (self.terminal, other.terminal),
            (self.signals, other.signals),
        ]
        if not all(np.array_equal(a, b, equal_nan=a.dtype.kind == "f") for a, b in pairs):
            return False
        if not np.array_equal(self.agent.astype(str), other.agent.astype(str)):
            return False
        return (np.array_equal(live, ~other.terminal)
                and np.array_equal(self.next_cat[live], other.next_cat[live])
                and np.array_equal(self.next_num[live], other.next_num[live], equal_nan=True)
                and np.array_equal(self.next_timestamp[live], other.next_timestamp[live]))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (f"TrajectorySet({len(self)} transitions, {len(np.unique(self.agent.astype(str)))} agents, "
                f"signals={list(self.signal_names)}, actions={self.action_count})")

    # ---- derived sets ------------------------------------------------------
    def _columns(self) -> dict[str, Any]:
        return dict(
            cat=self.cat, num=self.num, timestamp=self.timestamp, action=self.action, agent=self.agent,
            episode=self.episode, next_cat=self.next_cat, next_num=self.next_num,
            next_timestamp=self.next_timestamp, terminal=self.terminal, signals=self.signals,
        )

    def subset(self, index: np.ndarray | Sequence[int]) -> "TrajectorySet":
        """Rows at ``index`` (boolean mask or positions), kept in original order."""
        idx = np.asarray(index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = np.sort(idx.astype(np.int64))
        cols = {k: v[idx] for k, v in self._columns().items()}
        return TrajectorySet(self.schema, action_names=self.action_names, signal_names=self.signal_names,
                             meta=self.meta, **cols)

    def replace(self, **changes: Any) -> "TrajectorySet":
        kwargs: dict[str, Any] = dict(self._columns(), action_names=self.action_names,
                                      signal_names=self.signal_names, meta=self.meta)
        kwargs.update(changes)
        return TrajectorySet(self.schema, **kwargs)

    def with_signals(self, signals: np.ndarray, names: Sequence[str],
                     meta: Mapping[str, Any] | None = None) -> "TrajectorySet":
        merged = dict(self.meta)
        merged.update(meta or {})
        return self.replace(signals=signals, signal_names=tuple(names), meta=merged)

    # ---- feature access ----------------------------------------------------
    def feature(self, name: str, which: str = "state") -> np.ndarray:
        """Column for ``name``: category ids for categorical, values for numeric."""
        cat, num = (self.next_cat, self.next_num) if which == "next" else (self.cat, self.num)
        if name in self.schema.categorical_names:
            return cat[:, self.schema.categorical_index(name)]
        if name in self.schema.numeric:
            return num[:, self.schema.numeric_index(name)]
        raise UnknownFeature(f"no feature {name!r} in schema {list(self.schema.names)}")

    def feature_labels(self, name: str, which: str = "state") -> np.ndarray:
        """Category labels (strings) for categorical, values for numeric."""
        col = self.feature(name, which)
        if name in self.schema.categorical_names:
            vocab = np.asarray(self.schema.categorical[self.schema.categorical_index(name)].vocabulary + ("",),
                               dtype=object)
            return vocab[np.where(col < 0, len(vocab) - 1, col)]
        return col

    def agent_order(self) -> np.ndarray:
        """Row positions sorted by (agent, timestamp), stable in file order."""
        return np.lexsort((np.arange(len(self)), self.timestamp, self.agent.astype(str)))


def empty_like(ts: TrajectorySet) -> TrajectorySet:
    return ts.subset(np.zeros(len(ts), dtype=bool))


# ---------------------------------------------------------------------------
# canonical on-disk format
# ---------------------------------------------------------------------------

def _field_names(ts: TrajectorySet) -> list[str]:
    s = ts.schema
    return (["agent", "episode", "timestamp", "action", "terminal", "next_timestamp"]
            + [f"cat:{n}" for n in s.categorical_names] + [f"num:{n}" for n in s.numeric]
            + [f"next_cat:{n}" for n in s.categorical_names] + [f"next_num:{n}" for n in s.numeric]
            + [f"signal:{n}" for n in ts.signal_names])


def _num_out(v: float) -> float | str | None:
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _num_in(v: Any) -> float:
    if v is None:
        return math.nan
    return float(v)


def save_trajectories(ts: TrajectorySet, path: str | Path) -> None:
    """Write the canonical line-delimited format (header line, then one JSON array per transition)."""
    fields = _field_names(ts)
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "schema": ts.schema.to_dict(),
        "action_names": list(ts.action_names), "signal_names": list(ts.signal_names),
        "meta": ts.meta, "fields": fields, "count": len(ts),
    }
    dump = lambda obj: json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump(header) + "\n")
        for i in range(len(ts)):
            term = bool(ts.terminal[i])
            row: list[Any] = [str(ts.agent[i]), int(ts.episode[i]), int(ts.timestamp[i]), int(ts.action[i]),
                              int(term), None if term else int(ts.next_timestamp[i])]
            row += [int(c) for c in ts.cat[i]]
            row += [_num_out(float(v)) for v in ts.num[i]]
            row += [None if term else int(c) for c in ts.next_cat[i]]
            row += [None if term else _num_out(float(v)) for v in ts.next_num[i]]
            row += [_num_out(float(v)) for v in ts.signals[i]]
            fh.write(dump(row) + "\n")


def load_trajectories(path: str | Path) -> TrajectorySet:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise EmptyDataset(f"{path}: empty file")
        header = json.loads(first)
        if header.get("format") != FORMAT_NAME:
            raise SchemaMismatch(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise SchemaMismatch(f"{path}: unsupported version {header.get('version')}")
        rows = [json.loads(line) for line in fh if line.strip()]
    schema = FeatureSchema.from_dict(header["schema"])
    signal_names = header["signal_names"]
    dummy = TrajectorySet(schema, cat=np.zeros((0, len(schema.categorical))), num=np.zeros((0, len(schema.numeric))),
                          timestamp=[], action=[], agent=[], episode=[], next_cat=np.zeros((0, len(schema.categorical))),
                          next_num=np.zeros((0, len(schema.numeric))), next_timestamp=[], terminal=[],
                          action_names=header["action_names"], signal_names=signal_names)
    if header["fields"] != _field_names(dummy):
        raise SchemaMismatch(f"{path}: field list does not match header schema")
    if len(rows) != header["count"]:
        raise SchemaMismatch(f"{path}: header declares {header['count']} records, found {len(rows)}")
    c, m, n = len(schema.categorical), len(schema.numeric), len(signal_names)
    T = len(rows)
    cols = list(zip(*rows)) if rows else [()] * len(header["fields"])
    terminal = np.array(cols[4], dtype=bool) if T else np.zeros(0, bool)
    off = 6

    def block(k: int, conv: Any, fill: Any) -> np.ndarray:
        nonlocal off
        out = np.array([[fill if v is None else conv(v) for v in cols[off + j]] for j in range(k)],
                       dtype=float if conv is not int else np.int64).T.reshape(T, k)
        off += k
        return out

    cat = block(c, int, -1)
    num = block(m, _num_in, math.nan)
    next_cat = block(c, int, -1)
    next_num = block(m, _num_in, math.nan)
    signals = block(n, _num_in, math.nan)
    ts_col = np.array(cols[2], dtype=np.int64) if T else np.zeros(0, np.int64)
    next_ts = np.array([t if v is None else v for v, t in zip(cols[5], ts_col)], dtype=np.int64) if T else ts_col
    return TrajectorySet(
        schema, cat=cat, num=num, timestamp=ts_col, action=np.array(cols[3], dtype=np.int64) if T else [],
        agent=list(cols[0]), episode=np.array(cols[1], dtype=np.int64) if T else [], next_cat=next_cat,
        next_num=next_num, next_timestamp=next_ts, terminal=terminal, action_names=header["action_names"],
        signals=signals, signal_names=signal_names, meta=header["meta"],
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass
class IngestSchema:
    """Column roles for an external log.

    ``categorical`` maps a column to its vocabulary, or to ``None`` to learn the
    vocabulary (sorted labels) from the file. The action column is the
    destination of each step and is always treated as categorical.
    """

    agent_id: str
    timestamp: str
    action: str
    categorical: dict[str, list[str] | None] = field(default_factory=dict)
    numeric: list[str] = field(default_factory=list)
    time_format: str | None = None
    logging_interval: float = 600.0
    max_gap: float | None = None
    delimiter: str = ","

    @property
    def gap_threshold(self) -> float:
        return self.max_gap if self.max_gap is not None else 2.0 * self.logging_interval

    def declared_columns(self) -> list[str]:
        cols = [self.agent_id, self.timestamp, self.action, *self.categorical, *self.numeric]
        return list(dict.fromkeys(cols))


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_valid: int = 0
    malformed: list[MalformedRow] = field(default_factory=list)
    transitions: int = 0
    agents: int = 0
    episodes: int = 0
    ignored_columns: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows_read": self.rows_read, "rows_valid": self.rows_valid, "rows_malformed": len(self.malformed),
            "malformed": [{"line": e.line, "reason": e.reason} for e in self.malformed],
            "transitions": self.transitions, "agents": self.agents, "episodes": self.episodes,
            "ignored_columns": self.ignored_columns,
        }


def _parse_time(raw: str, fmt: str | None) -> int:
    if fmt is None:
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"timestamp {raw!r} is not an integer")
        return int(value)
    return int(datetime.strptime(raw, fmt).replace(tzinfo=timezone.utc).timestamp())


def ingest_log(path: str | Path, schema: IngestSchema) -> tuple[TrajectorySet, IngestReport]:
    """Translate a snapshot CSV (one row per agent per logging tick) into transitions.

    Consecutive rows of one agent at most ``schema.gap_threshold`` apart form a
    transition whose action is the next row's ``schema.action`` label; a larger
    gap starts a new episode. The last row of an episode has no successor and
    yields no transition. Invalid rows are dropped and listed in the report.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    report = IngestReport()
    cat_spec: dict[str, list[str] | None] = dict(schema.categorical)
    cat_spec.setdefault(schema.action, None)
    numeric = [c for c in schema.numeric if c not in cat_spec]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        missing = [c for c in schema.declared_columns() if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: declared columns {missing} not found; observed columns {header}")
        report.ignored_columns = [h for h in header if h not in schema.declared_columns()]
        pos = {h: i for i, h in enumerate(header)}
        raw_rows: list[tuple[int, str, int, dict[str, str], list[float]]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            report.rows_read += 1
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                cells = [c.strip() for c in row]
                agent = cells[pos[schema.agent_id]]
                if not agent:
                    raise ValueError(f"empty agent id in column {schema.agent_id!r}")
                t = _parse_time(cells[pos[schema.timestamp]], schema.time_format)
                labels = {}
                for name, vocab in cat_spec.items():
                    label = cells[pos[name]]
                    if vocab is not None and label not in vocab:
                        raise ValueError(f"unknown {name} label {label!r}")
                    labels[name] = label
                values = []
                for name in numeric:
                    try:
                        v = float(cells[pos[name]])
                    except ValueError:
                        raise ValueError(f"non-numeric {name} value {cells[pos[name]]!r}") from None
                    if not math.isfinite(v):
                        raise ValueError(f"non-finite {name} value {cells[pos[name]]!r}")
                    values.append(v)
            except ValueError as exc:
                report.malformed.append(MalformedRow(line_no, str(exc)))
                continue
            raw_rows.append((line_no, agent, t, labels, values))
    report.rows_valid = len(raw_rows)
    if not raw_rows:
        raise EmptyDataset(f"{path}: no valid data rows ({report.rows_read} read)")

    vocabs = {}
    for name, vocab in cat_spec.items():
        vocabs[name] = tuple(vocab) if vocab is not None else tuple(sorted({r[3][name] for r in raw_rows}))
    fschema = FeatureSchema(
        categorical=tuple(CategoricalFeature(n, vocabs[n]) for n in cat_spec),
        numeric=tuple(numeric),
    )
    lookup = {n: {label: i for i, label in enumerate(v)} for n, v in vocabs.items()}
    raw_rows.sort(key=lambda r: (r[1], r[2], r[0]))
    cat_ids = np.array([[lookup[n][r[3][n]] for n in cat_spec] for r in raw_rows], dtype=np.int64)
    nums = np.array([r[4] for r in raw_rows], dtype=float).reshape(len(raw_rows), len(numeric))
    agents = [r[1] for r in raw_rows]
    times = np.array([r[2] for r in raw_rows], dtype=np.int64)
    act_col = list(cat_spec).index(schema.action)

    src: list[int] = []
    episode_of_row = np.zeros(len(raw_rows), dtype=np.int64)
    ep = 0
    for i in range(1, len(raw_rows)):
        if agents[i] == agents[i - 1] and times[i] - times[i - 1] <= schema.gap_threshold:
            src.append(i - 1)
        else:
            ep += 1
        episode_of_row[i] = ep
    report.agents = len(set(agents))
    report.episodes = ep + 1
    if not src:
        raise EmptyDataset(f"{path}: {len(raw_rows)} valid rows but no consecutive pairs within the gap threshold")
    s = np.asarray(src)
    ts = TrajectorySet(
        fschema, cat=cat_ids[s], num=nums[s], timestamp=times[s], action=cat_ids[s + 1, act_col],
        agent=[agents[i] for i in s], episode=episode_of_row[s], next_cat=cat_ids[s + 1], next_num=nums[s + 1],
        next_timestamp=times[s + 1], terminal=np.zeros(len(s), bool), action_names=vocabs[schema.action],
        meta={"source": path.name},
    )
    report.transitions = len(ts)
    return ts, report


# ---------------------------------------------------------------------------
# feasible action sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateKey:
    """Which features decide state equivalence for A(s).

    ``features=None`` keys on the full state. ``brackets`` maps a numeric
    feature to a bin width, e.g. ``{"level": 10}`` for level brackets.
    """

    features: tuple[str, ...] | None = None
    brackets: Mapping[str, float] = field(default_factory=dict)

    def resolve(self, schema: FeatureSchema) -> tuple[str, ...]:
        names = schema.names if self.features is None else tuple(self.features)
        for n in names:
            if not schema.has(n):
                raise UnknownFeature(f"state key feature {n!r} not in schema {list(schema.names)}")
        return names

    def columns(self, ts: TrajectorySet, which: str = "state") -> np.ndarray:
        names = self.resolve(ts.schema)
        cols = []
        for n in names:
            col = ts.feature(n, which).astype(float)
            if n in self.brackets:
                col = np.floor(col / float(self.brackets[n]))
            cols.append(col)
        return np.stack(cols, axis=1) if cols else np.zeros((len(ts), 0))

    def of(self, state: StateVector) -> tuple[float, ...]:
        names = [n for n, _ in state.categorical_features] + [n for n, _ in state.numeric_features]
        feats = self.features if self.features is not None else tuple(names)
        out = []
        for n in feats:
            v = float(state.value(n))
            if n in self.brackets:
                v = math.floor(v / float(self.brackets[n]))
            out.append(v)
        return tuple(out)

    def to_dict(self) -> dict[str, Any]:
        return {"features": None if self.features is None else list(self.features),
                "brackets": {k: float(v) for k, v in sorted(self.brackets.items())}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StateKey":
        feats = d.get("features")
        return cls(None if feats is None else tuple(feats), dict(d.get("brackets", {})))


def unique_keys(keys: np.ndarray) -> tuple[list[tuple[float, ...]], np.ndarray]:
    """Distinct key rows (lexicographic order) and each row's index into them."""
    if keys.shape[0] == 0:
        return [], np.zeros(0, dtype=np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    return [tuple(float(v) for v in row) for row in uniq], inv.reshape(-1)


@dataclass(frozen=True)
class FeasibleActionMap:
    """A(s) keyed by :class:`StateKey`.

    ``fallback="all"`` answers keys absent from the map with every action
    (useful for held-out states); ``"error"`` raises :class:`UnknownStateKey`.
    """

    key: StateKey
    actions: Mapping[tuple[float, ...], frozenset[int]]
    action_count: int
    fallback: str = "error"

    def __post_init__(self) -> None:
        for k, acts in self.actions.items():
            if not acts:
                raise ValueError(f"empty action set for state key {k}")
            if any(a < 0 or a >= self.action_count for a in acts):
                raise ValueError(f"action id out of range for state key {k}")

    def lookup(self, key: tuple[float, ...]) -> frozenset[int]:
        key = tuple(float(v) for v in key)
        found = self.actions.get(key)
        if found is not None:
            return found
        if self.fallback == "all":
            return frozenset(range(self.action_count))
        raise UnknownStateKey(f"state key {key} not in feasible-action map")

    def for_state(self, state: StateVector) -> frozenset[int]:
        return self.lookup(self.key.of(state))

    def mask(self, ts: TrajectorySet, which: str = "state") -> np.ndarray:
        """(T, A) boolean mask of feasible actions; all-False rows at terminal next states."""
        out = np.zeros((len(ts), self.action_count), dtype=bool)
        if len(ts) == 0:
            return out
        keys, inv = unique_keys(self.key.columns(ts, which))
        live = np.ones(len(ts), bool) if which == "state" else ~ts.terminal
        needed = np.unique(inv[live])
        table = np.zeros((len(keys), self.action_count), dtype=bool)
        for k in needed:
            table[k, sorted(self.lookup(keys[k]))] = True
        out[live] = table[inv[live]]
        return out

    def with_fallback(self, fallback: str) -> "FeasibleActionMap":
        return FeasibleActionMap(self.key, self.actions, self.action_count, fallback)

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key.to_dict(), "action_count": self.action_count, "fallback": self.fallback,
                "actions": [[list(k), sorted(v)] for k, v in sorted(self.actions.items())]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeasibleActionMap":
        return cls(StateKey.from_dict(d["key"]),
                   {tuple(float(x) for x in k): frozenset(int(a) for a in v) for k, v in d["actions"]},
                   int(d["action_count"]), d.get("fallback", "error"))


def build_feasible_actions(
    ts: TrajectorySet,
    mode: str = "inferred",
    *,
    key: StateKey | None = None,
    declared: Mapping[tuple[float, ...], Sequence[int]] | FeasibleActionMap | None = None,
    fallback: str = "error",
) -> FeasibleActionMap:
    """Build A(s) from the data (``"inferred"``) or from an explicit map (``"declared"``).

    Inferred sets are the union of actions observed from any state sharing the
    key. A declared map is returned as given, after checking that it covers
    every state key present in ``ts``.
    """
    if len(ts) == 0:
        raise EmptyDataset("cannot build feasible actions from an empty trajectory set")
    if mode == "declared":
        if declared is None:
            raise ValueError("declared mode needs an explicit adjacency map")
        fam = declared if isinstance(declared, FeasibleActionMap) else FeasibleActionMap(
            key or StateKey(), {tuple(float(x) for x in k): frozenset(v) for k, v in declared.items()},
            ts.action_count, fallback)
        keys, _ = unique_keys(np.concatenate([fam.key.columns(ts), fam.key.columns(ts.subset(~ts.terminal), "next")]))
        absent = [k for k in keys if k not in fam.actions]
        if absent:
            raise UnknownStateKey(f"declared map lacks {len(absent)} state keys present in data, e.g. {absent[0]}")
        return fam
    if mode != "inferred":
        raise ValueError(f"unknown feasible-action mode {mode!r}")
    key = key or StateKey()
    keys, inv = unique_keys(key.columns(ts))
    table = np.zeros((len(keys), ts.action_count), dtype=bool)
    table[inv, ts.action] = True
    actions = {k: frozenset(np.flatnonzero(table[i]).tolist()) for i, k in enumerate(keys)}
    return FeasibleActionMap(key, actions, ts.action_count, fallback)


def validate_actions(ts: TrajectorySet, fam: FeasibleActionMap) -> np.ndarray:
    """Positions of transitions whose logged action is outside A(s)."""
    mask = fam.with_fallback("all").mask(ts) if fam.fallback == "all" else fam.mask(ts)
    return np.flatnonzero(~mask[np.arange(len(ts)), ts.action])


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------

def window(ts: TrajectorySet, t_start: int, t_end: int) -> TrajectorySet:
    """Transitions whose state timestamp lies in ``[t_start, t_end)``."""
    if t_start > t_end:
        raise ValueError(f"window start {t_start} after end {t_end}")
    return ts.subset((ts.timestamp >= t_start) & (ts.timestamp < t_end))


def split_by_agent(ts: TrajectorySet, train_fraction: float = 0.8,
                   seed: int = 0) -> tuple[TrajectorySet, TrajectorySet, dict[str, Any]]:
    """Seeded split keeping each agent's transitions on one side."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    agents = np.array(sorted(set(ts.agent.astype(str).tolist())), dtype=object)
    rng = np.random.default_rng(seed)
    perm = agents[rng.permutation(len(agents))]
    n_train = int(round(train_fraction * len(agents)))
    if len(agents) >= 2:
        n_train = min(max(n_train, 1), len(agents) - 1 if train_fraction < 1.0 else len(agents))
    train_agents = set(perm[:n_train].tolist())
    in_train = np.array([a in train_agents for a in ts.agent.astype(str)], dtype=bool)
    info = {"by": "agent_id", "train_fraction": train_fraction, "seed": seed,
            "train_agents": n_train, "test_agents": len(agents) - n_train,
            "train_transitions": int(in_train.sum()), "test_transitions": int((~in_train).sum())}
    return ts.subset(in_train), ts.subset(~in_train), info


# ---------------------------------------------------------------------------
# cohort filters
# ---------------------------------------------------------------------------

_OPS = (">=", "<=", "!=", "==", ">", "<", "=")


def parse_cohort(expr: str) -> list[tuple[str, str, str]]:
    """``"level>=50,class==Warrior"`` as (feature, op, value) triples; ``"all"`` is empty."""
    expr = expr.strip()
    if expr in ("", "all"):
        return []
    out = []
    for part in expr.split(","):
        part = part.strip()
        for op in _OPS:
            if op in part:
                name, value = part.split(op, 1)
                out.append((name.strip(), "==" if op == "=" else op, value.strip()))
                break
        else:
            raise ValueError(f"cohort predicate {part!r} has no comparison operator")
        if not out[-1][0]:
            raise ValueError(f"cohort predicate {part!r} names no feature")
    return out


def cohort_mask(ts: TrajectorySet, expr: str) -> np.ndarray:
    """Rows whose current state satisfies every predicate in ``expr``.

    Categorical features compare by label; ordering operators on a categorical
    feature compare labels numerically and fail on non-numeric labels.
    """
    keep = np.ones(len(ts), dtype=bool)
    for name, op, value in parse_cohort(expr):
        col = ts.feature(name)
        if name in ts.schema.categorical_names:
            labels = ts.feature_labels(name).astype(str)
            if op in ("==", "!="):
                hit = labels == value
                keep &= hit if op == "==" else ~hit
                continue
            try:
                col = labels.astype(float)
            except ValueError:
                raise ValueError(f"cohort: ordering on non-numeric labels of {name!r}") from None
        try:
            v = float(value)
        except ValueError:
            raise ValueError(f"cohort: {name!r} is numeric but {value!r} is not a number") from None
        keep &= {"==": col == v, "!=": col != v, ">=": col >= v, "<=": col <= v,
                 ">": col > v, "<": col < v}[op]
    return keep
