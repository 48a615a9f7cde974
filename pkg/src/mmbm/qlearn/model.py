"""Shared types for the Q-learning backends."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from ..errors import InvalidGamma
from ..trajectory import FeasibleActionMap, FeatureSchema, StateKey, TrajectorySet, unique_keys

TABULAR = "tabular"
NEURAL = "neural"

_DEFAULTS = {
    TABULAR: {"learning_rate": 1.0, "max_epochs": 5000, "convergence_tol": 1e-22},
    NEURAL: {"learning_rate": 0.01, "max_epochs": 200, "convergence_tol": 1e-4},
}


@dataclass(frozen=True)
class TrainSpec:
    """Optimisation settings; ``None`` fields take the backend's default.

    ``target`` picks the bootstrap action at s': ``"max"`` is the greedy
    Bellman-optimality target, ``"demonstrated"`` bootstraps on the action
    most often logged from s' (evaluation of the demonstrated policy).
    """

    learning_rate: float | None = None
    gamma: float = 0.95
    batch_size: int = 256
    max_epochs: int | None = None
    target_sync_interval: int = 1000
    convergence_tol: float | None = None
    seed: int = 0
    target: str = "max"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidGamma(f"gamma must be in [0, 1), got {self.gamma}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.target_sync_interval < 1:
            raise ValueError("target_sync_interval must be >= 1")
        if self.target not in ("max", "demonstrated"):
            raise ValueError(f"target must be 'max' or 'demonstrated', got {self.target!r}")

    def resolved(self, backend: str) -> "TrainSpec":
        d = asdict(self)
        for k, v in _DEFAULTS[backend].items():
            if d[k] is None:
                d[k] = v
        return TrainSpec(**d)


@dataclass(frozen=True)
class NeuralArchSpec:
    """Embedding per categorical feature, fc1 on numeric features, fc2 after concatenation.

    ``hidden=False`` drops both FC layers, leaving a linear map from the
    concatenated embeddings and numeric features to the action values.
    """

    embedding_dim: int | tuple[int, ...] = 8
    fc1_width: int = 16
    fc2_width: int = 32
    hidden: bool = True

    def __post_init__(self) -> None:
        dims = self.embedding_dim if isinstance(self.embedding_dim, tuple) else (self.embedding_dim,)
        if min(dims) < 1 or self.fc1_width < 1 or self.fc2_width < 1:
            raise ValueError("all widths must be >= 1")

    def embedding_dims(self, n_categorical: int) -> tuple[int, ...]:
        if isinstance(self.embedding_dim, tuple):
            if len(self.embedding_dim) != n_categorical:
                raise ValueError(f"{len(self.embedding_dim)} embedding dims for {n_categorical} categorical features")
            return self.embedding_dim
        return (self.embedding_dim,) * n_categorical

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if isinstance(self.embedding_dim, tuple):
            d["embedding_dim"] = list(self.embedding_dim)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NeuralArchSpec":
        d = dict(d)
        if isinstance(d.get("embedding_dim"), list):
            d["embedding_dim"] = tuple(d["embedding_dim"])
        return cls(**d)


LINEAR_ARCH = NeuralArchSpec(hidden=False)


@dataclass(frozen=True)
class TrainReport:
    backend: str
    signal: str
    epochs: int
    steps: int
    bellman_error: float
    converged: bool
    transitions: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class QModel:
    """A trained action-value function for one reward signal.

    Tabular models store ``keys`` (one row per distinct state key) and ``q``.
    Neural models store named weight arrays. ``target_params`` is the lagged
    copy used for bootstrap targets; training only ever copies into it.
    """

    backend: str
    signal: str
    gamma: float
    action_count: int
    schema: FeatureSchema
    params: dict[str, np.ndarray]
    target_params: dict[str, np.ndarray]
    state_key: StateKey = field(default_factory=StateKey)
    arch: NeuralArchSpec | None = None
    report: TrainReport | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for d in (self.params, self.target_params):
            for v in d.values():
                v.flags.writeable = False
        object.__setattr__(self, "_index", None)

    def key_index(self) -> dict[tuple[float, ...], int]:
        if self._index is None:  # type: ignore[has-type]
            keys = self.params["keys"]
            object.__setattr__(self, "_index", {tuple(float(v) for v in row): i for i, row in enumerate(keys)})
        return self._index  # type: ignore[return-value]


def signal_rewards(ts: TrajectorySet, signal: int | str | Sequence[float] | np.ndarray) -> tuple[np.ndarray, str]:
    """Resolve a signal index/name or an explicit per-transition reward vector."""
    if isinstance(signal, (int, np.integer)):
        if not 0 <= int(signal) < ts.n_signals:
            raise IndexError(f"signal index {signal} out of range for {ts.n_signals} signals")
        return ts.signals[:, int(signal)].astype(float), ts.signal_names[int(signal)]
    if isinstance(signal, str):
        if signal not in ts.signal_names:
            raise KeyError(f"no signal named {signal!r}; have {list(ts.signal_names)}")
        i = ts.signal_names.index(signal)
        return ts.signals[:, i].astype(float), signal
    r = np.asarray(signal, dtype=float)
    if r.shape != (len(ts),):
        raise ValueError(f"reward override must have shape ({len(ts)},), got {r.shape}")
    return r, "custom"


def next_feasible(ts: TrajectorySet, fam: FeasibleActionMap | None) -> np.ndarray:
    """(T, A) mask over A(s'); all actions when no map is supplied, none at terminals."""
    if fam is None:
        m = np.ones((len(ts), ts.action_count), dtype=bool)
        m[ts.terminal] = False
        return m
    return fam.with_fallback("all").mask(ts, "next")


def demonstrated_actions(ts: TrajectorySet, key: StateKey) -> np.ndarray:
    """Bootstrap action per transition: the modal logged action at s' (lowest id on ties).

    ``-1`` where s' is terminal or never appears as a logged state; callers
    fall back to the greedy target there.
    """
    out = np.full(len(ts), -1, dtype=np.int64)
    if len(ts) == 0:
        return out
    live = ~ts.terminal
    both = np.concatenate([key.columns(ts), key.columns(ts, "next")[live]])
    keys, inv = unique_keys(both)
    T = len(ts)
    counts = np.zeros((len(keys), ts.action_count))
    np.add.at(counts, (inv[:T], ts.action), 1.0)
    modal = np.where(counts.sum(axis=1) > 0, np.argmax(counts, axis=1), -1)
    out[live] = modal[inv[T:]]
    return out
