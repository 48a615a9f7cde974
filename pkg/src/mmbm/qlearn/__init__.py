"""Off-policy estimation of per-signal action values, tabular or neural."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import _binio
from ..errors import EmptyDataset, ModelCountMismatch, NonConvergence, NonFiniteQ, SchemaMismatch
from ..trajectory import FeasibleActionMap, FeatureSchema, StateKey, StateVector, TrajectorySet
from . import neural, tabular
from .model import (LINEAR_ARCH, NEURAL, TABULAR, NeuralArchSpec, QModel, TrainReport, TrainSpec,
                    demonstrated_actions, signal_rewards)

__all__ = [
    "LINEAR_ARCH", "NEURAL", "TABULAR", "NeuralArchSpec", "QMatrix", "QModel", "TrainReport", "TrainSpec",
    "demonstrated_actions", "evaluate", "evaluate_batch", "load_model", "load_qmatrix", "q_matrix",
    "save_model", "save_qmatrix", "train_q",
]

MODEL_VERSION = 1


def train_q(
    ts: TrajectorySet,
    signal: int | str | Sequence[float] | np.ndarray,
    spec: TrainSpec | None = None,
    arch: NeuralArchSpec | str = TABULAR,
    *,
    fam: FeasibleActionMap | None = None,
    key: StateKey | None = None,
    next_actions: np.ndarray | None = None,
    label: str | None = None,
) -> QModel:
    """Fit Q for one reward signal from logged transitions.

    ``signal`` is a signal index or name in ``ts``, or an explicit reward per
    transition. ``fam`` masks the max in the bootstrap target. Passing
    ``next_actions`` evaluates a fixed policy: transition t bootstraps on
    ``Q(s'_t, next_actions[t])`` (entries of -1 fall back to the max).
    Non-convergence is reported with a :class:`NonConvergence` warning and on
    the model's report; the model is returned either way.
    """
    spec = spec or TrainSpec()
    if len(ts) == 0:
        raise EmptyDataset("cannot train on an empty trajectory set")
    rewards, name = signal_rewards(ts, signal)
    if not np.isfinite(rewards).all():
        raise ValueError(f"non-finite rewards in signal {name!r}")
    name = label or name
    if isinstance(arch, str):
        if arch != TABULAR:
            raise ValueError(f"unknown backend {arch!r}")
        model = tabular.train(ts, rewards, name, spec.resolved(TABULAR), fam, key, next_actions)
    else:
        model = neural.train(ts, rewards, name, spec.resolved(NEURAL), fam, key, next_actions, arch)
    rep = model.report
    if rep is not None and not rep.converged:
        warnings.warn(f"{name}: stopped after {rep.epochs} epochs with Bellman error {rep.bellman_error:.3g}",
                      NonConvergence, stacklevel=2)
    return model


def evaluate_batch(m: QModel, ts: TrajectorySet, fam: FeasibleActionMap | None = None,
                   which: str = "state") -> np.ndarray:
    """(T, A) action values; infeasible entries are -inf when ``fam`` is given."""
    if ts.schema.digest() != m.schema.digest():
        raise SchemaMismatch("trajectory schema differs from the model's training schema")
    if ts.action_count != m.action_count:
        raise SchemaMismatch(f"model has {m.action_count} actions, data has {ts.action_count}")
    out = tabular.evaluate_batch(m, ts, which) if m.backend == TABULAR else neural.evaluate_batch(m, ts, which)
    if fam is not None:
        out = np.where(fam.mask(ts, which), out, -np.inf)
    return out


def evaluate(m: QModel, s: StateVector, fam: FeasibleActionMap | None = None) -> np.ndarray:
    """Action values at one state."""
    schema = m.schema
    names_c = tuple(n for n, _ in s.categorical_features)
    names_n = tuple(n for n, _ in s.numeric_features)
    if names_c != schema.categorical_names or names_n != schema.numeric:
        raise SchemaMismatch(f"state features {names_c + names_n} do not match model schema {schema.names}")
    if any(v < 0 or v >= card for (_, v), card in zip(s.categorical_features, schema.cardinalities)):
        raise SchemaMismatch("category id outside the model's vocabulary")
    one = _single(schema, s, m.action_count)
    out = evaluate_batch(m, one, None)[0]
    if fam is not None:
        feas = fam.for_state(s)
        out = np.array([v if a in feas else -np.inf for a, v in enumerate(out)])
    return out


def _single(schema: FeatureSchema, s: StateVector, action_count: int) -> TrajectorySet:
    cat = np.array([[v for _, v in s.categorical_features]], dtype=np.int64).reshape(1, -1)
    num = np.array([[v for _, v in s.numeric_features]], dtype=float).reshape(1, -1)
    return TrajectorySet(schema, cat=cat, num=num, timestamp=[s.timestamp], action=[0], agent=["-"], episode=[0],
                         next_cat=np.full_like(cat, -1), next_num=np.full_like(num, np.nan),
                         next_timestamp=[s.timestamp], terminal=[True],
                         action_names=[str(i) for i in range(action_count)])


# ---------------------------------------------------------------------------
# Q matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QMatrix:
    """Per-transition n x A table of Q^i(s_t, a) with the taken action.

    ``values`` is (T, n, A) with -inf outside A(s_t); ``feasible`` (T, A).
    """

    values: np.ndarray
    feasible: np.ndarray
    taken: np.ndarray
    timestamp: np.ndarray
    signal_names: tuple[str, ...]

    def __len__(self) -> int:
        return int(self.taken.shape[0])

    @property
    def n_signals(self) -> int:
        return int(self.values.shape[1])

    def block(self, t: int) -> tuple[np.ndarray, np.ndarray, int]:
        """(n x |A(s)| matrix, feasible action ids, column index of the taken action)."""
        acts = np.flatnonzero(self.feasible[t])
        col = int(np.searchsorted(acts, self.taken[t]))
        return self.values[t][:, acts], acts, col

    def subset(self, index: np.ndarray) -> "QMatrix":
        idx = np.asarray(index)
        return QMatrix(self.values[idx], self.feasible[idx], self.taken[idx], self.timestamp[idx], self.signal_names)

    def scaled(self, weights: np.ndarray) -> np.ndarray:
        """(T, A) of phi^T Q~(s_t, a), -inf outside A(s_t)."""
        w = np.asarray(weights, dtype=float)
        v = np.where(self.feasible[:, None, :], self.values, 0.0)
        return np.where(self.feasible, np.einsum("i,tia->ta", w, v), -np.inf)


def q_matrix(models: Sequence[QModel], ts: TrajectorySet, fam: FeasibleActionMap,
             n: int | None = None) -> QMatrix:
    """Stack every model's masked values on every transition of ``ts``."""
    expected = n if n is not None else ts.n_signals
    if len(models) != expected:
        raise ModelCountMismatch(f"{len(models)} models supplied for {expected} signals")
    if len({m.action_count for m in models}) > 1 or len({m.schema.digest() for m in models}) > 1:
        raise SchemaMismatch("models do not share schema and action space")
    feas = fam.mask(ts)
    taken_ok = feas[np.arange(len(ts)), ts.action]
    if not taken_ok.all():
        bad = int(np.flatnonzero(~taken_ok)[0])
        raise SchemaMismatch(f"transition {bad}: logged action {int(ts.action[bad])} not in A(s)")
    vals = np.stack([evaluate_batch(m, ts, fam) for m in models], axis=1) if models else np.zeros((len(ts), 0, 0))
    if not np.isfinite(np.where(feas[:, None, :], vals, 0.0)).all():
        raise NonFiniteQ("non-finite Q value at a feasible action")
    names = tuple(m.signal for m in models)
    return QMatrix(vals, feas, ts.action.copy(), ts.timestamp.copy(), names)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(m: QModel, path: str | Path) -> None:
    meta = {
        "backend": m.backend, "signal": m.signal, "gamma": m.gamma, "action_count": m.action_count,
        "schema": m.schema.to_dict(), "schema_digest": m.schema.digest(), "state_key": m.state_key.to_dict(),
        "arch": m.arch.to_dict() if m.arch is not None else None,
        "report": m.report.to_dict() if m.report is not None else None,
        "params": list(m.params), "target_params": list(m.target_params),
    }
    arrays = {f"p:{k}": v for k, v in m.params.items()}
    arrays.update({f"t:{k}": v for k, v in m.target_params.items()})
    _binio.write_blob(path, "qmodel", MODEL_VERSION, meta, arrays)


def load_model(path: str | Path) -> QModel:
    version, meta, arrays = _binio.read_blob(path, "qmodel")
    if version != MODEL_VERSION:
        raise SchemaMismatch(f"{path}: unsupported model version {version}")
    schema = FeatureSchema.from_dict(meta["schema"])
    if schema.digest() != meta["schema_digest"]:
        raise SchemaMismatch(f"{path}: schema hash mismatch")
    return QModel(
        backend=meta["backend"], signal=meta["signal"], gamma=meta["gamma"], action_count=meta["action_count"],
        schema=schema, params={k: arrays[f"p:{k}"] for k in meta["params"]},
        target_params={k: arrays[f"t:{k}"] for k in meta["target_params"]},
        state_key=StateKey.from_dict(meta["state_key"]),
        arch=NeuralArchSpec.from_dict(meta["arch"]) if meta["arch"] else None,
        report=TrainReport(**meta["report"]) if meta["report"] else None,
    )


def save_qmatrix(qm: QMatrix, path: str | Path) -> None:
    _binio.write_blob(path, "qmatrix", 1, {"signal_names": list(qm.signal_names)},
                      {"values": qm.values, "feasible": qm.feasible, "taken": qm.taken, "timestamp": qm.timestamp})


def load_qmatrix(path: str | Path) -> QMatrix:
    _, meta, a = _binio.read_blob(path, "qmatrix")
    return QMatrix(a["values"], a["feasible"], a["taken"], a["timestamp"], tuple(meta["signal_names"]))
