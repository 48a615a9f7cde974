"""Exact tabular backend: full-batch synchronous Bellman sweeps."""

from __future__ import annotations

import numpy as np

from ..trajectory import FeasibleActionMap, StateKey, TrajectorySet, unique_keys
from .model import TABULAR, QModel, TrainReport, TrainSpec, demonstrated_actions, next_feasible


def train(ts: TrajectorySet, rewards: np.ndarray, label: str, spec: TrainSpec,
          fam: FeasibleActionMap | None, key: StateKey | None,
          next_actions: np.ndarray | None) -> QModel:
    """Sweep ``Q(s,a) <- (1-lr) Q + lr * mean(y)`` over all transitions at once.

    Each sweep reads bootstrap values from the previous sweep's table, so the
    target table is synced once per sweep. Identical rows are merged into
    counts in sorted order before aggregating, which makes the result
    independent of input order down to the last bit. Convergence is measured
    on the aggregated residual ``mean_t (Q(s_t,a_t) - mean y(s_t,a_t))^2``, which reaches zero
    at the fixed point even when rewards are noisy.
    """
    key = key or StateKey()
    A = ts.action_count
    T = len(ts)
    live = ~ts.terminal
    ks = key.columns(ts)
    kn = key.columns(ts, "next")[live]
    keys, inv = unique_keys(np.concatenate([ks, kn]))
    K = len(keys)
    k_s = inv[:T]
    k_n = np.full(T, -1, dtype=np.int64)
    k_n[live] = inv[T:]
    nmask = next_feasible(ts, fam)
    if next_actions is None and spec.target == "demonstrated":
        next_actions = demonstrated_actions(ts, key)
    boot = np.full(T, -1, dtype=np.int64) if next_actions is None else np.asarray(next_actions, dtype=np.int64)
    if boot.shape != (T,):
        raise ValueError(f"next_actions must have shape ({T},)")

    # collapse identical rows into counts; np.unique sorts, which also fixes a canonical order
    rows = np.stack([k_s, ts.action, k_n, boot, ts.terminal.astype(np.int64)], axis=1).astype(float)
    table = np.concatenate([rows, rewards[:, None], nmask.astype(float)], axis=1)
    uniq, mult = np.unique(table, axis=0, return_counts=True)
    k_s, act, k_n, boot = (uniq[:, j].astype(np.int64) for j in range(4))
    term = uniq[:, 4].astype(bool)
    r = uniq[:, 5]
    nmask = uniq[:, 6:].astype(bool)
    mult = mult.astype(float)
    U = len(uniq)
    cell = k_s * A + act
    cnt = np.bincount(cell, weights=mult, minlength=K * A)
    seen = cnt > 0
    safe_n = np.where(k_n >= 0, k_n, 0)
    use_boot = (boot >= 0) & ~term

    def targets(Qt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nxt = Qt[safe_n]
        greedy = np.where(nmask, nxt, -np.inf).max(axis=1)
        greedy = np.where(np.isfinite(greedy), greedy, 0.0)
        v = np.where(use_boot, nxt[np.arange(U), np.where(boot >= 0, boot, 0)], greedy)
        y = r + spec.gamma * np.where(term, 0.0, v)
        mean_y = np.bincount(cell, weights=mult * y, minlength=K * A) / np.maximum(cnt, 1.0)
        return y, mean_y

    Q = np.zeros(K * A)
    lr = float(spec.learning_rate)
    epochs = 0
    err = np.inf
    for epochs in range(1, spec.max_epochs + 1):
        _, mean_y = targets(Q.reshape(K, A))
        err = float(mult @ (Q[cell] - mean_y[cell]) ** 2 / T)
        if err <= spec.convergence_tol:
            epochs -= 1
            break
        Q = np.where(seen, (1.0 - lr) * Q + lr * mean_y, 0.0)
    else:
        _, mean_y = targets(Q.reshape(K, A))
        err = float(mult @ (Q[cell] - mean_y[cell]) ** 2 / T)
    target = Q.copy()
    report = TrainReport(TABULAR, label, epochs, epochs, err, err <= spec.convergence_tol, T)
    return QModel(
        backend=TABULAR, signal=label, gamma=spec.gamma, action_count=A, schema=ts.schema,
        params={"keys": np.asarray(keys, dtype=float).reshape(K, -1), "q": Q.reshape(K, A)},
        target_params={"q": target.reshape(K, A)}, state_key=key, report=report,
    )


def evaluate_batch(m: QModel, ts: TrajectorySet, which: str = "state") -> np.ndarray:
    keys = m.state_key.columns(ts, which)
    index = m.key_index()
    q = m.params["q"]
    out = np.zeros((len(ts), m.action_count))
    if len(ts) == 0:
        return out
    uk, inv = unique_keys(keys)
    rows = np.array([index.get(k, -1) for k in uk], dtype=np.int64)
    hit = rows[inv]
    out[hit >= 0] = q[hit[hit >= 0]]
    return out
