"""Small numpy network: categorical embeddings + FC branch for numeric inputs.

Forward pass::

    e_j = E_j[c_j]                         one embedding per categorical feature
    h1  = relu(x W1 + b1)                  standardised numeric features
    h2  = relu([e_1 .. e_k, h1] W2 + b2)
    Q   = h2 W3 + b3

The linear variant skips both FC layers: ``Q = [e_1 .. e_k, x] W3 + b3``.
Gradients are written out by hand so the package needs nothing beyond numpy.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from ..trajectory import FeasibleActionMap, StateKey, TrajectorySet
from .model import NEURAL, NeuralArchSpec, QModel, TrainReport, TrainSpec, demonstrated_actions, next_feasible

Params = dict[str, np.ndarray]


def init_params(cards: tuple[int, ...], n_numeric: int, n_actions: int, arch: NeuralArchSpec,
                rng: np.random.Generator) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = arch.embedding_dims(len(cards))
    p: Params = {}
    for j, (card, d) in enumerate(zip(cards, dims)):
        p[f"E{j}"] = rng.uniform(-1.0, 1.0, size=(card, d))

    def dense(name: str, fan_in: int, fan_out: int) -> None:
        b = 1.0 / np.sqrt(max(fan_in, 1))
        p[f"W{name}"] = rng.uniform(-b, b, size=(fan_in, fan_out))
        p[f"b{name}"] = np.zeros(fan_out)

    emb = int(sum(dims))
    if arch.hidden:
        if n_numeric:
            dense("1", n_numeric, arch.fc1_width)
        dense("2", emb + (arch.fc1_width if n_numeric else 0), arch.fc2_width)
        dense("3", arch.fc2_width, n_actions)
    else:
        dense("3", emb + n_numeric, n_actions)
    return p


def forward(p: Params, cat: np.ndarray, num: np.ndarray) -> tuple[np.ndarray, dict[str, Any]]:
    n_cat = cat.shape[1]
    parts = [p[f"E{j}"][cat[:, j]] for j in range(n_cat)]
    cache: dict[str, Any] = {"cat": cat, "num": num, "splits": [x.shape[1] for x in parts]}
    if "W2" in p:
        if "W1" in p:
            a1 = num @ p["W1"] + p["b1"]
            h1 = np.maximum(a1, 0.0)
            parts.append(h1)
            cache["a1"] = a1
        z = np.concatenate(parts, axis=1) if parts else np.zeros((cat.shape[0], 0))
        a2 = z @ p["W2"] + p["b2"]
        h2 = np.maximum(a2, 0.0)
        cache.update(z=z, a2=a2, h2=h2)
        out = h2 @ p["W3"] + p["b3"]
    else:
        parts.append(num)
        z = np.concatenate(parts, axis=1)
        cache["z"] = z
        out = z @ p["W3"] + p["b3"]
    return out, cache


def backward(p: Params, c: dict[str, Any], g_out: np.ndarray) -> Params:
    """Gradients of every parameter given dL/dQ for the batch in ``c``."""
    g: Params = {}
    if "W2" in p:
        g["W3"] = c["h2"].T @ g_out
        g["b3"] = g_out.sum(axis=0)
        g_a2 = (g_out @ p["W3"].T) * (c["a2"] > 0)
        g["W2"] = c["z"].T @ g_a2
        g["b2"] = g_a2.sum(axis=0)
        g_z = g_a2 @ p["W2"].T
    else:
        g["W3"] = c["z"].T @ g_out
        g["b3"] = g_out.sum(axis=0)
        g_z = g_out @ p["W3"].T
    off = 0
    for j, width in enumerate(c["splits"]):
        gE = np.zeros_like(p[f"E{j}"])
        np.add.at(gE, c["cat"][:, j], g_z[:, off:off + width])
        g[f"E{j}"] = gE
        off += width
    if "W1" in p:
        g_a1 = g_z[:, off:] * (c["a1"] > 0)
        g["W1"] = c["num"].T @ g_a1
        g["b1"] = g_a1.sum(axis=0)
    return g


def loss_and_grads(p: Params, cat: np.ndarray, num: np.ndarray, actions: np.ndarray,
                   y: np.ndarray) -> tuple[float, Params]:
    """``L = 1/2 mean_b (Q(s_b, a_b) - y_b)^2`` and its gradient for every parameter."""
    out, c = forward(p, cat, num)
    B = len(actions)
    diff = out[np.arange(B), actions] - y
    g_out = np.zeros_like(out)
    g_out[np.arange(B), actions] = diff / B
    return 0.5 * float(np.mean(diff ** 2)), backward(p, c, g_out)


def standardize(num: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (num - mean) / std


def inputs(m: QModel, ts: TrajectorySet, which: str) -> tuple[np.ndarray, np.ndarray]:
    cat, num = (ts.next_cat, ts.next_num) if which == "next" else (ts.cat, ts.num)
    num = standardize(num, m.params["num_mean"], m.params["num_std"])
    if which == "next":
        cat = np.where(cat < 0, 0, cat)
        num = np.where(np.isfinite(num), num, 0.0)
    return cat, num


def weights(p: Params) -> Params:
    return {k: v for k, v in p.items() if not k.startswith("num_")}


def train(ts: TrajectorySet, rewards: np.ndarray, label: str, spec: TrainSpec, fam: FeasibleActionMap | None,
          key: StateKey | None, next_actions: np.ndarray | None, arch: NeuralArchSpec) -> QModel:
    """Minibatch SGD on the Bellman error with a periodically synced target network.

    Converged means the epoch-mean loss changed by less than
    ``convergence_tol`` (relative) from the previous epoch.
    """
    rng = np.random.default_rng(spec.seed)
    T, A = len(ts), ts.action_count
    mean = ts.num.mean(axis=0) if T else np.zeros(ts.num.shape[1])
    std = ts.num.std(axis=0) if T else np.ones(ts.num.shape[1])
    std = np.where(std > 0, std, 1.0)
    p = init_params(ts.schema.cardinalities, ts.num.shape[1], A, arch, rng)
    target = {k: v.copy() for k, v in p.items()}
    stats = {"num_mean": mean, "num_std": std}
    cat, num = ts.cat, standardize(ts.num, mean, std)
    ncat = np.where(ts.next_cat < 0, 0, ts.next_cat)
    nnum = np.where(np.isfinite(ts.next_num), standardize(ts.next_num, mean, std), 0.0)
    nmask = next_feasible(ts, fam)
    if next_actions is None and spec.target == "demonstrated":
        next_actions = demonstrated_actions(ts, key or (fam.key if fam is not None else StateKey()))
    boot = np.full(T, -1, dtype=np.int64) if next_actions is None else np.asarray(next_actions, dtype=np.int64)
    term = ts.terminal
    lr = float(spec.learning_rate)
    steps = 0
    prev = np.inf
    loss_epoch = np.inf
    converged = False
    epoch = 0
    for epoch in range(1, spec.max_epochs + 1):
        perm = rng.permutation(T)
        total = 0.0
        for start in range(0, T, spec.batch_size):
            b = perm[start:start + spec.batch_size]
            qn, _ = forward(target, ncat[b], nnum[b])
            greedy = np.where(nmask[b], qn, -np.inf).max(axis=1)
            greedy = np.where(np.isfinite(greedy), greedy, 0.0)
            v = np.where(boot[b] >= 0, qn[np.arange(len(b)), np.maximum(boot[b], 0)], greedy)
            y = rewards[b] + spec.gamma * np.where(term[b], 0.0, v)
            loss, g = loss_and_grads(p, cat[b], num[b], ts.action[b], y)
            total += loss * len(b)
            for k in p:
                p[k] = p[k] - lr * g[k]
            steps += 1
            if steps % spec.target_sync_interval == 0:
                target = {k: v.copy() for k, v in p.items()}
        loss_epoch = 2.0 * total / max(T, 1)
        if not np.isfinite(loss_epoch):
            break
        if np.isfinite(prev) and abs(prev - loss_epoch) <= spec.convergence_tol * max(prev, 1e-12):
            converged = True
            break
        prev = loss_epoch
    report = TrainReport(NEURAL, label, epoch, steps, float(loss_epoch), converged, T)
    return QModel(
        backend=NEURAL, signal=label, gamma=spec.gamma, action_count=A, schema=ts.schema,
        params={**p, **stats}, target_params=target, state_key=key or StateKey(), arch=arch, report=report,
    )


def evaluate_batch(m: QModel, ts: TrajectorySet, which: str = "state") -> np.ndarray:
    cat, num = inputs(m, ts, which)
    out, _ = forward(weights(m.params), cat, num)
    return out
