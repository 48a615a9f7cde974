"""Behaviour prediction from recovered weights, plus the comparison baselines."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, EmptyTestSet, SingleClassDegenerate
from .irl import MotivationProfile
from .qlearn import TABULAR, NeuralArchSpec, QModel, TrainSpec, evaluate_batch, train_q
from .qlearn import neural
from .trajectory import FeasibleActionMap, StateKey, TrajectorySet, unique_keys

Scorer = Callable[[TrajectorySet], np.ndarray]


@dataclass(frozen=True, eq=False)
class PredictionPolicy:
    """Greedy policy over a score table; ties go to the lowest action id.

    Scores within ``tie_tol * max(1, |best|)`` of the best count as tied, so
    floating-point noise between exactly tied actions does not decide.
    """

    source: str
    scorer: Scorer
    fam: FeasibleActionMap
    phi: tuple[float, ...] | None = None
    seed: int | None = None
    models: tuple[QModel, ...] = ()
    info: dict[str, Any] = field(default_factory=dict)
    tie_tol: float = 1e-9

    def scores(self, ts: TrajectorySet) -> np.ndarray:
        s = np.asarray(self.scorer(ts), dtype=float)
        return np.where(self.fam.with_fallback("all").mask(ts), s, -np.inf)

    def predict(self, ts: TrajectorySet) -> np.ndarray:
        if len(ts) == 0:
            return np.zeros(0, dtype=np.int64)
        s = self.scores(ts)
        best = s.max(axis=1, keepdims=True)
        return np.argmax(s >= best - self.tie_tol * np.maximum(1.0, np.abs(best)), axis=1)


def _weights_of(profile: MotivationProfile | Sequence[float]) -> np.ndarray:
    if isinstance(profile, MotivationProfile):
        return profile.phi
    return np.asarray(profile, dtype=float)


def scalarized_policy(models: Sequence[QModel], profile: MotivationProfile | Sequence[float],
                      fam: FeasibleActionMap, source: str = "scalarized") -> PredictionPolicy:
    """argmax_a phi . Q~(s, a) over A(s). ``profile`` may be a raw weight vector."""
    phi = _weights_of(profile)
    if phi.shape != (len(models),):
        raise DimensionMismatch(f"{len(models)} models but {phi.size} weights")
    models = tuple(models)

    def scorer(ts: TrajectorySet) -> np.ndarray:
        total = np.zeros((len(ts), models[0].action_count))
        for w, m in zip(phi, models):
            if w != 0.0:
                total = total + w * evaluate_batch(m, ts)
        return total

    return PredictionPolicy(source, scorer, fam, phi=tuple(float(v) for v in phi), models=models)


def single_motivation_policy(models: Sequence[QModel], index: int, fam: FeasibleActionMap) -> PredictionPolicy:
    phi = np.zeros(len(models))
    phi[index] = 1.0
    return scalarized_policy(models, phi, fam, source="single_motivation")


def model_policy(m: QModel, fam: FeasibleActionMap, source: str, **kw: Any) -> PredictionPolicy:
    return PredictionPolicy(source, lambda ts: evaluate_batch(m, ts), fam, models=(m,), **kw)


def retrain_combined(ts: TrajectorySet, profile: MotivationProfile | Sequence[float], spec: TrainSpec | None,
                     arch: NeuralArchSpec | str, fam: FeasibleActionMap, *,
                     source: str = "retrained_combined") -> PredictionPolicy:
    """Fit one Q on the scalar reward phi . f_t and act greedily on it."""
    phi = _weights_of(profile)
    if phi.shape != (ts.n_signals,):
        raise DimensionMismatch(f"profile has {phi.size} weights, data has {ts.n_signals} signals")
    m = train_q(ts, ts.signals @ phi, spec, arch, fam=fam, label="combined")
    return model_policy(m, fam, source, phi=tuple(float(v) for v in phi))


# ---------------------------------------------------------------------------
# disturbance
# ---------------------------------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1}."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def disturb_profile(profile: MotivationProfile, sigma: float, seed: int) -> MotivationProfile:
    """phi + N(0, sigma^2) noise, projected back onto the simplex."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return profile
    rng = np.random.default_rng(seed)
    phi = project_simplex(profile.phi + rng.normal(0.0, sigma, size=len(profile.weights)))
    return MotivationProfile(weights=tuple(float(v) for v in phi), signal_names=profile.signal_names,
                             objective=profile.objective, window=profile.window,
                             transition_count=profile.transition_count)


# ---------------------------------------------------------------------------
# large-margin Q-learning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginSpec:
    """Margin l_{s,a}: a constant, optionally overridden per (state key, action).

    In ``"trainable"`` mode the constant margin is a learned parameter kept
    non-negative by projection.
    """

    margin: float = 0.8
    mode: str = "fixed"
    table: Mapping[tuple[tuple[float, ...], int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.margin < 0 or any(v < 0 for v in self.table.values()):
            raise ValueError("margins must be >= 0")
        if self.mode not in ("fixed", "trainable"):
            raise ValueError(f"unknown margin mode {self.mode!r}")

    def per_transition(self, ts: TrajectorySet, key: StateKey) -> np.ndarray:
        out = np.full(len(ts), self.margin)
        if self.table:
            keys = key.columns(ts)
            for t in range(len(ts)):
                out[t] = self.table.get((tuple(float(v) for v in keys[t]), int(ts.action[t])), self.margin)
        return out


def _best_alternative(Q: np.ndarray, feas: np.ndarray, taken: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    alt = feas.copy()
    alt[np.arange(len(taken)), taken] = False
    masked = np.where(alt, Q, -np.inf)
    b = np.argmax(masked, axis=1)
    return b, alt.any(axis=1)


def lmql_train(ts: TrajectorySet, fam: FeasibleActionMap, mspec: MarginSpec | None = None,
               spec: TrainSpec | None = None, arch: NeuralArchSpec | str = TABULAR) -> PredictionPolicy:
    """Minimise ``1/2 (Q(s,a) - (l + max_{a' != a} Q(s,a')))^2`` over logged pairs.

    The max runs over A(s) minus the taken action; transitions with no
    alternative contribute nothing. Tabular training applies per-state
    averaged full-batch gradient steps; the neural path reuses the Q network.
    """
    if len(ts) == 0:
        raise EmptyDataset("cannot train on an empty trajectory set")
    mspec = mspec or MarginSpec()
    spec = spec or TrainSpec()
    feas = fam.mask(ts)
    key = fam.key
    margins = mspec.per_transition(ts, key)
    trainable = mspec.mode == "trainable"
    T, A = len(ts), ts.action_count
    if isinstance(arch, str):
        rs = spec.resolved(TABULAR)
        lr = 0.5 if spec.learning_rate is None else float(spec.learning_rate)
        keys, k_s = unique_keys(key.columns(ts))
        K = len(keys)
        # the loss only depends on (state key, action, margin), so work on distinct triples
        trip, mult = np.unique(np.stack([k_s, ts.action, margins], axis=1), axis=0, return_counts=True)
        pk, pa, pm = trip[:, 0].astype(np.int64), trip[:, 1].astype(np.int64), trip[:, 2]
        pfeas = feas[np.unique(k_s, return_index=True)[1]][pk]
        w = mult / np.bincount(pk, weights=mult, minlength=K)[pk]
        prow = np.arange(len(pk))
        Q = np.zeros((K, A))
        l = float(mspec.margin)
        prev = np.inf
        for _ in range(rs.max_epochs):
            Qt = Q[pk]
            b, has = _best_alternative(Qt, pfeas, pa)
            diff = np.where(has, Qt[prow, pa] - (pm + Qt[prow, b]), 0.0)
            g = np.zeros((K, A))
            np.add.at(g, (pk, pa), w * diff)
            np.add.at(g, (pk, b), -w * diff)
            Q -= lr * g
            if trainable:
                l = max(0.0, l + lr * float(mult @ diff / T))
                pm = np.full(len(pk), l)
            loss = float(mult @ diff ** 2) / (2 * T)
            if abs(prev - loss) <= 1e-12 * max(prev, 1e-12):
                break
            prev = loss
        index = {k: i for i, k in enumerate(keys)}

        def scorer(data: TrajectorySet) -> np.ndarray:
            uk, inv = unique_keys(key.columns(data))
            hit = np.array([index.get(k, -1) for k in uk], dtype=np.int64)[inv] if len(data) else np.zeros(0, int)
            out = np.zeros((len(data), A))
            out[hit >= 0] = Q[hit[hit >= 0]]
            return out

        return PredictionPolicy("lmql", scorer, fam, info={"margin": l, "backend": TABULAR})

    rs = spec.resolved("neural")
    rng = np.random.default_rng(rs.seed)
    mean = ts.num.mean(axis=0)
    std = np.where(ts.num.std(axis=0) > 0, ts.num.std(axis=0), 1.0)
    p = neural.init_params(ts.schema.cardinalities, ts.num.shape[1], A, arch, rng)
    num = neural.standardize(ts.num, mean, std)
    l = float(mspec.margin)
    for _ in range(rs.max_epochs):
        perm = rng.permutation(T)
        for start in range(0, T, rs.batch_size):
            bidx = perm[start:start + rs.batch_size]
            out, cache = neural.forward(p, ts.cat[bidx], num[bidx])
            b, has = _best_alternative(out, feas[bidx], ts.action[bidx])
            r = np.arange(len(bidx))
            diff = np.where(has, out[r, ts.action[bidx]] - (margins[bidx] + out[r, b]), 0.0)
            g_out = np.zeros_like(out)
            np.add.at(g_out, (r, ts.action[bidx]), diff / len(bidx))
            np.add.at(g_out, (r, b), -diff / len(bidx))
            grads = neural.backward(p, cache, g_out)
            for k in p:
                p[k] = p[k] - rs.learning_rate * grads[k]
            if trainable:
                l = max(0.0, l + rs.learning_rate * float(diff.mean()))
                margins = np.full(T, l)
    frozen = {k: v.copy() for k, v in p.items()}

    def nscorer(data: TrajectorySet) -> np.ndarray:
        out, _ = neural.forward(frozen, data.cat, neural.standardize(data.num, mean, std))
        return out

    return PredictionPolicy("lmql", nscorer, fam, info={"margin": l, "backend": "neural"})


# ---------------------------------------------------------------------------
# behavioural cloning
# ---------------------------------------------------------------------------

def cloning_features(ts: TrajectorySet, mean: np.ndarray | None = None,
                     std: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-hot categorical features, standardised numeric features, and a bias column."""
    blocks = [np.eye(card)[ts.cat[:, j]] for j, card in enumerate(ts.schema.cardinalities)]
    if mean is None:
        mean = ts.num.mean(axis=0) if len(ts) else np.zeros(ts.num.shape[1])
        s = ts.num.std(axis=0) if len(ts) else np.ones(ts.num.shape[1])
        std = np.where(s > 0, s, 1.0)
    blocks.append((ts.num - mean) / std)
    blocks.append(np.ones((len(ts), 1)))
    return np.concatenate(blocks, axis=1), mean, std


def cloning_train(ts: TrajectorySet, fam: FeasibleActionMap, *, l2: float = 1e-3, epochs: int = 300,
                  seed: int = 0) -> PredictionPolicy:
    """Linear one-vs-rest classifier with squared hinge loss, fitted by full-batch gradient descent."""
    if len(ts) == 0:
        raise EmptyDataset("cannot train on an empty trajectory set")
    X, mean, std = cloning_features(ts)
    A = ts.action_count
    labels = np.unique(ts.action)
    if len(labels) == 1:
        warnings.warn(f"all {len(ts)} training actions are {int(labels[0])}; cloning predicts a constant",
                      SingleClassDegenerate, stacklevel=2)
        const = int(labels[0])

        def cscorer(data: TrajectorySet) -> np.ndarray:
            out = np.zeros((len(data), A))
            out[:, const] = 1.0
            return out

        return PredictionPolicy("cloning", cscorer, fam, seed=seed, info={"degenerate": True})
    Y = -np.ones((len(ts), A))
    Y[np.arange(len(ts)), ts.action] = 1.0
    n, d = X.shape
    W = np.zeros((d, A))
    # squared hinge has a 2*||X||^2/n Lipschitz gradient
    lip = 2.0 * np.linalg.norm(X, 2) ** 2 / n + 2 * l2
    lr = 1.0 / lip
    for _ in range(epochs):
        margin = 1.0 - Y * (X @ W)
        active = np.maximum(margin, 0.0)
        grad = -2.0 * X.T @ (active * Y) / n + 2.0 * l2 * W
        W -= lr * grad

    def scorer(data: TrajectorySet) -> np.ndarray:
        Xd, _, _ = cloning_features(data, mean, std)
        return Xd @ W

    return PredictionPolicy("cloning", scorer, fam, seed=seed, info={"degenerate": False})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    accuracy: dict[str, float]
    correct: dict[str, int]
    n_test: int
    chance: float
    action_space_histogram: dict[int, int]
    split: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"accuracy": self.accuracy, "correct": self.correct, "n_test": self.n_test, "chance": self.chance,
                "action_space_histogram": {str(k): v for k, v in sorted(self.action_space_histogram.items())},
                "split": self.split}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        width = max([len("policy")] + [len(k) for k in self.accuracy]) + 2
        lines = [f"{'policy':<{width}}accuracy  correct/total"]
        for name, acc in self.accuracy.items():
            lines.append(f"{name:<{width}}{acc:8.4f}  {self.correct[name]}/{self.n_test}")
        lines.append(f"{'chance':<{width}}{self.chance:8.4f}  expected under uniform A(s)")
        hist = ", ".join(f"|A|={k}: {v}" for k, v in sorted(self.action_space_histogram.items()))
        lines.append(f"action-space sizes: {hist}")
        return "\n".join(lines) + "\n"


def evaluate_policies(policies: Mapping[str, PredictionPolicy] | Sequence[PredictionPolicy],
                      ts_test: TrajectorySet, fam: FeasibleActionMap,
                      split: Mapping[str, Any] | None = None) -> EvalReport:
    """Exact-match accuracy of each policy on every held-out (s, a) pair."""
    if len(ts_test) == 0:
        raise EmptyTestSet("no held-out transitions to evaluate")
    if not isinstance(policies, Mapping):
        named: dict[str, PredictionPolicy] = {}
        for p in policies:
            name, k = p.source, 2
            while name in named:
                name, k = f"{p.source}_{k}", k + 1
            named[name] = p
        policies = named
    feas = fam.with_fallback("all").mask(ts_test)
    sizes = feas.sum(axis=1)
    acc, correct = {}, {}
    for name, pol in policies.items():
        pred = pol.predict(ts_test)
        if not feas[np.arange(len(ts_test)), pred].all():
            raise AssertionError(f"policy {name!r} predicted an infeasible action")
        hits = int((pred == ts_test.action).sum())
        correct[name] = hits
        acc[name] = hits / len(ts_test)
    hist = {int(k): int(v) for k, v in zip(*np.unique(sizes, return_counts=True))}
    return EvalReport(acc, correct, len(ts_test), float(np.mean(1.0 / sizes)), hist, dict(split or {}))
