"""Multi-reward gridworld oracle with exact solutions and trajectory generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidGamma
from .trajectory import CategoricalFeature, FeasibleActionMap, FeatureSchema, StateKey, TrajectorySet

log = logging.getLogger(__name__)

ACTION_NAMES = ("up", "down", "left", "right", "stay")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
TIE_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Gridworld with ``n`` reward fields indexed by (cell, action).

    Cells are numbered ``y * width + x``. ``regime_schedule`` is a sequence of
    ``(t_switch, phi)`` pairs; the regime with the latest ``t_switch`` not
    after an episode's start timestamp drives that episode.
    """

    width: int
    height: int
    fields: np.ndarray
    gamma: float = 0.95
    episode_length: int = 40
    signal_names: tuple[str, ...] = ()
    regime_schedule: tuple[tuple[int, tuple[float, ...]], ...] = ()

    def __post_init__(self) -> None:
        f = np.asarray(self.fields, dtype=float)
        if f.ndim != 3 or f.shape[1:] != (self.n_states, len(ACTION_NAMES)):
            raise ValueError(f"fields must have shape (n, {self.n_states}, {len(ACTION_NAMES)}), got {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError("reward fields must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidGamma(f"gamma must be in [0, 1), got {self.gamma}")
        f = f.copy()
        f.flags.writeable = False
        object.__setattr__(self, "fields", f)
        if not self.signal_names:
            object.__setattr__(self, "signal_names", tuple(f"f{i + 1}" for i in range(f.shape[0])))
        if len(self.signal_names) != f.shape[0]:
            raise ValueError("one signal name per reward field required")
        sched = tuple((int(t), tuple(float(x) for x in p)) for t, p in self.regime_schedule)
        for _, p in sched:
            _check_phi(p, f.shape[0])
        object.__setattr__(self, "regime_schedule", tuple(sorted(sched)))

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def n_signals(self) -> int:
        return int(self.fields.shape[0])

    @property
    def n_actions(self) -> int:
        return len(ACTION_NAMES)

    def geometry(self) -> tuple[np.ndarray, np.ndarray]:
        """``(feasible, next_cell)``, both (S, A); infeasible moves point back at the cell."""
        return grid_geometry(self.width, self.height)

    def combined_reward(self, phi: Sequence[float]) -> np.ndarray:
        phi = _check_phi(phi, self.n_signals)
        return np.tensordot(phi, self.fields, axes=1)


def _check_phi(phi: Sequence[float], n: int) -> np.ndarray:
    p = np.asarray(phi, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"phi must have length {n}, got {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"phi must lie on the simplex, got {p.tolist()}")
    return p


def grid_geometry(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    S = width * height
    feas = np.zeros((S, len(MOVES)), dtype=bool)
    nxt = np.zeros((S, len(MOVES)), dtype=np.int64)
    for s in range(S):
        x, y = s % width, s // width
        for a, (dx, dy) in enumerate(MOVES):
            nx_, ny_ = x + dx, y + dy
            ok = 0 <= nx_ < width and 0 <= ny_ < height
            feas[s, a] = ok
            nxt[s, a] = ny_ * width + nx_ if ok else s
    return feas, nxt


def fields_from_cells(width: int, height: int, cell_values: Sequence[dict[int, float]]) -> np.ndarray:
    """Reward of (cell, action) is the value of the destination cell."""
    feas, nxt = grid_geometry(width, height)
    out = np.zeros((len(cell_values), width * height, len(MOVES)))
    for i, cv in enumerate(cell_values):
        per_cell = np.zeros(width * height)
        for c, v in cv.items():
            per_cell[int(c)] = float(v)
        out[i] = np.where(feas, per_cell[nxt], 0.0)
    return out


# ---------------------------------------------------------------------------
# exact solutions
# ---------------------------------------------------------------------------

def policy_evaluation(reward: np.ndarray, policy: np.ndarray, next_cell: np.ndarray, gamma: float) -> np.ndarray:
    """Exact Q^pi for a deterministic policy in a deterministic MDP, by one linear solve."""
    S, A = reward.shape
    P = np.zeros((S, S))
    P[np.arange(S), next_cell[np.arange(S), policy]] = 1.0
    V = np.linalg.solve(np.eye(S) - gamma * P, reward[np.arange(S), policy])
    return reward + gamma * V[next_cell]


@dataclass(frozen=True)
class OracleSolution:
    q_combined: np.ndarray
    q_per_signal: np.ndarray
    optimal_policy: np.ndarray
    argmax_sets: np.ndarray
    tie_mask: np.ndarray
    feasible: np.ndarray
    residual: float


def _greedy(Q: np.ndarray, feas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Qm = np.where(feas, Q, -np.inf)
    best = Qm.max(axis=1, keepdims=True)
    scale = np.maximum(1.0, np.abs(best))
    sets = feas & (Qm >= best - TIE_TOL * scale)
    return np.argmax(sets, axis=1), sets


def value_iteration(g: GridSpec, phi: Sequence[float], max_iter: int = 100_000) -> OracleSolution:
    """Optimal Q for ``phi^T f`` plus each f^i evaluated under that optimal policy.

    Value iteration gives a starting policy; policy iteration with exact linear
    evaluation then removes the geometric tail, so the Bellman residual sits at
    machine precision. Ties are resolved to the lowest action id.
    """
    feas, nxt = g.geometry()
    R = g.combined_reward(phi)
    Q = np.zeros_like(R)
    for _ in range(max_iter):
        V = np.where(feas, Q, -np.inf).max(axis=1)
        Qn = R + g.gamma * V[nxt]
        done = np.max(np.abs(Qn - Q)) <= 1e-12 * max(1.0, float(np.max(np.abs(Qn))))
        Q = Qn
        if done or g.gamma == 0.0:
            break
    pi, _ = _greedy(Q, feas)
    for _ in range(g.n_states + 1):
        Q = policy_evaluation(R, pi, nxt, g.gamma)
        new_pi, sets = _greedy(Q, feas)
        if sets[np.arange(g.n_states), pi].all():
            break
        pi = new_pi
    pi, sets = _greedy(Q, feas)
    V = np.where(feas, Q, -np.inf).max(axis=1)
    residual = float(np.max(np.abs(np.where(feas, Q - (R + g.gamma * V[nxt]), 0.0))))
    per = np.stack([policy_evaluation(g.fields[i], pi, nxt, g.gamma) for i in range(g.n_signals)])
    return OracleSolution(
        q_combined=np.where(feas, Q, -np.inf), q_per_signal=np.where(feas[None], per, -np.inf),
        optimal_policy=pi, argmax_sets=sets, tie_mask=sets.sum(axis=1) > 1, feasible=feas, residual=residual,
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def gridworld_schema(g: GridSpec) -> FeatureSchema:
    return FeatureSchema(categorical=(
        CategoricalFeature("x", tuple(str(i) for i in range(g.width))),
        CategoricalFeature("y", tuple(str(i) for i in range(g.height))),
    ))


def declared_action_map(g: GridSpec) -> FeasibleActionMap:
    """A(s) over the full (x, y) state: the four moves that stay on the grid, plus stay."""
    feas, _ = g.geometry()
    actions = {(float(s % g.width), float(s // g.width)): frozenset(np.flatnonzero(feas[s]).tolist())
               for s in range(g.n_states)}
    return FeasibleActionMap(StateKey(("x", "y")), actions, g.n_actions)


def cells_of(ts: TrajectorySet, width: int, which: str = "state") -> np.ndarray:
    return ts.feature("y", which) * width + ts.feature("x", which)


def generate_trajectories(
    g: GridSpec,
    phi: Sequence[float] | None = None,
    *,
    episodes: int = 500,
    noise: float = 0.0,
    seed: int = 0,
    explore_start: bool = True,
    schedule: Sequence[tuple[int, Sequence[float]]] | None = None,
) -> TrajectorySet:
    """Roll out the phi-optimal policy for ``episodes`` x ``g.episode_length`` steps.

    Each step deviates to a uniform feasible action with probability
    ``noise``. With ``explore_start`` the first action of every episode is
    uniform as well, so every feasible alternative gets observed somewhere.
    Timestamps run ``episode * episode_length + t`` across the whole set and
    every episode is logged as its own agent. The final step keeps its
    successor state, since the walk is cut by the horizon, not by an absorbing
    end.
    """
    if not 0.0 <= noise <= 1.0:
        raise ValueError(f"noise must be in [0, 1], got {noise}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    sched = list(schedule) if schedule is not None else list(g.regime_schedule)
    if phi is not None:
        sched = [(0, tuple(phi))]
    if not sched:
        raise ValueError("need phi or a regime schedule")
    sched = sorted((int(t), tuple(p)) for t, p in sched)
    policies = [value_iteration(g, p).optimal_policy for _, p in sched]
    starts = np.array([t for t, _ in sched])
    feas, nxt = g.geometry()
    L = g.episode_length
    T = episodes * L
    cell = np.zeros(T, dtype=np.int64)
    act = np.zeros(T, dtype=np.int64)
    for e in range(episodes):
        rng = np.random.default_rng([seed, e])
        regime = max(int(np.searchsorted(starts, e * L, side="right")) - 1, 0)
        pi = policies[regime]
        s = int(rng.integers(g.n_states))
        for t in range(L):
            u = rng.random()
            if (explore_start and t == 0) or u < noise:
                a = int(rng.choice(np.flatnonzero(feas[s])))
            else:
                a = int(pi[s])
            cell[e * L + t] = s
            act[e * L + t] = a
            s = int(nxt[s, a])
    nc = nxt[cell, act]
    W = g.width
    names = g.signal_names
    return TrajectorySet(
        gridworld_schema(g),
        cat=np.stack([cell % W, cell // W], axis=1), num=np.zeros((T, 0)),
        timestamp=np.arange(T), action=act,
        agent=[f"ep{e:05d}" for e in range(episodes) for _ in range(L)],
        episode=np.repeat(np.arange(episodes), L),
        next_cat=np.stack([nc % W, nc // W], axis=1), next_num=np.zeros((T, 0)),
        next_timestamp=np.arange(T) + 1, terminal=np.zeros(T, bool),
        action_names=ACTION_NAMES, signals=g.fields[:, cell, act].T, signal_names=names,
        meta={"generator": "gridworld", "width": g.width, "height": g.height, "episode_length": L},
    )


# ---------------------------------------------------------------------------
# stock specs
# ---------------------------------------------------------------------------

def region_gridspec(
    width: int,
    height: int,
    regions: Sequence[Sequence[int]],
    magnitudes: Sequence[float],
    *,
    field_seed: int = 100,
    gamma: float = 0.95,
    episode_length: int = 40,
    signal_names: Sequence[str] = (),
    regime_schedule: Sequence[tuple[int, Sequence[float]]] = (),
) -> GridSpec:
    """One rewarding region per signal; each cell's value is ``magnitude * U(0.5, 1)``."""
    if len(regions) != len(magnitudes):
        raise ValueError("one magnitude per region required")
    rng = np.random.default_rng(field_seed)
    cells = [{int(c): m * rng.uniform(0.5, 1.0) for c in r} for r, m in zip(regions, magnitudes)]
    return GridSpec(width, height, fields_from_cells(width, height, cells), gamma=gamma,
                    episode_length=episode_length, signal_names=tuple(signal_names),
                    regime_schedule=tuple((t, tuple(p)) for t, p in regime_schedule))


DEFAULT_REGIONS = ((0, 1, 8, 9), (6, 7, 14, 15), (48, 49, 56, 57))
DEFAULT_MAGNITUDES = (0.6, 1.0, 1.5)
DEFAULT_PHI = (0.5, 0.3, 0.2)


def default_gridspec(gamma: float = 0.95) -> GridSpec:
    """8x8, three 2x2 corner regions with magnitudes balanced against the default phi."""
    return region_gridspec(8, 8, DEFAULT_REGIONS, DEFAULT_MAGNITUDES, gamma=gamma)


def regime_gridspec(episodes: int = 500, gamma: float = 0.95) -> GridSpec:
    """Two opposite-corner regions; phi flips from (0.8, 0.2) to (0.2, 0.8) halfway through."""
    L = 40
    switch = (episodes // 2) * L
    return region_gridspec(8, 8, ((0, 1, 8, 9), (54, 55, 62, 63)), (1.0, 1.0), gamma=gamma, episode_length=L,
                           regime_schedule=((0, (0.8, 0.2)), (switch, (0.2, 0.8))))


def basin_counts(g: GridSpec, policy: np.ndarray, regions: Sequence[Sequence[int]]) -> np.ndarray:
    """How many start cells end up circulating inside each region under ``policy``."""
    _, nxt = g.geometry()
    s = np.arange(g.n_states)
    for _ in range(g.n_states):
        s = nxt[s, policy[s]]
    owner = np.full(g.n_states, -1)
    for i, r in enumerate(regions):
        owner[list(r)] = i
    hit = owner[s]
    return np.bincount(hit[hit >= 0], minlength=len(regions))


def identifiable(g: GridSpec, phi: Sequence[float], regions: Sequence[Sequence[int]]) -> tuple[bool, str]:
    """Rejects specs whose signals cannot be told apart from behaviour.

    Two signals with identical single-signal optimal policies are
    indistinguishable. A region no start cell is drawn into under ``phi``
    leaves its weight unconstrained by the data, so that is rejected too.
    """
    n = g.n_signals
    pols = [value_iteration(g, np.eye(n)[i]).optimal_policy for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if np.array_equal(pols[i], pols[j]):
                return False, f"signals {i} and {j} induce identical optimal policies"
    basins = basin_counts(g, value_iteration(g, phi).optimal_policy, regions)
    if (basins == 0).any():
        return False, f"region(s) {np.flatnonzero(basins == 0).tolist()} attract no start cell under phi"
    return True, ""


def random_gridspec(
    seed: int,
    phi: Sequence[float] = DEFAULT_PHI,
    width: int = 8,
    height: int = 8,
    magnitudes: Sequence[float] | None = None,
    gamma: float = 0.95,
    max_attempts: int = 200,
) -> tuple[GridSpec, list[list[int]]]:
    """Random non-overlapping 2x2 regions that pass :func:`identifiable`.

    Default magnitudes are inversely proportional to phi, which keeps every
    region competitive under the combined reward.
    """
    n = len(phi)
    p = _check_phi(phi, n)
    if magnitudes is None:
        magnitudes = tuple(float(np.mean(p) / max(x, 1e-3)) for x in p)
    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        taken: set[int] = set()
        regions: list[list[int]] = []
        for _ in range(n):
            for _try in range(100):
                x, y = int(rng.integers(width - 1)), int(rng.integers(height - 1))
                block = [y * width + x, y * width + x + 1, (y + 1) * width + x, (y + 1) * width + x + 1]
                halo = {(y + dy) * width + (x + dx) for dx in range(-1, 3) for dy in range(-1, 3)
                        if 0 <= x + dx < width and 0 <= y + dy < height}
                if not halo & taken:
                    regions.append(block)
                    taken |= set(block)
                    break
        if len(regions) < n:
            continue
        g = region_gridspec(width, height, regions, magnitudes, field_seed=int(rng.integers(2**31)), gamma=gamma)
        ok, why = identifiable(g, p, regions)
        if ok:
            return g, regions
        log.info("random_gridspec seed=%d attempt=%d rejected: %s", seed, attempt, why)
    raise RuntimeError(f"no identifiable grid found in {max_attempts} attempts")
