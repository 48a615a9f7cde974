"""Recover motivation weights from per-signal Q values with a slack LP.

For every transition t with taken action a and each alternative a' in A(s_t)
there is a row d = Q~(s_t, a) - Q~(s_t, a'). The problem is

    minimise  sum_t xi_t
    s.t.      phi . d >= -xi_t     for every row of t
              phi >= 0, sum(phi) = 1, xi >= 0

so xi_t measures how far the logged action falls short of the best
alternative under phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import EmptyDataset, Infeasible, NonFiniteQ, NumericalFailure
from .qlearn import QMatrix, QModel, q_matrix
from .trajectory import FeasibleActionMap, TrajectorySet

SLACK_EPS = 1e-9
TIE_SLACK = 1e-12
_HIGHS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


@dataclass(frozen=True, eq=False)
class SlackLpProblem:
    """Rows ``D`` (m, n) grouped by ``row_transition``; one slack per transition.

    ``weights`` counts how many logged transitions each slack stands for (1
    unless the problem was deduplicated). ``degenerate`` counts transitions
    with |A(s)| = 1, which contribute no rows.
    """

    D: np.ndarray
    row_transition: np.ndarray
    n_transitions: int
    weights: np.ndarray
    signal_names: tuple[str, ...]
    degenerate: int = 0

    @property
    def n_signals(self) -> int:
        return int(self.D.shape[1])

    @property
    def n_rows(self) -> int:
        return int(self.D.shape[0])

    def scaled(self, c: float) -> "SlackLpProblem":
        return replace(self, D=self.D * c)

    def slack_for(self, phi: np.ndarray) -> np.ndarray:
        """Smallest feasible xi for a given phi."""
        viol = -(self.D @ np.asarray(phi, dtype=float))
        xi = np.zeros(self.n_transitions)
        np.maximum.at(xi, self.row_transition, viol)
        return xi

    def objective_at(self, phi: np.ndarray) -> float:
        return float(self.weights @ self.slack_for(phi))

    def deduplicated(self) -> "SlackLpProblem":
        """Merge transitions with identical row blocks into one weighted slack."""
        if self.n_transitions == 0:
            return self
        starts = np.searchsorted(self.row_transition, np.arange(self.n_transitions))
        ends = np.append(starts[1:], self.n_rows)
        seen: dict[bytes, int] = {}
        group = np.empty(self.n_transitions, dtype=np.int64)
        for t in range(self.n_transitions):
            block = self.D[starts[t]:ends[t]]
            block = block[np.lexsort(block.T[::-1])] if len(block) > 1 else block
            group[t] = seen.setdefault(np.ascontiguousarray(block).tobytes(), len(seen))
        first = np.full(len(seen), -1)
        for t in range(self.n_transitions - 1, -1, -1):
            first[group[t]] = t
        w = np.bincount(group, weights=self.weights, minlength=len(seen))
        keep = np.isin(self.row_transition, first)
        remap = np.full(self.n_transitions, -1)
        remap[first] = np.arange(len(seen))
        return SlackLpProblem(self.D[keep], remap[self.row_transition[keep]], len(seen), w,
                              self.signal_names, self.degenerate)


def build_lp(qm: QMatrix, fam: FeasibleActionMap | None = None) -> SlackLpProblem:
    """One row per (transition, feasible alternative); ``fam`` is already folded into ``qm``."""
    feas = qm.feasible
    T = len(qm)
    if T and not np.isfinite(np.where(feas[:, None, :], qm.values, 0.0)).all():
        raise NonFiniteQ("q-matrix has non-finite entries at feasible actions")
    taken_vals = qm.values[np.arange(T), :, qm.taken]
    alt = feas.copy()
    alt[np.arange(T), qm.taken] = False
    degenerate_mask = ~alt.any(axis=1)
    live = np.flatnonzero(~degenerate_mask)
    t_idx, a_idx = np.nonzero(alt[live])
    rows_t = live[t_idx]
    D = taken_vals[rows_t] - qm.values[rows_t, :, a_idx]
    remap = np.full(T, -1)
    remap[live] = np.arange(len(live))
    return SlackLpProblem(D=D, row_transition=remap[rows_t], n_transitions=len(live), weights=np.ones(len(live)),
                          signal_names=qm.signal_names, degenerate=int(degenerate_mask.sum()))


@dataclass(frozen=True)
class MotivationProfile:
    weights: tuple[float, ...]
    signal_names: tuple[str, ...]
    objective: float
    slack_mean: float = 0.0
    slack_max: float = 0.0
    slack_nonzero: float = 0.0
    window: tuple[int, int] | None = None
    transition_count: int = 0
    row_count: int = 0
    degenerate: int = 0
    skipped: bool = False

    @property
    def phi(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def t_mid(self) -> float | None:
        return None if self.window is None else (self.window[0] + self.window[1]) / 2.0

    def to_text(self) -> str:
        lines = [f"signals\t{' '.join(self.signal_names)}",
                 f"weights\t{' '.join(_fmt(w) for w in self.weights)}"]
        for name, w in zip(self.signal_names, self.weights):
            lines.append(f"phi.{name}\t{_fmt(w)}")
        lines += [
            f"objective\t{_fmt(self.objective)}", f"slack_mean\t{_fmt(self.slack_mean)}",
            f"slack_max\t{_fmt(self.slack_max)}", f"slack_nonzero\t{_fmt(self.slack_nonzero)}",
            f"window\t{'-' if self.window is None else f'{self.window[0]} {self.window[1]}'}",
            f"transitions\t{self.transition_count}", f"rows\t{self.row_count}",
            f"degenerate\t{self.degenerate}", f"skipped\t{int(self.skipped)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MotivationProfile":
        kv = dict(line.split("\t", 1) for line in text.splitlines() if "\t" in line)
        win = kv.get("window", "-")
        return cls(
            weights=tuple(float(x) for x in kv["weights"].split()), signal_names=tuple(kv["signals"].split()),
            objective=float(kv["objective"]), slack_mean=float(kv["slack_mean"]), slack_max=float(kv["slack_max"]),
            slack_nonzero=float(kv["slack_nonzero"]),
            window=None if win == "-" else tuple(int(x) for x in win.split()),  # type: ignore[arg-type]
            transition_count=int(kv["transitions"]), row_count=int(kv["rows"]),
            degenerate=int(kv["degenerate"]), skipped=bool(int(kv["skipped"])),
        )


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def _stage1(D: sp.csr_matrix, tid: np.ndarray, U: int, n: int, w: np.ndarray) -> Any:
    m = D.shape[0]
    slack = sp.csr_matrix((-np.ones(m), (np.arange(m), tid)), shape=(m, U))
    A_ub = sp.hstack([-D, slack], format="csr")
    c = np.concatenate([np.zeros(n), w])
    A_eq = np.concatenate([np.ones(n), np.zeros(U)])[None, :]
    return linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=[1.0], bounds=(0, None), method="highs",
                   options=_HIGHS), A_ub


def _stage2(A_ub: sp.csr_matrix, U: int, n: int, w: np.ndarray, bound: float) -> Any:
    """Among phi with weighted slack <= bound, minimise sum |phi_i - 1/n| via aux u_i."""
    m = A_ub.shape[0]
    eye = sp.identity(n, format="csr")
    zero_U = sp.csr_matrix((n, U))
    rows = [
        sp.hstack([A_ub, sp.csr_matrix((m, n))]),
        sp.hstack([sp.csr_matrix(np.zeros((1, n))), sp.csr_matrix(w[None, :]), sp.csr_matrix((1, n))]),
        sp.hstack([eye, zero_U, -eye]),
        sp.hstack([-eye, zero_U, -eye]),
    ]
    A = sp.vstack(rows, format="csr")
    b = np.concatenate([np.zeros(m), [bound], np.full(n, 1.0 / n), np.full(n, -1.0 / n)])
    c = np.concatenate([np.zeros(n + U), np.ones(n)])
    A_eq = np.concatenate([np.ones(n), np.zeros(U + n)])[None, :]
    return linprog(c, A_ub=A, b_ub=b, A_eq=A_eq, b_eq=[1.0], bounds=(0, None), method="highs", options=_HIGHS)


def _polish(phi: np.ndarray) -> np.ndarray:
    phi = np.clip(phi, 0.0, None)
    return phi / phi.sum()


def _toward(q: SlackLpProblem, phi1: np.ndarray, phi2: np.ndarray, steps: int = 60) -> np.ndarray:
    """Furthest point from phi1 toward phi2 whose recomputed slack does not exceed phi1's.

    The objective is convex, so the acceptable part of the segment is an interval from phi1.
    """
    best = q.objective_at(phi1)
    if q.objective_at(phi2) <= best:
        return phi2
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if q.objective_at(_polish((1 - mid) * phi1 + mid * phi2)) <= best:
            lo = mid
        else:
            hi = mid
    return _polish((1 - lo) * phi1 + lo * phi2)


def _check(res: Any, stage: str) -> None:
    if res.status == 2:
        raise Infeasible(f"{stage}: solver reports infeasible ({res.message})")
    if res.status != 0 or res.x is None:
        raise NumericalFailure(f"{stage}: solver status {res.status} ({res.message})")


def solve_lp(p: SlackLpProblem, *, tie_break: bool = True, dedupe: bool = True,
             window: tuple[int, int] | None = None) -> MotivationProfile:
    """Optimal phi, breaking ties toward the uniform vector (L1) in a second solve.

    The returned phi is clipped to the simplex and xi is recomputed exactly as
    ``max(0, max_rows(-phi . d))`` per transition, so every constraint holds
    in floating point; the reported objective is computed from that xi.
    """
    n = p.n_signals
    if p.n_rows == 0:
        raise EmptyDataset("LP has no constraint rows (every transition degenerate or none supplied)")
    q = p.deduplicated() if dedupe else p
    if n == 1:
        phi = np.ones(1)
    else:
        D = sp.csr_matrix(q.D)
        res, A_ub = _stage1(D, q.row_transition, q.n_transitions, n, q.weights)
        _check(res, "slack LP")
        phi = _polish(res.x[:n])
        if tie_break:
            opt = max(float(res.fun), q.objective_at(phi))
            res2 = _stage2(A_ub, q.n_transitions, n, q.weights, opt + TIE_SLACK * max(1.0, abs(opt)))
            if res2.status == 0 and res2.x is not None:
                phi = _toward(q, phi, _polish(res2.x[:n]))
    xi = p.slack_for(phi)
    obj = float(p.weights @ xi)
    total = float(p.weights.sum())
    return MotivationProfile(
        weights=tuple(float(v) for v in phi), signal_names=p.signal_names, objective=obj,
        slack_mean=obj / total if total else 0.0, slack_max=float(xi.max()) if len(xi) else 0.0,
        slack_nonzero=float(p.weights[xi > SLACK_EPS].sum() / total) if total else 0.0,
        window=window, transition_count=int(total) + p.degenerate, row_count=p.n_rows, degenerate=p.degenerate,
    )


def solve(qm: QMatrix, **kw: Any) -> MotivationProfile:
    return solve_lp(build_lp(qm), **kw)


def sample_indices(count: int, sample_size: int | None, seed: int) -> np.ndarray:
    """Seeded sample of at most ``sample_size`` positions, in increasing order."""
    if sample_size is None or count <= sample_size:
        return np.arange(count)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(count, size=sample_size, replace=False))


def window_bounds(t_first: int, t_end: int, width: int, stride: int) -> list[tuple[int, int]]:
    """Windows ``[t0, t0 + width)`` starting at ``t_first`` every ``stride`` until ``t_end``."""
    if width <= 0 or stride <= 0:
        raise ValueError("window width and stride must be > 0")
    out = []
    t0 = t_first
    while t0 < t_end:
        out.append((t0, t0 + width))
        t0 += stride
    return out


def solve_windows(
    ts: TrajectorySet,
    models: Sequence[QModel],
    fam: FeasibleActionMap,
    window_width: int,
    stride: int,
    sample_size: int | None = 5000,
    seed: int = 0,
    *,
    min_count: int = 50,
    t_start: int | None = None,
    t_end: int | None = None,
    refit: Callable[[TrajectorySet], Sequence[QModel]] | None = None,
) -> list[MotivationProfile]:
    """One profile per time window, each from a seeded sample (seed + window index).

    Windows under ``min_count`` transitions are emitted with ``skipped=True``
    and NaN weights. With ``refit`` the models are retrained on each window's
    transitions before its Q matrix is built.
    """
    if len(ts) == 0:
        return []
    t0 = int(ts.timestamp.min()) if t_start is None else t_start
    t1 = int(ts.timestamp.max()) + 1 if t_end is None else t_end
    bounds = window_bounds(t0, t1, window_width, stride)
    qm_all = q_matrix(models, ts, fam) if refit is None else None
    out = []
    for k, (a, b) in enumerate(bounds):
        idx = np.flatnonzero((ts.timestamp >= a) & (ts.timestamp < b))
        if len(idx) < min_count:
            out.append(_skipped(ts.signal_names, (a, b), len(idx)))
            continue
        pick = idx[sample_indices(len(idx), sample_size, seed + k)]
        if refit is None:
            qm = qm_all.subset(pick)  # type: ignore[union-attr]
        else:
            sub = ts.subset(idx)
            qm = q_matrix(list(refit(sub)), ts.subset(pick), fam)
        prob = build_lp(qm)
        if prob.n_rows == 0:
            out.append(_skipped(ts.signal_names, (a, b), len(pick)))
            continue
        out.append(solve_lp(prob, window=(a, b)))
    return out


def _skipped(names: Sequence[str], window: tuple[int, int], count: int) -> MotivationProfile:
    return MotivationProfile(weights=tuple(math.nan for _ in names), signal_names=tuple(names), objective=math.nan,
                             slack_mean=math.nan, slack_max=math.nan, slack_nonzero=math.nan, window=window,
                             transition_count=count, skipped=True)


def trends_table(profiles: Sequence[MotivationProfile]) -> str:
    """Tab-separated rows: t_mid, t_start, t_end, phi..., transitions, objective, skipped."""
    if not profiles:
        return ""
    names = profiles[0].signal_names
    lines = ["\t".join(["t_mid", "t_start", "t_end", *[f"phi.{n}" for n in names],
                        "transitions", "objective", "skipped"])]
    for p in profiles:
        a, b = p.window if p.window is not None else (0, 0)
        lines.append("\t".join([_fmt(p.t_mid if p.t_mid is not None else math.nan), str(a), str(b),
                                *[_fmt(w) for w in p.weights], str(p.transition_count), _fmt(p.objective),
                                str(int(p.skipped))]))
    return "\n".join(lines) + "\n"


def adjacent_jumps(profiles: Sequence[MotivationProfile]) -> np.ndarray:
    """L1 distance between consecutive windows' weights (NaN next to skipped windows)."""
    w = np.array([p.weights for p in profiles], dtype=float)
    return np.abs(np.diff(w, axis=0)).sum(axis=1) if len(w) > 1 else np.zeros(0)
