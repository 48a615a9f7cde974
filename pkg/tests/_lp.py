"""Brute-force oracle for the slack LP: evaluate every point of a simplex grid."""

from __future__ import annotations

import numpy as np

from mmbm.irl import SlackLpProblem


def simplex_grid(n: int, h: float = 1e-3) -> np.ndarray:
    k = int(round(1 / h))
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        a = np.arange(k + 1) / k
        return np.stack([a, 1 - a], axis=1)
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    m = i + j <= k
    a, b = i[m] / k, j[m] / k
    return np.stack([a, b, 1 - a - b], axis=1)


def grid_objective(p: SlackLpProblem, grid: np.ndarray) -> tuple[float, np.ndarray]:
    viol = -(grid @ p.D.T)
    xi = np.zeros((len(grid), p.n_transitions))
    for r in range(p.D.shape[0]):
        t = p.row_transition[r]
        xi[:, t] = np.maximum(xi[:, t], viol[:, r])
    obj = xi @ p.weights
    k = int(np.argmin(obj))
    return float(obj[k]), grid[k]


def random_problem(rng: np.random.Generator, max_rows: int = 50) -> SlackLpProblem:
    n = int(rng.integers(2, 4))
    T = int(rng.integers(3, 15))
    per = rng.integers(1, 4, size=T)
    rt = np.repeat(np.arange(T), per)[:max_rows]
    T = int(rt.max()) + 1
    D = rng.uniform(-1, 1, size=(len(rt), n))
    return SlackLpProblem(D=D, row_transition=rt, n_transitions=T, weights=np.ones(T),
                          signal_names=tuple(f"f{i + 1}" for i in range(n)), degenerate=0)


def assert_feasible(p: SlackLpProblem, phi: np.ndarray) -> None:
    """phi >= 0, sum 1, and the recomputed slack covers every row in floating point."""
    assert (phi >= 0).all()
    assert abs(phi.sum() - 1.0) <= 1e-12
    xi = p.slack_for(phi)
    assert (xi >= 0).all()
    assert ((p.D @ phi) + xi[p.row_transition] >= 0).all()
