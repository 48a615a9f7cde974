import numpy as np
import pytest

from mmbm import synth
from mmbm.errors import InvalidGamma
from mmbm.trajectory import validate_actions


@pytest.fixture(scope="module")
def grid():
    return synth.default_gridspec()


@pytest.fixture(scope="module")
def oracle(grid):
    return synth.value_iteration(grid, synth.DEFAULT_PHI)


def test_default_size(grid):
    ts = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=500, seed=0)
    assert len(ts) == 20000
    assert ts.signals.shape == (20000, 3)
    assert len(set(ts.agent.astype(str))) == 500


def test_value_iteration_bellman_residual(grid, oracle):
    assert oracle.residual < 1e-10
    feas, nxt = grid.geometry()
    R = grid.combined_reward(synth.DEFAULT_PHI)
    V = oracle.q_combined.max(axis=1)
    np.testing.assert_allclose(np.where(feas, oracle.q_combined, 0), np.where(feas, R + grid.gamma * V[nxt], 0),
                               atol=1e-10)


def test_per_signal_q_is_linear_in_phi(grid, oracle):
    # phi^T Q^i under the optimal policy equals the combined optimal Q
    phi = np.array(synth.DEFAULT_PHI)
    feas, _ = grid.geometry()
    mixed = np.tensordot(phi, np.where(feas[None], oracle.q_per_signal, 0.0), axes=1)
    np.testing.assert_allclose(mixed, np.where(feas, oracle.q_combined, 0.0), atol=1e-9)


def test_policy_evaluation_against_rollout():
    rng = np.random.default_rng(0)
    S, A, gamma = 5, 2, 0.8
    nxt = rng.integers(S, size=(S, A))
    R = rng.normal(size=(S, A))
    pi = rng.integers(A, size=S)
    Q = synth.policy_evaluation(R, pi, nxt, gamma)
    for s in range(S):
        for a in range(A):
            total, disc, x, u = 0.0, 1.0, s, a
            for _ in range(400):
                total += disc * R[x, u]
                disc *= gamma
                x = nxt[x, u]
                u = pi[x]
            assert Q[s, a] == pytest.approx(total, abs=1e-9)


def test_optimal_actions_are_feasible(grid, oracle):
    feas, _ = grid.geometry()
    assert feas[np.arange(grid.n_states), oracle.optimal_policy].all()
    assert (oracle.argmax_sets <= feas).all()


def test_deterministic_given_seed(grid):
    a = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=20, noise=0.3, seed=5)
    b = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=20, noise=0.3, seed=5)
    c = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=20, noise=0.3, seed=6)
    assert a == b and a != c


def test_noise_zero_follows_policy(grid, oracle):
    ts = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=30, seed=1)
    cells = synth.cells_of(ts, grid.width)
    later = ts.timestamp % grid.episode_length > 0
    assert (ts.action[later] == oracle.optimal_policy[cells[later]]).all()
    assert len(validate_actions(ts, synth.declared_action_map(grid))) == 0


def test_noise_one_is_uniform(grid):
    ts = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=500, noise=1.0, seed=2)
    feas, _ = grid.geometry()
    interior = feas[synth.cells_of(ts, grid.width)].all(axis=1)
    freq = np.bincount(ts.action[interior], minlength=5) / interior.sum()
    np.testing.assert_allclose(freq, 0.2, atol=0.01)


def test_successor_matches_geometry(grid):
    ts = synth.generate_trajectories(grid, synth.DEFAULT_PHI, episodes=10, noise=0.5, seed=3)
    _, nxt = grid.geometry()
    c = synth.cells_of(ts, grid.width)
    assert (synth.cells_of(ts, grid.width, "next") == nxt[c, ts.action]).all()
    # episodes chain: the next state of step t is the state of step t+1
    same = ts.episode[1:] == ts.episode[:-1]
    assert (synth.cells_of(ts, grid.width, "next")[:-1][same] == c[1:][same]).all()


def test_regime_switch_changes_policy():
    g = synth.regime_gridspec(episodes=100)
    ts = synth.generate_trajectories(g, episodes=100, seed=0)
    switch = g.regime_schedule[1][0]
    pa = synth.value_iteration(g, (0.8, 0.2)).optimal_policy
    pb = synth.value_iteration(g, (0.2, 0.8)).optimal_policy
    cells = synth.cells_of(ts, g.width)
    later = ts.timestamp % g.episode_length > 0
    before, after = later & (ts.timestamp < switch), later & (ts.timestamp >= switch)
    assert (ts.action[before] == pa[cells[before]]).all()
    assert (ts.action[after] == pb[cells[after]]).all()
    assert not np.array_equal(pa, pb)


def test_invalid_inputs(grid):
    with pytest.raises(InvalidGamma):
        synth.region_gridspec(4, 4, [[0]], [1.0], gamma=1.0)
    with pytest.raises(ValueError):
        synth.value_iteration(grid, (0.5, 0.5))
    with pytest.raises(ValueError):
        synth.generate_trajectories(grid, synth.DEFAULT_PHI, noise=1.5)


def test_identifiability_guard():
    # two signals rewarding the same cells cannot be told apart
    g = synth.region_gridspec(6, 6, [[0, 1], [0, 1]], [1.0, 1.0])
    ok, why = synth.identifiable(g, (0.5, 0.5), [[0, 1], [0, 1]])
    assert not ok and "identical" in why
    g2 = synth.default_gridspec()
    assert synth.identifiable(g2, synth.DEFAULT_PHI, synth.DEFAULT_REGIONS)[0]


@pytest.mark.parametrize("seed", range(3))
def test_random_gridspec_passes_guard(seed):
    g, regions = synth.random_gridspec(seed, phi=(0.6, 0.4))
    assert synth.identifiable(g, (0.6, 0.4), regions)[0]
    assert len({c for r in regions for c in r}) == 8
