import warnings

import numpy as np
import pytest

from mmbm.errors import InvalidGamma, ModelCountMismatch, NonConvergence, SchemaMismatch
from mmbm.qlearn import (LINEAR_ARCH, NeuralArchSpec, TrainSpec, evaluate, evaluate_batch, load_model, load_qmatrix,
                         q_matrix, save_model, save_qmatrix, train_q)
from mmbm.trajectory import FeasibleActionMap, StateKey

from _mdp import exact_policy_q, fd_gradient_error, random_mdp, tabular_ts

GAMMA = 0.9


def chain_ts():
    """5 states in a row; action 1 moves right, 0 moves left; reaching state 4 pays 1 and ends."""
    s, a, s2, r, term = [], [], [], [], []
    for x in range(4):
        for act in (0, 1):
            y = max(x - 1, 0) if act == 0 else x + 1
            s.append(x), a.append(act), s2.append(y), r.append(1.0 if y == 4 else 0.0), term.append(y == 4)
    return tabular_ts(s, a, s2, r, 5, 2, terminal=term)


def test_chain_matches_closed_form():
    m = train_q(chain_ts(), 0, TrainSpec(gamma=GAMMA))
    q = m.params["q"]
    keys = [int(k[0]) for k in m.params["keys"]]
    v = {x: GAMMA ** (3 - x) for x in range(4)}
    for row, x in enumerate(keys):
        if x == 4:
            continue
        assert q[row, 1] == pytest.approx(v[x], abs=1e-9)
        assert q[row, 0] == pytest.approx(GAMMA * v[max(x - 1, 0)], abs=1e-9)
    assert m.report.converged


def test_single_state_self_loop():
    ts = tabular_ts([0, 0], [0, 1], [0, 0], [0.3, 1.0], 1, 2)
    q = train_q(ts, 0, TrainSpec(gamma=GAMMA)).params["q"][0]
    v = 1.0 / (1 - GAMMA)
    assert q[1] == pytest.approx(v, abs=1e-9)
    assert q[0] == pytest.approx(0.3 + GAMMA * v, abs=1e-9)


def test_terminal_target_is_reward():
    ts = tabular_ts([0], [0], [0], [2.5], 1, 1, terminal=[True])
    assert train_q(ts, 0).params["q"][0, 0] == pytest.approx(2.5)


def test_order_invariance():
    rng = np.random.default_rng(3)
    nxt, fields, s, a = random_mdp(rng)
    ss, aa = np.r_[s, s], np.r_[a, a]
    r = np.r_[fields[0][s, a], fields[0][s, a] + 0.1]
    perm = rng.permutation(len(ss))
    spec = TrainSpec(max_epochs=7)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        m1 = train_q(tabular_ts(ss, aa, nxt[ss, aa], r, 6, 3), 0, spec)
        m2 = train_q(tabular_ts(ss[perm], aa[perm], nxt[ss, aa][perm], r[perm], 6, 3), 0, spec)
    assert np.array_equal(m1.params["q"], m2.params["q"])


@pytest.mark.parametrize("seed", range(5))
def test_fixed_policy_linearity(seed):
    rng = np.random.default_rng(seed)
    nxt, fields, s, a = random_mdp(rng)
    pi = rng.integers(3, size=6)
    phi = rng.dirichlet(np.ones(3))
    ts = tabular_ts(s, a, nxt[s, a], fields[:, s, a].T, 6, 3)
    boot = pi[nxt[s, a]]
    per = [train_q(ts, i, TrainSpec(gamma=GAMMA), next_actions=boot).params["q"] for i in range(3)]
    comb = train_q(ts, ts.signals @ phi, TrainSpec(gamma=GAMMA), next_actions=boot).params["q"]
    assert np.max(np.abs(comb - sum(w * q for w, q in zip(phi, per)))) <= 1e-6
    assert np.max(np.abs(per[0] - exact_policy_q(nxt, fields[0], pi, GAMMA))) <= 1e-6


def test_demonstrated_target_evaluates_logged_policy():
    rng = np.random.default_rng(11)
    nxt, fields, s, a = random_mdp(rng)
    pi = rng.integers(3, size=6)
    # log every pair once plus the policy action twice more, so the modal action at each state is pi(s)
    extra = np.arange(6)
    ss, aa = np.r_[s, extra, extra], np.r_[a, pi, pi]
    ts = tabular_ts(ss, aa, nxt[ss, aa], fields[0][ss, aa], 6, 3)
    q = train_q(ts, 0, TrainSpec(gamma=GAMMA, target="demonstrated")).params["q"]
    assert np.max(np.abs(q - exact_policy_q(nxt, fields[0], pi, GAMMA))) <= 1e-6


def test_feasibility_masks_the_bootstrap_max():
    # action 1 pays 10 but is infeasible in state 1; the target must ignore it
    ts = tabular_ts([0, 1, 1], [0, 0, 1], [1, 1, 1], [0.0, 1.0, 10.0], 2, 2)
    fam = FeasibleActionMap(StateKey(), {(0.0,): frozenset({0}), (1.0,): frozenset({0})}, 2)
    q = train_q(ts, 0, TrainSpec(gamma=0.5), fam=fam).params["q"]
    assert q[0, 0] == pytest.approx(0.5 * 2.0, abs=1e-9)


def test_invalid_gamma():
    with pytest.raises(InvalidGamma):
        TrainSpec(gamma=1.0)


def test_persistence_roundtrip(tmp_path):
    ts = chain_ts()
    m = train_q(ts, 0)
    save_model(m, tmp_path / "m.qmodel")
    back = load_model(tmp_path / "m.qmodel")
    assert np.array_equal(evaluate_batch(m, ts), evaluate_batch(back, ts))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        nm = train_q(ts, 0, TrainSpec(max_epochs=3), NeuralArchSpec(embedding_dim=3, fc1_width=4, fc2_width=5))
    save_model(nm, tmp_path / "n.qmodel")
    assert np.array_equal(evaluate_batch(nm, ts), evaluate_batch(load_model(tmp_path / "n.qmodel"), ts))
    assert back.report == m.report


def test_evaluate_single_state_masks_infeasible():
    ts = chain_ts()
    fam = FeasibleActionMap(StateKey(), {(float(x),): frozenset({1}) for x in range(5)}, 2)
    m = train_q(ts, 0)
    v = evaluate(m, ts.state_vector(0), fam)
    assert v[0] == -np.inf and np.isfinite(v[1])


def test_q_matrix_shapes_and_errors(tmp_path):
    ts = chain_ts()
    fam = FeasibleActionMap(StateKey(), {(float(x),): frozenset({0, 1}) for x in range(5)}, 2)
    m = train_q(ts, 0)
    qm = q_matrix([m], ts, fam)
    assert qm.values.shape == (len(ts), 1, 2)
    save_qmatrix(qm, tmp_path / "q.bin")
    assert np.array_equal(load_qmatrix(tmp_path / "q.bin").values, qm.values)
    with pytest.raises(ModelCountMismatch):
        q_matrix([m, m], ts, fam)
    narrow = FeasibleActionMap(StateKey(), {(float(x),): frozenset({1}) for x in range(5)}, 2)
    with pytest.raises(SchemaMismatch):
        q_matrix([m], ts, narrow)


def test_gradient_check_hidden():
    err, names = fd_gradient_error(NeuralArchSpec(embedding_dim=3, fc1_width=4, fc2_width=5))
    assert names == {"E0", "E1", "W1", "b1", "W2", "b2", "W3", "b3"}
    assert err <= 1e-4


def test_gradient_check_linear():
    err, names = fd_gradient_error(LINEAR_ARCH)
    assert names == {"E0", "E1", "W3", "b3"}
    assert err <= 1e-4


def test_neural_training_reduces_error():
    ts = chain_ts()
    spec = TrainSpec(gamma=GAMMA, max_epochs=400, batch_size=4, learning_rate=0.05, convergence_tol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        short = train_q(ts, 0, TrainSpec(gamma=GAMMA, max_epochs=1, batch_size=4, learning_rate=0.05),
                        NeuralArchSpec())
        long = train_q(ts, 0, spec, NeuralArchSpec())
    assert long.report.bellman_error < short.report.bellman_error
    assert long.report.epochs > 1


def test_target_params_lag_behind_online():
    ts = chain_ts()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        m = train_q(ts, 0, TrainSpec(max_epochs=5, batch_size=8, target_sync_interval=1000), NeuralArchSpec())
    # 5 steps, never synced: target equals the initial weights, online moved away
    assert not np.array_equal(m.target_params["W3"], m.params["W3"])
