import numpy as np
import pytest

from mmbm import irl, policy, qlearn, synth
from mmbm.errors import DimensionMismatch, EmptyTestSet, SingleClassDegenerate
from mmbm.irl import MotivationProfile
from mmbm.qlearn import TrainSpec
from mmbm.trajectory import build_feasible_actions, split_by_agent

from _mdp import tabular_ts


@pytest.fixture(scope="module")
def fitted():
    g = synth.default_gridspec()
    fam = synth.declared_action_map(g)
    ts = synth.generate_trajectories(g, synth.DEFAULT_PHI, episodes=300, noise=0.1, seed=0)
    models = [qlearn.train_q(ts, i, TrainSpec(target="demonstrated"), fam=fam) for i in range(3)]
    prof = irl.solve(qlearn.q_matrix(models, ts, fam))
    return g, fam, ts, models, prof


def profile(phi):
    return MotivationProfile(tuple(phi), tuple(f"f{i}" for i in range(len(phi))), 0.0)


@pytest.mark.parametrize("v", [[0.2, 0.3, 0.5], [3.0, -1.0, 0.0], [-5, -5, -5], [0.4, 0.4, 0.4, 0.4]])
def test_project_simplex(v):
    p = policy.project_simplex(np.array(v, float))
    assert p.min() >= 0 and p.sum() == pytest.approx(1.0)
    # no sampled simplex point is closer to v
    rng = np.random.default_rng(0)
    for q in rng.dirichlet(np.ones(len(v)), size=200):
        assert np.sum((p - v) ** 2) <= np.sum((q - v) ** 2) + 1e-12


def test_project_simplex_fixes_simplex_points():
    x = np.array([0.1, 0.6, 0.3])
    np.testing.assert_allclose(policy.project_simplex(x), x)


def test_disturb_zero_is_identity():
    p = profile((0.5, 0.3, 0.2))
    assert policy.disturb_profile(p, 0.0, seed=1) == p


def test_disturb_stays_on_simplex_and_moves():
    p = profile((0.5, 0.3, 0.2))
    d = policy.disturb_profile(p, 0.05, seed=1)
    assert d.phi.min() >= 0 and d.phi.sum() == pytest.approx(1.0)
    assert not np.allclose(d.phi, p.phi)
    assert policy.disturb_profile(p, 0.05, seed=1) == d
    with pytest.raises(ValueError):
        policy.disturb_profile(p, -0.1, seed=1)


def separable_ts(n=60, permute=False, seed=0):
    """Three states, each with its own action; ``permute`` shuffles the labels."""
    rng = np.random.default_rng(seed)
    s = rng.integers(3, size=n)
    a = rng.permutation(s) if permute else s
    return tabular_ts(s, a, s, np.zeros(n), 3, 3, agent=[f"p{i}" for i in range(n)])


def every_action(n_states=3):
    return build_feasible_actions(separable_ts(1), "declared",
                                  declared={(k,): [0, 1, 2] for k in range(n_states)})


def test_cloning_fits_separable_data():
    ts = separable_ts()
    rep = policy.evaluate_policies({"cloning": policy.cloning_train(ts, every_action())}, ts, every_action())
    assert rep.accuracy["cloning"] == 1.0


def test_cloning_on_shuffled_labels_is_near_chance():
    fam = every_action()
    pol = policy.cloning_train(separable_ts(600, permute=True, seed=1), fam)
    acc = policy.evaluate_policies({"c": pol}, separable_ts(600, seed=2), fam).accuracy["c"]
    assert acc < 0.45


def test_cloning_single_class_warns():
    ts = tabular_ts([0, 1, 2], [1, 1, 1], [0, 1, 2], np.zeros(3), 3, 2)
    fam = build_feasible_actions(ts).with_fallback("all")
    with pytest.warns(SingleClassDegenerate):
        pol = policy.cloning_train(ts, fam)
    assert pol.predict(ts).tolist() == [1, 1, 1]


def test_lmql_tabular_reaches_margin():
    # state 0 logs action 1 twice and action 0 once: the majority wins by the margin
    ts = tabular_ts([0, 0, 0, 1], [1, 1, 0, 2], [0, 0, 0, 1], np.zeros(4), 2, 3)
    fam = build_feasible_actions(ts, "declared", declared={(0,): [0, 1, 2], (1,): [0, 2]})
    pol = policy.lmql_train(ts, fam, policy.MarginSpec(0.8), TrainSpec(max_epochs=5000))
    s = pol.scorer(ts)
    assert pol.predict(ts).tolist() == [1, 1, 1, 2]
    assert s[3, 2] - s[3, 0] == pytest.approx(0.8, abs=1e-6)
    assert s[0, 1] > s[0, 0] and s[0, 1] > s[0, 2]


def test_margin_spec_validation():
    with pytest.raises(ValueError):
        policy.MarginSpec(-1.0)
    with pytest.raises(ValueError):
        policy.MarginSpec(mode="adaptive")


def test_chance_and_histogram():
    ts = tabular_ts([0, 0, 1], [0, 1, 0], [0, 0, 1], np.zeros(3), 2, 3)
    fam = build_feasible_actions(ts, "declared", declared={(0,): [0, 1], (1,): [0, 1, 2]})
    rep = policy.evaluate_policies({"c": policy.cloning_train(ts, fam)}, ts, fam)
    assert rep.chance == pytest.approx((0.5 + 0.5 + 1 / 3) / 3)
    assert rep.action_space_histogram == {2: 2, 3: 1}
    assert "chance" in rep.to_text()


def test_empty_test_set(fitted):
    _, fam, ts, models, prof = fitted
    with pytest.raises(EmptyTestSet):
        policy.evaluate_policies({"p": policy.scalarized_policy(models, prof, fam)}, ts.subset([]), fam)


def test_dimension_mismatch(fitted):
    _, fam, ts, models, _ = fitted
    with pytest.raises(DimensionMismatch):
        policy.scalarized_policy(models, (0.5, 0.5), fam)
    with pytest.raises(DimensionMismatch):
        policy.retrain_combined(ts, (1.0,), None, qlearn.TABULAR, fam)


def test_predictions_are_feasible(fitted):
    g, fam, ts, models, prof = fitted
    pols = [policy.scalarized_policy(models, prof, fam), policy.single_motivation_policy(models, 2, fam),
            policy.cloning_train(ts, fam), policy.lmql_train(ts, fam)]
    mask = fam.mask(ts)
    for p in pols:
        assert mask[np.arange(len(ts)), p.predict(ts)].all(), p.source


def test_scalarized_matches_oracle_on_untied_states(fitted):
    g, fam, ts, models, prof = fitted
    sol = synth.value_iteration(g, synth.DEFAULT_PHI)
    cells = synth.cells_of(ts, g.width)
    untied = ~sol.tie_mask[cells]
    pred = policy.scalarized_policy(models, prof, fam).predict(ts)
    match = (pred == sol.optimal_policy[cells])[untied].mean()
    assert match >= 0.95


def test_export_fields(fitted):
    _, fam, ts, models, prof = fitted
    pol = policy.scalarized_policy(models, prof, fam)
    assert pol.phi == prof.weights and pol.source == "scalarized" and len(pol.models) == 3


def test_duplicate_sources_are_renamed(fitted):
    _, fam, ts, models, prof = fitted
    tr, te, _ = split_by_agent(ts, 0.8, seed=0)
    p = policy.scalarized_policy(models, prof, fam)
    rep = policy.evaluate_policies([p, p], te, fam)
    assert list(rep.accuracy) == ["scalarized", "scalarized_2"]
