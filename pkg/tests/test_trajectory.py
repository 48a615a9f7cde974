import numpy as np
import pytest

from mmbm.errors import EmptyDataset, SchemaMismatch, UnknownFeature, UnknownStateKey
from mmbm.trajectory import (CategoricalFeature, FeatureSchema, IngestSchema, StateKey, TrajectorySet,
                             build_feasible_actions, cohort_mask, ingest_log, load_trajectories, parse_cohort,
                             save_trajectories, split_by_agent, validate_actions, window)

from _mdp import tabular_ts

LOG = """avatar,time,zone,level,class,guild
a,0,town,1,Warrior,g1
a,600,forest,1,Warrior,g1
a,1200,forest,2,Warrior,g1
a,1800,town,2,Warrior,
a,9000,arena,3,Warrior,
a,9600,town,3,Warrior,
b,0,town,10,Mage,g2
b,600,arena,11,Mage,g2
b,1200,town,12,Mage,g2
"""


def write_log(tmp_path, text=LOG, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def log_schema(**kw):
    base = dict(agent_id="avatar", timestamp="time", action="zone", categorical={"class": None, "guild": None},
                numeric=["level"])
    base.update(kw)
    return IngestSchema(**base)


def mixed_ts():
    schema = FeatureSchema(categorical=(CategoricalFeature("zone", ("a", "b", "c")),), numeric=("level",))
    T = 6
    return TrajectorySet(
        schema, cat=np.array([[0], [1], [2], [0], [1], [2]]), num=np.array([[1.0], [5], [12], [15], [22], [np.inf]]),
        timestamp=np.arange(T) * 10, action=np.array([1, 2, 0, 1, 2, 0]), agent=["x", "x", "x", "y", "y", "z"],
        episode=np.array([0, 0, 0, 1, 1, 2]), next_cat=np.array([[1], [2], [0], [1], [2], [-1]]),
        next_num=np.array([[5.0], [12], [13], [22], [23], [np.nan]]), next_timestamp=np.arange(T) * 10 + 10,
        terminal=np.array([False] * 5 + [True]), action_names=("a", "b", "c"),
        signals=np.array([[0.5, -1.0], [0, 0], [1e-300, 2], [3, 4], [5, 6], [np.nan, 1]]),
        signal_names=("f1", "f2"), meta={"source": "unit"},
    )


def test_save_load_round_trip(tmp_path):
    ts = mixed_ts()
    save_trajectories(ts, tmp_path / "t.mmbm")
    back = load_trajectories(tmp_path / "t.mmbm")
    assert back == ts
    assert np.isinf(back.num[5, 0]) and np.isnan(back.signals[5, 0])


def test_round_trip_empty(tmp_path):
    ts = mixed_ts().subset(np.zeros(6, bool))
    save_trajectories(ts, tmp_path / "e.mmbm")
    assert load_trajectories(tmp_path / "e.mmbm") == ts


def test_load_rejects_truncated_file(tmp_path):
    save_trajectories(mixed_ts(), tmp_path / "t.mmbm")
    lines = (tmp_path / "t.mmbm").read_text().splitlines()
    (tmp_path / "t.mmbm").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(SchemaMismatch):
        load_trajectories(tmp_path / "t.mmbm")


def test_columns_are_read_only():
    ts = mixed_ts()
    with pytest.raises(ValueError):
        ts.action[0] = 2


def test_ingest_builds_transitions(tmp_path):
    ts, rep = ingest_log(write_log(tmp_path), log_schema())
    # a: 4 rows then a 7200 s gap, then 2 rows; b: 3 rows
    assert rep.episodes == 3 and rep.agents == 2
    assert len(ts) == 3 + 1 + 2
    assert rep.transitions == len(ts)
    zone = ts.schema.categorical[ts.schema.categorical_index("zone")].vocabulary
    assert zone == ("arena", "forest", "town")
    a_rows = np.flatnonzero(ts.agent.astype(str) == "a")
    assert [ts.action_names[k] for k in ts.action[a_rows]] == ["forest", "forest", "town", "town"]
    # the next state is the successor row; no transition leaves the last row of an episode
    assert list(ts.next_timestamp[a_rows]) == [600, 1200, 1800, 9600]
    assert not ts.terminal.any()


def test_ingest_reports_malformed_rows(tmp_path):
    bad = LOG + "c,0,town,abc,Warrior,g1\nc,600,town,4\n,1200,town,5,Mage,g1\nc,1.5,town,5,Mage,g1\n"
    ts, rep = ingest_log(write_log(tmp_path, bad), log_schema())
    assert rep.rows_read == 13 and rep.rows_valid == 9
    assert sorted(e.line for e in rep.malformed) == [11, 12, 13, 14]
    assert "level" in rep.malformed[0].reason
    assert len(ts) == 6


def test_ingest_declared_vocabulary_rejects_unknown_label(tmp_path):
    ts, rep = ingest_log(write_log(tmp_path), log_schema(categorical={"class": ["Warrior"], "guild": None}))
    assert len(rep.malformed) == 3
    assert set(ts.agent.astype(str)) == {"a"}


def test_ingest_missing_column(tmp_path):
    with pytest.raises(SchemaMismatch, match="race"):
        ingest_log(write_log(tmp_path), log_schema(numeric=["level", "race"]))


def test_ingest_no_pairs(tmp_path):
    with pytest.raises(EmptyDataset):
        ingest_log(write_log(tmp_path, "avatar,time,zone,level,class,guild\na,0,town,1,W,g\n"), log_schema())


def test_ingest_time_format(tmp_path):
    text = "avatar,time,zone\na,2008-01-01 00:00:00,x\na,2008-01-01 00:10:00,y\n"
    ts, _ = ingest_log(write_log(tmp_path, text),
                       IngestSchema("avatar", "time", "zone", time_format="%Y-%m-%d %H:%M:%S"))
    assert ts.next_timestamp[0] - ts.timestamp[0] == 600


def test_state_key_brackets():
    ts = mixed_ts()
    key = StateKey(("level",), {"level": 10})
    assert key.columns(ts)[:5, 0].tolist() == [0, 0, 1, 1, 2]
    assert key.of(ts[1].state) == (0.0,)


def test_state_key_unknown_feature():
    with pytest.raises(UnknownFeature):
        StateKey(("race",)).columns(mixed_ts())


def test_inferred_actions_cover_logged_actions():
    ts = tabular_ts([0, 0, 1, 1, 0], [0, 2, 1, 1, 0], [1, 1, 0, 0, 1], np.zeros(5), 2, 3)
    fam = build_feasible_actions(ts)
    assert fam.lookup((0.0,)) == {0, 2} and fam.lookup((1.0,)) == {1}
    assert len(validate_actions(ts, fam)) == 0
    with pytest.raises(UnknownStateKey):
        fam.lookup((7.0,))
    assert fam.with_fallback("all").lookup((7.0,)) == {0, 1, 2}


def test_declared_actions_flag_violations():
    ts = tabular_ts([0, 1], [1, 0], [1, 0], np.zeros(2), 2, 2)
    fam = build_feasible_actions(ts, "declared", declared={(0,): [0], (1,): [0, 1]})
    assert validate_actions(ts, fam).tolist() == [0]
    with pytest.raises(UnknownStateKey):
        build_feasible_actions(ts, "declared", declared={(0,): [0, 1]})


def test_mask_terminal_next_state_is_empty():
    ts = tabular_ts([0, 1], [1, 0], [1, 0], np.zeros(2), 2, 2, terminal=[False, True])
    m = build_feasible_actions(ts, "declared", declared={(0,): [0, 1], (1,): [0]}).mask(ts, "next")
    assert m.tolist() == [[True, False], [False, False]]


def test_split_by_agent_is_disjoint_and_seeded():
    n = 50
    ts = tabular_ts(np.zeros(n * 3), np.zeros(n * 3), np.zeros(n * 3), np.zeros(n * 3), 1, 1,
                    agent=[f"p{i // 3}" for i in range(n * 3)])
    tr, te, info = split_by_agent(ts, 0.8, seed=3)
    assert set(tr.agent.astype(str)).isdisjoint(te.agent.astype(str))
    assert info["train_agents"] == 40 and len(tr) + len(te) == len(ts)
    tr2, _, _ = split_by_agent(ts, 0.8, seed=3)
    assert tr2 == tr
    tr3, _, _ = split_by_agent(ts, 0.8, seed=4)
    assert tr3 != tr


def test_windows_partition():
    ts = mixed_ts()
    parts = [window(ts, a, a + 20) for a in (0, 20, 40)]
    assert sum(len(p) for p in parts) == len(ts)
    assert len(window(ts, 15, 15)) == 0
    with pytest.raises(ValueError):
        window(ts, 5, 0)


def test_parse_cohort():
    assert parse_cohort("all") == []
    assert parse_cohort("level>=50, class=Warrior") == [("level", ">=", "50"), ("class", "==", "Warrior")]
    with pytest.raises(ValueError):
        parse_cohort("level")


def test_complementary_cohorts_partition():
    ts = mixed_ts()
    lo, hi = cohort_mask(ts, "level<=12"), cohort_mask(ts, "level>12")
    assert not (lo & hi).any() and (lo | hi).all()
    assert cohort_mask(ts, "zone==b").tolist() == [False, True, False, False, True, False]
    assert cohort_mask(ts, "zone!=b,level>1").tolist() == [False, False, True, True, False, True]


def test_cohort_on_absent_feature():
    with pytest.raises(UnknownFeature):
        cohort_mask(mixed_ts(), "race==orc")
