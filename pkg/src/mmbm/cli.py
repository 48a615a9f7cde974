"""``mmbm`` command line: one subcommand per pipeline stage.

Every stage reads its inputs from ``--in`` (default: the output directory)
and writes only into ``--out``. Outputs carry no timestamps, so a rerun with
the same config and seed reproduces them byte for byte; each stage lists its
files with SHA-256 digests in ``manifest.<stage>.json``.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import __version__, config as config_mod
from .errors import (ConfigError, DataError, EmptyCohort, MMBMError, ModelCountMismatch, NonConvergence,
                     SolverError)
from .irl import MotivationProfile, build_lp, sample_indices, solve_lp, solve_windows, trends_table
from .motive import DEFAULT_ZONE_TAGS, REGISTRY, SignalConfig, compute_signals, fit_signals, register_extractor
from .policy import (MarginSpec, cloning_train, disturb_profile, evaluate_policies, lmql_train,
                     retrain_combined, scalarized_policy, single_motivation_policy)
from .qlearn import (LINEAR_ARCH, TABULAR, NeuralArchSpec, QModel, TrainSpec, load_model, load_qmatrix,
                     q_matrix, save_model, save_qmatrix, train_q)
from .synth import (DEFAULT_MAGNITUDES, DEFAULT_REGIONS, GridSpec, declared_action_map, generate_trajectories,
                    region_gridspec, regime_gridspec, value_iteration)
from .trajectory import (FeasibleActionMap, IngestSchema, StateKey, TrajectorySet, build_feasible_actions,
                         cohort_mask, ingest_log, load_trajectories, save_trajectories, split_by_agent)

log = logging.getLogger("mmbm")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4
EXIT_SOLVER = 5
EXIT_BUSY = 6

LOCK_NAME = ".mmbm.lock"
TRAJECTORIES = "trajectories.mmbm"
SIGNALS = "signals.mmbm"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class Workspace:
    """Input and output directories of one command, plus the files it wrote."""

    def __init__(self, out: Path, inp: Path):
        self.out = out
        self.inp = inp
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def has(self, name: str) -> bool:
        return (self.inp / name).exists()

    def input(self, name: str) -> Path:
        p = self.inp / name
        if not p.exists():
            raise FileNotFoundError(f"missing input {p}")
        self.inputs[name] = _sha256(p)
        return p

    def external(self, path: str) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing input {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def target(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.target(name)
        p.write_text(text, encoding="utf-8")
        return p

    def manifest(self, command: str, cfg: dict[str, Any], seed: int, extra: dict[str, Any] | None = None) -> None:
        body = {
            "command": command, "version": __version__, "seed": seed, "config_digest": config_mod.digest(cfg),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {n: _sha256(self.out / n) for n in sorted(set(self.outputs))},
        }
        if extra:
            body.update(extra)
        (self.out / f"manifest.{command}.json").write_text(_dumps(body), encoding="utf-8")


class LockBusy(MMBMError):
    pass


@contextlib.contextmanager
def output_lock(out: Path) -> Iterator[None]:
    """Exclusive lockfile in ``out``; a second writer fails at once instead of waiting."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
    except FileExistsError:
        raise LockBusy(f"{path} exists; another mmbm process is writing to {out}") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def build_grid(cfg: dict[str, Any]) -> tuple[GridSpec, tuple[float, ...] | None, list[list[int]]]:
    """Grid, fixed phi (None when a schedule drives it) and reward regions from ``[synth]``."""
    s = cfg["synth"]
    if s["preset"] == "regime":
        g = regime_gridspec(s["episodes"], s["gamma"])
        return g, None, [[0, 1, 8, 9], [54, 55, 62, 63]]
    if s["preset"] == "default":
        regions = [list(r) for r in DEFAULT_REGIONS]
        mags: list[float] = list(DEFAULT_MAGNITUDES)
        width = height = 8
    else:
        regions = [list(r) for r in s["regions"]]
        if not regions:
            raise ConfigError("synth.regions", "custom preset needs at least one region")
        mags = [float(m) for m in s["magnitudes"]] or [1.0] * len(regions)
        if len(mags) != len(regions):
            raise ConfigError("synth.magnitudes", f"{len(mags)} magnitudes for {len(regions)} regions")
        width, height = s["width"], s["height"]
        for r in regions:
            if any(not 0 <= c < width * height for c in r):
                raise ConfigError("synth.regions", f"cell index out of range in {r}")
    sched = [(int(e["t"]), tuple(float(x) for x in e["phi"])) for e in s["schedule"]]
    try:
        g = region_gridspec(width, height, regions, mags, field_seed=s["field_seed"], gamma=s["gamma"],
                            episode_length=s["episode_length"], regime_schedule=sched)
    except ValueError as exc:
        raise ConfigError("synth", str(exc)) from None
    phi = None if sched else tuple(float(x) for x in s["phi"])
    if phi is not None and len(phi) != g.n_signals:
        raise ConfigError("synth.phi", f"{len(phi)} weights for {g.n_signals} reward regions")
    return g, phi, regions


def load_raw(cfg: dict[str, Any], ws: Workspace) -> TrajectorySet:
    if cfg["data"]["source"] == "file":
        return load_trajectories(ws.external(cfg["data"]["trajectories"]))
    return load_trajectories(ws.input(TRAJECTORIES))


def split_sets(ws: Workspace, ts: TrajectorySet) -> tuple[TrajectorySet, TrajectorySet, dict[str, Any]]:
    info = json.loads(ws.input("split.json").read_text())
    test_ids = set(info["test_agent_ids"])
    in_test = np.array([a in test_ids for a in ts.agent.astype(str)], dtype=bool)
    summary = {k: v for k, v in info.items() if k != "test_agent_ids"}
    return ts.subset(~in_test), ts.subset(in_test), summary


def default_key(cfg: dict[str, Any], ts: TrajectorySet) -> StateKey:
    a = cfg["actions"]
    if a["features"]:
        return StateKey(tuple(a["features"]), {k: float(v) for k, v in a["brackets"].items()})
    action_col = ts.meta.get("action_column")
    if action_col and ts.schema.has(action_col):
        feats = [action_col]
        brackets = {k: float(v) for k, v in a["brackets"].items()}
        if "level" in ts.schema.numeric:
            feats.append("level")
            brackets.setdefault("level", 10.0)
        return StateKey(tuple(feats), brackets)
    return StateKey(None, {k: float(v) for k, v in a["brackets"].items()})


def resolve_actions(cfg: dict[str, Any], ws: Workspace, ts: TrajectorySet, train: TrajectorySet) -> FeasibleActionMap:
    mode = cfg["actions"]["mode"]
    fallback = cfg["actions"]["fallback"]
    if mode == "auto":
        mode = "declared" if ws.has("actions.json") else "inferred"
    if mode == "declared":
        fam = FeasibleActionMap.from_dict(json.loads(ws.input("actions.json").read_text()))
        return build_feasible_actions(ts, "declared", declared=fam.with_fallback(fallback))
    return build_feasible_actions(train, "inferred", key=default_key(cfg, ts), fallback=fallback)


def train_spec(cfg: dict[str, Any], seed: int, target: str | None = None) -> TrainSpec:
    t = cfg["train"]
    return TrainSpec(
        learning_rate=t["learning_rate"] or None, gamma=t["gamma"], batch_size=t["batch_size"],
        max_epochs=t["max_epochs"] or None, target_sync_interval=t["target_sync_interval"],
        convergence_tol=t["convergence_tol"] or None, seed=seed, target=target or t["target"],
    )


def neural_arch(cfg: dict[str, Any]) -> NeuralArchSpec:
    n = cfg["neural"]
    return NeuralArchSpec(n["embedding_dim"], n["fc1_width"], n["fc2_width"])


def backend_arch(cfg: dict[str, Any], backend: str) -> NeuralArchSpec | str:
    return TABULAR if backend == TABULAR else neural_arch(cfg)


def load_models(ws: Workspace) -> list[QModel]:
    index = json.loads(ws.input("train_report.json").read_text())
    return [load_model(ws.input(entry["file"])) for entry in index["models"]]


def load_fam(ws: Workspace) -> FeasibleActionMap:
    return FeasibleActionMap.from_dict(json.loads(ws.input("feasible_actions.json").read_text()))


def _sample(ts: TrajectorySet, size: int, seed: int) -> np.ndarray:
    return sample_indices(len(ts), size or None, seed)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict[str, Any], ws: Workspace, seed: int) -> int:
    s = cfg["synth"]
    g, phi, regions = build_grid(cfg)
    ts = generate_trajectories(g, phi, episodes=s["episodes"], noise=s["noise"], seed=seed,
                               explore_start=s["explore_start"])
    save_trajectories(ts, ws.target(TRAJECTORIES))
    ws.write_text("actions.json", _dumps(declared_action_map(g).to_dict()))
    ref = phi if phi is not None else g.regime_schedule[0][1]
    oracle = value_iteration(g, ref)
    info = {
        "phi_true": list(phi) if phi is not None else None,
        "schedule": [{"t": t, "phi": list(p)} for t, p in g.regime_schedule] if phi is None else [],
        "signal_names": list(g.signal_names), "regions": regions,
        "grid": {"width": g.width, "height": g.height, "gamma": g.gamma, "episode_length": g.episode_length},
        "episodes": s["episodes"], "noise": s["noise"], "explore_start": s["explore_start"],
        "transitions": len(ts), "oracle_policy": [int(a) for a in oracle.optimal_policy],
    }
    ws.write_text("synth.json", _dumps(info))
    ws.manifest("synth", cfg, seed, {"phi_true": info["phi_true"]})
    log.info("synth: %d transitions, phi_true=%s", len(ts), info["phi_true"])
    return EXIT_OK


def cmd_ingest(cfg: dict[str, Any], ws: Workspace, seed: int) -> int:
    i = cfg["ingest"]
    schema = IngestSchema(
        agent_id=i["agent_id"], timestamp=i["timestamp"], action=i["action"],
        categorical={k: (None if v == "auto" else list(v)) for k, v in i["categorical"].items()},
        numeric=list(i["numeric"]), time_format=i["time_format"] or None,
        logging_interval=i["logging_interval"], max_gap=i["max_gap"] or None, delimiter=i["delimiter"],
    )
    ts, report = ingest_log(ws.external(i["path"]), schema)
    ts = ts.replace(meta={**ts.meta, "action_column": i["action"]})
    save_trajectories(ts, ws.target(TRAJECTORIES))
    ws.write_text("ingest_report.json", _dumps(report.to_dict()))
    ws.manifest("ingest", cfg, seed)
    if report.malformed:
        log.warning("ingest: dropped %d malformed rows (first: %s)", len(report.malformed), report.malformed[0])
    log.info("ingest: %d transitions from %d agents", len(ts), report.agents)
    return EXIT_OK


def _signal_config(cfg: dict[str, Any]) -> tuple[SignalConfig, Any]:
    s = cfg["signals"]
    registry = REGISTRY.copy()
    for name, definition in s["extractors"].items():
        if not isinstance(definition, dict):
            raise ConfigError(f"signals.extractors.{name}", "expected a table")
        try:
            register_extractor(name, definition, registry)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"signals.extractors.{name}", str(exc)) from None
    for n in s["names"]:
        if n not in registry:
            raise ConfigError("signals.names", f"no extractor named {n!r}; known: {registry.names()}")
    tags = dict(DEFAULT_ZONE_TAGS)
    tags.update({z: tuple(t) for z, t in s["zone_tags"].items()})
    overrides = {n: {"window_length": s["window_length"]} for n in s["names"] if n not in s["extractors"]}
    scfg = SignalConfig(tuple(s["names"]), normalization=dict(s["normalization"]), zone_tags=tags,
                        guildless=tuple(s["guildless"]), overrides=overrides)
    return scfg, registry


def cmd_signals(cfg: dict[str, Any], ws: Workspace, seed: int) -> int:
    ts = load_raw(cfg, ws)
    train, test, info = split_by_agent(ts, cfg["split"]["train_fraction"], seed)
    info["test_agent_ids"] = sorted(set(test.agent.astype(str).tolist()))
    if cfg["signals"]["names"]:
        scfg, registry = _signal_config(cfg)
        fit = fit_signals(train, scfg, registry)
        out = compute_signals(ts, scfg, fit, registry)
        if fit["degenerate"]:
            log.warning("signals: %s are zero on the training split", fit["degenerate"])
    else:
        if ts.n_signals == 0:
            raise ConfigError("signals.names", "the data carries no signal columns; list extractors to compute")
        out = ts
        fit = {"passthrough": list(ts.signal_names)}
    save_trajectories(out, ws.target(SIGNALS))
    ws.write_text("split.json", _dumps(info))
    ws.write_text("signal_fit.json", _dumps(fit))
    ws.manifest("signals", cfg, seed)
    log.info("signals: %s on %d transitions (%d train / %d test)", list(out.signal_names), len(out),
             info["train_transitions"], info["test_transitions"])
    return EXIT_OK


def cmd_train_q(cfg: dict[str, Any], ws: Workspace, seed: int) -> int:
    ts = load_trajectories(ws.input(SIGNALS))
    names = cfg["signals"]["names"]
    if names and len(names) != ts.n_signals:
        raise ModelCountMismatch(f"config lists {len(names)} signals, {SIGNALS} has {ts.n_signals}")
    if ts.n_signals == 0:
        raise DataError(f"{SIGNALS} has no signal columns")
    train, _, _ = split_sets(ws, ts)
    fam = resolve_actions(cfg, ws, ts, train)
    kf = cfg["train"]["key_features"]
    key = StateKey(tuple(kf)) if kf else fam.key
    spec = train_spec(cfg, seed)
    arch = backend_arch(cfg, cfg["train"]["backend"])
    models, entries = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        for i, name in enumerate(ts.signal_names):
            m = train_q(train, i, spec, arch, fam=fam, key=key)
            fname = f"models/q{i:02d}_{name}.qmodel"
            save_model(m, ws.target(fname))
            models.append(m)
            entries.append({"file": fname, **(m.report.to_dict() if m.report else {})})
            log.info("train-q: %s epochs=%d bellman_error=%.3g converged=%s", name, entries[-1]["epochs"],
                     entries[-1]["bellman_error"], entries[-1]["converged"])
    qm = q_matrix(models, train, fam)
    save_qmatrix(qm, ws.target("qmatrix.bin"))
    ws.write_text("feasible_actions.json", _dumps(fam.to_dict()))
    spec_d = {k: getattr(spec, k) for k in ("learning_rate", "gamma", "batch_size", "max_epochs",
                                             "target_sync_interval", "convergence_tol", "seed", "target")}
    report = {"backend": cfg["train"]["backend"], "spec": spec_d, "models": entries,
              "arch": None if isinstance(arch, str) else arch.to_dict(), "transitions": len(train)}
    ws.write_text("train_report.json", _dumps(report))
    ws.manifest("train-q", cfg, seed)
    stalled = [e["signal"] for e in entries if not e["converged"]]
    if stalled:
        log.error("train-q: no convergence for %s", stalled)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _cohort_label(expr: str) -> str:
    return expr.strip() or "all"


def cmd_solve(cfg: dict[str, Any], ws: Workspace, seed: int, cohorts: Sequence[str] = ()) -> int:
    ts = load_trajectories(ws.input(SIGNALS))
    train, _, _ = split_sets(ws, ts)
    qm = load_qmatrix(ws.input("qmatrix.bin"))
    models = load_models(ws)
    if len(qm) != len(train) or not np.array_equal(qm.taken, train.action):
        raise DataError("qmatrix.bin does not match the training split; rerun train-q")
    exprs = list(cohorts) or list(cfg["solve"]["cohorts"])
    size = cfg["lp"]["sample_size"]
    lp_kw = {"dedupe": cfg["lp"]["dedupe"], "tie_break": cfg["lp"]["tie_break"]}
    pick = _sample(train, size, seed)
    profile = solve_lp(build_lp(qm.subset(pick)), **lp_kw)
    ws.write_text("profile.txt", profile.to_text())
    rows = [("all", profile)]
    for k, expr in enumerate(exprs):
        try:
            mask = cohort_mask(train, expr)
        except ValueError as exc:
            raise ConfigError("--cohort", str(exc)) from None
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            raise EmptyCohort(f"cohort {expr!r} matches no training transition")
        idx = idx[_sample(train.subset(idx), size, seed)]
        p = solve_lp(build_lp(qm.subset(idx)), **lp_kw)
        ws.write_text(f"profiles/cohort{k:02d}.txt", f"cohort\t{_cohort_label(expr)}\n" + p.to_text())
        rows.append((_cohort_label(expr), p))
    lines = ["cohort\tsignal\tweight\ttransitions"]
    for label, p in rows:
        for name, w in zip(p.signal_names, p.weights):
            lines.append(f"{label}\t{name}\t{w:.12g}\t{p.transition_count}")
    ws.write_text("spider.tsv", "\n".join(lines) + "\n")
    ws.manifest("solve", cfg, seed, {"n_models": len(models)})
    log.info("solve: phi=%s objective=%.6g", [round(w, 4) for w in profile.weights], profile.objective)
    return EXIT_OK


def cmd_predict(cfg: dict[str, Any], ws: Workspace, seed: int) -> int:
    pc = cfg["predict"]
    ts = load_trajectories(ws.input(SIGNALS))
    train, test, split = split_sets(ws, ts)
    if pc["in_sample"]:
        test = train
        split = {**split, "in_sample": True}
    fam = load_fam(ws)
    models = load_models(ws)
    profile = MotivationProfile.from_text(ws.input("profile.txt").read_text())
    spec = train_spec(cfg, seed, target="max")
    builders: dict[str, Callable[[], Any]] = {
        "pi_star": lambda: scalarized_policy(models, profile, fam, source="pi_star"),
        "retrained": lambda: retrain_combined(train, profile, spec,
                                              backend_arch(cfg, pc["retrain_backend"]), fam),
        "disturbed": lambda: scalarized_policy(models, disturb_profile(profile, pc["sigma"], seed), fam,
                                               source="disturbed"),
        "single": lambda: single_motivation_policy(models, pc["single_index"], fam),
        "lmql": lambda: lmql_train(train, fam, MarginSpec(pc["margin"], pc["margin_mode"]), TrainSpec(seed=seed),
                                   backend_arch(cfg, pc["lmql_backend"])),
        "cloning": lambda: cloning_train(train, fam, l2=pc["cloning_l2"], epochs=pc["cloning_epochs"], seed=seed),
        "linear_q": lambda: scalarized_policy(
            [train_q(train, i, TrainSpec(seed=seed, gamma=spec.gamma, target=cfg["train"]["target"]), LINEAR_ARCH,
                     fam=fam, key=fam.key) for i in range(train.n_signals)], profile, fam, source="linear_q"),
    }
    if not 0 <= pc["single_index"] < len(models):
        raise ConfigError("predict.single_index", f"must be < {len(models)}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        policies = {name: builders[name]() for name in pc["policies"]}
    report = evaluate_policies(policies, test, fam, split)
    ws.write_text("eval_report.txt", report.to_text())
    ws.write_text("eval_report.json", report.to_json())
    ws.manifest("predict", cfg, seed)
    log.info("predict: %s", {k: round(v, 4) for k, v in report.accuracy.items()})
    return EXIT_OK


def cmd_trends(cfg: dict[str, Any], ws: Workspace, seed: int) -> int:
    tc = cfg["trends"]
    ts = load_trajectories(ws.input(SIGNALS))
    train, _, _ = split_sets(ws, ts)
    fam = load_fam(ws)
    models = load_models(ws)
    t0, t1 = int(ts.timestamp.min()), int(ts.timestamp.max()) + 1
    width = tc["window_width"] or max(1, -(-(t1 - t0) // tc["windows"]))
    stride = tc["stride"] or width
    profiles = solve_windows(train, models, fam, width, stride, tc["sample_size"] or None, seed,
                             min_count=tc["min_count"], t_start=t0, t_end=t1)
    ws.write_text("trends.tsv", trends_table(profiles))
    ws.manifest("trends", cfg, seed, {"window_width": width, "stride": stride})
    log.info("trends: %d windows (%d skipped)", len(profiles), sum(p.skipped for p in profiles))
    return EXIT_OK


def cmd_pipeline(cfg: dict[str, Any], ws_for: Callable[[], Workspace], seed: int, cohorts: Sequence[str]) -> int:
    stages: list[tuple[str, Callable[..., int]]] = []
    if cfg["data"]["source"] == "synth":
        stages.append(("synth", cmd_synth))
    elif cfg["data"]["source"] == "log":
        stages.append(("ingest", cmd_ingest))
    stages += [("signals", cmd_signals), ("train-q", cmd_train_q), ("solve", cmd_solve),
               ("predict", cmd_predict), ("trends", cmd_trends)]
    worst = EXIT_OK
    for name, fn in stages:
        log.info("pipeline: %s", name)
        code = fn(cfg, ws_for(), seed, cohorts) if fn is cmd_solve else fn(cfg, ws_for(), seed)
        if code == EXIT_CONVERGENCE:
            worst = code
        elif code != EXIT_OK:
            return code
    return worst


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "signals": cmd_signals, "train-q": cmd_train_q,
    "solve": cmd_solve, "predict": cmd_predict, "trends": cmd_trends,
}

HELP = {
    "synth": "generate gridworld trajectories with known motivation weights",
    "ingest": "translate a snapshot CSV log into the canonical trajectory file",
    "signals": "split by agent and compute per-motivation reward signals",
    "train-q": "fit one Q model per signal and the stacked Q matrix",
    "solve": "recover motivation weights with the slack LP, per cohort",
    "predict": "compare behaviour prediction policies on the held-out split",
    "trends": "solve the LP per time window",
    "pipeline": "run every stage in order",
    "config": "print the reference configuration",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"TOML config file (default: ${config_mod.ENV_VAR}, else built-in defaults)")
    common.add_argument("--out", default="mmbm-out", help="output directory (default: %(default)s)")
    common.add_argument("--in", dest="inp", help="directory holding the stage inputs (default: --out)")
    common.add_argument("--seed", type=int, help="global seed, overrides run.seed")
    common.add_argument("--cohort", action="append", default=[], metavar="FILTER",
                        help="cohort filter for solve, e.g. 'level>=50'; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p = argparse.ArgumentParser(prog="mmbm", description="Multi-motivation behaviour modelling pipeline.")
    p.add_argument("--version", action="version", version=f"mmbm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "pipeline"]:
        sub.add_parser(name, parents=[common], help=HELP[name])
    c = sub.add_parser("config", help=HELP["config"])
    c.add_argument("--write", metavar="PATH", help="write to PATH instead of stdout")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_VALIDATION
    if isinstance(exc, SolverError):
        return EXIT_SOLVER
    if isinstance(exc, (DataError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_VALIDATION


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        text = config_mod.reference_config()
        if args.write:
            Path(args.write).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    try:
        cfg = config_mod.load(args.config)
    except ConfigError as exc:
        print(f"mmbm: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    level = logging.DEBUG if args.verbose else getattr(logging, cfg["run"]["log_level"])
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    seed = cfg["run"]["seed"] if args.seed is None else args.seed
    out = Path(args.out)
    inp = Path(args.inp) if args.inp else out
    try:
        with output_lock(out):
            if args.command == "pipeline":
                return cmd_pipeline(cfg, lambda: Workspace(out, inp), seed, args.cohort)
            ws = Workspace(out, inp)
            if args.command == "solve":
                return cmd_solve(cfg, ws, seed, args.cohort)
            return COMMANDS[args.command](cfg, ws, seed)
    except LockBusy as exc:
        print(f"mmbm: {exc}", file=sys.stderr)
        return EXIT_BUSY
    except (MMBMError, FileNotFoundError, ValueError) as exc:
        code = _exit_code(exc)
        print(f"mmbm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
