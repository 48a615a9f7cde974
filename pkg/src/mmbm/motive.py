"""Per-motivation reward signals computed from trajectories.

Signals are evaluated per agent on time-ordered transitions and depend only on
that agent's rows up to and including the current transition. The few
dataset-level constants (average levelling speed, normalisation scales) are
fitted once on training data and then frozen, so the test split never leaks
into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DuplicateName, EmptyDataset, MissingFeature, UnknownFeature
from .trajectory import TrajectorySet

DAY = 86_400

# battlegrounds and arenas of the logged era; dungeons, raids and
# faction-controlled zones vary by dataset and come from config
DEFAULT_ZONE_TAGS: dict[str, tuple[str, ...]] = {
    name: ("competition", "teamwork")
    for name in ("Warsong Gulch", "Arathi Basin", "Alterac Valley", "Eye of the Storm",
                 "Strand of the Ancients", "Nagrand Arena", "Blade's Edge Arena",
                 "Ruins of Lordaeron", "Dalaran Arena", "Ring of Valor")
}


@dataclass(frozen=True)
class SignalExtractor:
    """A named signal definition.

    ``kind`` selects the computation; ``features`` maps the roles a kind
    needs (e.g. ``level``, ``zone``) to column names; ``params`` holds real
    constants. Kind ``"python"`` calls ``fn(view, fit)`` for custom signals.
    """

    name: str
    kind: str
    features: Mapping[str, str] = field(default_factory=dict)
    window_length: int = 6
    params: Mapping[str, float] = field(default_factory=dict)
    fn: Callable[["AgentView", Mapping[str, Any]], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}; known: {sorted(_KINDS)}")
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if self.kind == "python" and self.fn is None:
            raise ValueError("python extractors need fn")

    def required(self) -> list[str]:
        needed = _KINDS[self.kind]
        missing = [r for r in needed if r not in self.features]
        if missing:
            raise ValueError(f"extractor {self.name!r} lacks feature roles {missing}")
        return [self.features[r] for r in needed] + [v for k, v in self.features.items() if k not in needed]


# role names each kind needs
_KINDS: dict[str, tuple[str, ...]] = {
    "advancement": ("level",),
    "competition": ("zone",),
    "relationship": ("guild",),
    "teamwork": ("zone",),
    "escapism": (),
    "feature": ("value",),
    "signal": ("value",),
    "python": (),
}


class ExtractorRegistry:
    def __init__(self, extractors: Iterable[SignalExtractor] = ()):
        self._by_name: dict[str, SignalExtractor] = {}
        for e in extractors:
            self.add(e)

    def add(self, e: SignalExtractor) -> SignalExtractor:
        if e.name in self._by_name:
            raise DuplicateName(f"extractor {e.name!r} already registered")
        self._by_name[e.name] = e
        return e

    def get(self, name: str) -> SignalExtractor:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no extractor named {name!r}; registered: {sorted(self._by_name)}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def names(self) -> list[str]:
        return list(self._by_name)

    def copy(self) -> "ExtractorRegistry":
        return ExtractorRegistry(self._by_name.values())


BUILTINS = (
    SignalExtractor("advancement", "advancement", {"level": "level"}),
    SignalExtractor("competition", "competition", {"zone": "zone"}),
    SignalExtractor("relationship", "relationship", {"guild": "guild"}, params={"slope": 1.0}),
    SignalExtractor("teamwork", "teamwork", {"zone": "zone"}),
    SignalExtractor("escapism", "escapism", params={"session_weight": 0.5, "streak_weight": 0.5}),
)

REGISTRY = ExtractorRegistry(BUILTINS)


def register_extractor(name: str, definition: Mapping[str, Any] | SignalExtractor,
                       registry: ExtractorRegistry | None = None) -> SignalExtractor:
    """Add an extractor; ``definition`` is a SignalExtractor or a mapping of its fields.

    ``{"kind": "feature", "feature": "gold_delta"}`` is shorthand for an
    identity extractor on a numeric column.
    """
    registry = registry if registry is not None else REGISTRY
    if isinstance(definition, SignalExtractor):
        e = replace(definition, name=name)
    else:
        d = dict(definition)
        feats = dict(d.pop("features", {}))
        if "feature" in d:
            feats["value"] = d.pop("feature")
        e = SignalExtractor(name=name, kind=d.pop("kind", "feature"), features=feats, **d)
    return registry.add(e)


@dataclass(frozen=True)
class SignalConfig:
    """Ordered extractor names plus per-signal normalisation (``unit_mean_abs`` or ``none``)."""

    names: tuple[str, ...]
    normalization: Mapping[str, str] = field(default_factory=dict)
    zone_tags: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_ZONE_TAGS))
    guildless: tuple[str, ...] = ("", "none", "-1")
    overrides: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise DuplicateName(f"signal names must be unique, got {list(self.names)}")
        if not self.names:
            raise ValueError("at least one signal required")
        for k, v in self.normalization.items():
            if v not in ("unit_mean_abs", "none"):
                raise ValueError(f"normalization for {k!r} must be unit_mean_abs or none, got {v!r}")

    def mode(self, name: str) -> str:
        return self.normalization.get(name, "unit_mean_abs")

    def extractors(self, registry: ExtractorRegistry | None = None) -> list[SignalExtractor]:
        reg = registry if registry is not None else REGISTRY
        out = []
        for n in self.names:
            e = reg.get(n)
            ov = dict(self.overrides.get(n, {}))
            if ov:
                feats = {**e.features, **ov.pop("features", {})}
                params = {**e.params, **ov.pop("params", {})}
                e = replace(e, features=feats, params=params, **ov)
            out.append(e)
        return out


# ---------------------------------------------------------------------------
# computation
# ---------------------------------------------------------------------------

@dataclass
class AgentView:
    """Rows of one agent, time ordered. ``pos`` maps back into the full set."""

    ts: TrajectorySet
    pos: np.ndarray

    def col(self, name: str, which: str = "state") -> np.ndarray:
        return self.ts.feature(name, which)[self.pos]

    def labels(self, name: str, which: str = "state") -> np.ndarray:
        return self.ts.feature_labels(name, which)[self.pos]

    @property
    def timestamp(self) -> np.ndarray:
        return self.ts.timestamp[self.pos]

    @property
    def next_timestamp(self) -> np.ndarray:
        return self.ts.next_timestamp[self.pos]

    @property
    def terminal(self) -> np.ndarray:
        return self.ts.terminal[self.pos]

    @property
    def episode(self) -> np.ndarray:
        return self.ts.episode[self.pos]


def _agent_views(ts: TrajectorySet) -> list[AgentView]:
    order = ts.agent_order()
    agents = ts.agent.astype(str)[order]
    cuts = np.flatnonzero(agents[1:] != agents[:-1]) + 1
    return [AgentView(ts, chunk) for chunk in np.split(order, cuts) if len(chunk)]


def _tagged(labels: np.ndarray, tags: Mapping[str, tuple[str, ...]], tag: str) -> np.ndarray:
    hit = {z for z, t in tags.items() if tag in t}
    return np.array([str(z) in hit for z in labels], dtype=bool)


def _dest_zone(v: AgentView, zone: str) -> np.ndarray:
    labels = v.labels(zone, "next").astype(object)
    return np.where(v.terminal, "", labels)


def _level_gain(v: AgentView, level: str) -> tuple[np.ndarray, np.ndarray]:
    live = ~v.terminal
    dl = np.where(live, v.col(level, "next") - v.col(level), 0.0)
    dt = np.where(live, v.next_timestamp - v.timestamp, 0).astype(float)
    return np.nan_to_num(dl), dt


def _tenure(v: AgentView, guild: str, guildless: Sequence[str]) -> np.ndarray:
    labels = v.labels(guild)
    out = np.zeros(len(labels))
    run = 0
    for i, g in enumerate(labels):
        if str(g) in guildless or (isinstance(g, float) and g < 0):
            run = 0
            out[i] = 0.0
            continue
        run = run + 1 if i > 0 and labels[i - 1] == g else 0
        out[i] = run
    return out


def _window_count(flags: np.ndarray, w: int) -> np.ndarray:
    c = np.concatenate([[0], np.cumsum(flags.astype(np.int64))])
    idx = np.arange(1, len(flags) + 1)
    return (c[idx] - c[np.maximum(idx - w, 0)]).astype(float)


def _session_and_streak(v: AgentView) -> tuple[np.ndarray, np.ndarray]:
    ep = v.episode
    session = np.zeros(len(ep))
    for i in range(len(ep)):
        session[i] = session[i - 1] + 1 if i > 0 and ep[i] == ep[i - 1] else 1
    day = v.timestamp // DAY
    streak = np.zeros(len(day))
    for i in range(len(day)):
        if i == 0:
            streak[i] = 1
        elif day[i] == day[i - 1]:
            streak[i] = streak[i - 1]
        elif day[i] == day[i - 1] + 1:
            streak[i] = streak[i - 1] + 1
        else:
            streak[i] = 1
    return session, streak


def _raw(e: SignalExtractor, v: AgentView, cfg: SignalConfig, fit: Mapping[str, Any]) -> np.ndarray:
    k = e.kind
    if k == "advancement":
        dl, dt = _level_gain(v, e.features["level"])
        speed = np.divide(dl, dt, out=np.zeros_like(dl), where=dt > 0)
        avg = fit["avg_speed"]
        return speed / avg if avg > 0 else speed
    if k == "competition":
        dest = _dest_zone(v, e.features["zone"])
        here = v.labels(e.features["zone"]).astype(object)
        entering = dest != here
        if e.params.get("count_stays", 0.0):
            entering = np.ones(len(dest), dtype=bool)
        return (_tagged(dest, cfg.zone_tags, "competition") & entering & ~v.terminal).astype(float)
    if k == "relationship":
        return _tenure(v, e.features["guild"], cfg.guildless) * float(e.params.get("slope", 1.0))
    if k == "teamwork":
        dest = _dest_zone(v, e.features["zone"])
        return _window_count(_tagged(dest, cfg.zone_tags, "teamwork") & ~v.terminal, e.window_length)
    if k == "escapism":
        session, streak = _session_and_streak(v)
        session = np.minimum(session, e.params.get("session_cap", math.inf))
        return (float(e.params.get("session_weight", 0.5)) * session / fit["mean_session"]
                + float(e.params.get("streak_weight", 0.5)) * streak / fit["mean_streak"])
    if k == "feature":
        which = {0.0: "state", 1.0: "next"}.get(float(e.params.get("next", 0.0)), "state")
        return v.col(e.features["value"], which).astype(float)
    if k == "signal":
        name = e.features["value"]
        return v.ts.signals[v.pos, v.ts.signal_names.index(name)]
    assert e.fn is not None
    return np.asarray(e.fn(v, fit), dtype=float)


def _check_features(ts: TrajectorySet, extractors: Sequence[SignalExtractor]) -> None:
    for e in extractors:
        for f in e.required():
            if e.kind == "signal":
                if f not in ts.signal_names:
                    raise MissingFeature(f"extractor {e.name!r}: no signal column {f!r} in data")
            elif not ts.schema.has(f):
                err = MissingFeature if e.kind in ("advancement", "competition", "relationship", "teamwork") \
                    else UnknownFeature
                raise err(f"extractor {e.name!r} needs feature {f!r}; schema has {list(ts.schema.names)}")


def fit_signals(ts: TrajectorySet, cfg: SignalConfig, registry: ExtractorRegistry | None = None) -> dict[str, Any]:
    """Dataset constants for ``cfg`` (average speed, escapism means, normalisation scales)."""
    if len(ts) == 0:
        raise EmptyDataset("cannot fit signals on an empty set")
    extractors = cfg.extractors(registry)
    _check_features(ts, extractors)
    views = _agent_views(ts)
    fit: dict[str, Any] = {"avg_speed": 1.0, "mean_session": 1.0, "mean_streak": 1.0}
    adv = [e for e in extractors if e.kind == "advancement"]
    if adv:
        dl = dt = 0.0
        for v in views:
            a, b = _level_gain(v, adv[0].features["level"])
            dl += float(a.sum())
            dt += float(b.sum())
        fit["avg_speed"] = dl / dt if dt > 0 and dl > 0 else 1.0
    if any(e.kind == "escapism" for e in extractors):
        sess, strk = zip(*(_session_and_streak(v) for v in views))
        fit["mean_session"] = float(np.mean(np.concatenate(sess))) or 1.0
        fit["mean_streak"] = float(np.mean(np.concatenate(strk))) or 1.0
    raw = _compute_raw(ts, extractors, cfg, fit, views)
    scales = {}
    for j, e in enumerate(extractors):
        m = float(np.mean(np.abs(raw[:, j])))
        scales[e.name] = m if cfg.mode(e.name) == "unit_mean_abs" and m > 0 else 1.0
    fit["scales"] = scales
    fit["degenerate"] = [e.name for j, e in enumerate(extractors) if not np.any(raw[:, j] != 0)]
    return fit


def _compute_raw(ts: TrajectorySet, extractors: Sequence[SignalExtractor], cfg: SignalConfig,
                 fit: Mapping[str, Any], views: Sequence[AgentView] | None = None) -> np.ndarray:
    out = np.zeros((len(ts), len(extractors)))
    for v in views if views is not None else _agent_views(ts):
        for j, e in enumerate(extractors):
            out[v.pos, j] = _raw(e, v, cfg, fit)
    return out


def compute_signals(ts: TrajectorySet, cfg: SignalConfig, fit: Mapping[str, Any] | None = None,
                    registry: ExtractorRegistry | None = None,
                    normalize: bool = True) -> TrajectorySet:
    """Copy of ``ts`` with one signal column per configured extractor.

    Without ``fit`` the constants are fitted on ``ts`` itself (use that for
    the training split, then pass the returned ``meta["signal_fit"]`` when
    computing signals on held-out data). The fit is stored in the result's
    metadata.
    """
    if len(ts) == 0:
        raise EmptyDataset("cannot compute signals on an empty set")
    extractors = cfg.extractors(registry)
    _check_features(ts, extractors)
    fit = dict(fit) if fit is not None else fit_signals(ts, cfg, registry)
    raw = _compute_raw(ts, extractors, cfg, fit)
    if normalize:
        raw = raw / np.array([fit["scales"][e.name] for e in extractors])
    return ts.with_signals(raw, [e.name for e in extractors], meta={"signal_fit": fit})
