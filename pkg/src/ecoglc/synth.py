"""Synthetic multi-session ECoG-like recordings.

Each session is ``raw = mixing(session) @ sources + noise`` where the sources
are band-limited oscillations whose envelopes are switched on by the current
motor-imagery state and tuned (cosine tuning) to the optimal movement
direction of the active hand. Three slow effects shape a long recording:

* a per-session multiplier (``adaptation_schedule``) scaling the modulation
  depth and pulling each hand's spatial patterns away from a pattern shared
  by both hands,
* a small random orthogonal rotation of the mixing matrix per session
  (``mixing_drift_rate``), accumulated over sessions,
* optional connection-loss artifacts added afterwards by ``inject_artifacts``.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import timegrid
from .errors import ConfigurationError, ContractError, DegenerateInputError

SCHEMA_VERSION = 1
STATES = ("idle", "left_hand", "right_hand")
HANDS = ("left_hand", "right_hand")
# contralateral implant: left hand activity over the right hemisphere
HAND_IMPLANT = {"left_hand": 1, "right_hand": 0}
GRID_ROWS, GRID_COLS = 8, 4
CONTROL_DT = 0.01


def default_band_profiles() -> dict:
    # high-gamma synchronisation and beta desynchronisation for both hands
    hand = [[70.0, 120.0, 1.0], [15.0, 30.0, -0.5]]
    return {"idle": [], "left_hand": [list(b) for b in hand], "right_hand": [list(b) for b in hand]}


@dataclass(frozen=True)
class GeneratorConfig:
    sampling_rate: float = 586.0
    n_channels: int = 64
    session_length: float = 420.0
    n_sessions: int = 43
    states: tuple = STATES
    band_profiles: dict = field(default_factory=default_band_profiles)
    mixing_drift_rate: float = 0.02
    adaptation_schedule: tuple | None = None
    noise_floor: float = 1.0
    seed: int = 0
    source_gain: float = 2.0
    n_direction_sources: int = 8
    tuning_twist: float = 0.0
    block_mean_seconds: float = 10.0
    hand_speed: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if self.adaptation_schedule is not None:
            object.__setattr__(self, "adaptation_schedule",
                               tuple(float(m) for m in self.adaptation_schedule))

    def validate(self) -> None:
        if not self.sampling_rate > 0:
            raise ConfigurationError("sampling_rate must be positive")
        if not self.session_length > 1.0:
            raise ConfigurationError("session_length must exceed 1 s")
        if self.n_sessions < 1:
            raise ConfigurationError("n_sessions must be >= 1")
        if self.n_channels < 2 or self.n_channels % 2 or self.n_channels > 2 * GRID_ROWS * GRID_COLS:
            raise ConfigurationError("n_channels must be even and at most 64 (two 8x4 implants)")
        if not 0.0 <= self.mixing_drift_rate <= 1.0:
            raise ConfigurationError("mixing_drift_rate must lie in [0, 1]")
        if self.noise_floor < 0:
            raise ConfigurationError("noise_floor must be non-negative")
        unknown = set(self.states) - set(STATES)
        if unknown or not self.states:
            raise ConfigurationError(f"states must be a non-empty subset of {STATES}")
        sched = self.schedule()
        if len(sched) != self.n_sessions:
            raise ConfigurationError("adaptation_schedule needs one entry per session")
        # zero switches the task-related signal off entirely (null-world checks)
        if any(m < 0 for m in sched):
            raise ConfigurationError("adaptation_schedule entries must be non-negative")
        nyq = self.sampling_rate / 2
        for state, bands in self.band_profiles.items():
            for lo, hi, depth in bands:
                if not 0 < lo < hi < nyq:
                    raise ConfigurationError(f"band [{lo}, {hi}] of {state} outside (0, Nyquist)")
                if depth < -1:
                    raise ConfigurationError("modulation depth below -1 would invert the envelope")

    def schedule(self) -> tuple:
        if self.adaptation_schedule is None:
            return (1.0,) * self.n_sessions
        return self.adaptation_schedule

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["states"] = list(self.states)
        d["adaptation_schedule"] = None if self.adaptation_schedule is None else list(self.adaptation_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigurationError(f"unknown generator keys: {sorted(extra)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def rising_schedule(n_sessions: int, start: float = 0.5, stop: float = 2.0) -> tuple:
    return tuple(float(x) for x in np.linspace(start, stop, n_sessions))


def default_grid_layout(n_channels: int = 64) -> list:
    """Channel -> (implant, row, col); each implant gets half the channels, row-major."""
    per = n_channels // 2
    return [(ch // per, (ch % per) // GRID_COLS, (ch % per) % GRID_COLS) for ch in range(n_channels)]


@dataclass
class Session:
    session_index: int
    raw: np.ndarray
    sampling_rate: float
    epoch_targets: np.ndarray
    epoch_states: np.ndarray
    grid_layout: list
    manifest: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.raw.shape[0]

    @property
    def n_channels(self) -> int:
        return self.raw.shape[1]

    def copy(self) -> "Session":
        return Session(self.session_index, self.raw.copy(), self.sampling_rate,
                       self.epoch_targets.copy(), self.epoch_states.copy(),
                       list(self.grid_layout), copy.deepcopy(self.manifest))


def optimal_direction(hand, target) -> np.ndarray:
    """Unit vector pointing from the hand position to the target."""
    hand = np.asarray(hand, dtype=float)
    target = np.asarray(target, dtype=float)
    diff = target - hand
    norm = float(np.linalg.norm(diff))
    if norm == 0.0:
        raise DegenerateInputError("hand already at target: direction undefined")
    return diff / norm


# ---------------------------------------------------------------------------
# static world structure (shared by every session of one config)

@dataclass
class _World:
    sources: list            # dicts: hand, lo, hi, depth, preferred, specific, shared
    rotations: list          # per-session cumulative mixing rotation


def _blob(layout, implant, row, col, width=1.2):
    w = np.zeros(len(layout))
    for ch, (imp, r, c) in enumerate(layout):
        if imp == implant:
            w[ch] = np.exp(-((r - row) ** 2 + (c - col) ** 2) / (2 * width ** 2))
    return w / np.linalg.norm(w)


def _unit_vectors(rng, k):
    v = rng.normal(size=(k, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _build_world(cfg: GeneratorConfig) -> _World:
    rng = np.random.default_rng([cfg.seed, 0])
    layout = default_grid_layout(cfg.n_channels)
    rows = max(r for _, r, _ in layout) + 1
    sources = []
    hands = [h for h in HANDS if h in cfg.states]
    shared_sites = [(int(rng.integers(2)), rng.uniform(0, rows - 1), rng.uniform(0, GRID_COLS - 1))
                    for _ in range(cfg.n_direction_sources)]
    for hand in HANDS:
        preferred = _unit_vectors(rng, cfg.n_direction_sources)
        sites = [(rng.uniform(0, rows - 1), rng.uniform(0, GRID_COLS - 1))
                 for _ in range(cfg.n_direction_sources)]
        if hand not in hands:
            continue
        for lo, hi, depth in cfg.band_profiles.get(hand, []):
            for j in range(cfg.n_direction_sources):
                sources.append(dict(
                    hand=hand, lo=lo, hi=hi, depth=depth, preferred=preferred[j],
                    specific=_blob(layout, HAND_IMPLANT[hand], *sites[j]),
                    shared=_blob(layout, *shared_sites[j]),
                ))
    rotations = []
    Q = np.eye(cfg.n_channels)
    scale = cfg.mixing_drift_rate / np.sqrt(2.0 * cfg.n_channels)
    for s in range(cfg.n_sessions):
        if s > 0 and cfg.mixing_drift_rate > 0:
            G = np.random.default_rng([cfg.seed, 1, s]).normal(size=(cfg.n_channels,) * 2)
            Q = expm(scale * (G - G.T)) @ Q
        rotations.append(Q)
    return _World(sources, rotations)


def _spatial_pattern(src, multiplier):
    rho = multiplier / (1.0 + multiplier)
    p = rho * src["specific"] + (1.0 - rho) * src["shared"]
    n = np.linalg.norm(p)
    return p / n if n > 0 else p


def _twist(d: np.ndarray, angle: float) -> np.ndarray:
    """Rotate each direction about z by ``angle * d_z``: a smooth invertible warp."""
    if angle == 0.0:
        return d
    th = angle * d[:, 2]
    c, s = np.cos(th), np.sin(th)
    out = d.copy()
    out[:, 0] = c * d[:, 0] - s * d[:, 1]
    out[:, 1] = s * d[:, 0] + c * d[:, 1]
    return out


def _band_noise(rng, n, fs, lo, hi):
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    edge = 0.1 * (hi - lo)
    gain = np.clip(np.minimum(f - lo + edge, hi + edge - f) / (2 * edge), 0.0, 1.0)
    x = np.fft.irfft(spec * gain, n)
    return x / np.sqrt(np.mean(x * x))


def _pink_noise(rng, n, fs, n_channels):
    spec = np.fft.rfft(rng.normal(size=(n_channels, n)), axis=1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec *= 1.0 / np.sqrt(np.maximum(f, 1.0))
    x = np.fft.irfft(spec, n, axis=1)
    return x / np.sqrt(np.mean(x * x, axis=1, keepdims=True))


def _simulate_task(cfg: GeneratorConfig, rng, duration: float):
    """State blocks and per-hand random-waypoint kinematics at the control rate."""
    n_ctrl = int(np.ceil(duration / CONTROL_DT)) + 1
    state_idx = np.zeros(n_ctrl, dtype=np.int64)
    states = list(cfg.states)
    t = 0
    cur = int(rng.integers(len(states)))
    while t < n_ctrl:
        dur = 2.0 + rng.exponential(max(cfg.block_mean_seconds - 2.0, 1e-3))
        k = max(1, int(round(dur / CONTROL_DT)))
        state_idx[t:t + k] = STATES.index(states[cur])
        t += k
        if len(states) > 1:
            cur = (cur + 1 + int(rng.integers(len(states) - 1))) % len(states)

    directions = np.zeros((n_ctrl, 3))
    pos = {h: np.zeros(3) for h in HANDS}
    vel = {h: np.zeros(3) for h in HANDS}
    tgt = {h: _new_target(rng, pos[h]) for h in HANDS}
    tau = 0.3
    for i in range(n_ctrl):
        name = STATES[state_idx[i]]
        if name not in HANDS:
            continue
        if np.linalg.norm(tgt[name] - pos[name]) < 0.15:
            tgt[name] = _new_target(rng, pos[name])
        d = optimal_direction(pos[name], tgt[name])
        directions[i] = d
        vel[name] += (CONTROL_DT / tau) * (cfg.hand_speed * d - vel[name])
        pos[name] = pos[name] + vel[name] * CONTROL_DT
    return state_idx, directions


def _new_target(rng, hand):
    while True:
        t = rng.uniform(-1.0, 1.0, size=3)
        if np.linalg.norm(t - hand) >= 0.5:
            return t


def generate_session(config: GeneratorConfig, session_index: int) -> Session:
    """Synthesize one session; bitwise deterministic in ``(config, session_index)``."""
    config.validate()
    if not 0 <= session_index < config.n_sessions:
        raise ConfigurationError(f"session_index {session_index} outside [0, {config.n_sessions})")
    fs = config.sampling_rate
    n = int(round(config.session_length * fs))
    layout = default_grid_layout(config.n_channels)
    world = _build_world(config)
    mult = config.schedule()[session_index]

    task_rng = np.random.default_rng([config.seed, 2, session_index])
    state_idx, directions = _simulate_task(config, task_rng, n / fs)
    ctrl_of_sample = np.minimum((np.arange(n) / fs / CONTROL_DT).astype(np.int64), len(state_idx) - 1)

    carrier_rng = np.random.default_rng([config.seed, 3, session_index])
    patterns = []
    signals = []
    Q = world.rotations[session_index]
    for src in world.sources:
        hand_code = STATES.index(src["hand"])
        active = (state_idx == hand_code).astype(float)
        tuning = _twist(directions, config.tuning_twist) @ src["preferred"]
        env_ctrl = 1.0 + mult * src["depth"] * active * (0.5 + 0.5 * tuning)
        env = np.maximum(env_ctrl, 0.0)[ctrl_of_sample]
        carrier = _band_noise(carrier_rng, n, fs, src["lo"], src["hi"])
        signals.append(config.source_gain * env * carrier)
        patterns.append(Q @ _spatial_pattern(src, mult))
    noise_rng = np.random.default_rng([config.seed, 4, session_index])
    raw = config.noise_floor * _pink_noise(noise_rng, n, fs, config.n_channels).T
    if signals:
        raw += np.asarray(signals).T @ np.asarray(patterns)

    ends = timegrid.window_end_samples(n, fs)
    ctrl_end = ctrl_of_sample[ends]
    epoch_states = np.array([STATES[k] for k in state_idx[ctrl_end]], dtype="<U10")
    epoch_targets = directions[ctrl_end].copy()
    epoch_targets[epoch_states == "idle"] = 0.0

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ecoglc.session",
        "session_index": int(session_index),
        "seed": int(config.seed),
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "adaptation_multiplier": float(mult),
        "artifacts": [],
        "artifact_injection": None,
    }
    return Session(int(session_index), raw, float(fs), epoch_targets, epoch_states, layout, manifest)


def inject_artifacts(session: Session, rate: float, duration_range=(0.05, 0.3),
                     seed: int | None = None) -> Session:
    """Insert connection-loss artifacts at Poisson-distributed times.

    Each event hits every channel of one implant: the signal is pinned to a
    constant rail at ``median +/- 20 sigma`` (robust sigma per channel) and
    ends in an excursion to the opposite rail over its last fifth. Event
    sample ranges are recorded in ``manifest["artifacts"]``.
    """
    if rate < 0:
        raise ContractError("artifact rate must be non-negative")
    lo, hi = (float(x) for x in duration_range)
    fs = session.sampling_rate
    if not 0 < lo <= hi or hi * fs >= session.n_samples:
        raise ConfigurationError("artifact duration_range must be positive and shorter than the session")
    out = session.copy()
    if seed is None:
        seed = int(session.manifest.get("seed", 0))
    out.manifest["artifact_injection"] = {"rate": float(rate), "duration_range": [lo, hi], "seed": int(seed)}
    if rate == 0:
        return out
    rng = np.random.default_rng([seed, 5, session.session_index])
    minutes = session.n_samples / fs / 60.0
    count = int(rng.poisson(rate * minutes))
    med = np.median(session.raw, axis=0)
    sigma = 1.4826 * np.median(np.abs(session.raw - med), axis=0)
    implants = np.array([imp for imp, _, _ in session.grid_layout])
    events = []
    for _ in range(count):
        dur = max(2, int(round(rng.uniform(lo, hi) * fs)))
        start = int(rng.integers(0, session.n_samples - dur))
        implant = int(rng.integers(implants.max() + 1))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        events.append((start, start + dur, implant, sign))
    events.sort()
    for start, stop, implant, sign in events:
        chans = np.flatnonzero(implants == implant)
        split = stop - max(1, (stop - start) // 5)
        out.raw[start:split, chans] = med[chans] + sign * 20.0 * sigma[chans]
        out.raw[split:stop, chans] = med[chans] - sign * 20.0 * sigma[chans]
        out.manifest["artifacts"].append({"start": start, "stop": stop, "channels": chans.tolist()})
    return out


def artifact_mask(session: Session) -> np.ndarray:
    """Boolean (n_samples, n_channels) ground-truth mask from the manifest."""
    mask = np.zeros(session.raw.shape, dtype=bool)
    for ev in session.manifest.get("artifacts", []):
        mask[ev["start"]:ev["stop"], ev["channels"]] = True
    return mask


# ---------------------------------------------------------------------------
# session directory format

def write_session(session: Session, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    man = dict(session.manifest)
    man.update(sampling_rate=session.sampling_rate, n_samples=session.n_samples,
               n_channels=session.n_channels, grid_layout=[list(x) for x in session.grid_layout])
    (d / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    session.raw.astype("<f4").tofile(d / "raw.f32le")
    lines = ["epoch_index,state,tx,ty,tz"]
    for i, (st, t) in enumerate(zip(session.epoch_states, session.epoch_targets)):
        lines.append(f"{i},{st},{t[0]:.9g},{t[1]:.9g},{t[2]:.9g}")
    (d / "targets.csv").write_text("\n".join(lines) + "\n")


def read_session(directory) -> Session:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("schema_version") != SCHEMA_VERSION:
        from .errors import SchemaError
        raise SchemaError(f"{d}: unsupported session schema {man.get('schema_version')}")
    raw = np.fromfile(d / "raw.f32le", dtype="<f4").astype(np.float64)
    raw = raw.reshape(man["n_samples"], man["n_channels"])
    rows = [line.split(",") for line in (d / "targets.csv").read_text().splitlines()[1:] if line]
    states = np.array([r[1] for r in rows], dtype="<U10")
    targets = np.array([[float(x) for x in r[2:5]] for r in rows]).reshape(-1, 3)
    layout = [tuple(x) for x in man["grid_layout"]]
    return Session(int(man["session_index"]), raw, float(man["sampling_rate"]), targets, states, layout, man)


def regenerate(manifest: dict) -> Session:
    """Rebuild a session (including injected artifacts) from its manifest."""
    cfg = GeneratorConfig.from_dict(manifest["config"])
    s = generate_session(cfg, int(manifest["session_index"]))
    inj = manifest.get("artifact_injection")
    if inj:
        s = inject_artifacts(s, inj["rate"], tuple(inj["duration_range"]), seed=inj["seed"])
    return s
