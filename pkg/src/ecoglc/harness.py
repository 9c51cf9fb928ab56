"""Forward/backward/random-increase and dataset-translation experiments.

All protocols work on a chronological list of per-session ``FeatureSet``s.
Sessions are numbered from 1 in reported ranges. Decoders are trained from
scratch for every curve point and scored by the mean cosine similarity over
all pooled test epochs.
"""
from __future__ import annotations

import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import timegrid
from .decoders import DecoderSpec, make_decoder
from .errors import ConfigurationError, ContractError, SchemaError
from .features import FeatureSet
from .metrics import mean_cosine_similarity

SCHEMA_VERSION = 1
KINDS = ("forward_increase", "backward_increase", "random_increase", "translation")
KIND_ALIASES = {"fi": "forward_increase", "bi": "backward_increase", "ri": "random_increase",
                "translation": "translation"}
HAND_CHOICES = ("left_hand", "right_hand", "both")


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    test_session_count: int = 22
    train_window: int = 6
    test_window: int = 6
    stride: int = 3
    repetitions: int | None = None
    size_grid_minutes: tuple | None = None
    n_sizes: int = 10
    min_size_minutes: float = 5.0
    session_exclusion_threshold: float | None = None
    hand: str = "left_hand"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", KIND_ALIASES.get(self.kind, self.kind))
        if self.size_grid_minutes is not None:
            object.__setattr__(self, "size_grid_minutes", tuple(float(x) for x in self.size_grid_minutes))

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"experiment kind must be one of {KINDS}")
        self.decoder.validate()
        if self.repetitions is not None and self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if self.test_session_count < 1 or self.train_window < 1 or self.test_window < 1 or self.stride < 1:
            raise ConfigurationError("session counts, windows and stride must be >= 1")
        if self.hand not in HAND_CHOICES:
            raise ConfigurationError(f"hand must be one of {HAND_CHOICES}")

    def n_repetitions(self) -> int:
        if self.repetitions is not None:
            return int(self.repetitions)
        if self.kind == "random_increase":
            return 10
        return 1 if self.decoder.deterministic else 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder"] = self.decoder.to_dict()
        d["size_grid_minutes"] = None if self.size_grid_minutes is None else list(self.size_grid_minutes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        d["decoder"] = DecoderSpec.from_dict(d.get("decoder", {}))
        return cls(**d)

    def plan_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CurvePoint:
    x_minutes: float
    repetition: int
    mean_cs: float
    train_range: tuple      # 1-based inclusive session numbers
    test_range: tuple
    window_start: int | None = None
    n_train_epochs: int = 0


@dataclass
class ExperimentResult:
    kind: str
    points: list
    metadata: dict
    trend: dict | None = None

    def by_x(self) -> dict:
        """x -> list of mean CS over repetitions."""
        out = {}
        for p in self.points:
            out.setdefault(p.x_minutes, []).append(p.mean_cs)
        return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# protocol geometry (pure index arithmetic, testable on its own)

def forward_ranges(n_sessions: int, n_test: int):
    if n_sessions < n_test + 1:
        raise ConfigurationError(f"forward increase needs at least {n_test + 1} sessions, got {n_sessions}")
    return [((1, k), (k + 1, k + n_test)) for k in range(1, n_sessions - n_test + 1)]


def backward_ranges(n_sessions: int, n_test: int):
    if n_sessions < n_test + 1:
        raise ConfigurationError(f"backward increase needs at least {n_test + 1} sessions, got {n_sessions}")
    split = n_sessions - n_test
    return [((k, split), (split + 1, n_sessions)) for k in range(split, 0, -1)]


def translation_ranges(n_sessions: int, n_train: int, n_test: int, stride: int):
    width = n_train + n_test
    if n_sessions < width:
        raise ConfigurationError(f"translation window of {width} sessions exceeds the {n_sessions} available")
    return [((s, s + n_train - 1), (s + n_train, s + width - 1)) for s in range(1, n_sessions - width + 2, stride)]


def default_size_grid(pool_minutes: float, n_sizes: int, min_minutes: float):
    if min_minutes > pool_minutes:
        raise ConfigurationError(f"smallest RI size {min_minutes} min exceeds the {pool_minutes:.2f} min pool")
    return tuple(np.geomspace(min_minutes, pool_minutes, n_sizes))


# ---------------------------------------------------------------------------

class Harness:
    def __init__(self, sessions, plan: ExperimentPlan, layout=None, jobs: int = 1):
        plan.validate()
        if not sessions:
            raise ConfigurationError("no sessions supplied")
        self.plan = plan
        self.layout = layout
        self.jobs = max(1, int(jobs))
        hands = ("left_hand", "right_hand") if plan.hand == "both" else (plan.hand,)
        self.all_sessions = [s.for_states(*hands) for s in sessions]
        self.session_ids = list(range(1, len(sessions) + 1))
        self.excluded = []
        if plan.session_exclusion_threshold is not None:
            self._exclude_outliers(plan.session_exclusion_threshold)
        self.sessions = [self.all_sessions[i - 1] for i in self.session_ids]
        self.feature_shape = self.sessions[0].shape

    def _exclude_outliers(self, floor: float) -> None:
        keep = []
        for sid, fs in zip(self.session_ids, self.all_sessions):
            half = len(fs) // 2
            if half < 2:
                keep.append(sid)
                continue
            dec = make_decoder(self.plan.decoder, fs.shape, self.layout, seed=self.plan.seed)
            dec.fit(fs.select(np.arange(half)))
            test = fs.select(np.arange(half, len(fs)))
            if mean_cosine_similarity(dec.predict(test.values), test.targets) < floor:
                self.excluded.append(sid)
            else:
                keep.append(sid)
        self.session_ids = keep

    def _pool(self, first: int, last: int) -> FeatureSet:
        return FeatureSet.concat(self.sessions[first - 1:last])

    def _label(self, rng_pair):
        a, b = rng_pair
        return (self.session_ids[a - 1], self.session_ids[b - 1])

    def _rep_seed(self, rep: int) -> int:
        return int(np.random.SeedSequence([self.plan.seed, 7, rep]).generate_state(1)[0])

    def _evaluate(self, train: FeatureSet, test: FeatureSet, rep: int) -> float:
        if len(train) == 0 or len(test) == 0:
            raise ConfigurationError("empty train or test set after hand filtering")
        dec = make_decoder(self.plan.decoder, self.feature_shape, self.layout, seed=self._rep_seed(rep))
        dec.fit(train)
        return mean_cosine_similarity(dec.predict(test.values), test.targets)

    def _run_jobs(self, jobs):
        if self.jobs == 1:
            return [job() for job in jobs]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(lambda j: j(), jobs))

    def _range_jobs(self, ranges, window=False):
        jobs = []
        for tr, te in ranges:
            for rep in range(self.plan.n_repetitions()):
                def job(tr=tr, te=te, rep=rep):
                    train, test = self._pool(*tr), self._pool(*te)
                    cs = self._evaluate(train, test, rep)
                    return CurvePoint(round(train.minutes, 6), rep, cs, self._label(tr), self._label(te),
                                      self._label(tr)[0] if window else None, len(train))
                jobs.append(job)
        return jobs

    def run(self) -> ExperimentResult:
        n = len(self.sessions)
        p = self.plan
        trend = None
        if p.kind == "forward_increase":
            points = self._run_jobs(self._range_jobs(forward_ranges(n, p.test_session_count)))
        elif p.kind == "backward_increase":
            points = self._run_jobs(self._range_jobs(backward_ranges(n, p.test_session_count)))
        elif p.kind == "translation":
            points = self._run_jobs(self._range_jobs(
                translation_ranges(n, p.train_window, p.test_window, p.stride), window=True))
            trend = translation_trend(points)
        else:
            points = self._random_increase(n)
        points = sorted(points, key=lambda q: (q.window_start or 0, q.x_minutes, q.repetition))
        meta = {"plan": p.to_dict(), "plan_hash": p.plan_hash(), "n_sessions": n,
                "excluded_sessions": list(self.excluded), "schema_version": SCHEMA_VERSION}
        return ExperimentResult(p.kind, points, meta, trend)

    def _random_increase(self, n):
        p = self.plan
        # pool and test set of the widest backward-increase point
        tr, te = backward_ranges(n, p.test_session_count)[-1]
        pool = self._pool(*tr)
        test = self._pool(*te)
        pool_minutes = timegrid.minutes(len(pool))
        grid = p.size_grid_minutes or default_size_grid(pool_minutes, p.n_sizes, p.min_size_minutes)
        sizes = []
        for minutes in grid:
            count = int(round(minutes * 60 / timegrid.EPOCH_STEP_SECONDS))
            if count > len(pool):
                raise ConfigurationError(f"RI size {minutes} min exceeds the {pool_minutes:.2f} min pool")
            sizes.append(max(count, 1))
        jobs = []
        for si, count in enumerate(sizes):
            for rep in range(p.n_repetitions()):
                def job(si=si, count=count, rep=rep):
                    rng = np.random.default_rng([p.seed, si, rep])
                    idx = np.sort(rng.choice(len(pool), size=count, replace=False))
                    cs = self._evaluate(pool.select(idx), test, rep)
                    return CurvePoint(round(timegrid.minutes(count), 6), rep, cs, self._label(tr),
                                      self._label(te), None, count)
                jobs.append(job)
        return self._run_jobs(jobs)


def translation_trend(points) -> dict:
    """Least-squares line of per-window mean CS (over repetitions) against window start session."""
    by_start = {}
    for q in points:
        by_start.setdefault(q.window_start, []).append(q.mean_cs)
    xs = np.array(sorted(by_start), dtype=float)
    ys = np.array([np.mean(by_start[int(x)]) for x in xs])
    if len(xs) < 3:
        return {"slope": float("nan"), "intercept": float("nan"), "r": float("nan"),
                "p_value": float("nan"), "n_windows": int(len(xs))}
    fit = stats.linregress(xs, ys)
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r": float(fit.rvalue),
            "p_value": float(fit.pvalue), "n_windows": int(len(xs))}


def run_experiment(sessions, plan: ExperimentPlan, layout=None, jobs: int = 1) -> ExperimentResult:
    return Harness(sessions, plan, layout, jobs).run()


def run_forward_increase(sessions, plan, **kw):
    return run_experiment(sessions, _with_kind(plan, "forward_increase"), **kw)


def run_backward_increase(sessions, plan, **kw):
    return run_experiment(sessions, _with_kind(plan, "backward_increase"), **kw)


def run_random_increase(sessions, plan, **kw):
    return run_experiment(sessions, _with_kind(plan, "random_increase"), **kw)


def run_dataset_translation(sessions, plan, **kw):
    return run_experiment(sessions, _with_kind(plan, "translation"), **kw)


def _with_kind(plan: ExperimentPlan, kind: str) -> ExperimentPlan:
    if plan.kind != kind:
        raise ConfigurationError(f"plan kind {plan.kind!r} does not match {kind!r}")
    return plan


# ---------------------------------------------------------------------------
# result files

CSV_COLUMNS = ("kind", "x_minutes", "repetition", "mean_cs", "train_range", "test_range", "window_start")


def _fmt_range(r):
    return f"{r[0]}-{r[1]}"


def result_to_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for q in result.points:
        ws = "" if q.window_start is None else str(q.window_start)
        buf.write(f"{result.kind},{q.x_minutes:.6f},{q.repetition},{q.mean_cs:.17g},"
                  f"{_fmt_range(q.train_range)},{_fmt_range(q.test_range)},{ws}\n")
    return buf.getvalue()


def write_result(result: ExperimentResult, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "results.csv").write_text(result_to_csv(result))
    meta = dict(result.metadata, kind=result.kind, trend=result.trend,
                n_points=len(result.points))
    (d / "experiment.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_result_csv(path) -> ExperimentResult:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema_version="):
        raise SchemaError(f"{path}: missing schema version header")
    version = int(lines[0].split("=", 1)[1])
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    if tuple(lines[1].split(",")) != CSV_COLUMNS:
        raise SchemaError(f"{path}: unexpected columns {lines[1]}")
    points, kind = [], None
    for line in lines[2:]:
        if not line:
            continue
        k, x, rep, cs, tr, te, ws = line.split(",")
        kind = k
        tr_ = tuple(int(v) for v in tr.split("-"))
        te_ = tuple(int(v) for v in te.split("-"))
        points.append(CurvePoint(float(x), int(rep), float(cs), tr_, te_, int(ws) if ws else None))
    if kind is None:
        raise ContractError(f"{path}: no result rows")
    trend = translation_trend(points) if kind == "translation" else None
    return ExperimentResult(kind, points, {"source": str(path)}, trend)
