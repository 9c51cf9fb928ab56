"""Power-law learning curves ``CS(l) = a - b * l**(-c)`` under box bounds.

The fit is a projected Levenberg-Marquardt iteration: parameters sitting on
a bound with the gradient pointing outward are frozen for the step, the
damped Gauss-Newton step is taken on the rest and the result is clipped
back into the box. Several starting decay rates are tried and the lowest
SSE wins.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, IdentifiabilityError

A_BOUNDS = (-1.0, 1.0)
B_BOUNDS = (1e-12, 1e3)
C_BOUNDS = (1e-12, 1e3)
START_DECAYS = (0.1, 0.5, 1.0, 2.0)
MAX_ITER = 500
STEP_TOL = 1e-10


@dataclass(frozen=True)
class PowerLawFit:
    a: float
    b: float
    c: float
    residual_sse: float
    converged: bool
    n_points: int
    iterations: int = 0

    def __call__(self, l):
        return eval_power_law(self.a, self.b, self.c, l)

    def to_dict(self) -> dict:
        return asdict(self)


def eval_power_law(a, b, c, l):
    l_arr = np.asarray(l, dtype=np.float64)
    if np.any(l_arr <= 0):
        raise ContractError("training size must be positive")
    out = a - b * l_arr ** (-c)
    return float(out) if np.ndim(out) == 0 else out


def _lower_upper():
    lo = np.array([A_BOUNDS[0], B_BOUNDS[0], C_BOUNDS[0]])
    hi = np.array([A_BOUNDS[1], B_BOUNDS[1], C_BOUNDS[1]])
    return lo, hi


def _residual_jacobian(x, l, y, sw):
    a, b, c = x
    lc = l ** (-c)
    r = sw * (a - b * lc - y)
    J = np.column_stack([sw, -sw * lc, sw * b * np.log(l) * lc])
    return r, J


def _lm(x0, l, y, sw):
    lo, hi = _lower_upper()
    x = np.clip(x0, lo, hi)
    r, J = _residual_jacobian(x, l, y, sw)
    sse = float(r @ r)
    mu = 1e-3 * max(1.0, float(np.max(np.diag(J.T @ J))))
    for it in range(1, MAX_ITER + 1):
        g = J.T @ r
        at_lo = (x <= lo) & (g > 0)
        at_hi = (x >= hi) & (g < 0)
        free = ~(at_lo | at_hi)
        if not free.any():
            return x, sse, True, it
        Jf = J[:, free]
        A = Jf.T @ Jf
        step = np.zeros(3)
        while True:
            try:
                step[free] = np.linalg.solve(A + mu * np.diag(np.maximum(np.diag(A), 1e-12)), -g[free])
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            x_new = np.clip(x + step, lo, hi)
            r_new, J_new = _residual_jacobian(x_new, l, y, sw)
            sse_new = float(r_new @ r_new)
            if sse_new <= sse:
                moved = float(np.linalg.norm(x_new - x))
                x, r, J, sse = x_new, r_new, J_new, sse_new
                mu = max(mu / 3.0, 1e-15)
                if moved < STEP_TOL:
                    return x, sse, True, it
                break
            mu *= 4.0
            if mu > 1e20:
                # no descent left along the projected direction
                return x, sse, True, it
    return x, sse, False, MAX_ITER


def _initial_guess(l, y, sw, c0):
    lo, hi = _lower_upper()
    basis = np.column_stack([sw, -sw * l ** (-c0)])
    (a0, b0), *_ = np.linalg.lstsq(basis, sw * y, rcond=None)
    return np.clip(np.array([a0, b0, c0]), lo, hi)


def fit_power_law(points, weights=None) -> PowerLawFit:
    """Bounded least-squares fit of ``(l, cs)`` points; optional per-point weights."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractError("points must be a sequence of (l, cs) pairs")
    l, y = pts[:, 0], pts[:, 1]
    if np.any(l <= 0) or not np.all(np.isfinite(pts)):
        raise ContractError("training sizes must be positive and all values finite")
    if len(np.unique(l)) < 3:
        raise IdentifiabilityError("power-law fit needs at least 3 distinct training sizes")
    sw = np.ones_like(l) if weights is None else np.sqrt(np.asarray(weights, dtype=np.float64))
    best = None
    for c0 in START_DECAYS:
        x0 = _initial_guess(l, y, sw, c0)
        x, sse, conv, iters = _lm(x0, l, y, sw)
        r0, _ = _residual_jacobian(x0, l, y, sw)
        if float(r0 @ r0) < sse:        # never worse than the start
            x, sse = x0, float(r0 @ r0)
        cand = (sse, float(x[2]), x, conv, iters)
        if best is None or cand[0] < best[0] - 1e-15 * max(1.0, best[0]) or (
                abs(cand[0] - best[0]) <= 1e-15 * max(1.0, best[0]) and cand[1] < best[1]):
            best = cand
    sse, _, x, conv, iters = best
    return PowerLawFit(float(x[0]), float(x[1]), float(x[2]), float(sse), bool(conv), int(len(l)), int(iters))


def aggregate_by_size(xs, ys):
    """Per-size mean, variance and count of repeated measurements."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    sizes = np.unique(xs)
    means = np.array([ys[xs == s].mean() for s in sizes])
    vars_ = np.array([ys[xs == s].var(ddof=1) if np.sum(xs == s) > 1 else np.nan for s in sizes])
    counts = np.array([np.sum(xs == s) for s in sizes])
    return sizes, means, vars_, counts


def fit_result_points(xs, ys, weighted: bool = False) -> PowerLawFit:
    """Fit on per-size means, optionally weighted by inverse variance of the mean."""
    sizes, means, vars_, counts = aggregate_by_size(xs, ys)
    weights = None
    if weighted:
        se2 = np.where(np.isfinite(vars_), vars_ / counts, np.nan)
        floor = np.nanmedian(se2) * 1e-3 if np.any(np.isfinite(se2)) else 1.0
        se2 = np.where(np.isfinite(se2), np.maximum(se2, max(floor, 1e-12)), np.nanmax(se2) if np.any(np.isfinite(se2)) else 1.0)
        weights = 1.0 / se2
    return fit_power_law(np.column_stack([sizes, means]), weights)


def write_fit(fit: PowerLawFit, directory, l_min: float, l_max: float, n_samples: int = 200) -> None:
    """``fit.json`` plus ``curve.csv`` sampled on a log grid for plotting."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "fit.json").write_text(json.dumps(dict(fit.to_dict(), schema_version=1), indent=2, sort_keys=True) + "\n")
    ls = np.geomspace(l_min, l_max, n_samples)
    lines = ["# schema_version=1", "l,cs"] + [f"{x:.9g},{fit(x):.17g}" for x in ls]
    (d / "curve.csv").write_text("\n".join(lines) + "\n")
