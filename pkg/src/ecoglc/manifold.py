"""Intrinsic dimension, 2-D embeddings and linear separability of feature clouds."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special, stats

from .errors import ConfigurationError, ContractError, DegenerateInputError
from .numerics import top_singular_triplet


def _points(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        a = a.reshape(len(a), -1)
    if not np.all(np.isfinite(a)):
        raise ContractError("point cloud contains non-finite values")
    return a


def knn(points, k: int, block: int = 512):
    """Exact k nearest neighbours (self excluded), ties broken by lower index.

    Returns ``(indices, distances)`` each shaped ``(n, k)``. Candidates come
    from Gram-matrix distances; their distances are then recomputed from
    differences so near-ties are ordered on accurate values.
    """
    X = _points(points)
    n = len(X)
    if not 1 <= k < n:
        raise ContractError(f"k must lie in [1, {n - 1}], got {k}")
    sq = np.einsum("ij,ij->i", X, X)
    idx_out = np.empty((n, k), dtype=np.int64)
    dist_out = np.empty((n, k))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (X[lo:hi] @ X.T)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        for r in range(hi - lo):
            i = lo + r
            tol = 1e-9 * (sq[i] + sq.max()) + 1e-300
            cand = np.flatnonzero(d2[r] <= kth[r] + tol)
            exact = np.linalg.norm(X[cand] - X[i], axis=1)
            order = np.lexsort((cand, exact))[:k]
            idx_out[i] = cand[order]
            dist_out[i] = exact[order]
    return idx_out, dist_out


# ---------------------------------------------------------------------------
# TwoNN

def twonn_id(points, discard_fraction: float = 0.1) -> float:
    """Two-nearest-neighbour estimate from the ratios ``r2 / r1``.

    Points with a duplicate nearest neighbour are dropped. The largest
    ``discard_fraction`` of the ratios is treated as censored: the Pareto
    likelihood uses the retained ratios plus the survival term of the
    censored ones at the cut, which keeps the estimate unbiased.
    """
    if not 0 <= discard_fraction < 1:
        raise ConfigurationError("discard_fraction must lie in [0, 1)")
    X = _points(points)
    if len(X) < 20:
        raise ContractError(f"TwoNN needs at least 20 points, got {len(X)}")
    _, dist = knn(X, 2)
    ok = dist[:, 0] > 0
    if ok.sum() < 3:
        raise DegenerateInputError("too few points with distinct nearest neighbours")
    logmu = np.sort(np.log(dist[ok, 1] / dist[ok, 0]))
    n = len(logmu)
    m = max(1, int(np.floor(n * (1 - discard_fraction))))
    total = logmu[:m].sum() + (n - m) * logmu[m - 1]
    if total <= 0:
        raise DegenerateInputError("all neighbour distance ratios equal 1")
    return float(m / total)


# ---------------------------------------------------------------------------
# expected-simplex-skewness style estimator

@dataclass(frozen=True)
class EssCalibration:
    dims: np.ndarray          # 1..d_max
    values: np.ndarray        # mean |sin| between random directions in each dimension

    def invert(self, s: float) -> float:
        """Dimension whose calibrated statistic equals ``s`` (linear interpolation, clipped)."""
        v, d = self.values, self.dims
        if s <= v[0]:
            return float(d[0])
        if s >= v[-1]:
            return float(d[-1])
        j = int(np.searchsorted(v, s))
        return float(d[j - 1] + (s - v[j - 1]) / (v[j] - v[j - 1]))


def _cache_dir() -> Path:
    return Path(os.environ.get("ECOGLC_CACHE_DIR", Path.home() / ".cache" / "ecoglc"))


def ess_calibration(d_max: int = 100, samples: int = 100_000, seed: int = 0,
                    cache: bool = True) -> EssCalibration:
    """Monte-Carlo mean of ``|sin|`` between two uniform random directions in R^d.

    For d >= 2, ``(1 + cos) / 2`` follows Beta((d-1)/2, (d-1)/2); the same
    uniforms are pushed through every quantile function, which makes the
    table exactly increasing in d. d = 1 is 0 by definition.
    """
    if d_max < 2:
        raise ConfigurationError("d_max must be >= 2")
    key = hashlib.sha256(f"{d_max}:{samples}:{seed}".encode()).hexdigest()[:16]
    path = _cache_dir() / f"ess_calibration_{key}.npy"
    if cache and path.exists():
        values = np.load(path)
        return EssCalibration(np.arange(1, d_max + 1), values)
    u = np.random.default_rng([seed, 11]).uniform(size=samples)
    values = np.zeros(d_max)
    for d in range(2, d_max + 1):
        h = (d - 1) / 2.0
        cos = 2.0 * special.betaincinv(h, h, u) - 1.0
        values[d - 1] = np.mean(np.sqrt(np.clip(1.0 - cos * cos, 0.0, 1.0)))
    if cache:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npy")
            np.save(tmp, values)
            tmp.replace(path)
        except OSError:
            pass
    return EssCalibration(np.arange(1, d_max + 1), values)


def _mean_abs_sine(V) -> float:
    norms = np.linalg.norm(V, axis=1)
    V = V[norms > 1e-12 * max(1.0, norms.max())]
    if len(V) < 2:
        return float("nan")
    U = V / np.linalg.norm(V, axis=1, keepdims=True)
    C = np.clip(U @ U.T, -1.0, 1.0)
    iu = np.triu_indices(len(U), 1)
    return float(np.mean(np.sqrt(1.0 - C[iu] ** 2)))


def ess_local_id(points, k: int = 100, calibration: EssCalibration | None = None,
                 return_local: bool = False):
    """Mean local dimension over neighbourhoods of ``k`` points (a point and its k-1 neighbours).

    Each neighbourhood is centred on its mean; the average ``|sin|`` over
    all pairs of centred vectors is mapped to a dimension through the
    calibration table.
    """
    X = _points(points)
    if not 2 < k < len(X):
        raise ContractError(f"k must lie in (2, {len(X)}), got {k}")
    cal = calibration or ess_calibration()
    idx, _ = knn(X, k - 1)
    local = np.full(len(X), np.nan)
    for i in range(len(X)):
        nb = X[np.concatenate([[i], idx[i]])]
        s = _mean_abs_sine(nb - nb.mean(axis=0))
        if np.isfinite(s):
            local[i] = cal.invert(s)
    if not np.any(np.isfinite(local)):
        raise DegenerateInputError("every neighbourhood collapsed to a point")
    est = float(np.nanmean(local))
    return (est, local) if return_local else est


# ---------------------------------------------------------------------------
# embeddings and separability

def pca_embed_2d(points) -> np.ndarray:
    """Coordinates on the top two principal axes (signs fixed by the numerics convention)."""
    X = _points(points)
    if len(X) < 3:
        raise ContractError("embedding needs at least three points")
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise DegenerateInputError("points have zero variance")
    t1 = top_singular_triplet(Xc)
    out = np.zeros((len(X), 2))
    out[:, 0] = t1.s * t1.u
    R = Xc - t1.s * np.outer(t1.u, t1.v)
    if np.linalg.norm(R) > 1e-12 * t1.s:
        t2 = top_singular_triplet(R)
        out[:, 1] = t2.s * t2.u
    return out


@dataclass(frozen=True)
class SvmResult:
    accuracy: float
    weights: np.ndarray       # in the input coordinates
    bias: float


def svm_separability(points, labels, reg: float = 1.0, steps: int = 10_000) -> SvmResult:
    """Training accuracy of a soft-margin linear SVM fit by full-batch subgradient descent.

    Inputs are z-scored first; the step size is ``1 / (reg * t)`` and the
    returned hyperplane averages the second half of the iterates. Works on
    2-D embeddings or on the raw feature space alike.
    """
    X = _points(points)
    y_raw = np.asarray(labels)
    classes = np.unique(y_raw)
    if len(classes) != 2 or len(y_raw) != len(X):
        raise ContractError("svm_separability needs exactly two classes, one label per point")
    y = np.where(y_raw == classes[1], 1.0, -1.0)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (X - mu) / sd
    n = len(Z)
    w = np.zeros(Z.shape[1])
    b = 0.0
    w_avg = np.zeros_like(w)
    b_avg = 0.0
    half = steps // 2
    for t in range(1, steps + 1):
        margin = y * (Z @ w + b)
        act = margin < 1
        eta = 1.0 / (reg * t)
        gw = reg * w - (y[act] @ Z[act]) / n
        gb = -y[act].sum() / n
        w -= eta * gw
        b -= eta * gb
        if t > half:
            w_avg += w
            b_avg += b
    w_avg /= steps - half
    b_avg /= steps - half
    pred = np.where(Z @ w_avg + b_avg >= 0, 1.0, -1.0)
    acc = float(np.mean(pred == y))
    w_in = w_avg / sd
    return SvmResult(acc, w_in, float(b_avg - w_in @ mu))


def hand_embedding(fset, stride: int = 10, standardize: bool = True):
    """2-D PCA embedding of every ``stride``-th left/right-hand epoch of one session.

    Features are z-scored over the embedded epochs first (unless disabled),
    so that the strongest bands do not dominate the principal axes.
    """
    hands = fset.for_states("left_hand", "right_hand")
    sub = hands.select(np.arange(0, len(hands), stride))
    if len(sub) < 3:
        raise DegenerateInputError("fewer than three hand epochs to embed")
    X = sub.flat()
    if standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 1e-12, sd, 1.0)
    return pca_embed_2d(X), sub.states, sub.epoch_index


def id_cs_correlation(ids, cs):
    """Pearson correlation (r, p) between per-session dimensions and decoding scores."""
    ids = np.asarray(ids, dtype=np.float64)
    cs = np.asarray(cs, dtype=np.float64)
    if len(ids) != len(cs) or len(ids) < 3:
        raise ContractError("need at least three paired values")
    r, p = stats.pearsonr(ids, cs)
    return float(r), float(p)


def window_id_correlation(sessions, result, k: int = 100, stride: int = 10,
                          calibration: EssCalibration | None = None) -> dict:
    """Pearson r between each translation window's mean ESS dimension and its CS.

    ``sessions`` are the per-session feature sets the experiment ran on
    (1-based numbering as in the result's ranges); every ``stride``-th
    training epoch of a window forms its point cloud.
    """
    from .features import FeatureSet
    cal = calibration or ess_calibration()
    by_window = {}
    for q in result.points:
        by_window.setdefault(q.train_range, []).append(q.mean_cs)
    ids, scores = [], []
    for (a, b), cs in sorted(by_window.items()):
        pool = FeatureSet.concat(sessions[a - 1:b])
        cloud = pool.flat()[::stride]
        ids.append(ess_local_id(cloud, min(k, len(cloud) - 1), cal))
        scores.append(float(np.mean(cs)))
    r, p = id_cs_correlation(ids, scores)
    return {"r": r, "p_value": p, "ids": ids, "cs": scores}


def read_embedding_csv(path):
    """Import an externally computed embedding: returns (epoch_index, coords, labels)."""
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not rows or rows[0] != "epoch_index,x,y,label":
        raise ContractError(f"{path}: expected header epoch_index,x,y,label")
    parts = [r.split(",") for r in rows[1:]]
    idx = np.array([int(p[0]) for p in parts], dtype=np.int64)
    coords = np.array([[float(p[1]), float(p[2])] for p in parts])
    labels = np.array([p[3] for p in parts])
    return idx, coords, labels


def write_embedding_csv(coords, labels, epoch_index, path) -> None:
    lines = ["# schema_version=1", "epoch_index,x,y,label"]
    lines += [f"{int(e)},{x:.17g},{y:.17g},{lab}" for e, (x, y), lab in zip(epoch_index, coords, labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_id_report(rows, path) -> None:
    """``rows``: iterable of (session, method, k, value)."""
    lines = ["# schema_version=1", "session,method,k,value"]
    lines += [f"{s},{m},{k},{v:.17g}" for s, m, k, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")
