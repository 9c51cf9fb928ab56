"""Recursive exponentially weighted N-way PLS (REW-NPLS) trajectory decoder.

The model keeps exponentially weighted first and second moments of the
flattened feature tensors and the targets. After each chunk the latent
factors are re-extracted from the standardized cross-covariance:

* the cross-covariance ``Z`` (features x outputs) is projected onto its
  dominant output direction and the resulting 3-way tensor is reduced to a
  rank-1 term by power iteration, giving a Kronecker-structured weight
  ``w``;
* ``X`` is deflated in covariance form, so only the scatter matrix and the
  loadings of previous factors are needed;
* the regression ``W (P^T W)^-1 Q^T`` is rebuilt for every factor count.

Before a chunk is absorbed, every stored factor count is scored on it by mean
cosine similarity and the best one is selected (ties go to fewer factors).

Dense scatter storage is ``p x p`` (upper triangle maintained by BLAS
``syrk``); at 9600 features that is about 740 MB.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import blas

from . import timegrid
from .errors import ConfigurationError, ContractError, DataError, SchemaError, StateError
from .metrics import mean_cosine_similarity
from .numerics import kron3, rank1_tensor_approx, top_singular_triplet

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class RewNplsConfig:
    max_factors: int = 10
    forgetting: float = 1.0
    chunk_seconds: float = 15.0

    def validate(self) -> None:
        if self.max_factors < 1:
            raise ConfigurationError("max_factors must be >= 1")
        if not 0.0 < self.forgetting <= 1.0:
            raise ConfigurationError("forgetting factor must lie in (0, 1]")
        if self.chunk_seconds <= 0:
            raise ConfigurationError("chunk_seconds must be positive")

    @property
    def chunk_epochs(self) -> int:
        return max(1, int(round(self.chunk_seconds / timegrid.EPOCH_STEP_SECONDS)))


def chunk_bounds(n: int, step: int):
    """Chronological chunk boundaries; a trailing remainder under half a chunk joins the previous chunk."""
    bounds = [[lo, min(n, lo + step)] for lo in range(0, n, step)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < step / 2:
        last = bounds.pop()
        bounds[-1][1] = last[1]
    return [tuple(b) for b in bounds]


class RewNplsModel:
    def __init__(self, feature_shape=(64, 15, 10), n_outputs: int = 3, config: RewNplsConfig | None = None):
        self.config = config or RewNplsConfig()
        self.config.validate()
        self.feature_shape = tuple(int(d) for d in feature_shape)
        if len(self.feature_shape) != 3 or min(self.feature_shape) < 1:
            raise ContractError("feature_shape must be three positive dims")
        self.n_outputs = int(n_outputs)
        p = int(np.prod(self.feature_shape))
        self.n_features = p
        self.weight = 0.0
        self.x_mean = np.zeros(p)
        self.y_mean = np.zeros(self.n_outputs)
        self.scatter = np.zeros((p, p), order="F")          # upper triangle only
        self.cross = np.zeros((p, self.n_outputs))
        self.y_scatter = np.zeros((self.n_outputs, self.n_outputs))
        self.scale = np.ones(p)
        self.factors = []            # (w_ch, w_band, w_bin, output weight)
        self._coef = np.zeros((self.config.max_factors, p, self.n_outputs))   # standardized
        self._n_valid = 0
        self.selected_factors = 1
        self.n_chunks = 0
        self.validation_history = []

    # -- moments ---------------------------------------------------------------

    def _check_chunk(self, X, Y):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim == 0 or X.shape[0] == 0:
            raise ContractError("empty chunk")
        X = X.reshape(X.shape[0], -1)
        if X.shape[1] != self.n_features or Y.shape != (X.shape[0], self.n_outputs):
            raise ContractError(f"chunk shapes {X.shape} / {Y.shape} do not match the model")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DataError("chunk contains non-finite values")
        return X, Y

    def _absorb(self, X, Y):
        lam = self.config.forgetting
        m = X.shape[0]
        old = lam * self.weight
        total = old + m
        xc_mean = X.mean(axis=0)
        yc_mean = Y.mean(axis=0)
        Xc = X - xc_mean
        Yc = Y - yc_mean
        # parallel-combination of weighted scatter: chunk scatter plus the mean-shift term
        shift = np.sqrt(old * m / total) if self.weight > 0 else 0.0
        dx = shift * (xc_mean - self.x_mean)
        dy = shift * (yc_mean - self.y_mean)
        Xa = np.vstack([Xc, dx[None, :]])
        Ya = np.vstack([Yc, dy[None, :]])
        self.scatter = blas.dsyrk(1.0, Xa, beta=lam, c=self.scatter, trans=1, lower=0, overwrite_c=1)
        self.cross = lam * self.cross + Xa.T @ Ya
        self.y_scatter = lam * self.y_scatter + Ya.T @ Ya
        self.x_mean = (old * self.x_mean + m * xc_mean) / total
        self.y_mean = (old * self.y_mean + m * yc_mean) / total
        self.weight = total
        self.scale = np.maximum(np.sqrt(np.maximum(np.diag(self.scatter), 0.0) / total), SCALE_FLOOR)

    # -- factors ---------------------------------------------------------------

    def _xx(self, W):
        """Standardized scatter times ``W`` (vector or matrix)."""
        d = self.scale
        if W.ndim == 1:
            return blas.dsymv(1.0, self.scatter, W / d, lower=0) / d
        return blas.dsymm(1.0, self.scatter, W / d[:, None], side=0, lower=0) / d[:, None]

    def _leading_weight(self, Z):
        # project onto the dominant output direction, then a rank-1 term over the feature modes
        v = np.ones(1) if self.n_outputs == 1 else top_singular_triplet(Z).v
        r = rank1_tensor_approx(np.reshape(Z @ v, self.feature_shape))
        return r, kron3(r.w1, r.w2, r.w3), v

    def _extract(self):
        F = self.config.max_factors
        p, q = self.n_features, self.n_outputs
        self.factors = []
        self._coef = np.zeros((F, p, q))
        self._n_valid = 0
        y_var = np.trace(self.y_scatter) / self.weight
        if y_var <= 1e-20 * max(1.0, float(self.y_mean @ self.y_mean)):
            return
        Z = self.cross / self.scale[:, None]
        z0 = np.linalg.norm(Z)
        if z0 == 0.0:
            return
        W = np.zeros((p, 0))
        P = np.zeros((p, 0))
        Q = np.zeros((q, 0))
        norms = []
        for f in range(F):
            if np.linalg.norm(Z) <= 1e-10 * z0:
                break
            r, w, v = self._leading_weight(Z)
            xw = self._xx(w)
            if P.shape[1]:
                xw -= P @ (np.asarray(norms) * (P.T @ w))
            nf = float(w @ xw)
            if nf <= 1e-12 * self.weight:
                break
            pf = xw / nf
            qf = (Z.T @ w) / nf
            Z = Z - nf * np.outer(pf, qf)
            W = np.column_stack([W, w])
            P = np.column_stack([P, pf])
            Q = np.column_stack([Q, qf])
            norms.append(nf)
            self.factors.append((r.w1, r.w2, r.w3, v))
            self._coef[f] = W @ np.linalg.solve(P.T @ W, Q.T)
            self._n_valid = f + 1
        for f in range(self._n_valid, F):
            # no further structure: larger factor counts reuse the last model
            self._coef[f] = self._coef[self._n_valid - 1] if self._n_valid else 0.0

    # -- public ----------------------------------------------------------------

    def _predict_all(self, X):
        Xn = (X - self.x_mean) / self.scale
        return np.einsum("np,fpq->fnq", Xn, self._coef) + self.y_mean

    def update_chunk(self, X, Y) -> "RewNplsModel":
        X, Y = self._check_chunk(X, Y)
        if self.n_chunks > 0:
            preds = self._predict_all(X)
            scores = [mean_cosine_similarity(pr, Y) for pr in preds]
            self.selected_factors = int(np.argmax(scores)) + 1     # first maximum = fewest factors
            self.validation_history.append(scores)
        self._absorb(X, Y)
        self._extract()
        self.n_chunks += 1
        return self

    def fit(self, X, Y) -> "RewNplsModel":
        """Stream ``X, Y`` through ``update_chunk`` in chronological chunks."""
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        Y = np.asarray(Y, dtype=np.float64)
        for lo, hi in chunk_bounds(len(X), self.config.chunk_epochs):
            self.update_chunk(X[lo:hi], Y[lo:hi])
        return self

    def _require_trained(self):
        if self.n_chunks == 0:
            raise StateError("model has not processed any chunk")

    def coefficients(self, n_factors: int | None = None):
        """``(B, intercept)`` in raw feature units, B shaped ``feature_shape + (outputs,)``."""
        self._require_trained()
        F = self.selected_factors if n_factors is None else int(n_factors)
        if not 1 <= F <= self.config.max_factors:
            raise ContractError(f"factor count {F} outside [1, {self.config.max_factors}]")
        Bn = self._coef[F - 1]
        B = Bn / self.scale[:, None]
        intercept = self.y_mean - self.x_mean @ B
        return B.reshape(self.feature_shape + (self.n_outputs,)), intercept

    def predict(self, X, n_factors: int | None = None) -> np.ndarray:
        self._require_trained()
        X = np.asarray(X, dtype=np.float64)
        single = X.shape == self.feature_shape or X.shape == (self.n_features,)
        X2 = X.reshape(1 if single else len(X), -1)
        if X2.shape[1] != self.n_features:
            raise ContractError(f"input has {X2.shape[1]} features, model expects {self.n_features}")
        F = self.selected_factors if n_factors is None else int(n_factors)
        out = ((X2 - self.x_mean) / self.scale) @ self._coef[F - 1] + self.y_mean
        return out[0] if single else out

    def coefficient_count(self) -> int:
        return self.n_features * self.n_outputs

    # -- checkpoint ------------------------------------------------------------

    def save(self, path, include_scatter: bool = True) -> None:
        """Versioned checkpoint: magic, JSON manifest length, manifest, float64 payload."""
        blocks = {"x_mean": self.x_mean, "y_mean": self.y_mean, "scale": self.scale,
                  "cross": self.cross, "y_scatter": self.y_scatter, "coef": self._coef}
        if include_scatter:
            blocks["scatter"] = np.triu(self.scatter)
        manifest = {
            "kind": "ecoglc.rewnpls", "version": CHECKPOINT_VERSION,
            "feature_shape": list(self.feature_shape), "n_outputs": self.n_outputs,
            "config": asdict(self.config), "weight": self.weight, "n_chunks": self.n_chunks,
            "selected_factors": self.selected_factors, "n_valid": self._n_valid,
            "blocks": [[k, list(v.shape)] for k, v in blocks.items()],
        }
        head = json.dumps(manifest, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head)
            for v in blocks.values():
                np.ascontiguousarray(v, dtype="<f8").tofile(fh)

    @classmethod
    def load(cls, path) -> "RewNplsModel":
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise SchemaError(f"{path}: not a REW-NPLS checkpoint")
            (size,) = struct.unpack("<I", fh.read(4))
            man = json.loads(fh.read(size))
            if man.get("version") != CHECKPOINT_VERSION:
                raise SchemaError(f"{path}: checkpoint version {man.get('version')}")
            data = np.fromfile(fh, dtype="<f8")
        model = cls(man["feature_shape"], man["n_outputs"], RewNplsConfig(**man["config"]))
        off = 0
        for name, shape in man["blocks"]:
            size = int(np.prod(shape))
            arr = data[off:off + size].reshape(shape)
            off += size
            if name == "scatter":
                model.scatter = np.asfortranarray(arr)
            elif name == "coef":
                model._coef = arr.copy()
            else:
                setattr(model, name, arr.copy())
        model.weight = man["weight"]
        model.n_chunks = man["n_chunks"]
        model.selected_factors = man["selected_factors"]
        model._n_valid = man["n_valid"]
        return model


CHECKPOINT_MAGIC = b"ECOGNPLS"
CHECKPOINT_VERSION = 1


def update_chunk(model: RewNplsModel, X_chunk, Y_chunk) -> RewNplsModel:
    return model.update_chunk(X_chunk, Y_chunk)


def predict(model: RewNplsModel, X) -> np.ndarray:
    return model.predict(X)


def coefficient_count(model: RewNplsModel) -> int:
    return model.coefficient_count()
