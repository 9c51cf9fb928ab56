"""Cosine-similarity scoring shared by all decoders and the experiment harness."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DataError

NORM_EPS = 1e-12


def cosine_similarities(preds, targets) -> np.ndarray:
    """Per-row cosine similarity; rows where either vector has norm < 1e-12 score 0."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} differs from target shape {t.shape}")
    if p.size == 0:
        raise ContractError("cosine similarity of empty input")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise DataError("non-finite predictions or targets")
    pn = np.linalg.norm(p, axis=-1)
    tn = np.linalg.norm(t, axis=-1)
    ok = (pn >= NORM_EPS) & (tn >= NORM_EPS)
    dots = np.sum(p * t, axis=-1)
    return np.where(ok, dots / np.where(ok, pn * tn, 1.0), 0.0)


def mean_cosine_similarity(preds, targets) -> float:
    return float(np.mean(cosine_similarities(preds, targets)))
