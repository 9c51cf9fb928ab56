"""Epoch grid shared by the generator (labels) and the feature extractor.

One epoch is a 1 s window advanced every 100 ms. Window starts are
``round(i * fs / 10)`` so a non-integer step such as 58.6 samples does not
accumulate drift.
"""
from __future__ import annotations

import math

import numpy as np

EPOCH_STEP_SECONDS = 0.1
N_BINS = 10


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def window_length(fs: float) -> int:
    return _round_half_up(fs)


def epoch_start(i: int, fs: float) -> int:
    if float(fs).is_integer():
        # exact integer arithmetic for floor(i*fs/10 + 0.5)
        return (2 * i * int(fs) + 10) // 20
    return _round_half_up(i * fs / 10.0)


def n_epochs(n_samples: int, fs: float) -> int:
    """Number of complete 1 s windows on the 100 ms grid."""
    w = window_length(fs)
    if n_samples < w:
        return 0
    i = int((n_samples - w) * 10 / fs) + 2
    while i > 0 and epoch_start(i - 1, fs) + w > n_samples:
        i -= 1
    return i


def epoch_starts(n_samples: int, fs: float) -> np.ndarray:
    return np.array([epoch_start(i, fs) for i in range(n_epochs(n_samples, fs))], dtype=np.int64)


def bin_edges(fs: float, n_bins: int = N_BINS) -> np.ndarray:
    """Sub-bin boundaries within a window, ``round(j * fs / n_bins)`` for j = 0..n_bins."""
    if float(fs).is_integer() and n_bins == N_BINS:
        return np.array([epoch_start(j, fs) for j in range(n_bins + 1)], dtype=np.int64)
    return np.array([_round_half_up(j * fs / n_bins) for j in range(n_bins + 1)], dtype=np.int64)


def window_end_samples(n_samples: int, fs: float) -> np.ndarray:
    """Index of the last sample of every epoch window (epoch labels are read here)."""
    return epoch_starts(n_samples, fs) + window_length(fs) - 1


def minutes(n_epoch_count: int) -> float:
    return n_epoch_count * EPOCH_STEP_SECONDS / 60.0
