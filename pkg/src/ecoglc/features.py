"""Time-frequency observation tensors from raw sessions.

Every 100 ms a 1 s window is cut, convolved with a bank of complex Morlet
wavelets and the modulus is averaged over ten 100 ms sub-bins, giving one
``channels x bands x bins`` tensor per epoch (64 x 15 x 10 at defaults).
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import timegrid
from .errors import ConfigurationError, ContractError, InsufficientDataError, SchemaError
from .synth import GRID_COLS, GRID_ROWS, STATES, Session

DEFAULT_FREQUENCIES = tuple(float(f) for f in range(10, 151, 10))
DEFAULT_CYCLES = 7.0


@dataclass(frozen=True)
class WaveletBank:
    sampling_rate: float
    center_frequencies: tuple
    cycles: float
    kernels: tuple = field(repr=False)

    @property
    def n_bands(self) -> int:
        return len(self.kernels)

    @property
    def max_length(self) -> int:
        return max(len(k) for k in self.kernels)


def build_wavelet_bank(sampling_rate: float = 586.0, frequencies=DEFAULT_FREQUENCIES,
                       cycles: float = DEFAULT_CYCLES) -> WaveletBank:
    """Complex Morlet kernels, L2-normalised, odd length ``ceil(6 sigma_t fs)``.

    ``sigma_t = cycles / (2 pi f)`` is the temporal width of the gaussian
    envelope.
    """
    freqs = tuple(float(f) for f in frequencies)
    if not freqs:
        raise ConfigurationError("wavelet bank needs at least one frequency")
    if cycles <= 0:
        raise ConfigurationError("cycles must be positive")
    kernels = []
    for f in freqs:
        if not 0 < f < sampling_rate / 2:
            raise ConfigurationError(f"wavelet frequency {f} Hz not below Nyquist ({sampling_rate / 2} Hz)")
        sigma_t = cycles / (2 * math.pi * f)
        length = math.ceil(6 * sigma_t * sampling_rate)
        length += 1 - length % 2
        t = (np.arange(length) - (length - 1) / 2) / sampling_rate
        k = np.exp(-t ** 2 / (2 * sigma_t ** 2)) * np.exp(2j * math.pi * f * t)
        kernels.append(k / np.linalg.norm(k))
    return WaveletBank(float(sampling_rate), freqs, float(cycles), tuple(kernels))


@dataclass(frozen=True)
class FeatureEpoch:
    values: np.ndarray          # (channels, bands, bins)
    epoch_index: int
    session_index: int


@dataclass
class FeatureSet:
    """Epochs of one or more sessions, stacked for vectorised decoders.

    ``bin_targets[i, j]`` is the movement target at the end of sub-bin ``j``
    of epoch ``i`` (the label of epoch ``i - (bins - 1) + j`` in the same
    session); CNN+LSTM supervision uses it.
    """
    values: np.ndarray          # (n, channels, bands, bins)
    targets: np.ndarray         # (n, 3)
    states: np.ndarray          # (n,)
    epoch_index: np.ndarray     # (n,)
    session_index: np.ndarray   # (n,)
    bin_targets: np.ndarray     # (n, bins, 3)
    normalization: tuple | None = None

    def __post_init__(self):
        n = len(self.values)
        for name in ("targets", "states", "epoch_index", "session_index", "bin_targets"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"FeatureSet.{name} length differs from values")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def minutes(self) -> float:
        return timegrid.minutes(len(self))

    def flat(self) -> np.ndarray:
        return self.values.reshape(len(self), -1)

    def epoch(self, i: int) -> FeatureEpoch:
        return FeatureEpoch(self.values[i], int(self.epoch_index[i]), int(self.session_index[i]))

    def select(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(self.values[idx], self.targets[idx], self.states[idx], self.epoch_index[idx],
                          self.session_index[idx], self.bin_targets[idx], self.normalization)

    def for_states(self, *states: str) -> "FeatureSet":
        return self.select(np.flatnonzero(np.isin(self.states, states)))

    @classmethod
    def concat(cls, sets) -> "FeatureSet":
        sets = list(sets)
        if not sets:
            raise ContractError("cannot concatenate an empty list of feature sets")
        return cls(*(np.concatenate([getattr(s, k) for s in sets]) for k in
                     ("values", "targets", "states", "epoch_index", "session_index", "bin_targets")))


def _bin_targets(epoch_targets: np.ndarray, n_bins: int) -> np.ndarray:
    n = len(epoch_targets)
    src = np.arange(n)[:, None] - (n_bins - 1) + np.arange(n_bins)[None, :]
    return epoch_targets[np.clip(src, 0, n - 1)]


def _padded_kernel_spectra(bank: WaveletBank, nfft: int) -> np.ndarray:
    lmax = bank.max_length
    out = np.zeros((bank.n_bands, nfft), dtype=complex)
    for b, k in enumerate(bank.kernels):
        off = (lmax - len(k)) // 2
        pad = np.zeros(lmax, dtype=complex)
        pad[off:off + len(k)] = k
        out[b] = sfft.fft(pad, nfft)
    return out


def _window_features(raw, starts, bank, width, edges, batch=8):
    """Cut each window, zero-pad and convolve it on its own."""
    n_ch = raw.shape[1]
    lmax = bank.max_length
    c = (lmax - 1) // 2
    nfft = sfft.next_fast_len(width + lmax - 1)
    K = _padded_kernel_spectra(bank, nfft)
    out = np.empty((len(starts), n_ch, bank.n_bands, len(edges) - 1))
    widths = np.diff(edges).astype(float)
    for b0 in range(0, len(starts), batch):
        st = starts[b0:b0 + batch]
        seg = np.stack([raw[s:s + width].T for s in st])          # (b, ch, width)
        spec = sfft.fft(seg, nfft, axis=-1)
        conv = sfft.ifft(spec[:, :, None, :] * K[None, None], axis=-1, overwrite_x=True)
        mod = np.abs(conv[..., c:c + width])
        out[b0:b0 + len(st)] = np.add.reduceat(mod, edges[:-1], axis=-1) / widths
    return out


def _edge_leak_matrices(kernel: np.ndarray):
    """Matrices mapping the ``c`` samples just outside a window onto its first/last ``c`` outputs.

    For a centred kernel of half-length ``c``:
    ``left[n, j-1] = k[c + n + j]`` and ``right[r, j-1] = k[c - r - j]`` for
    ``j <= c - n`` (resp. ``c - r``), zero elsewhere.
    """
    c = (len(kernel) - 1) // 2
    left = np.zeros((c, c), dtype=complex)
    right = np.zeros((c, c), dtype=complex)
    for n in range(c):
        j = np.arange(1, c - n + 1)
        left[n, j - 1] = kernel[c + n + j]
        right[n, j - 1] = kernel[c - n - j]
    return c, left, right


def _window_features_fast(raw, starts, bank, width, edges):
    """Same result as ``_window_features`` at a fraction of the cost.

    The recording is convolved once and the modulus is binned for every
    window from a cumulative sum. Samples outside a window only influence its
    outputs within one kernel half-length of either edge, so only there the
    leaked contribution is subtracted and the modulus recomputed. This is
    exactly zero-padded per-window convolution.
    """
    n, n_ch = raw.shape
    lmax = bank.max_length
    cmax = (lmax - 1) // 2
    if 2 * cmax >= width:
        return _window_features(raw, starts, bank, width, edges)
    nfft = sfft.next_fast_len(n + lmax - 1)
    K = _padded_kernel_spectra(bank, nfft)
    n_bins = len(edges) - 1
    bin_of = np.searchsorted(edges, np.arange(width), side="right") - 1
    onehot = np.eye(n_bins)[bin_of]                              # (width, bins)
    corrections = []
    for k in bank.kernels:
        c, left, right = _edge_leak_matrices(k)
        corrections.append((c, left.real.T.copy(), left.imag.T.copy(),
                            right[::-1].real.T.copy(), right[::-1].imag.T.copy(),
                            onehot[:c], onehot[width - c:]))
    padded = np.zeros((n + 2 * cmax, n_ch))
    padded[cmax:cmax + n] = raw
    lo = starts[:, None] + edges[None, :-1]
    hi = starts[:, None] + edges[None, 1:]
    out = np.empty((len(starts), n_ch, bank.n_bands, n_bins))
    widths = np.diff(edges).astype(float)
    for ch in range(n_ch):
        y = sfft.ifft(sfft.fft(raw[:, ch], nfft)[None, :] * K, axis=-1)[:, cmax:cmax + n]
        csum = np.zeros((bank.n_bands, n + 1))
        np.cumsum(np.abs(y), axis=1, out=csum[:, 1:])
        sums = csum[:, hi] - csum[:, lo]                          # (bands, epochs, bins)
        xp = padded[:, ch]
        for band, (c, l_re, l_im, r_re, r_im, l_bins, r_bins) in enumerate(corrections):
            if c == 0:
                continue
            j = np.arange(1, c + 1)
            before = xp[starts[:, None] + cmax - j[None, :]]            # x[s - j]
            after = xp[starts[:, None] + cmax + width - 1 + j[None, :]]  # x[s + W - 1 + j]
            head = y[band, starts[:, None] + np.arange(c)[None, :]]
            tail = y[band, starts[:, None] + (width - c) + np.arange(c)[None, :]]
            fixed_head = head - (before @ l_re + 1j * (before @ l_im))
            fixed_tail = tail - (after @ r_re + 1j * (after @ r_im))
            sums[band] += (np.abs(fixed_head) - np.abs(head)) @ l_bins
            sums[band] += (np.abs(fixed_tail) - np.abs(tail)) @ r_bins
        out[:, ch] = np.transpose(sums / widths, (1, 0, 2))
    return out


def _continuous_features(raw, starts, bank, width, edges):
    """Convolve the whole recording once, then average the modulus per window bin."""
    n, n_ch = raw.shape
    lmax = bank.max_length
    c = (lmax - 1) // 2
    nfft = sfft.next_fast_len(n + lmax - 1)
    K = _padded_kernel_spectra(bank, nfft)
    lo = (starts[:, None] + edges[None, :-1])
    hi = (starts[:, None] + edges[None, 1:])
    widths = (hi - lo).astype(float)
    out = np.empty((len(starts), n_ch, bank.n_bands, len(edges) - 1))
    for ch in range(n_ch):
        spec = sfft.fft(raw[:, ch], nfft)
        mod = np.abs(sfft.ifft(spec[None, :] * K, axis=-1)[:, c:c + n])
        csum = np.concatenate([np.zeros((bank.n_bands, 1)), np.cumsum(mod, axis=1)], axis=1)
        out[:, ch] = np.transpose((csum[:, hi] - csum[:, lo]) / widths, (1, 0, 2))
    return out


def extract_features(session: Session, bank: WaveletBank, *, border: str = "window",
                     n_bins: int = timegrid.N_BINS) -> FeatureSet:
    """Feature tensors for every epoch of ``session``.

    ``border="window"`` convolves each zero-padded 1 s window separately;
    ``border="continuous"`` convolves the full recording and only then cuts
    windows (much faster; differs near window edges).
    """
    fs = session.sampling_rate
    if abs(bank.sampling_rate - fs) > 1e-9:
        raise ConfigurationError(f"bank built for {bank.sampling_rate} Hz, session is {fs} Hz")
    width = timegrid.window_length(fs)
    if session.n_samples < width:
        raise InsufficientDataError(f"session has {session.n_samples} samples, needs at least {width}")
    starts = timegrid.epoch_starts(session.n_samples, fs)
    if len(session.epoch_targets) != len(starts):
        raise ContractError("session labels do not match the epoch grid")
    edges = timegrid.bin_edges(fs, n_bins)
    if border == "window":
        values = _window_features_fast(session.raw, starts, bank, width, edges)
    elif border == "continuous":
        values = _continuous_features(session.raw, starts, bank, width, edges)
    else:
        raise ConfigurationError(f"unknown border policy {border!r}")
    n = len(starts)
    return FeatureSet(values, np.asarray(session.epoch_targets, float).copy(), np.asarray(session.epoch_states).copy(),
                      np.arange(n), np.full(n, session.session_index), _bin_targets(session.epoch_targets, n_bins))


def repair_artifacts(session: Session, z_threshold: float = 8.0, dilation: int = 5):
    """Detect outlier samples per channel and bridge them by linear interpolation.

    Samples with robust z-score (median / 1.4826 MAD) above ``z_threshold``
    are flagged, the flags are dilated by ``dilation`` samples on both sides,
    and each flagged run is replaced by the straight line between its clean
    neighbours. Returns ``(repaired_copy, mask)``.
    """
    if not z_threshold > 0:
        raise ContractError("z_threshold must be positive")
    out = session.copy()
    raw = out.raw
    n = raw.shape[0]
    med = np.median(raw, axis=0)
    mad = 1.4826 * np.median(np.abs(raw - med), axis=0)
    mask = np.zeros(raw.shape, dtype=bool)
    idx = np.arange(n)
    for ch in range(raw.shape[1]):
        if mad[ch] == 0:
            flagged = raw[:, ch] != med[ch]
        else:
            flagged = np.abs(raw[:, ch] - med[ch]) > z_threshold * mad[ch]
        if not flagged.any():
            continue
        if dilation > 0:
            hits = np.flatnonzero(flagged)
            lo = np.clip(hits - dilation, 0, n)
            hi = np.clip(hits + dilation + 1, 0, n)
            delta = np.zeros(n + 1, dtype=np.int64)
            np.add.at(delta, lo, 1)
            np.add.at(delta, hi, -1)
            flagged = np.cumsum(delta[:-1]) > 0
        mask[:, ch] = flagged
        clean = ~flagged
        if not clean.any():
            warnings.warn(f"channel {ch} entirely flagged as artifact; zero-filled", RuntimeWarning)
            raw[:, ch] = 0.0
            continue
        raw[flagged, ch] = np.interp(idx[flagged], idx[clean], raw[clean, ch])
    out.manifest["repair"] = {"z_threshold": float(z_threshold), "dilation": int(dilation),
                              "flagged_samples": int(mask.sum())}
    return out, mask


def grid_position(implant: int, row: int, col: int) -> tuple:
    return row, implant * GRID_COLS + col


def to_grid(values, layout) -> np.ndarray:
    """Scatter ``(..., channels, bands, bins)`` onto ``(..., bands, 8, 8, bins)``.

    Implant 0 occupies grid columns 0-3, implant 1 columns 4-7; unpopulated
    cells stay zero.
    """
    if isinstance(values, FeatureEpoch):
        values = values.values
    x = np.asarray(values, dtype=float)
    if x.shape[-3] != len(layout):
        raise ContractError(f"{x.shape[-3]} channels but layout has {len(layout)} entries")
    cells = [grid_position(*pos) for pos in layout]
    if len(set(cells)) != len(cells):
        raise ConfigurationError("grid layout maps two channels onto one cell")
    for r, c in cells:
        if not (0 <= r < GRID_ROWS and 0 <= c < 2 * GRID_COLS):
            raise ConfigurationError(f"grid cell {(r, c)} outside the 8x8 grid")
    lead = x.shape[:-3]
    bands, bins = x.shape[-2:]
    grid = np.zeros(lead + (bands, GRID_ROWS, 2 * GRID_COLS, bins))
    rows = np.array([r for r, _ in cells])
    cols = np.array([c for _, c in cells])
    grid[..., rows, cols, :] = np.moveaxis(x, -3, -2)
    return grid


def from_grid(grid, layout) -> np.ndarray:
    """Inverse of ``to_grid``: ``(..., bands, 8, 8, bins)`` back to channels."""
    g = np.asarray(grid, dtype=float)
    cells = [grid_position(*pos) for pos in layout]
    rows = np.array([r for r, _ in cells])
    cols = np.array([c for _, c in cells])
    return np.moveaxis(g[..., rows, cols, :], -2, -3)


def split_implants(grid: np.ndarray) -> tuple:
    """Per-implant views ``(..., bands, 8, 4, bins)`` of a full grid."""
    return grid[..., :GRID_COLS, :], grid[..., GRID_COLS:, :]


class Standardizer:
    """Per-feature z-scoring with statistics taken from a training set."""

    def __init__(self, floor: float = 1e-6):
        self.floor = floor
        self.mean = None
        self.std = None

    def fit(self, X: np.ndarray) -> "Standardizer":
        self.mean = X.mean(axis=0)
        self.std = np.maximum(X.std(axis=0), self.floor)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


# ---------------------------------------------------------------------------
# feature cache: header + flat little-endian float64 payload

CACHE_MAGIC = b"ECOGFEAT"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")


def save_feature_cache(fset: FeatureSet, path) -> None:
    """Write ``magic, version, channels, bands, bins, count, n_sessions`` then float64 blocks.

    Blocks in order: values, targets, bin targets, epoch index, session index,
    state code. All integers are stored exactly as float64.
    """
    n = len(fset)
    ch, bands, bins = fset.shape
    codes = np.array([STATES.index(s) for s in fset.states], dtype=float)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, ch, bands, bins, n,
                              len(np.unique(fset.session_index))))
        for block in (fset.values, fset.targets, fset.bin_targets,
                      fset.epoch_index.astype(float), fset.session_index.astype(float), codes):
            np.ascontiguousarray(block, dtype="<f8").tofile(fh)


def load_feature_cache(path) -> FeatureSet:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise SchemaError(f"{path}: truncated feature cache header")
        magic, version, ch, bands, bins, n, _ = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise SchemaError(f"{path}: not a feature cache")
        if version != CACHE_VERSION:
            raise SchemaError(f"{path}: feature cache version {version}, expected {CACHE_VERSION}")
        data = np.fromfile(fh, dtype="<f8")
    sizes = [n * ch * bands * bins, n * 3, n * bins * 3, n, n, n]
    if data.size != sum(sizes):
        raise SchemaError(f"{path}: payload size mismatch")
    parts = np.split(data, np.cumsum(sizes)[:-1])
    return FeatureSet(parts[0].reshape(n, ch, bands, bins), parts[1].reshape(n, 3),
                      np.array([STATES[int(c)] for c in parts[5]], dtype="<U10"),
                      parts[3].astype(np.int64), parts[4].astype(np.int64), parts[2].reshape(n, bins, 3))


def export_features_csv(fset: FeatureSet, path) -> None:
    """Long-format export: ``epoch_index, channel, band, bin, value``."""
    n, ch, bands, bins = fset.values.shape
    e, c, b, t = np.meshgrid(fset.epoch_index, np.arange(ch), np.arange(bands), np.arange(bins), indexing="ij")
    index = np.column_stack([e.ravel(), c.ravel(), b.ravel(), t.ravel()])
    with open(path, "w") as fh:
        fh.write("epoch_index,channel,band,bin,value\n")
        for row, val in zip(index, fset.values.ravel()):
            fh.write(f"{row[0]},{row[1]},{row[2]},{row[3]},{val:.17g}\n")
