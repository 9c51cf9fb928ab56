import numpy as np
import pytest

from ecoglc import timegrid
from ecoglc.errors import ConfigurationError, InsufficientDataError, SchemaError
from ecoglc.features import (
    _window_features,
    build_wavelet_bank,
    extract_features,
    export_features_csv,
    from_grid,
    load_feature_cache,
    repair_artifacts,
    save_feature_cache,
    split_implants,
    to_grid,
)
from ecoglc.synth import (
    GeneratorConfig,
    Session,
    artifact_mask,
    default_grid_layout,
    generate_session,
    inject_artifacts,
)


def make_session(raw, fs=586.0, index=0):
    n_ep = timegrid.n_epochs(raw.shape[0], fs)
    targets = np.tile([1.0, 0.0, 0.0], (n_ep, 1))
    states = np.array(["left_hand"] * n_ep, dtype="<U10")
    return Session(index, raw, fs, targets, states, default_grid_layout(raw.shape[1]), {})


def direct_features(x, fs, kernel, start, width, edges):
    """Plain np.convolve on one zero-padded window; the reference everything else must match."""
    seg = x[start:start + width]
    y = np.convolve(seg, kernel, mode="same")
    mod = np.abs(y)
    return np.array([mod[edges[j]:edges[j + 1]].mean() for j in range(len(edges) - 1)])


class TestWaveletBank:
    def test_default_count(self):
        assert build_wavelet_bank(586.0).n_bands == 15

    def test_kernel_properties(self):
        bank = build_wavelet_bank(586.0)
        for k in bank.kernels:
            assert len(k) % 2 == 1
            assert np.linalg.norm(k) == pytest.approx(1.0, abs=1e-12)
            assert np.argmax(np.abs(k)) == (len(k) - 1) // 2

    def test_50hz_selectivity(self):
        fs = 586.0
        bank = build_wavelet_bank(fs, frequencies=(50.0,))
        t = np.arange(int(fs)) / fs
        resp = {}
        for f in (30.0, 50.0, 70.0):
            y = np.convolve(np.sin(2 * np.pi * f * t), bank.kernels[0], mode="same")
            resp[f] = np.abs(y[200:-200]).mean()
        assert resp[50.0] > resp[30.0] and resp[50.0] > resp[70.0]

    def test_nyquist(self):
        with pytest.raises(ConfigurationError):
            build_wavelet_bank(200.0, frequencies=(100.0,))


class TestExtractFeatures:
    bank = build_wavelet_bank(586.0)

    def test_shape_and_epoch_count(self):
        s = make_session(np.random.default_rng(0).normal(size=(5860, 64)))
        fs = extract_features(s, self.bank)
        assert len(fs) == 91
        assert fs.shape == (64, 15, 10)
        assert fs.flat().shape[1] == 9600
        assert np.all(fs.values >= 0)

    def test_zero_signal(self):
        fs = extract_features(make_session(np.zeros((1000, 4))), self.bank)
        assert np.all(fs.values == 0)

    def test_pure_100hz(self):
        t = np.arange(3000) / 586.0
        raw = np.tile(np.sin(2 * np.pi * 100 * t)[:, None], (1, 2))
        fs = extract_features(make_session(raw), self.bank)
        assert np.all(np.argmax(fs.values, axis=2) == 9)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            extract_features(make_session(np.zeros((500, 2))), self.bank)

    def test_matches_direct_convolution_oracle(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(2000, 3))
        fs = extract_features(make_session(raw), self.bank)
        starts = timegrid.epoch_starts(2000, 586.0)
        edges = timegrid.bin_edges(586.0)
        for i in (0, 7, len(starts) - 1):
            for ch in range(3):
                for b in (0, 6, 14):
                    ref = direct_features(raw[:, ch], 586.0, self.bank.kernels[b], starts[i], 586, edges)
                    np.testing.assert_allclose(fs.values[i, ch, b], ref, rtol=1e-9, atol=1e-12)

    def test_fast_path_equals_per_window_fft(self):
        raw = np.random.default_rng(2).normal(size=(1800, 4))
        fs = extract_features(make_session(raw), self.bank)
        starts = timegrid.epoch_starts(1800, 586.0)
        ref = _window_features(raw, starts, self.bank, 586, timegrid.bin_edges(586.0))
        np.testing.assert_allclose(fs.values, ref, rtol=1e-9, atol=1e-12)

    def test_translation_covariance(self):
        fs_hz = 500.0
        bank = build_wavelet_bank(fs_hz)
        raw = np.random.default_rng(3).normal(size=(3000, 2))
        a = extract_features(make_session(raw, fs_hz), bank)
        b = extract_features(make_session(raw[50:], fs_hz), bank)
        n = len(b)
        np.testing.assert_allclose(a.values[1:n + 1], b.values, rtol=0, atol=1e-9)

    def test_continuous_border_close_in_interior(self):
        raw = np.random.default_rng(4).normal(size=(3000, 2))
        s = make_session(raw)
        w = extract_features(s, self.bank).values
        c = extract_features(s, self.bank, border="continuous").values
        # the middle bins are far from window edges for the high-frequency kernels
        np.testing.assert_allclose(w[:, :, 10:, 3:7], c[:, :, 10:, 3:7], rtol=1e-9)

    def test_bin_targets_alignment(self):
        s = generate_session(GeneratorConfig(session_length=5.0, n_sessions=1, n_channels=4), 0)
        fs = extract_features(s, build_wavelet_bank(586.0, frequencies=(50.0,)))
        np.testing.assert_array_equal(fs.bin_targets[:, -1], fs.targets)
        np.testing.assert_array_equal(fs.bin_targets[20, 0], fs.targets[11])


class TestRepair:
    def test_clean_session_untouched(self):
        s = generate_session(GeneratorConfig(session_length=30.0, n_sessions=1, n_channels=16), 0)
        out, mask = repair_artifacts(s)
        assert not mask.any()
        assert out.raw.tobytes() == s.raw.tobytes()

    def test_recall_on_injected(self):
        s = generate_session(GeneratorConfig(session_length=120.0, n_sessions=1, n_channels=16), 0)
        dirty = inject_artifacts(s, 4.0)
        truth = artifact_mask(dirty)
        assert truth.any()
        out, mask = repair_artifacts(dirty)
        assert (mask & truth).sum() / truth.sum() >= 0.9

    def test_interpolation_endpoints_continuous(self):
        x = np.sin(np.arange(600) / 10.0)
        x[300:310] = 100.0
        s = make_session(np.column_stack([x, x]))
        out, mask = repair_artifacts(s)
        runs = np.flatnonzero(mask[:, 0])
        lo, hi = runs[0], runs[-1]
        local = np.ptp(x[lo - 20:lo])
        seg = out.raw[lo - 1:hi + 2, 0]
        assert np.max(np.abs(np.diff(seg))) <= local

    def test_fully_flagged_channel(self):
        raw = np.random.default_rng(0).normal(size=(601, 2))
        # spikes every 10th sample; the +-5 dilation then covers the whole channel
        raw[::10, 1] = 1e3
        s = make_session(raw)
        with pytest.warns(RuntimeWarning):
            out, mask = repair_artifacts(s)
        assert np.all(out.raw[:, 1] == 0)


class TestGrid:
    layout = default_grid_layout(64)

    def test_round_trip(self):
        x = np.random.default_rng(0).normal(size=(5, 64, 15, 10))
        g = to_grid(x, self.layout)
        assert g.shape == (5, 15, 8, 8, 10)
        np.testing.assert_array_equal(from_grid(g, self.layout), x)

    def test_sum_of_ones(self):
        g = to_grid(np.ones((64, 15, 10)), self.layout)
        assert g.sum() == 9600
        assert np.count_nonzero(g[0, :, :, 0]) == 64

    def test_split_shapes(self):
        g = to_grid(np.ones((200, 64, 15, 10)), self.layout)
        left, right = split_implants(g)
        assert left.shape == right.shape == (200, 15, 8, 4, 10)

    def test_collision(self):
        bad = list(self.layout)
        bad[1] = bad[0]
        with pytest.raises(ConfigurationError):
            to_grid(np.ones((64, 15, 10)), bad)


class TestCache:
    def test_round_trip(self, tmp_path):
        s = generate_session(GeneratorConfig(session_length=4.0, n_sessions=1, n_channels=4), 0)
        fs = extract_features(s, build_wavelet_bank(586.0, frequencies=(30.0, 90.0)))
        save_feature_cache(fs, tmp_path / "f.bin")
        back = load_feature_cache(tmp_path / "f.bin")
        for k in ("values", "targets", "bin_targets", "epoch_index", "session_index", "states"):
            np.testing.assert_array_equal(getattr(back, k), getattr(fs, k))
        export_features_csv(fs, tmp_path / "features.csv")
        lines = (tmp_path / "features.csv").read_text().splitlines()
        assert lines[0] == "epoch_index,channel,band,bin,value"
        assert len(lines) == 1 + fs.values.size

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTACACHE" * 10)
        with pytest.raises(SchemaError):
            load_feature_cache(tmp_path / "x.bin")
