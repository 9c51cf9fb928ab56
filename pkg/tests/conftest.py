import numpy as np
import pytest

from ecoglc.features import FeatureSet

SMALL_SHAPE = (4, 3, 2)


def make_sessions(n_sessions, epochs=60, shape=SMALL_SHAPE, noise=0.5, quality=None, seed=0):
    """Feature sets carrying the targets through a fixed random linear map plus noise.

    ``quality[s]`` scales the signal of session ``s``.
    """
    rng = np.random.default_rng([seed, 99])
    p = int(np.prod(shape))
    A = rng.normal(size=(3, p))
    out = []
    states = np.array(["left_hand", "right_hand", "idle"])
    for s in range(n_sessions):
        r = np.random.default_rng([seed, s])
        Y = r.normal(size=(epochs, 3))
        Y /= np.linalg.norm(Y, axis=1, keepdims=True)
        q = 1.0 if quality is None else quality[s]
        X = q * Y @ A + noise * r.normal(size=(epochs, p))
        st = states[np.arange(epochs) % 3]
        Y[st == "idle"] = 0.0
        out.append(FeatureSet(X.reshape((epochs,) + shape), Y, st, np.arange(epochs),
                              np.full(epochs, s), np.repeat(Y[:, None, :], shape[2], axis=1)))
    return out


@pytest.fixture
def small_sessions():
    return make_sessions


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "CRITERIA", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
