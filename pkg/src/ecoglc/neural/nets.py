"""MLP and CNN+LSTM trajectory regressors built from ``layers``."""
from __future__ import annotations

import hashlib
import json

import numpy as np

from ..errors import ContractError
from .layers import LSTM, BatchNorm, Conv2d, Dense, Dropout, ReLU


class Net:
    """Ordered named layers plus the bookkeeping shared by both architectures."""

    per_time_step = False

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.init_rng = np.random.default_rng([self.seed, 0])
        self.dropout_rng = np.random.default_rng([self.seed, 2])
        self.layers = {}

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        for layer in self.layers.values():
            layer.training = mode == "train"

    def named_params(self):
        for lname, layer in self.layers.items():
            for pname, arr in layer.params.items():
                yield f"{lname}.{pname}", arr

    def named_grads(self):
        for lname, layer in self.layers.items():
            for pname in layer.params:
                yield f"{lname}.{pname}", layer.grads[pname]

    def parameter_count(self) -> int:
        return int(sum(a.size for _, a in self.named_params()))

    def state(self) -> dict:
        out = {k: v.copy() for k, v in self.named_params()}
        for lname, layer in self.layers.items():
            for bname, arr in layer.buffers().items():
                out[f"{lname}.{bname}"] = arr.copy()
        return out

    def load_state(self, state: dict) -> None:
        for lname, layer in self.layers.items():
            for pname in layer.params:
                layer.params[pname][...] = state[f"{lname}.{pname}"]
            for bname in layer.buffers():
                setattr(layer, bname, state[f"{lname}.{bname}"].copy())

    def architecture(self) -> dict:
        raise NotImplementedError

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def forward(self, x, mode: str = "eval"):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class MlpNet(Net):
    """flatten -> [dense -> batchnorm -> relu -> dropout] x 2 -> dense."""

    def __init__(self, in_shape=(64, 15, 10), hidden: int = 50, n_out: int = 3,
                 dropout: float = 0.5, seed: int = 0):
        super().__init__(seed)
        self.in_shape = tuple(int(d) for d in np.atleast_1d(in_shape))
        self.hidden, self.n_out, self.dropout = int(hidden), int(n_out), float(dropout)
        n_in = int(np.prod(self.in_shape))
        r, d = self.init_rng, self.dropout_rng
        self.layers = {
            "fc1": Dense(n_in, hidden, r), "bn1": BatchNorm(hidden), "relu1": ReLU(), "drop1": Dropout(dropout, d),
            "fc2": Dense(hidden, hidden, r), "bn2": BatchNorm(hidden), "relu2": ReLU(), "drop2": Dropout(dropout, d),
            "fc3": Dense(hidden, n_out, r),
        }

    def architecture(self):
        return {"kind": "mlp", "in_shape": list(self.in_shape), "hidden": self.hidden,
                "n_out": self.n_out, "dropout": self.dropout}

    def forward(self, x, mode: str = "eval"):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.in_shape and x.shape[1:] != (int(np.prod(self.in_shape)),):
            raise ContractError(f"MLP expects inputs shaped (n, {self.in_shape}), got {x.shape}")
        self.set_mode(mode)
        h = x.reshape(len(x), -1)
        for layer in self.layers.values():
            h = layer.forward(h)
        return h

    def backward(self, g):
        for layer in reversed(list(self.layers.values())):
            g = layer.backward(g)
        return g

    def predict(self, x):
        return self.forward(x, "eval")


class CnnLstmNet(Net):
    """Per-implant conv stack shared by both implants, then two stacked LSTMs.

    Input is the full grid ``(n, bands, rows, 2 * cols, bins)``; grid columns
    ``[0, cols)`` belong to the first implant. Convolutions act on each
    (implant, time bin) image independently (kernel extent 1 along time).
    Output is one 3-vector per time bin.
    """

    per_time_step = True

    def __init__(self, bands: int = 15, rows: int = 8, cols: int = 4, bins: int = 10,
                 conv1: int = 32, conv2: int = 64, hidden: int = 50, n_out: int = 3,
                 dropout: float = 0.5, seed: int = 0):
        super().__init__(seed)
        self.bands, self.rows, self.cols, self.bins = int(bands), int(rows), int(cols), int(bins)
        self.c1, self.c2, self.hidden, self.n_out, self.dropout = int(conv1), int(conv2), int(hidden), int(n_out), float(dropout)
        if rows < 5 or cols < 3:
            raise ContractError("implant grid must be at least 5 x 3 for two 3x3 convolutions")
        self.out_rows, self.out_cols = rows - 4, cols - 2
        self.step_features = 2 * self.c2 * self.out_rows * self.out_cols
        r, d = self.init_rng, self.dropout_rng
        self.layers = {
            "conv1": Conv2d(bands, conv1, (3, 3), r, pad=(0, 1)), "relu1": ReLU(),
            "bn1": BatchNorm(conv1, axis=1), "drop1": Dropout(dropout, d),
            "conv2": Conv2d(conv1, conv2, (3, 3), r), "relu2": ReLU(), "drop2": Dropout(dropout, d),
            "lstm1": LSTM(self.step_features, hidden, r), "lstm2": LSTM(hidden, n_out, r),
        }
        self._conv_names = ("conv1", "relu1", "bn1", "drop1", "conv2", "relu2", "drop2")

    @property
    def in_shape(self):
        return (self.bands, self.rows, 2 * self.cols, self.bins)

    def architecture(self):
        return {"kind": "cnn_lstm", "bands": self.bands, "rows": self.rows, "cols": self.cols,
                "bins": self.bins, "conv1": self.c1, "conv2": self.c2, "hidden": self.hidden,
                "n_out": self.n_out, "dropout": self.dropout}

    def shape_trace(self, batch: int = 200) -> dict:
        """Observed per-implant shapes ``[batch, channels, rows, cols, bins]`` from a zero-input pass."""
        self.forward(np.zeros((batch,) + self.in_shape), "eval")
        return dict(self.trace)

    def forward(self, x, mode: str = "eval"):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.in_shape:
            raise ContractError(f"CNN+LSTM expects inputs shaped (n, {self.in_shape}), got {x.shape}")
        self.set_mode(mode)
        n, B, R, _, T = x.shape
        C = self.cols
        imp = np.stack([x[:, :, :, :C], x[:, :, :, C:]], axis=1)     # n, 2, B, R, C, T
        h = imp.transpose(0, 1, 5, 2, 3, 4).reshape(n * 2 * T, B, R, C)
        self.trace = {"input": [n, B, R, C, T]}
        for name in self._conv_names:
            h = self.layers[name].forward(h)
            if name.startswith("conv"):
                self.trace[name] = [n, h.shape[1], h.shape[2], h.shape[3], T]
        self._conv_out_shape = h.shape
        seq = h.reshape(n, 2, T, -1).transpose(0, 2, 1, 3).reshape(n, T, self.step_features)
        self.trace["lstm_input"] = list(seq.shape)
        seq = self.layers["lstm1"].forward(seq)
        self.trace["lstm1"] = list(seq.shape)
        out = self.layers["lstm2"].forward(seq)
        self.trace["output"] = list(out.shape)
        return out

    def backward(self, g):
        n, T, _ = g.shape
        g = self.layers["lstm2"].backward(g)
        g = self.layers["lstm1"].backward(g)
        g = g.reshape(n, T, 2, -1).transpose(0, 2, 1, 3).reshape(self._conv_out_shape)
        for name in reversed(self._conv_names):
            g = self.layers[name].backward(g)
        B, R, C = g.shape[1:]
        g = g.reshape(n, 2, T, B, R, C).transpose(0, 1, 3, 4, 5, 2)   # n, 2, B, R, C, T
        return np.concatenate([g[:, 0], g[:, 1]], axis=3)

    def predict(self, x):
        """Inference output: the last time step's 3-vector."""
        return self.forward(x, "eval")[:, -1]


def parameter_count(net: Net) -> int:
    return net.parameter_count()
