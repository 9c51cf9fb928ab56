"""Layers with hand-written forward and backward passes.

Every layer keeps ``params`` and ``grads`` dicts keyed by the same names and
caches what its backward pass needs during ``forward``. ``backward`` takes
the gradient w.r.t. the layer output, fills ``grads`` and returns the
gradient w.r.t. the input.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.training = False

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def buffers(self) -> dict:
        return {}


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.params = {"W": _uniform(rng, bound, (n_in, n_out)), "b": _uniform(rng, bound, n_out)}

    def forward(self, x):
        self.x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        self.grads["W"] = self.x.T @ g
        self.grads["b"] = g.sum(axis=0)
        return g @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return g * self.mask


class Dropout(Layer):
    """Inverted dropout; masks come from the owning network's generator."""

    def __init__(self, rate, rng):
        super().__init__()
        self.rate = float(rate)
        self.rng = rng

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self.mask = None
            return x
        keep = 1.0 - self.rate
        self.mask = (self.rng.random(x.shape) < keep) / keep
        return x * self.mask

    def backward(self, g):
        return g if self.mask is None else g * self.mask


class BatchNorm(Layer):
    """Batch normalisation over ``axis``; every other axis is pooled into the statistics."""

    def __init__(self, n, axis=-1, momentum=0.1, eps=1e-5):
        super().__init__()
        self.axis = axis
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(n), "beta": np.zeros(n)}
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _shape(self, x, v):
        shape = [1] * x.ndim
        shape[self.axis] = -1
        return v.reshape(shape)

    def forward(self, x):
        axes = tuple(i for i in range(x.ndim) if i != self.axis % x.ndim)
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // mean.size
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            unbiased = var * m / max(m - 1, 1)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        self.inv_std = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - self._shape(x, mean)) * self._shape(x, self.inv_std)
        self.axes = axes
        self.used_batch_stats = self.training
        return self._shape(x, self.params["gamma"]) * self.xhat + self._shape(x, self.params["beta"])

    def backward(self, g):
        axes = self.axes
        self.grads["gamma"] = np.sum(g * self.xhat, axis=axes)
        self.grads["beta"] = np.sum(g, axis=axes)
        gx = g * self._shape(g, self.params["gamma"])
        if not self.used_batch_stats:
            return gx * self._shape(g, self.inv_std)
        m = g.size // self.params["gamma"].size
        mean_g = self._shape(g, gx.sum(axis=axes) / m)
        mean_gx = self._shape(g, np.sum(gx * self.xhat, axis=axes) / m)
        return (gx - mean_g - self.xhat * mean_gx) * self._shape(g, self.inv_std)


class Conv2d(Layer):
    """2-D convolution (cross-correlation) on ``(batch, channels, rows, cols)`` via im2col.

    ``pad`` is ``(row_pad, col_pad)`` zero padding applied symmetrically.
    """

    def __init__(self, c_in, c_out, kernel, rng, pad=(0, 0)):
        super().__init__()
        kh, kw = kernel
        self.kernel = (kh, kw)
        self.pad = pad
        bound = 1.0 / np.sqrt(c_in * kh * kw)
        self.params = {"W": _uniform(rng, bound, (c_out, c_in, kh, kw)), "b": _uniform(rng, bound, c_out)}

    def forward(self, x):
        pr, pc = self.pad
        if pr or pc:
            x = np.pad(x, ((0, 0), (0, 0), (pr, pr), (pc, pc)))
        self.padded_shape = x.shape
        kh, kw = self.kernel
        n, c = x.shape[:2]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))       # n, c, ho, wo, kh, kw
        ho, wo = win.shape[2:4]
        self.cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        W = self.params["W"].reshape(len(self.params["b"]), -1)
        out = self.cols @ W.T + self.params["b"]
        return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, g):
        n, co, ho, wo = g.shape
        kh, kw = self.kernel
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        W = self.params["W"]
        self.grads["W"] = (g2.T @ self.cols).reshape(W.shape)
        self.grads["b"] = g2.sum(axis=0)
        dcols = (g2 @ W.reshape(co, -1)).reshape(n, ho, wo, W.shape[1], kh, kw)
        dx = np.zeros(self.padded_shape)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        pr, pc = self.pad
        return dx[:, :, pr:dx.shape[2] - pr, pc:dx.shape[3] - pc]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTM(Layer):
    """Single-layer LSTM over ``(batch, time, features)`` returning every hidden state.

    Gate order in the stacked weights is input, forget, cell, output; input
    and recurrent biases are separate parameters.
    """

    def __init__(self, n_in, n_hidden, rng):
        super().__init__()
        H = n_hidden
        bound = 1.0 / np.sqrt(H)
        self.H = H
        self.params = {
            "W_ih": _uniform(rng, bound, (n_in, 4 * H)),
            "W_hh": _uniform(rng, bound, (H, 4 * H)),
            "b_ih": _uniform(rng, bound, 4 * H),
            "b_hh": _uniform(rng, bound, 4 * H),
        }

    def forward(self, x):
        n, T, _ = x.shape
        H = self.H
        P = self.params
        xw = x @ P["W_ih"] + P["b_ih"] + P["b_hh"]              # n, T, 4H
        h = np.zeros((n, H))
        c = np.zeros((n, H))
        self.x = x
        self.cache = []
        out = np.empty((n, T, H))
        for t in range(T):
            a = xw[:, t] + h @ P["W_hh"]
            i = _sigmoid(a[:, :H])
            f = _sigmoid(a[:, H:2 * H])
            gg = np.tanh(a[:, 2 * H:3 * H])
            o = _sigmoid(a[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * gg
            tc = np.tanh(c)
            h = o * tc
            self.cache.append((i, f, gg, o, c_prev, h_prev, tc))
            out[:, t] = h
        return out

    def backward(self, g):
        n, T, H = g.shape
        P = self.params
        dxw = np.empty((n, T, 4 * H))
        dW_hh = np.zeros_like(P["W_hh"])
        dh_next = np.zeros((n, H))
        dc_next = np.zeros((n, H))
        for t in reversed(range(T)):
            i, f, gg, o, c_prev, h_prev, tc = self.cache[t]
            dh = g[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1 - tc * tc) + dc_next
            di = dc * gg
            dg = dc * i
            df = dc * c_prev
            da = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - gg * gg), do * o * (1 - o)], axis=1)
            dxw[:, t] = da
            dW_hh += h_prev.T @ da
            dh_next = da @ P["W_hh"].T
            dc_next = dc * f
        flat = dxw.reshape(n * T, 4 * H)
        self.grads["W_ih"] = self.x.reshape(n * T, -1).T @ flat
        self.grads["W_hh"] = dW_hh
        self.grads["b_ih"] = flat.sum(axis=0)
        self.grads["b_hh"] = self.grads["b_ih"].copy()
        return dxw @ P["W_ih"].T
