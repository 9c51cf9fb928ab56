"""Cosine loss, AdamW, early-stopped training and finite-difference checks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ContractError, DataError, SchemaError
from ..metrics import NORM_EPS
from .nets import CnnLstmNet, MlpNet, Net


def cosine_loss(pred, target):
    """Negative mean cosine similarity and its gradient w.r.t. ``pred``.

    The mean runs over all leading axes (samples, and time steps when
    present). Rows where the prediction or target norm is below 1e-12
    count as similarity 0 with zero gradient.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} differs from target shape {t.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise DataError("non-finite values in cosine loss")
    pn = np.linalg.norm(p, axis=-1, keepdims=True)
    tn = np.linalg.norm(t, axis=-1, keepdims=True)
    ok = (pn >= NORM_EPS) & (tn >= NORM_EPS)
    pn_s = np.where(ok, pn, 1.0)
    tn_s = np.where(ok, tn, 1.0)
    dot = np.sum(p * t, axis=-1, keepdims=True)
    cos = np.where(ok, dot / (pn_s * tn_s), 0.0)
    count = cos.size
    grad = np.where(ok, t / (pn_s * tn_s) - cos * p / (pn_s * pn_s), 0.0)
    return -float(cos.sum()) / count, -grad / count


class AdamW:
    """Adam with decoupled weight decay, applied to every parameter."""

    def __init__(self, net: Net, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.net = net
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in net.named_params()}
        self.v = {k: np.zeros_like(v) for k, v in net.named_params()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (name, p), (_, g) in zip(self.net.named_params(), self.net.named_grads()):
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p *= 1 - self.lr * self.wd
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 200
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and weight decay must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainResult:
    net: Net
    history: list          # (epoch, train_cs, val_cs)
    best_epoch: int
    best_val_cs: float


def _batches(order, size):
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a single-sample batch has no batch statistics
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def split_validation(n: int, fraction: float) -> int:
    """Size of the chronologically last validation block."""
    return int(math.floor(n * fraction))


def train(net: Net, X, Y, config: TrainConfig | None = None) -> TrainResult:
    """Early-stopped AdamW training on chronologically ordered ``X, Y``.

    The last ``validation_fraction`` of the samples is held out; the
    parameters (and batch-norm statistics) of the epoch with the best
    validation cosine similarity are restored at the end.
    """
    config = config or TrainConfig()
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) != len(Y):
        raise ContractError("inputs and targets differ in length")
    n_val = split_validation(len(X), config.validation_fraction)
    if n_val == 0:
        raise ConfigurationError("validation split is empty; provide more training data")
    n_train = len(X) - n_val
    if math.ceil(n_train / config.batch_size) < 2:
        raise ConfigurationError(f"training split of {n_train} samples is fewer than two batches")
    Xt, Yt, Xv, Yv = X[:n_train], Y[:n_train], X[n_train:], Y[n_train:]
    opt = AdamW(net, lr=config.learning_rate, weight_decay=config.weight_decay)
    shuffle = np.random.default_rng([config.seed, 1])
    history = []
    best = (-np.inf, 0, net.state())
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(shuffle.permutation(n_train), config.batch_size):
            out = net.forward(Xt[idx], "train")
            loss, g = cosine_loss(out, Yt[idx])
            net.backward(g)
            opt.step()
            total += -loss * len(idx)
            seen += len(idx)
        val_cs = -cosine_loss(net.forward(Xv, "eval"), Yv)[0]
        history.append((epoch, total / seen, val_cs))
        if val_cs > best[0]:
            best = (val_cs, epoch, net.state())
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    net.load_state(best[2])
    return TrainResult(net, history, best[1], best[0])


def loss_and_grads(net: Net, X, Y):
    out = net.forward(X, "eval")
    loss, g = cosine_loss(out, Y)
    net.backward(g)
    return loss, {k: v.copy() for k, v in net.named_grads()}


def gradient_check(net: Net, X, Y, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all parameters.

    Runs in eval mode: dropout is the identity and batch norm uses its
    running statistics.
    """
    _, analytic = loss_and_grads(net, X, Y)
    worst = 0.0
    for name, p in net.named_params():
        ga = analytic[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = cosine_loss(net.forward(X, "eval"), Y)[0]
            flat[i] = old - step
            down = cosine_loss(net.forward(X, "eval"), Y)[0]
            flat[i] = old
            gn = (up - down) / (2 * step)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - gn) / max(1e-8, abs(a) + abs(gn)))
    return worst


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(result: TrainResult, directory, config: TrainConfig) -> None:
    """``manifest.json`` + ``params.f64le`` (state entries in manifest order) + ``history.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    net = result.net
    state = net.state()
    manifest = {
        "kind": "ecoglc.neural", "version": 1, "architecture": net.architecture(),
        "architecture_hash": net.architecture_hash(), "config": asdict(config), "seed": net.seed,
        "best_epoch": result.best_epoch, "best_val_cs": result.best_val_cs,
        "parameter_count": net.parameter_count(),
        "entries": [[k, list(v.shape)] for k, v in state.items()],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    np.concatenate([v.ravel() for v in state.values()]).astype("<f8").tofile(d / "params.f64le")
    write_history_csv(result.history, d / "history.csv")


def build_net(architecture: dict, seed: int = 0) -> Net:
    arch = dict(architecture)
    kind = arch.pop("kind")
    if kind == "mlp":
        return MlpNet(seed=seed, **arch)
    if kind == "cnn_lstm":
        return CnnLstmNet(seed=seed, **arch)
    raise SchemaError(f"unknown architecture kind {kind!r}")


def load_checkpoint(directory) -> Net:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("kind") != "ecoglc.neural" or man.get("version") != 1:
        raise SchemaError(f"{d}: not a version-1 neural checkpoint")
    net = build_net(man["architecture"], man["seed"])
    if net.architecture_hash() != man["architecture_hash"]:
        raise SchemaError(f"{d}: architecture hash mismatch")
    flat = np.fromfile(d / "params.f64le", dtype="<f8")
    state, off = {}, 0
    for name, shape in man["entries"]:
        size = int(np.prod(shape))
        state[name] = flat[off:off + size].reshape(shape)
        off += size
    if off != flat.size:
        raise SchemaError(f"{d}: parameter payload size mismatch")
    net.load_state(state)
    return net


def write_history_csv(history, path) -> None:
    lines = ["epoch,train_cs,val_cs"] + [f"{e},{tr:.17g},{va:.17g}" for e, tr, va in history]
    Path(path).write_text("\n".join(lines) + "\n")
