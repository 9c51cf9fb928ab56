"""Uniform fit/predict wrappers so the harness can treat every decoder alike."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .features import FeatureSet, Standardizer, to_grid
from .neural.nets import CnnLstmNet, MlpNet
from .neural.train import TrainConfig, split_validation, train
from .rewnpls import RewNplsConfig, RewNplsModel
from .synth import default_grid_layout

DECODER_KINDS = ("rewnpls", "mlp", "cnn_lstm")


@dataclass(frozen=True)
class DecoderSpec:
    kind: str = "rewnpls"
    rewnpls: RewNplsConfig = field(default_factory=RewNplsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: dict = field(default_factory=dict)      # extra architecture keyword arguments

    def validate(self) -> None:
        if self.kind not in DECODER_KINDS:
            raise ConfigurationError(f"decoder kind must be one of {DECODER_KINDS}, got {self.kind!r}")
        self.rewnpls.validate()
        self.train.validate()

    @property
    def deterministic(self) -> bool:
        return self.kind == "rewnpls"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rewnpls": asdict(self.rewnpls), "train": asdict(self.train),
                "net": dict(self.net)}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        d = dict(d or {})
        return cls(kind=d.get("kind", "rewnpls"), rewnpls=RewNplsConfig(**d.get("rewnpls", {})),
                   train=TrainConfig(**d.get("train", {})), net=dict(d.get("net", {})))


class LinearDecoder:
    def __init__(self, spec: DecoderSpec, feature_shape, layout=None, seed: int = 0):
        self.model = RewNplsModel(feature_shape, 3, spec.rewnpls)

    def fit(self, fset: FeatureSet) -> "LinearDecoder":
        self.model.fit(fset.values, fset.targets)
        return self

    def predict(self, values) -> np.ndarray:
        return self.model.predict(np.asarray(values).reshape(len(values), -1))

    def parameter_count(self) -> int:
        return self.model.coefficient_count()


class NeuralDecoder:
    """Z-scores features with training-split statistics, then trains an MLP or CNN+LSTM."""

    def __init__(self, spec: DecoderSpec, feature_shape, layout, seed: int = 0):
        self.spec = spec
        self.feature_shape = tuple(feature_shape)
        ch, bands, bins = self.feature_shape
        self.layout = layout if layout is not None else default_grid_layout(ch)
        cfg = TrainConfig(**{**asdict(spec.train), "seed": int(seed)})
        self.train_config = cfg
        if spec.kind == "mlp":
            self.net = MlpNet(in_shape=self.feature_shape, seed=seed, **spec.net)
        else:
            self.net = CnnLstmNet(bands=bands, bins=bins, seed=seed, **spec.net)
        self.scaler = Standardizer()
        self.result = None

    def _inputs(self, values):
        x = self.scaler.transform(np.asarray(values, dtype=np.float64).reshape(len(values), -1))
        if self.spec.kind == "mlp":
            return x
        return to_grid(x.reshape((len(x),) + self.feature_shape), self.layout)

    def fit(self, fset: FeatureSet) -> "NeuralDecoder":
        n_train = len(fset) - split_validation(len(fset), self.train_config.validation_fraction)
        self.scaler.fit(fset.flat()[:n_train])
        targets = fset.bin_targets if self.spec.kind == "cnn_lstm" else fset.targets
        self.result = train(self.net, self._inputs(fset.values), targets, self.train_config)
        return self

    def predict(self, values) -> np.ndarray:
        out = []
        for lo in range(0, len(values), 1000):
            out.append(self.net.predict(self._inputs(values[lo:lo + 1000])))
        return np.concatenate(out)

    def parameter_count(self) -> int:
        return self.net.parameter_count()


def make_decoder(spec: DecoderSpec, feature_shape, layout=None, seed: int = 0):
    spec.validate()
    if spec.kind == "rewnpls":
        return LinearDecoder(spec, feature_shape, layout, seed)
    return NeuralDecoder(spec, feature_shape, layout, seed)
