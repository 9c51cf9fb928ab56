"""Neural trajectory decoders with manual backpropagation."""
from .nets import CnnLstmNet, MlpNet, parameter_count
from .train import (AdamW, TrainConfig, TrainResult, build_net, cosine_loss, gradient_check,
                    load_checkpoint, loss_and_grads, save_checkpoint, train)

__all__ = ["CnnLstmNet", "MlpNet", "parameter_count", "AdamW", "TrainConfig", "TrainResult",
           "build_net", "cosine_loss", "gradient_check", "load_checkpoint", "loss_and_grads",
           "save_checkpoint", "train"]
