"""Layers, networks and training for 2D image and 3D clip classifiers."""

from .net import Params, backward, check_params, forward, init_params, predict
from .spec import LayerSpec, NetSpec, SpecError, parse_spec, reference_net_2d
from .train import History, TrainConfig, accuracy, evaluate, sgd_step, train

__all__ = [
    "History", "LayerSpec", "NetSpec", "Params", "SpecError", "TrainConfig", "accuracy",
    "backward", "check_params", "evaluate", "forward", "init_params", "parse_spec",
    "predict", "reference_net_2d", "sgd_step", "train",
]
