"""A small differentiable network stack: tape autodiff, dense/LSTM layers, Adam."""
from collections import OrderedDict

import numpy as np

from .. import binio
from .adam import AdamState, adam_step
from .autograd import Parameter, Tape, Tensor
from .layers import DenseLayer, LstmCell, Mlp, Module

WEIGHTS_KIND = "weights"
WEIGHTS_LAYOUT_VERSION = 1

__all__ = [
    "AdamState", "adam_step", "Parameter", "Tape", "Tensor",
    "DenseLayer", "LstmCell", "Mlp", "Module",
    "state_dict", "load_state_dict", "save_weights", "load_weights",
]


def state_dict(module):
    return OrderedDict((k, p.value.copy()) for k, p in module.named_parameters().items())


def load_state_dict(module, arrays, strict=True):
    params = module.named_parameters()
    missing = [k for k in params if k not in arrays]
    if strict and (missing or set(arrays) - set(params)):
        extra = sorted(set(arrays) - set(params))
        raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
    for key, p in params.items():
        if key in arrays:
            val = np.asarray(arrays[key], dtype=np.float64)
            if val.shape != p.value.shape:
                raise ValueError(f"{key}: shape {val.shape} != {p.value.shape}")
            p.value = val.copy()
    return module


def save_weights(path, arrays, meta=None):
    binio.write(path, WEIGHTS_KIND, arrays, meta, WEIGHTS_LAYOUT_VERSION)


def load_weights(path):
    _, version, meta, arrays = binio.read(path, expect_kind=WEIGHTS_KIND)
    if version != WEIGHTS_LAYOUT_VERSION:
        raise binio.FormatError(f"unsupported weights layout version {version}")
    return arrays, meta
