"""Region-specific diffeomorphic metric mapping (RDMM) registration."""

import json

from ._rdmm import (
    FormatError,
    IntegrationBlowup,
    InvalidParameter,
    ShapeError,
    gradient_check,
    kernel_apply,
    read_tensor,
    region_preweights,
    shoot,
    write_tensor,
)
from . import _rdmm


def default_config(mode):
    """Default configuration of a mode ("lddmm", "rdmm-fixed", "rdmm-joint") as a dict."""
    return json.loads(_rdmm.default_config(mode))


def desk_config(mode):
    """Shortened single-core configuration of a mode as a dict."""
    return json.loads(_rdmm.desk_config(mode))


def generate_pair(seed, size=200, static_outside=False):
    return _rdmm.generate_pair(seed, size, static_outside)


def register(source, target, config, preweights=None, labels_source=None, labels_target=None):
    """Register source to target. config is a dict from default_config/desk_config."""
    return _rdmm.register(source, target, json.dumps(config), preweights, labels_source, labels_target)


__all__ = [
    "FormatError",
    "IntegrationBlowup",
    "InvalidParameter",
    "ShapeError",
    "default_config",
    "desk_config",
    "generate_pair",
    "gradient_check",
    "kernel_apply",
    "read_tensor",
    "region_preweights",
    "register",
    "shoot",
    "write_tensor",
]
