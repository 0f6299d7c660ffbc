"""Python access to the adapi two-party inference library."""

import json

from . import _core
from ._core import (
    ConfigError,
    FormatError,
    ProtocolError,
    ShapeError,
    TrainingError,
    TransportError,
    decode,
    drelu,
    encode,
    relu_element_bytes,
    secure_mul,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "ProtocolError",
    "ShapeError",
    "TrainingError",
    "TransportError",
    "cost_report",
    "decode",
    "drelu",
    "encode",
    "reference_fit",
    "relu_element_bytes",
    "resolved_config",
    "secure_mul",
    "simulate",
    "train",
]


def resolved_config(path):
    """Configuration with every default filled in, as loaded by the CLI."""
    return json.loads(_core._resolved_config(str(path)))


def reference_fit():
    """Volume regression and implied MAC factors over the reference rows."""
    return json.loads(_core._reference_fit())


def cost_report(*, config=None, bundle=None):
    """Per-level analytic cost report for a trained bundle or a config."""
    if (config is None) == (bundle is None):
        raise ValueError("pass exactly one of config= or bundle=")
    if bundle is not None:
        return json.loads(_core._cost_report_for_bundle(str(bundle)))
    return json.loads(_core._cost_report_for_config(str(config)))


def train(config, bundle_dir=None):
    """Teacher plus adaptive training; writes a bundle when bundle_dir is set."""
    return json.loads(_core._train(str(config), "" if bundle_dir is None else str(bundle_dir)))


def simulate(bundle, level, limit=0, comparison="signbit"):
    """Two-party inference of one bundle level over an in-process channel."""
    return json.loads(_core._simulate(str(bundle), level, limit, comparison))
