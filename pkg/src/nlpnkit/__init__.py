"""Simulation and detection toolkit for PM optical channels with nonlinear phase noise."""

__version__ = "0.1.0"

from .model import (
    Constellation,
    LinkConfig,
    NoiseSpec,
    SnrPoint,
    dbm_to_watt,
    effective_length,
    make_mpsk,
    noise_spec,
    snr_from_power,
    watt_to_dbm,
)

__all__ = [
    "Constellation",
    "LinkConfig",
    "NoiseSpec",
    "SnrPoint",
    "dbm_to_watt",
    "effective_length",
    "make_mpsk",
    "noise_spec",
    "snr_from_power",
    "watt_to_dbm",
    "__version__",
]
