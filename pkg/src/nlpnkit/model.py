"""Link parameters, noise budgets, and constellation geometry.

Everything downstream (channel sampling, calibration, detection) consumes
the small value types defined here.  Units are SI unless a field name says
otherwise: powers in W, lengths in km, bandwidths in Hz, angles in rad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PLANCK_J_S",
    "Constellation",
    "LinkConfig",
    "NoiseSpec",
    "SnrPoint",
    "make_mpsk",
    "effective_length",
    "noise_spec",
    "snr_from_power",
    "dbm_to_watt",
    "watt_to_dbm",
]

PLANCK_J_S = 6.62607e-34
"""Planck constant, J*s (single authoritative value for the package)."""

LN10_OVER_10 = math.log(10.0) / 10.0


def dbm_to_watt(p_dbm: float) -> float:
    """Convert dBm to W."""
    return 1e-3 * 10.0 ** (p_dbm / 10.0)


def watt_to_dbm(p_w: float) -> float:
    """Convert W to dBm."""
    if p_w <= 0:
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * math.log10(p_w / 1e-3)


@dataclass(frozen=True)
class Constellation:
    """M-PSK constellation on the ring of radius sqrt(es).

    Attributes
    ----------
    m : int
        Constellation order.
    es : float
        Average symbol energy (equals the per-symbol power under the
        per-sample convention), W.
    points : ndarray of complex
        The M ring points, ``points[k] = sqrt(es) * exp(1j*pi*(2k+1)/m)``.
    """

    m: int
    es: float
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.complex128))


def make_mpsk(m: int, es: float) -> Constellation:
    """Build an M-PSK constellation with symbols at phases pi*(2k+1)/M.

    The offset places sector decision boundaries exactly at multiples of
    2*pi/M, so index decisions reduce to locating the phase sector.

    Parameters
    ----------
    m : int
        Constellation order, >= 2.
    es : float
        Average symbol energy, > 0 (all points share it: PSK ring).

    Returns
    -------
    Constellation
    """
    if m < 2:
        raise ValueError(f"constellation order must be >= 2, got {m}")
    if es <= 0:
        raise ValueError(f"symbol energy must be positive, got {es}")
    k = np.arange(m)
    points = np.sqrt(es) * np.exp(1j * np.pi * (2 * k + 1) / m)
    return Constellation(m=m, es=float(es), points=points)


@dataclass(frozen=True)
class LinkConfig:
    """Physical description of a single-channel fiber link.

    Attributes
    ----------
    amp_kind : {'lumped', 'distributed'}
        Amplification scheme.  Lumped: N discrete spans, noise injected
        per span.  Distributed: continuous gain, noise accumulates as a
        Wiener process discretized in ``n_segments`` steps.
    length_km : float
        Total link length L, km.
    n_segments : int
        Span count (lumped) or discretization step count (distributed).
    alpha_db_per_km : float
        Fiber attenuation, dB/km.
    gamma : float
        Nonlinear coefficient, 1/(W*km).
    bandwidth_hz : float
        Optical noise bandwidth W, Hz (equal to the symbol rate for
        Nyquist-spaced signalling).
    carrier_hz : float
        Optical carrier frequency, Hz.
    noise_figure_db : float
        Amplifier noise figure, dB.
    """

    amp_kind: str
    length_km: float
    n_segments: int
    alpha_db_per_km: float
    gamma: float
    bandwidth_hz: float
    carrier_hz: float
    noise_figure_db: float

    def __post_init__(self):
        if self.amp_kind not in ("lumped", "distributed"):
            raise ValueError(f"amp_kind must be 'lumped' or 'distributed', got {self.amp_kind!r}")
        if self.length_km <= 0:
            raise ValueError("length_km must be positive")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be positive")
        if self.alpha_db_per_km < 0:
            raise ValueError("alpha_db_per_km must be >= 0")

    @property
    def alpha_np_per_km(self) -> float:
        """Attenuation in nepers/km: alpha_db * ln(10)/10."""
        return self.alpha_db_per_km * LN10_OVER_10

    @property
    def segment_length_km(self) -> float:
        """Span length (lumped) or step size (distributed), km."""
        return self.length_km / self.n_segments

    @property
    def n_sp(self) -> float:
        """Spontaneous-emission factor, 10^(Fn/10)/2 (high-gain relation)."""
        return 10.0 ** (self.noise_figure_db / 10.0) / 2.0


def effective_length(link: LinkConfig) -> float:
    """Nonlinear effective length of one segment, km.

    Lumped: ``(1 - exp(-alpha*l_span))/alpha`` (the span length in the
    lossless limit).  Distributed: the step size L/N, since continuous
    amplification holds the power flat.

    Parameters
    ----------
    link : LinkConfig

    Returns
    -------
    float
        Per-segment effective length, km.
    """
    if link.amp_kind == "distributed":
        return link.segment_length_km
    alpha = link.alpha_np_per_km
    ell = link.segment_length_km
    if alpha == 0.0:
        return ell
    return -math.expm1(-alpha * ell) / alpha


@dataclass(frozen=True)
class NoiseSpec:
    """Amplifier-noise budget for a link.

    Attributes
    ----------
    sigma0_sq : float
        Per-span complex noise variance per polarization, W (lumped links;
        for distributed links this is the per-step variance of the
        discretized noise process).
    sigmad_sq : float
        Noise density per polarization, W/km.
    total_var : float
        Accumulated noise variance per polarization over the whole link:
        N*sigma0_sq == L*sigmad_sq.
    """

    sigma0_sq: float
    sigmad_sq: float
    total_var: float


def noise_spec(link: LinkConfig) -> NoiseSpec:
    """Derive the noise budget from the link parameters.

    The density is ``sigmad_sq = 2*h*nu*W*alpha*n_sp`` per km per
    polarization.  Lumped links match the total accumulated noise of the
    equal-length distributed link: ``sigma0_sq = sigmad_sq * L / N``, so
    the two amplification kinds are comparable at equal launch power.

    Parameters
    ----------
    link : LinkConfig

    Returns
    -------
    NoiseSpec
    """
    sigmad_sq = (
        2.0 * PLANCK_J_S * link.carrier_hz * link.bandwidth_hz * link.alpha_np_per_km * link.n_sp
    )
    total = sigmad_sq * link.length_km
    sigma0_sq = total / link.n_segments
    return NoiseSpec(sigma0_sq=sigma0_sq, sigmad_sq=sigmad_sq, total_var=total)


@dataclass(frozen=True)
class SnrPoint:
    """Per-polarization SNR pair rho = |S|^2 / total noise variance."""

    rho_x: float
    rho_y: float


def snr_from_power(p_x_w: float, link: LinkConfig, noise: NoiseSpec, p_y_w: float | None = None) -> SnrPoint:
    """SNR per polarization at the given launch power(s).

    Parameters
    ----------
    p_x_w : float
        Launch power in the x polarization, W.
    link : LinkConfig
    noise : NoiseSpec
    p_y_w : float, optional
        Launch power in the y polarization; defaults to ``p_x_w``.
        Pass 0 for single-polarization transmission.

    Returns
    -------
    SnrPoint
    """
    if p_x_w < 0 or (p_y_w is not None and p_y_w < 0):
        raise ValueError("launch power must be >= 0")
    if p_y_w is None:
        p_y_w = p_x_w
    if noise.total_var == 0:
        inf = math.inf
        return SnrPoint(rho_x=inf if p_x_w > 0 else 0.0, rho_y=inf if p_y_w > 0 else 0.0)
    return SnrPoint(rho_x=p_x_w / noise.total_var, rho_y=p_y_w / noise.total_var)
