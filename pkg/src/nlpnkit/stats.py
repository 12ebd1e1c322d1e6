"""Circular statistics on amplitude-conditioned residual phases.

The channel tilts the received phase by an amount that depends on the
received amplitude(s).  Everything the detectors need is captured by the
amplitude-binned circular moment sums

    M_k(b) = sum over draws in bin b of exp(j*k*theta_residual),

estimated per polarization on a 1D grid (own amplitude) or a 2D grid
(both amplitudes).  The compensation angle per bin is the negative of the
circular mean direction, ``theta_c(b) = -arg M_1(b)``; a detector then
decides on ``theta + theta_c(r)`` with straight sector boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

__all__ = [
    "AmplitudeGrid",
    "ConditionalCF",
    "RotationMap",
    "Density4D",
    "default_grid_1d",
    "default_grid_2d",
    "residual_phase",
    "wrap_phase",
    "accumulate_cf",
    "merge_cf",
    "build_rotation_map",
    "abs_coefficients",
    "PhaseSeriesPdf",
    "phase_pdf_series",
    "circular_variance",
    "circular_mode_estimate",
    "circular_mean_stderr",
    "joint_density_grid",
]


def wrap_phase(theta):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2 * np.pi)


def residual_phase(received, transmitted):
    """Phase of `received` relative to `transmitted`, wrapped to (-pi, pi]."""
    return np.angle(np.asarray(received) * np.conj(np.asarray(transmitted)))


@dataclass(frozen=True)
class AmplitudeGrid:
    """Bin edges over normalized amplitude, 1D or 2D.

    Attributes
    ----------
    edges_x : ndarray
        Ascending non-negative edges.  Bin i covers [edges[i], edges[i+1]);
        amplitudes beyond either end fall into the first or last bin
        (underflow/overflow bins).
    edges_y : ndarray or None
        Second axis for 2D grids.
    """

    edges_x: np.ndarray
    edges_y: np.ndarray | None = None

    def __post_init__(self):
        ex = np.asarray(self.edges_x, dtype=float)
        object.__setattr__(self, "edges_x", ex)
        if self.edges_y is not None:
            object.__setattr__(self, "edges_y", np.asarray(self.edges_y, dtype=float))
        for e in (self.edges_x, self.edges_y):
            if e is None:
                continue
            if e.ndim != 1 or e.size < 2 or not (np.diff(e) > 0).all():
                raise ValueError("edges must be a strictly increasing 1D array")
            if e[0] < 0.0:
                raise ValueError("edges must be non-negative")

    @property
    def ndim(self) -> int:
        return 1 if self.edges_y is None else 2

    @property
    def shape(self) -> tuple:
        if self.edges_y is None:
            return (self.edges_x.size - 1,)
        return (self.edges_x.size - 1, self.edges_y.size - 1)

    @property
    def nbins(self) -> int:
        return int(np.prod(self.shape))

    def index(self, r) -> np.ndarray:
        """Flattened bin index for amplitudes ``r``.

        1D grids take shape (n,) amplitudes; 2D grids take (n, 2).
        """
        r = np.asarray(r, dtype=float)
        if self.ndim == 1:
            ix = np.searchsorted(self.edges_x, r, side="right") - 1
            return np.clip(ix, 0, self.shape[0] - 1)
        ix = np.clip(np.searchsorted(self.edges_x, r[:, 0], side="right") - 1, 0, self.shape[0] - 1)
        iy = np.clip(np.searchsorted(self.edges_y, r[:, 1], side="right") - 1, 0, self.shape[1] - 1)
        return ix * self.shape[1] + iy


def _bulk_edges(rho: float, n_bins: int) -> np.ndarray:
    # Ricean bulk: mean ~ sqrt(1+rho), r-std <~ 1/sqrt(2); +-8 keeps the
    # extreme tails while the bin width tracks the bulk at any SNR.  The
    # relative floor keeps edges distinct in double precision at the
    # enormous SNRs of near-noiseless configurations.
    mid = math.sqrt(1.0 + max(rho, 0.0))
    half = max(8.0, 1e-9 * mid)
    return np.linspace(max(mid - half, 0.0), mid + half, n_bins + 1)


def default_grid_1d(rho: float, n_bins: int = 200) -> AmplitudeGrid:
    """Equal-width 1D grid centered on the amplitude bulk at SNR ``rho``."""
    return AmplitudeGrid(_bulk_edges(rho, n_bins))


def default_grid_2d(rho_x: float, rho_y: float, n_bins: int = 64) -> AmplitudeGrid:
    return AmplitudeGrid(_bulk_edges(rho_x, n_bins), _bulk_edges(rho_y, n_bins))


@dataclass
class ConditionalCF:
    """Amplitude-binned circular moment sums of residual phase.

    Attributes
    ----------
    grid : AmplitudeGrid
    k_max : int
        Highest moment order stored.
    sums : ndarray of complex, shape (k_max, nbins)
        ``sums[k-1, b] = sum of exp(j*k*theta)`` over draws in bin b.
    counts : ndarray of int, shape (nbins,)
    """

    grid: AmplitudeGrid
    k_max: int
    sums: np.ndarray = field(default=None)
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros((self.k_max, self.grid.nbins), dtype=np.complex128)
        if self.counts is None:
            self.counts = np.zeros(self.grid.nbins, dtype=np.int64)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def add(self, thetas: np.ndarray, r: np.ndarray) -> None:
        """Accumulate residual phases ``thetas`` at amplitudes ``r`` in place."""
        thetas = np.asarray(thetas, dtype=float)
        idx = self.grid.index(r)
        nb = self.grid.nbins
        self.counts += np.bincount(idx, minlength=nb)
        z = np.exp(1j * thetas)
        zk = z.copy()
        for k in range(self.k_max):
            if k:
                zk *= z
            self.sums[k] += np.bincount(idx, weights=zk.real, minlength=nb) + 1j * np.bincount(
                idx, weights=zk.imag, minlength=nb
            )

    def usable(self, min_count: int) -> np.ndarray:
        return self.counts >= min_count

    def mean_direction(self) -> np.ndarray:
        """Per-bin circular mean direction arg M_1(b); 0 where empty."""
        out = np.zeros(self.grid.nbins)
        nz = self.counts > 0
        out[nz] = np.angle(self.sums[0, nz])
        return out

    def mean_direction_stderr(self) -> np.ndarray:
        """Asymptotic standard error of the per-bin mean direction.

        Uses the dispersion estimate delta = (1 - Re(m2 conj(m1)^2/|m1|^2))
        / (2 |m1|^2); bins with fewer than 2 draws or |m1| = 0 get inf.
        Requires k_max >= 2.
        """
        if self.k_max < 2:
            raise ValueError("stderr needs second moments (k_max >= 2)")
        out = np.full(self.grid.nbins, np.inf)
        ok = self.counts >= 2
        n_b = self.counts[ok].astype(float)
        m1 = self.sums[0, ok] / n_b
        m2 = self.sums[1, ok] / n_b
        r1 = np.abs(m1)
        good = r1 > 0
        delta = np.full(r1.shape, np.inf)
        mu2 = np.exp(-2j * np.angle(m1[good]))
        delta[good] = (1.0 - np.real(m2[good] * mu2)) / (2.0 * r1[good] ** 2)
        se = np.sqrt(np.maximum(delta, 0.0) / n_b)
        # a point mass has delta ~ 0; keep a floor so 3*se tests stay meaningful
        out[ok] = se
        return out


def accumulate_cf(thetas, r, grid: AmplitudeGrid, k_max: int) -> ConditionalCF:
    """Bin residual phases on ``grid`` and return the moment sums."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    cf = ConditionalCF(grid=grid, k_max=k_max)
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size:
        cf.add(thetas, r)
    return cf


def merge_cf(a: ConditionalCF, b: ConditionalCF) -> ConditionalCF:
    """Bin-wise sum of two accumulations over the same grid and order."""
    if a.k_max != b.k_max or a.grid.shape != b.grid.shape:
        raise ValueError("cannot merge: mismatched grid or order")
    if not (
        np.array_equal(a.grid.edges_x, b.grid.edges_x)
        and (
            (a.grid.edges_y is None and b.grid.edges_y is None)
            or np.array_equal(a.grid.edges_y, b.grid.edges_y)
        )
    ):
        raise ValueError("cannot merge: mismatched grid edges")
    return ConditionalCF(
        grid=a.grid, k_max=a.k_max, sums=a.sums + b.sums, counts=a.counts + b.counts
    )


@dataclass(frozen=True)
class RotationMap:
    """Piecewise-constant compensation angle over an amplitude grid.

    ``theta_c[b] = -arg M_1(b)`` on usable bins; unusable bins borrow the
    value of the nearest usable bin (Euclidean in bin-index space).
    Adding ``theta_c`` to a received phase centers the residual
    distribution so sector boundaries become straight lines.
    """

    grid: AmplitudeGrid
    theta_c: np.ndarray
    usable: np.ndarray
    min_count: int

    def lookup(self, r) -> np.ndarray:
        """Compensation angles for amplitudes ``r`` ((n,) or (n, 2))."""
        return self.theta_c[self.grid.index(r)]


def build_rotation_map(cf: ConditionalCF, min_count: int = 50) -> RotationMap:
    """Derive the per-bin compensation map from moment sums.

    Parameters
    ----------
    cf : ConditionalCF
        1D or 2D accumulation of residual phases.
    min_count : int
        Bins with fewer draws are marked unusable and inherit the nearest
        usable bin's angle.

    Returns
    -------
    RotationMap
    """
    usable = cf.usable(min_count)
    if not usable.any():
        raise ValueError(
            f"no amplitude bin reaches min_count={min_count}; increase calibration draws"
        )
    theta = np.where(usable, -np.angle(cf.sums[0]), 0.0)
    shape = cf.grid.shape
    theta = theta.reshape(shape)
    mask = usable.reshape(shape)
    if not mask.all():
        # nearest-usable-bin fill, Euclidean in index space
        _, idx = scipy.ndimage.distance_transform_edt(~mask, return_indices=True)
        theta = theta[tuple(idx)]
    return RotationMap(
        grid=cf.grid, theta_c=theta.ravel(), usable=usable, min_count=min_count
    )


def abs_coefficients(cf: ConditionalCF, debias: bool = True) -> np.ndarray:
    """Series coefficients c_k = (1/n) sum_b |M_k(b)|, k = 1..k_max.

    With ``debias`` (default), each per-bin squared magnitude is reduced
    by its sampling noise floor: E|M_k(b)|^2 = (n_b E cos)^2 + n_b Var
    terms, so |M_k(b)|^2 - n_b is the unbiased square and its positive
    part replaces |M_k(b)|^2.  The raw modulus is biased upward by
    ~sqrt(n_b) per occupied bin, which would otherwise dominate high-k
    coefficients that are truly near zero; a hard significance gate is
    deliberately avoided because zeroing borderline orders interacts
    with the alternating sinc(k/M) weights of the SER series and skews
    it low.
    """
    n = cf.n
    if n == 0:
        return np.zeros(cf.k_max)
    nb = cf.counts.astype(float)
    mag_sq = np.abs(cf.sums) ** 2
    if debias:
        mag_sq = np.maximum(mag_sq - nb, 0.0)
    return np.sqrt(mag_sq).sum(axis=1) / n


class PhaseSeriesPdf:
    """Truncated cosine-series density of the compensated residual phase.

    f(theta) = 1/(2 pi) + (1/pi) * sum_k c_k cos(k theta), clipped at zero
    and renormalized if truncation produced negative lobes
    (``has_negative_lobes`` records that).
    """

    def __init__(self, coefficients: np.ndarray):
        self.c = np.asarray(coefficients, dtype=float)
        grid = np.linspace(-np.pi, np.pi, 4097)
        raw = self.evaluate_raw(grid)
        self.has_negative_lobes = bool((raw < 0).any())
        clipped = np.clip(raw, 0.0, None)
        self._norm = np.trapezoid(clipped, grid)

    def evaluate_raw(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = np.full(theta.shape, 1.0 / (2 * np.pi))
        for k, ck in enumerate(self.c, start=1):
            out += (ck / np.pi) * np.cos(k * theta)
        return out

    def __call__(self, theta) -> np.ndarray:
        raw = np.clip(self.evaluate_raw(theta), 0.0, None)
        return raw / self._norm


def phase_pdf_series(cf: ConditionalCF, debias: bool = True) -> PhaseSeriesPdf:
    """Reconstruct the marginal residual-phase pdf from moment sums.

    The coefficients integrate out the amplitude(s):
    c_k = (1/n) sum_b |M_k(b)|, so the pdf describes the phase after the
    per-bin centering rotation has been applied.
    """
    return PhaseSeriesPdf(abs_coefficients(cf, debias=debias))


def circular_variance(phases) -> float:
    """1 - |mean of exp(j*theta)|, in [0, 1]."""
    phases = np.asarray(phases, dtype=float)
    if phases.size == 0:
        raise ValueError("circular variance of an empty sample is undefined")
    return float(1.0 - np.abs(np.exp(1j * phases).mean()))


def circular_mode_estimate(phases) -> float:
    """Location of a symmetric unimodal circular sample: arg sum exp(j*theta).

    For a density that decays monotonically away from its peak, the mean
    direction coincides with the mode, so this is a consistent estimator.
    """
    phases = np.asarray(phases, dtype=float)
    if phases.size == 0:
        raise ValueError("mode of an empty sample is undefined")
    return float(np.angle(np.exp(1j * phases).sum()))


def circular_mean_stderr(phases) -> float:
    """Asymptotic standard error of the sample circular mean direction."""
    phases = np.asarray(phases, dtype=float)
    n = phases.size
    if n < 2:
        raise ValueError("need at least 2 samples")
    z = np.exp(1j * phases)
    m1 = z.mean()
    r1 = np.abs(m1)
    if r1 == 0:
        return np.inf
    m2 = (z * z).mean()
    delta = (1.0 - np.real(m2 * np.exp(-2j * np.angle(m1)))) / (2 * r1 * r1)
    return float(np.sqrt(max(delta, 0.0) / n))


@dataclass
class Density4D:
    """Joint histogram density of residual phases and amplitudes.

    Cells are (phase_x, phase_y, amp_x, amp_y); the table stores raw
    counts plus the total, so lookups can report empty cells exactly.
    Phase bins uniformly partition (-pi, pi].
    """

    n_phase: int
    amp_grid: AmplitudeGrid
    counts: np.ndarray
    n: int

    def phase_index(self, theta) -> np.ndarray:
        scaled = (np.asarray(theta) + np.pi) / (2 * np.pi) * self.n_phase
        return np.clip(scaled.astype(np.int64), 0, self.n_phase - 1)

    def lookup_counts(self, theta_x, theta_y, amp_index_flat) -> np.ndarray:
        """Raw cell counts at wrapped phases and precomputed amplitude bins."""
        px = self.phase_index(wrap_phase(theta_x))
        py = self.phase_index(wrap_phase(theta_y))
        flat = (px * self.n_phase + py) * self.amp_grid.nbins + amp_index_flat
        return self.counts.ravel()[flat]

    def density(self) -> np.ndarray:
        """Normalized cell probabilities (sum = 1), shaped (P, P, Ax, Ay)."""
        shape = (self.n_phase, self.n_phase) + self.amp_grid.shape
        return self.counts.reshape(shape) / max(self.n, 1)


def joint_density_grid(thetas: np.ndarray, r: np.ndarray, n_phase: int = 64,
                       amp_grid: AmplitudeGrid | None = None,
                       rho: tuple = None) -> Density4D:
    """Histogram the joint law of residual phases and amplitudes.

    Parameters
    ----------
    thetas : ndarray, shape (n, 2)
        Residual phases (relative to the transmitted pair), rad.
    r : ndarray, shape (n, 2)
        Normalized amplitudes.
    n_phase : int
        Phase bins per polarization.
    amp_grid : AmplitudeGrid, optional
        2D amplitude grid; defaults to 32x32 over [0, sqrt(rho)+6].
    rho : (rho_x, rho_y), optional
        Needed only when ``amp_grid`` is omitted.
    """
    thetas = np.asarray(thetas, dtype=float)
    r = np.asarray(r, dtype=float)
    if amp_grid is None:
        if rho is None:
            raise ValueError("provide amp_grid or rho")
        amp_grid = default_grid_2d(rho[0], rho[1], n_bins=32)
    if amp_grid.ndim != 2:
        raise ValueError("amplitude grid must be 2D")
    d = Density4D(
        n_phase=n_phase,
        amp_grid=amp_grid,
        counts=np.zeros(n_phase * n_phase * amp_grid.nbins, dtype=np.int64),
        n=0,
    )
    density4d_add(d, thetas, r)
    return d


def density4d_add(d: Density4D, thetas: np.ndarray, r: np.ndarray) -> None:
    """Accumulate draws into an existing density table (streaming use)."""
    px = d.phase_index(wrap_phase(thetas[:, 0]))
    py = d.phase_index(wrap_phase(thetas[:, 1]))
    ai = d.amp_grid.index(r)
    flat = (px * d.n_phase + py) * d.amp_grid.nbins + ai
    d.counts += np.bincount(flat, minlength=d.counts.size)
    d.n += thetas.shape[0]
