"""Decision rules for M-PSK on the amplitude-phase-coupled channel.

All detectors share one estimator shape: construct with hyperparameters,
``fit(X, y)`` on pilot draws (received fields with known transmitted
indices), then ``predict(X)`` symbol indices.  ``X`` holds received fields
normalized by the root total noise power, so ``abs(X)`` is the normalized
amplitude the calibration grids are built over: pass ``ChannelDraw.received
/ sqrt(noise.total_var)`` (or equivalently ``r * exp(j*angle(received))``).

The family:

- ``SectorDetector`` — uncompensated phase sectors (baseline).
- ``SpMlDetector`` — one polarization; rotate by the own-amplitude map,
  then sector-decide.
- ``PmDet1Detector`` — per-polarization ``SpMlDetector`` pair.
- ``PmDet2Detector`` — rotations conditioned on both amplitudes.
- ``PmMlDetector`` — joint 4D histogram argmax over all M^2 phase pairs,
  falling back to the joint-rotation rule in unpopulated cells.
"""

from __future__ import annotations

import inspect

import numpy as np

from .stats import (
    Density4D,
    RotationMap,
    accumulate_cf,
    build_rotation_map,
    default_grid_1d,
    default_grid_2d,
    joint_density_grid,
    residual_phase,
)
from .validation import check_complex_samples, check_indices, check_is_fitted

__all__ = [
    "sector_decide",
    "BaseDetector",
    "SectorDetector",
    "SpMlDetector",
    "PmDet1Detector",
    "PmDet2Detector",
    "PmMlDetector",
]


def sector_decide(theta, m: int):
    """Index of the phase sector containing ``theta``.

    Symbols sit at phases pi*(2k+1)/m, so sector k covers
    (2*pi*k/m, 2*pi*(k+1)/m]; a hit on the shared boundary goes to the
    lower index.

    Parameters
    ----------
    theta : array-like of float
        Phase(s), any real value (interpreted mod 2*pi).
    m : int
        Constellation order.

    Returns
    -------
    ndarray of int64 (or scalar), values in [0, m).
    """
    theta = np.asarray(theta, dtype=float)
    k = (np.ceil(theta * m / (2 * np.pi)).astype(np.int64) - 1) % m
    return k if k.ndim else int(k)


def _mpsk_phases(m: int) -> np.ndarray:
    return np.pi * (2 * np.arange(m) + 1) / m


class BaseDetector:
    """Estimator plumbing: parameter introspection and cloning support.

    Subclasses keep every hyperparameter as an ``__init__`` keyword stored
    under the same attribute name; fitted state uses trailing underscores.
    """

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid: {sorted(valid)}"
                )
            setattr(self, key, value)
        return self

    def score(self, x, y) -> float:
        """Fraction of samples whose every index is decided correctly."""
        pred = self.predict(x)
        pred = np.atleast_2d(pred.T).T
        truth = np.atleast_2d(np.asarray(y).T).T
        return float((pred == truth).all(axis=1).mean())


class SectorDetector(BaseDetector):
    """Uncompensated baseline: decide on the received phase after at most
    a constant (amplitude-independent) rotation — the carrier-recovery
    stage every receiver has, with no nonlinear-phase tracking.

    Parameters
    ----------
    m : int
        Constellation order.
    phase_offset : float
        Constant rotation added before the sector decision, rad.
        ``fit`` with data replaces it by the global circular-mean
        residual; ``fit()`` keeps it.
    """

    def __init__(self, m: int = 4, phase_offset: float = 0.0):
        self.m = m
        self.phase_offset = phase_offset

    def fit(self, x=None, y=None):
        """Estimate the constant rotation from labeled samples.

        With no arguments, keeps ``phase_offset`` (zero by default:
        trust the transmitted phases as-is).
        """
        if x is None:
            self.offset_ = float(self.phase_offset)
            return self
        pair = np.asarray(x).ndim == 2
        x = check_complex_samples(x, pair=pair)
        x2 = np.atleast_2d(x.T).T
        y2 = check_indices(y, x2.shape[0], self.m, pair=pair)
        y2 = np.atleast_2d(np.asarray(y2).T).T
        resid = np.angle(x2) - _mpsk_phases(self.m)[y2]
        self.offset_ = float(-np.angle(np.exp(1j * resid).sum()))
        return self

    def predict(self, x) -> np.ndarray:
        """Sector indices, shape (n, 2) for pairs or (n,) for one column."""
        offset = getattr(self, "offset_", self.phase_offset)
        x = np.asarray(x, dtype=np.complex128)
        return sector_decide(np.angle(x) + offset, self.m)


class SpMlDetector(BaseDetector):
    """Single-polarization detector: own-amplitude rotation, then sectors.

    Parameters
    ----------
    m : int
        Constellation order.
    n_bins : int
        Amplitude bins of the calibration grid.
    k_max : int
        Circular moment orders kept during calibration (>= 2 keeps the
        standard-error machinery available).
    min_count : int
        Minimum draws for a usable bin; sparser bins borrow the nearest
        usable bin's rotation.
    grid_hi : float or None
        Upper grid edge; None sizes it from the fitted draws as
        sqrt(max(mean(r^2) - 1, 0)) + 6 (the amplitude bulk at that SNR).

    Attributes
    ----------
    map_ : RotationMap
        Fitted compensation map.
    """

    def __init__(self, m: int = 4, n_bins: int = 200, k_max: int = 2,
                 min_count: int = 50, grid_hi: float | None = None):
        self.m = m
        self.n_bins = n_bins
        self.k_max = k_max
        self.min_count = min_count
        self.grid_hi = grid_hi
        self.map_ = None

    @classmethod
    def from_map(cls, rotation_map: RotationMap, m: int) -> "SpMlDetector":
        """Build a ready detector from a saved calibration artifact."""
        det = cls(m=m, n_bins=rotation_map.grid.shape[0], min_count=rotation_map.min_count)
        det.map_ = rotation_map
        return det

    def _grid(self, r: np.ndarray):
        if self.grid_hi is not None:
            return _uniform_grid(self.grid_hi, self.n_bins)
        rho_hat = max(float((r ** 2).mean()) - 1.0, 0.0)
        return default_grid_1d(rho_hat, self.n_bins)

    def fit(self, x, y):
        """Calibrate the rotation map from pilot draws.

        Parameters
        ----------
        x : array of complex, shape (n,)
            Received fields over root total noise power.
        y : array of int, shape (n,)
            Transmitted symbol indices.
        """
        x = check_complex_samples(x, pair=False)
        y = check_indices(y, x.shape[0], self.m, pair=False)
        theta = np.angle(x) - _mpsk_phases(self.m)[y]
        r = np.abs(x)
        cf = accumulate_cf(theta, r, self._grid(r), self.k_max)
        self.map_ = build_rotation_map(cf, self.min_count)
        return self

    def transform(self, x) -> np.ndarray:
        """Apply the fitted rotation: fields with compensated phase."""
        check_is_fitted(self, ["map_"])
        x = check_complex_samples(x, pair=False)
        return x * np.exp(1j * self.map_.lookup(np.abs(x)))

    def predict(self, x) -> np.ndarray:
        check_is_fitted(self, ["map_"])
        x = check_complex_samples(x, pair=False)
        theta = np.angle(x) + self.map_.lookup(np.abs(x))
        return sector_decide(theta, self.m)


def _uniform_grid(hi: float, n_bins: int):
    from .stats import AmplitudeGrid

    return AmplitudeGrid(np.linspace(0.0, hi, n_bins + 1))


class PmDet1Detector(BaseDetector):
    """Per-polarization rotation detector (two independent 1D maps).

    Decisions equal :class:`SpMlDetector` run on each polarization with its
    own-amplitude map — identical code path, so agreement is bit-exact.
    Constructor parameters mirror :class:`SpMlDetector`.
    """

    def __init__(self, m: int = 4, n_bins: int = 200, k_max: int = 2,
                 min_count: int = 50, grid_hi: float | None = None):
        self.m = m
        self.n_bins = n_bins
        self.k_max = k_max
        self.min_count = min_count
        self.grid_hi = grid_hi
        self.pol_x_ = None
        self.pol_y_ = None

    def _sub(self) -> SpMlDetector:
        return SpMlDetector(m=self.m, n_bins=self.n_bins, k_max=self.k_max,
                            min_count=self.min_count, grid_hi=self.grid_hi)

    @classmethod
    def from_maps(cls, map_x: RotationMap, map_y: RotationMap, m: int) -> "PmDet1Detector":
        det = cls(m=m)
        det.pol_x_ = SpMlDetector.from_map(map_x, m)
        det.pol_y_ = SpMlDetector.from_map(map_y, m)
        return det

    def fit(self, x, y):
        x = check_complex_samples(x, pair=True)
        y = check_indices(y, x.shape[0], self.m, pair=True)
        self.pol_x_ = self._sub().fit(x[:, 0], y[:, 0])
        self.pol_y_ = self._sub().fit(x[:, 1], y[:, 1])
        return self

    def transform(self, x) -> np.ndarray:
        check_is_fitted(self, ["pol_x_", "pol_y_"])
        x = check_complex_samples(x, pair=True)
        return np.stack(
            [self.pol_x_.transform(x[:, 0]), self.pol_y_.transform(x[:, 1])], axis=1
        )

    def predict(self, x) -> np.ndarray:
        check_is_fitted(self, ["pol_x_", "pol_y_"])
        x = check_complex_samples(x, pair=True)
        return np.stack(
            [self.pol_x_.predict(x[:, 0]), self.pol_y_.predict(x[:, 1])], axis=1
        )


class PmDet2Detector(BaseDetector):
    """Joint-amplitude rotation detector.

    Each polarization's compensation angle is conditioned on both received
    amplitudes (a 2D map per polarization); decisions are still independent
    per-polarization sector tests after rotation.

    Parameters mirror :class:`SpMlDetector` with ``n_bins`` per 2D axis.

    Attributes
    ----------
    map_x_, map_y_ : RotationMap
    """

    def __init__(self, m: int = 4, n_bins: int = 64, k_max: int = 2,
                 min_count: int = 50, grid_hi: float | None = None):
        self.m = m
        self.n_bins = n_bins
        self.k_max = k_max
        self.min_count = min_count
        self.grid_hi = grid_hi
        self.map_x_ = None
        self.map_y_ = None

    @classmethod
    def from_maps(cls, map_x: RotationMap, map_y: RotationMap, m: int) -> "PmDet2Detector":
        det = cls(m=m, n_bins=map_x.grid.shape[0], min_count=map_x.min_count)
        det.map_x_ = map_x
        det.map_y_ = map_y
        return det

    def _grid(self, r: np.ndarray):
        if self.grid_hi is not None:
            from .stats import AmplitudeGrid

            e = np.linspace(0.0, self.grid_hi, self.n_bins + 1)
            return AmplitudeGrid(e, e.copy())
        rho = np.maximum((r ** 2).mean(axis=0) - 1.0, 0.0)
        return default_grid_2d(rho[0], rho[1], self.n_bins)

    def fit(self, x, y):
        x = check_complex_samples(x, pair=True)
        y = check_indices(y, x.shape[0], self.m, pair=True)
        phases = _mpsk_phases(self.m)
        r = np.abs(x)
        grid = self._grid(r)
        maps = []
        for pol in (0, 1):
            theta = np.angle(x[:, pol]) - phases[y[:, pol]]
            cf = accumulate_cf(theta, r, grid, self.k_max)
            maps.append(build_rotation_map(cf, self.min_count))
        self.map_x_, self.map_y_ = maps
        return self

    def transform(self, x) -> np.ndarray:
        check_is_fitted(self, ["map_x_", "map_y_"])
        x = check_complex_samples(x, pair=True)
        r = np.abs(x)
        rot = np.stack([self.map_x_.lookup(r), self.map_y_.lookup(r)], axis=1)
        return x * np.exp(1j * rot)

    def predict(self, x) -> np.ndarray:
        check_is_fitted(self, ["map_x_", "map_y_"])
        x = check_complex_samples(x, pair=True)
        r = np.abs(x)
        kx = sector_decide(np.angle(x[:, 0]) + self.map_x_.lookup(r), self.m)
        ky = sector_decide(np.angle(x[:, 1]) + self.map_y_.lookup(r), self.m)
        return np.stack([kx, ky], axis=1)


class PmMlDetector(BaseDetector):
    """Joint maximum-likelihood detector over all M^2 phase hypotheses.

    The conditional law of (phase pair, amplitude pair) given the
    transmitted pair is estimated once as a 4D histogram of pilot
    residuals; by rotational invariance a candidate pair is scored by
    looking up the histogram at the received phases shifted by the
    candidate phases.  Ties take the lexicographically smallest
    (k_x, k_y).  Samples whose M^2 candidate cells are all empty fall
    back to the joint-rotation rule and are counted in
    ``fallback_count_``.

    Parameters
    ----------
    m : int
        Constellation order.
    n_phase : int
        Phase bins per polarization axis.
    n_amp : int
        Amplitude bins per polarization axis.
    grid_hi : float or None
        Upper amplitude edge; None sizes from the fitted draws.

    Attributes
    ----------
    density_ : Density4D
    fallback_ : PmDet2Detector
    fallback_count_ : int
        Evaluation samples (cumulative) decided by the fallback rule.
    """

    def __init__(self, m: int = 4, n_phase: int = 64, n_amp: int = 32,
                 min_count: int = 50, grid_hi: float | None = None):
        self.m = m
        self.n_phase = n_phase
        self.n_amp = n_amp
        self.min_count = min_count
        self.grid_hi = grid_hi
        self.density_ = None
        self.fallback_ = None
        self.fallback_count_ = 0

    @classmethod
    def from_artifacts(cls, density: Density4D, fallback: PmDet2Detector, m: int) -> "PmMlDetector":
        det = cls(m=m, n_phase=density.n_phase, n_amp=density.amp_grid.shape[0])
        det.density_ = density
        det.fallback_ = fallback
        return det

    def fit(self, x, y):
        x = check_complex_samples(x, pair=True)
        y = check_indices(y, x.shape[0], self.m, pair=True)
        phases = _mpsk_phases(self.m)
        r = np.abs(x)
        theta = np.angle(x) - phases[y]
        if self.grid_hi is not None:
            from .stats import AmplitudeGrid

            e = np.linspace(0.0, self.grid_hi, self.n_amp + 1)
            grid = AmplitudeGrid(e, e.copy())
        else:
            rho = np.maximum((r ** 2).mean(axis=0) - 1.0, 0.0)
            grid = default_grid_2d(rho[0], rho[1], self.n_amp)
        self.density_ = joint_density_grid(theta, r, n_phase=self.n_phase, amp_grid=grid)
        self.fallback_ = PmDet2Detector(m=self.m, min_count=self.min_count).fit(x, y)
        self.fallback_count_ = 0
        return self

    def predict(self, x) -> np.ndarray:
        check_is_fitted(self, ["density_", "fallback_"])
        x = check_complex_samples(x, pair=True)
        n = x.shape[0]
        m = self.m
        phases = _mpsk_phases(m)
        theta_x = np.angle(x[:, 0])
        theta_y = np.angle(x[:, 1])
        amp_idx = self.density_.amp_grid.index(np.abs(x))
        scores = np.empty((n, m * m), dtype=np.int64)
        for kx in range(m):
            for ky in range(m):
                scores[:, kx * m + ky] = self.density_.lookup_counts(
                    theta_x - phases[kx], theta_y - phases[ky], amp_idx
                )
        best = np.argmax(scores, axis=1)  # first max = lexicographic tie-break
        out = np.stack([best // m, best % m], axis=1)
        empty = scores.max(axis=1) == 0
        if empty.any():
            out[empty] = self.fallback_.predict(x[empty])
            self.fallback_count_ += int(empty.sum())
        return out
