"""Symbol-error-rate harness.

Monte-Carlo SER with binomial confidence intervals, the truncated-series
SER, and launch-power sweeps over the three transmission scenarios:
polarization-multiplexed, single-polarization at the PM bandwidth, and
single-polarization at the PM total data rate (doubled bandwidth).

Reproducibility: every (purpose, scenario kind, sweep point) triple maps
to its own substream of the one user seed, so calibration draws never
overlap evaluation draws, sweep points are independent, and all
detectors at a point share the same evaluation draws (common random
numbers).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .channel import RngStream, draw_batch, draw_symbol_indices
from .detectors import (
    PmDet1Detector,
    PmDet2Detector,
    PmMlDetector,
    SectorDetector,
    SpMlDetector,
)
from .model import dbm_to_watt, make_mpsk, noise_spec, snr_from_power
from .stats import (
    ConditionalCF,
    Density4D,
    abs_coefficients,
    build_rotation_map,
    default_grid_1d,
    default_grid_2d,
    density4d_add,
)

__all__ = [
    "SCENARIO_KINDS",
    "PM_DETECTORS",
    "SP_DETECTORS",
    "CalibrationRequiredError",
    "Scenario",
    "SerPoint",
    "SerCurve",
    "CalibrationPlan",
    "PointCalibration",
    "Budget",
    "calibrate_point",
    "build_detectors",
    "evaluate_detectors",
    "mc_ser",
    "series_ser_sp",
    "series_ser_pm",
    "sweep",
    "curve_rows",
    "write_ser_csv",
    "write_manifest",
    "CSV_COLUMNS",
]

SCENARIO_KINDS = ("pm", "sp-same-bandwidth", "sp-same-data-rate")
PM_DETECTORS = ("pm-det1", "pm-det2", "pm-ml", "uncompensated")
SP_DETECTORS = ("sp-ml", "uncompensated")

_Z95 = 1.959963984540054

# Substream bases; point index occupies the low 16 bits, scenario kind the
# next bits, so distinct (purpose, kind, point) triples never collide.
_DOM_CAL, _DOM_SYM, _DOM_NOISE = 1 << 20, 2 << 20, 3 << 20
_KIND_STRIDE = {k: i << 16 for i, k in enumerate(SCENARIO_KINDS)}


class CalibrationRequiredError(RuntimeError):
    """An operation needs calibration artifacts that are not available."""


def _domain(base: int, kind: str, point_index: int) -> int:
    if not 0 <= point_index < (1 << 16):
        raise ValueError("point_index must be in [0, 65536)")
    return base + _KIND_STRIDE[kind] + point_index


@dataclass(frozen=True)
class Scenario:
    """Transmission scenario: what is launched and over which link.

    Parameters
    ----------
    kind : str
        One of ``SCENARIO_KINDS``.  'pm' launches independent symbols on
        both polarizations at the per-polarization power; the 'sp-*'
        kinds launch on x only (the orthogonal polarization still
        carries amplifier noise, which co-drives the nonlinear phase).
        'sp-same-data-rate' doubles the bandwidth (twice the symbol
        rate to match the PM total rate), which doubles the noise
        density.
    link : LinkConfig
        Base link, with the PM bandwidth.
    """

    kind: str
    link: "LinkConfig"

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; valid: {SCENARIO_KINDS}")

    @property
    def is_pm(self) -> bool:
        return self.kind == "pm"

    @property
    def channel_link(self):
        """Link as the channel sees it (bandwidth doubled for case (ii))."""
        if self.kind == "sp-same-data-rate":
            return dataclasses.replace(self.link, bandwidth_hz=2.0 * self.link.bandwidth_hz)
        return self.link

    @property
    def detector_kinds(self) -> tuple:
        """Detector names valid in this scenario."""
        return PM_DETECTORS if self.is_pm else SP_DETECTORS


@dataclass(frozen=True)
class SerPoint:
    """One Monte-Carlo SER estimate.

    ``ser`` counts a PM symbol as wrong if either polarization index is
    wrong (4D-symbol convention); ``ser_per_pol`` is the per-polarization
    error fraction (both conventions are reported so either comparison
    is auditable).  ``half_width_95`` is the binomial normal-approximation
    95% confidence half-width.
    """

    p_t_dbm: float
    ser: float
    half_width_95: float
    n_symbols: int
    n_errors: int
    ser_per_pol: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.ser <= 1.0:
            raise ValueError("ser must be in [0, 1]")
        if self.n_symbols < 1:
            raise ValueError("n_symbols must be >= 1")


@dataclass(frozen=True)
class SerCurve:
    """SER versus launch power for one detector in one scenario."""

    detector: str
    scenario_kind: str
    points: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "points", tuple(sorted(self.points, key=lambda p: p.p_t_dbm))
        )

    @property
    def powers_dbm(self) -> np.ndarray:
        return np.array([p.p_t_dbm for p in self.points])

    @property
    def sers(self) -> np.ndarray:
        return np.array([p.ser for p in self.points])


def _half_width(errors: int, n: int) -> float:
    p = errors / n
    return _Z95 * np.sqrt(p * (1.0 - p) / n)


@dataclass(frozen=True)
class CalibrationPlan:
    """Sizes for one calibration pass.

    A single pilot stream feeds everything: the first ``n_draws`` fill
    the moment sums (rotation maps and series coefficients), the first
    ``density_draws`` fill the 4D histogram, and the pass runs to the
    larger of the two.  ``density_draws = 0`` skips the histogram (no
    joint-ML detector from this calibration).
    """

    n_draws: int = 1_000_000
    density_draws: int = 0
    k_max: int = 16
    n_bins_1d: int = 200
    n_bins_2d: int = 64
    n_phase: int = 64
    n_amp: int = 32
    min_count: int = 50
    block_size: int = 1 << 17

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.density_draws < 0:
            raise ValueError("density_draws must be >= 0")


@dataclass
class PointCalibration:
    """Empirical artifacts for one (scenario, power) point.

    SP scenarios fill only ``cf1d_x``; PM fills the per-polarization 1D
    sums, the shared-grid 2D sums, and (if planned) the 4D histogram.
    """

    scenario_kind: str
    p_t_dbm: float
    m: int
    min_count: int
    cf1d_x: ConditionalCF
    cf1d_y: ConditionalCF | None = None
    cf2d_x: ConditionalCF | None = None
    cf2d_y: ConditionalCF | None = None
    density: Density4D | None = None


def calibrate_point(scenario: Scenario, p_t_dbm: float, plan: CalibrationPlan,
                    seed: int, point_index: int = 0, m: int = 4) -> PointCalibration:
    """Stream pilot draws through the moment/histogram accumulators.

    Pilots transmit constellation point 0 on every active polarization;
    by the channel's rotational invariance the residual-phase law does
    not depend on the transmitted index, so fixed pilots calibrate all
    hypotheses at once.
    """
    link = scenario.channel_link
    noise = noise_spec(link)
    p_w = dbm_to_watt(p_t_dbm)
    snr = snr_from_power(p_w, link, noise, p_y_w=p_w if scenario.is_pm else 0.0)
    const = make_mpsk(m, p_w)
    phase0 = np.pi / m

    cf1d_x = ConditionalCF(grid=default_grid_1d(snr.rho_x, plan.n_bins_1d), k_max=plan.k_max)
    cf1d_y = cf2d_x = cf2d_y = density = None
    n_density = 0
    if scenario.is_pm:
        cf1d_y = ConditionalCF(grid=default_grid_1d(snr.rho_y, plan.n_bins_1d), k_max=plan.k_max)
        grid2 = default_grid_2d(snr.rho_x, snr.rho_y, plan.n_bins_2d)
        cf2d_x = ConditionalCF(grid=grid2, k_max=plan.k_max)
        cf2d_y = ConditionalCF(grid=grid2, k_max=plan.k_max)
        if plan.density_draws:
            dgrid = default_grid_2d(snr.rho_x, snr.rho_y, plan.n_amp)
            density = Density4D(
                n_phase=plan.n_phase, amp_grid=dgrid,
                counts=np.zeros(plan.n_phase * plan.n_phase * dgrid.nbins, dtype=np.int64),
                n=0,
            )
            n_density = plan.density_draws

    stream = RngStream(seed, _domain(_DOM_CAL, scenario.kind, point_index))
    pilot_row = np.array(
        [const.points[0], const.points[0] if scenario.is_pm else 0.0], dtype=np.complex128
    )
    n_total = max(plan.n_draws, n_density)
    for off in range(0, n_total, plan.block_size):
        blk = min(plan.block_size, n_total - off)
        sym = np.broadcast_to(pilot_row, (blk, 2))
        d = draw_batch(sym, link, noise, stream, start_index=off)
        theta_x = np.angle(d.received[:, 0]) - phase0
        if off < plan.n_draws:
            k = min(blk, plan.n_draws - off)
            cf1d_x.add(theta_x[:k], d.r[:k, 0])
            if scenario.is_pm:
                theta_y = np.angle(d.received[:k, 1]) - phase0
                cf1d_y.add(theta_y, d.r[:k, 1])
                cf2d_x.add(theta_x[:k], d.r[:k])
                cf2d_y.add(theta_y, d.r[:k])
        if density is not None and off < n_density:
            k = min(blk, n_density - off)
            th = np.stack(
                [theta_x[:k], np.angle(d.received[:k, 1]) - phase0], axis=1
            )
            density4d_add(density, th, d.r[:k])
    return PointCalibration(
        scenario_kind=scenario.kind, p_t_dbm=p_t_dbm, m=m, min_count=plan.min_count,
        cf1d_x=cf1d_x, cf1d_y=cf1d_y, cf2d_x=cf2d_x, cf2d_y=cf2d_y, density=density,
    )


def _valid_kinds(scenario_kind: str) -> tuple:
    return PM_DETECTORS if scenario_kind == "pm" else SP_DETECTORS


def build_detectors(kinds, cal: PointCalibration) -> dict:
    """Ready-to-predict detectors from one point's artifacts, keyed by kind."""
    valid = _valid_kinds(cal.scenario_kind)
    out = {}
    for kind in kinds:
        if kind not in valid:
            raise ValueError(
                f"unknown detector {kind!r} for scenario {cal.scenario_kind!r}; "
                f"valid kinds: {', '.join(valid)}"
            )
        if kind == "uncompensated":
            # Constant carrier-recovery rotation: the circular mean of the
            # calibration residuals, pooled over both polarizations' bins.
            z = cal.cf1d_x.sums[0].sum()
            if cal.cf1d_y is not None:
                z += cal.cf1d_y.sums[0].sum()
            offset = -float(np.angle(z)) if z != 0 else 0.0
            out[kind] = SectorDetector(m=cal.m, phase_offset=offset).fit()
        elif kind == "sp-ml":
            out[kind] = SpMlDetector.from_map(
                build_rotation_map(cal.cf1d_x, cal.min_count), cal.m
            )
        elif kind == "pm-det1":
            out[kind] = PmDet1Detector.from_maps(
                build_rotation_map(cal.cf1d_x, cal.min_count),
                build_rotation_map(cal.cf1d_y, cal.min_count),
                cal.m,
            )
        elif kind == "pm-det2":
            out[kind] = PmDet2Detector.from_maps(
                build_rotation_map(cal.cf2d_x, cal.min_count),
                build_rotation_map(cal.cf2d_y, cal.min_count),
                cal.m,
            )
        else:  # pm-ml
            if cal.density is None:
                raise CalibrationRequiredError(
                    "the joint-ML detector needs the 4D histogram; recalibrate "
                    "this point with density_draws > 0"
                )
            fallback = PmDet2Detector.from_maps(
                build_rotation_map(cal.cf2d_x, cal.min_count),
                build_rotation_map(cal.cf2d_y, cal.min_count),
                cal.m,
            )
            out[kind] = PmMlDetector.from_artifacts(cal.density, fallback, cal.m)
    return out


def _require_fitted(name: str, det) -> None:
    missing = [
        a for a, v in vars(det).items()
        if a.endswith("_") and not a.startswith("_") and v is None
    ]
    if missing:
        raise CalibrationRequiredError(
            f"detector {name!r} is not calibrated ({', '.join(missing)} unset); "
            "fit on pilot draws or build it from calibration artifacts"
        )


def _streams(rng, kind: str, point_index: int):
    if isinstance(rng, tuple):
        sym, noi = rng
        return sym, noi
    return (
        RngStream(int(rng), _domain(_DOM_SYM, kind, point_index)),
        RngStream(int(rng), _domain(_DOM_NOISE, kind, point_index)),
    )


@dataclass(frozen=True)
class Budget:
    """Adaptive evaluation budget: run until every detector at the point
    has at least ``min_errors`` errors, or ``max_symbols`` is reached."""

    min_errors: int = 100
    max_symbols: int = 100_000_000
    block_size: int = 1 << 16


def evaluate_detectors(dets: dict, scenario: Scenario, p_t_dbm: float, rng,
                       n_symbols: int | None = None,
                       budget: Budget = Budget(),
                       point_index: int = 0) -> dict:
    """Shared-draw Monte-Carlo SER for several detectors at one point.

    All detectors see identical symbols and noise (common random
    numbers), so SER differences are paired.  With ``n_symbols`` the
    count is fixed; otherwise the adaptive ``budget`` applies.

    Parameters
    ----------
    dets : dict of {str: detector}
        Fitted detectors; all must share the constellation order.
    rng : int or (RngStream, RngStream)
        Seed (substreams derived per scenario/point) or explicit
        (symbol, noise) streams.

    Returns
    -------
    dict of {str: SerPoint}
    """
    if not dets:
        raise ValueError("no detectors to evaluate")
    orders = {det.m for det in dets.values()}
    if len(orders) != 1:
        raise ValueError("detectors disagree on constellation order")
    m = orders.pop()
    for name, det in dets.items():
        _require_fitted(name, det)

    link = scenario.channel_link
    noise = noise_spec(link)
    scale = np.sqrt(noise.total_var) if noise.total_var > 0 else 1.0
    const = make_mpsk(m, dbm_to_watt(p_t_dbm))
    sym_stream, noise_stream = _streams(rng, scenario.kind, point_index)

    target = n_symbols if n_symbols is not None else budget.max_symbols
    if target < 1:
        raise ValueError("n_symbols must be >= 1")
    err_sym = dict.fromkeys(dets, 0)
    err_pol = dict.fromkeys(dets, 0)
    done = 0
    while done < target:
        blk = min(budget.block_size, target - done)
        y = draw_symbol_indices(blk, m, sym_stream, start_index=done)
        pts = const.points[y]
        if not scenario.is_pm:
            pts[:, 1] = 0.0
        d = draw_batch(pts, link, noise, noise_stream, start_index=done)
        x = d.received / scale
        for name, det in dets.items():
            if scenario.is_pm:
                wrong = det.predict(x) != y
                err_sym[name] += int(wrong.any(axis=1).sum())
                err_pol[name] += int(wrong.sum())
            else:
                ne = int((det.predict(x[:, 0]) != y[:, 0]).sum())
                err_sym[name] += ne
                err_pol[name] += ne
        done += blk
        if n_symbols is None and all(e >= budget.min_errors for e in err_sym.values()):
            break

    out = {}
    for name in dets:
        per_pol = err_pol[name] / ((2 if scenario.is_pm else 1) * done)
        out[name] = SerPoint(
            p_t_dbm=p_t_dbm, ser=err_sym[name] / done,
            half_width_95=float(_half_width(err_sym[name], done)),
            n_symbols=done, n_errors=err_sym[name], ser_per_pol=per_pol,
        )
    return out


def mc_ser(detector, scenario: Scenario, p_t_dbm: float, n_symbols: int, rng,
           block_size: int = 1 << 16, point_index: int = 0) -> SerPoint:
    """Fixed-size Monte-Carlo SER for one detector (see evaluate_detectors)."""
    pts = evaluate_detectors(
        {"d": detector}, scenario, p_t_dbm, rng, n_symbols=n_symbols,
        budget=Budget(block_size=block_size), point_index=point_index,
    )
    return pts["d"]


def series_ser_sp(cf: ConditionalCF, m: int, k_max: int | None = None,
                  debias: bool = True) -> float:
    """Truncated-series SER of one polarization's sector decision.

    (M-1)/M - sum_{k=1}^{K} (2/M) sinc(k/M) c_k, with the coefficients
    c_k = (1/n) sum_b |M_k(b)| taken from the binned moment sums; the
    per-bin modulus makes the value invariant to the compensation
    rotation, so the same sums serve the rotated detector.  Truncation
    can leave a slightly negative value at very low SER; it is returned
    unclipped so convergence is auditable.
    """
    if k_max is None:
        k_max = cf.k_max
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    c = abs_coefficients(cf, debias=debias)[:k_max]
    k = np.arange(1, c.size + 1)
    return float((m - 1) / m - (2.0 / m) * np.sum(np.sinc(k / m) * c))


def series_ser_pm(cf_x: ConditionalCF, cf_y: ConditionalCF, m: int,
                  k_max: int | None = None, debias: bool = True) -> float:
    """Series SER of the 4D symbol under per-polarization independence.

    1 - (1 - SER_x)(1 - SER_y); pass the per-polarization 1D sums for
    the own-amplitude detector or the shared-grid 2D sums for the
    joint-amplitude detector.
    """
    sx = series_ser_sp(cf_x, m, k_max, debias)
    sy = series_ser_sp(cf_y, m, k_max, debias)
    return 1.0 - (1.0 - sx) * (1.0 - sy)


def sweep(detector_kinds, scenario: Scenario, power_grid_dbm, budget: Budget,
          seed: int, plan: CalibrationPlan = CalibrationPlan(), m: int = 4,
          calibrations_out: list | None = None) -> list:
    """Calibrate and evaluate every power point; one curve per detector.

    Points are independent substreams of ``seed``; within a point all
    detectors share evaluation draws.  Pass ``calibrations_out=[]`` to
    also collect the per-point artifacts (series SER, file export).
    """
    kinds = list(detector_kinds)
    if not kinds:
        raise ValueError("detector_kinds must not be empty")
    valid = _valid_kinds(scenario.kind)
    for kind in kinds:
        if kind not in valid:
            raise ValueError(
                f"unknown detector {kind!r} for scenario {scenario.kind!r}; "
                f"valid kinds: {', '.join(valid)}"
            )
    needs_density = "pm-ml" in kinds
    if needs_density and plan.density_draws == 0:
        raise CalibrationRequiredError(
            "the joint-ML detector needs the 4D histogram; set density_draws > 0"
        )
    per_kind = {k: [] for k in kinds}
    for i, p in enumerate(power_grid_dbm):
        cal = calibrate_point(scenario, p, plan, seed, point_index=i, m=m)
        if calibrations_out is not None:
            calibrations_out.append(cal)
        dets = build_detectors(kinds, cal)
        points = evaluate_detectors(dets, scenario, p, seed, budget=budget,
                                    point_index=i)
        for kind in kinds:
            per_kind[kind].append(points[kind])
    return [SerCurve(kind, scenario.kind, tuple(per_kind[kind])) for kind in kinds]


CSV_COLUMNS = ("detector", "scenario", "p_t_dbm", "ser", "ci95",
               "n_symbols", "n_errors", "seed")


def curve_rows(curves, seed: int) -> list:
    """Flatten curves into CSV row dicts (schema: ``CSV_COLUMNS``)."""
    rows = []
    for curve in curves:
        for pt in curve.points:
            rows.append({
                "detector": curve.detector,
                "scenario": curve.scenario_kind,
                "p_t_dbm": pt.p_t_dbm,
                "ser": pt.ser,
                "ci95": pt.half_width_95,
                "n_symbols": pt.n_symbols,
                "n_errors": pt.n_errors,
                "seed": seed,
            })
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_ser_csv(path, rows, columns=CSV_COLUMNS) -> None:
    """Write row dicts as CSV; deterministic formatting, newline-terminated."""
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def write_manifest(path, payload: dict, include_timestamp: bool = True) -> None:
    """Write the run manifest JSON (config, seeds, conventions).

    The timestamp is the single permitted nondeterministic output byte
    source; disable it where byte-identity across runs is asserted.
    """
    doc = dict(payload)
    if include_timestamp:
        doc["created_utc"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
