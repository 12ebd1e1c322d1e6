"""Command-line experiment runner.

Subcommands
-----------
calibrate
    Stream pilot draws through the moment/histogram accumulators and
    write one artifact file per (scenario, power, artifact kind).
ser-sweep
    Build detectors from previously written artifacts and Monte-Carlo
    the SER over the configured power grid; emits CSV plus a JSON
    manifest.
ssfm-sweep
    Waveform-level sweep over symbol rates and powers on the
    dispersion-managed link; same CSV schema with an extra
    ``symbol_rate_gbaud`` column.  Self-calibrating (detectors are
    fitted on labeled split-step draws), so no calibrate step applies.
validate
    Run fast internal consistency checks against the configured link
    and print one ok/FAIL line per check.

Conventions
-----------
Configs are JSON files (see ``configs/``).  The seed is mandatory and
user-supplied — there is no wall-clock default, so a (config, seed)
pair pins every output byte except manifest timestamps.  Flags may be
supplied through the environment as NLPNKIT_CONFIG, NLPNKIT_SEED,
NLPNKIT_OUT, and NLPNKIT_THREADS; explicit flags win.  Failures exit
nonzero after printing a single-line JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .calio import load_calibration, save_cf, save_cf_pair, save_density
from .channel import RngStream, draw_batch
from .model import LinkConfig, noise_spec
from .ser import (
    PM_DETECTORS,
    SP_DETECTORS,
    Budget,
    CalibrationPlan,
    CalibrationRequiredError,
    PointCalibration,
    Scenario,
    SerCurve,
    build_detectors,
    calibrate_point,
    curve_rows,
    evaluate_detectors,
    write_manifest,
    write_ser_csv,
    CSV_COLUMNS,
)

__all__ = ["main", "UsageError", "load_config"]

ENV_PREFIX = "NLPNKIT_"
SSFM_DETECTORS = ("uncompensated", "pm-det1", "pm-det2")
DEFAULT_RATES_GBAUD = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)


class UsageError(ValueError):
    """Bad invocation or config; exits with status 2."""


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("CONFIG"),
                        help="JSON config path (env: NLPNKIT_CONFIG)")
    common.add_argument("--seed", default=_env("SEED"),
                        help="u64 experiment seed, mandatory (env: NLPNKIT_SEED)")
    common.add_argument("--out", default=_env("OUT") or ".",
                        help="output directory (env: NLPNKIT_OUT)")
    common.add_argument("--threads", default=_env("THREADS"),
                        help="cap worker threads; outputs do not depend on it "
                             "(env: NLPNKIT_THREADS)")
    p = argparse.ArgumentParser(prog="nlpnkit",
                                description="NLPN channel experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("calibrate", cmd_calibrate, "write calibration artifacts"),
        ("ser-sweep", cmd_ser_sweep, "SER vs launch power from artifacts"),
        ("ssfm-sweep", cmd_ssfm_sweep, "waveform-level SER sweep"),
        ("validate", cmd_validate, "run internal consistency checks"),
    ):
        q = sub.add_parser(name, parents=[common], help=doc)
        q.set_defaults(func=fn)
    return p


def _parse_seed(raw) -> int:
    if raw is None:
        raise UsageError("--seed is mandatory (no wall-clock default); "
                         "pass --seed or set NLPNKIT_SEED")
    try:
        seed = int(str(raw), 0)
    except ValueError:
        raise UsageError(f"seed {raw!r} is not an integer") from None
    if not 0 <= seed < 1 << 64:
        raise UsageError("seed must fit in an unsigned 64-bit integer")
    return seed


def _apply_threads(raw) -> None:
    if raw is None:
        return
    try:
        n = int(str(raw), 0)
    except ValueError:
        raise UsageError(f"threads {raw!r} is not an integer") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    # all kernels are serial per draw; the cap only bounds library pools
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------- config

_LINK_FIELDS = {f.name for f in dataclasses.fields(LinkConfig)}


def load_config(path) -> dict:
    """Parse and validate a JSON run config; raises UsageError on defects."""
    if path is None:
        raise UsageError("--config is required (or set NLPNKIT_CONFIG)")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config root must be a JSON object")
    cfg.setdefault("name", path.stem)
    cfg.setdefault("m", 4)
    mode = cfg.get("mode")
    if mode not in ("ser", "ssfm"):
        raise UsageError("config needs \"mode\": \"ser\" or \"ssfm\"")
    link = cfg.get("link")
    if not isinstance(link, dict):
        raise UsageError("config needs a \"link\" object")
    unknown = set(link) - _LINK_FIELDS
    if unknown:
        raise UsageError(f"unknown link fields {sorted(unknown)}")
    try:
        cfg["link"] = LinkConfig(**link)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad link config: {e}") from None
    powers = cfg.get("power_grid_dbm")
    if not isinstance(powers, list) or not powers:
        raise UsageError("config needs a non-empty \"power_grid_dbm\" list")
    cfg["power_grid_dbm"] = [float(p) for p in powers]
    if mode == "ser":
        _validate_ser_config(cfg)
    else:
        _validate_ssfm_config(cfg)
    return cfg


def _check_kinds(kinds, valid, where: str) -> list:
    if not isinstance(kinds, list) or not kinds:
        raise UsageError(f"{where}: detector list must be non-empty")
    for k in kinds:
        if k not in valid:
            raise UsageError(
                f"{where}: unknown detector {k!r}; valid kinds: {', '.join(valid)}"
            )
    return list(kinds)


def _validate_ser_config(cfg: dict) -> None:
    scenarios = cfg.get("scenarios")
    if not isinstance(scenarios, list) or not scenarios:
        raise UsageError("ser config needs a non-empty \"scenarios\" list")
    parsed = []
    for sc in scenarios:
        if not isinstance(sc, dict) or "kind" not in sc:
            raise UsageError("each scenario needs a \"kind\"")
        try:
            scenario = Scenario(kind=sc["kind"], link=cfg["link"])
        except ValueError as e:
            raise UsageError(str(e)) from None
        valid = PM_DETECTORS if scenario.is_pm else SP_DETECTORS
        kinds = _check_kinds(sc.get("detectors"), valid, f"scenario {sc['kind']}")
        parsed.append((scenario, kinds))
    cfg["scenarios"] = parsed
    try:
        cfg["calibration"] = CalibrationPlan(**cfg.get("calibration", {}))
        cfg["budget"] = Budget(**cfg.get("budget", {}))
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad calibration/budget config: {e}") from None
    needs_density = any("pm-ml" in kinds for _, kinds in parsed)
    if needs_density and cfg["calibration"].density_draws == 0:
        raise UsageError(
            "pm-ml needs the 4D histogram: set calibration.density_draws > 0"
        )


def _validate_ssfm_config(cfg: dict) -> None:
    if cfg["link"].amp_kind != "lumped":
        raise UsageError("ssfm configs need a lumped link")
    cfg["detectors"] = _check_kinds(
        cfg.get("detectors"), SSFM_DETECTORS, "ssfm config")
    rates = cfg.get("symbol_rates_gbaud", list(DEFAULT_RATES_GBAUD))
    if not isinstance(rates, list) or not rates:
        raise UsageError("symbol_rates_gbaud must be a non-empty list")
    cfg["symbol_rates_gbaud"] = [float(r) for r in rates]
    s = cfg.get("ssfm", {})
    defaults = dict(step_km=3.0, beta2_ps2_km=-21.7, pulse="rect", sps=4,
                    rolloff=0.25, ase_mode="held", dcf_mode="end",
                    n_cal=32768, n_eval=32768, n_bins=24, n_bins_1d=200,
                    block_symbols=4096)
    unknown = set(s) - set(defaults)
    if unknown:
        raise UsageError(f"unknown ssfm fields {sorted(unknown)}")
    defaults.update(s)
    cfg["ssfm"] = defaults


# ------------------------------------------------------------- artifacts

_PART_SUFFIX = ("cf1dx", "cf1dy", "cf2d", "density")


def _artifact_base(name: str, kind: str, p_t_dbm: float) -> str:
    return f"{name}_{kind}_{p_t_dbm:+.1f}dBm"


def _warn_sparse(base: str, label: str, counts: np.ndarray, min_count: int) -> None:
    low = int((counts < min_count).sum())
    if low:
        print(
            f"warning: {base} {label}: {low}/{counts.size} amplitude bins "
            f"below min_count={min_count} "
            f"(counts min/median/max = {counts.min()}/{int(np.median(counts))}/"
            f"{counts.max()}); they fall back to the pooled rotation",
            file=sys.stderr,
        )


def _export_point(out: Path, name: str, cal: PointCalibration) -> list:
    base = _artifact_base(name, cal.scenario_kind, cal.p_t_dbm)
    meta = {"scenario": cal.scenario_kind, "p_t_dbm": cal.p_t_dbm,
            "m": cal.m, "min_count": cal.min_count}
    files = []

    def _save(saver, suffix, *payload):
        path = out / f"{base}_{suffix}.nlpncal"
        saver(path, *payload, meta=meta)
        files.append(path.name)

    _save(save_cf, "cf1dx", cal.cf1d_x)
    _warn_sparse(base, "1D-x", cal.cf1d_x.counts, cal.min_count)
    if cal.cf1d_y is not None:
        _save(save_cf, "cf1dy", cal.cf1d_y)
        _warn_sparse(base, "1D-y", cal.cf1d_y.counts, cal.min_count)
    if cal.cf2d_x is not None:
        _save(save_cf_pair, "cf2d", cal.cf2d_x, cal.cf2d_y)
        _warn_sparse(base, "2D", cal.cf2d_x.counts, cal.min_count)
    if cal.density is not None:
        _save(save_density, "density", cal.density)
    return files


def _load_point(out: Path, name: str, scenario: Scenario, p_t_dbm: float,
                kinds, plan: CalibrationPlan, m: int,
                config_path, seed: int) -> PointCalibration:
    base = _artifact_base(name, scenario.kind, p_t_dbm)

    def _need(suffix: str):
        path = out / f"{base}_{suffix}.nlpncal"
        if not path.exists():
            raise CalibrationRequiredError(
                f"missing calibration artifact {path}; run: "
                f"nlpnkit calibrate --config {config_path} --seed {seed} "
                f"--out {out}"
            )
        return load_calibration(path)[1]

    cf1d_y = cf2d_x = cf2d_y = density = None
    cf1d_x = _need("cf1dx")
    if scenario.is_pm:
        cf1d_y = _need("cf1dy")
        cf2d_x, cf2d_y = _need("cf2d")
        if "pm-ml" in kinds:
            density = _need("density")
    return PointCalibration(
        scenario_kind=scenario.kind, p_t_dbm=p_t_dbm, m=m,
        min_count=plan.min_count, cf1d_x=cf1d_x, cf1d_y=cf1d_y,
        cf2d_x=cf2d_x, cf2d_y=cf2d_y, density=density,
    )


# ------------------------------------------------------------ subcommands

def cmd_calibrate(cfg: dict, seed: int, out: Path, args) -> int:
    if cfg["mode"] != "ser":
        raise UsageError("calibrate applies to symbol-model configs "
                         "(mode \"ser\"); ssfm sweeps self-calibrate")
    plan: CalibrationPlan = cfg["calibration"]
    files = []
    for scenario, kinds in cfg["scenarios"]:
        point_plan = plan
        if "pm-ml" not in kinds:
            point_plan = dataclasses.replace(plan, density_draws=0)
        for i, p in enumerate(cfg["power_grid_dbm"]):
            cal = calibrate_point(scenario, p, point_plan, seed, point_index=i,
                                  m=cfg["m"])
            files += _export_point(out, cfg["name"], cal)
    write_manifest(out / f"{cfg['name']}_calibration_manifest.json", {
        "command": "calibrate", "config": _manifest_config(cfg),
        "seed": seed, "files": files,
    })
    print(f"wrote {len(files)} calibration artifacts to {out}")
    return 0


def cmd_ser_sweep(cfg: dict, seed: int, out: Path, args) -> int:
    if cfg["mode"] != "ser":
        raise UsageError("ser-sweep needs a mode \"ser\" config")
    plan: CalibrationPlan = cfg["calibration"]
    curves = []
    for scenario, kinds in cfg["scenarios"]:
        per_kind = {k: [] for k in kinds}
        for i, p in enumerate(cfg["power_grid_dbm"]):
            cal = _load_point(out, cfg["name"], scenario, p, kinds, plan,
                              cfg["m"], args.config, seed)
            dets = build_detectors(kinds, cal)
            points = evaluate_detectors(dets, scenario, p, seed,
                                        budget=cfg["budget"], point_index=i)
            for k in kinds:
                per_kind[k].append(points[k])
        curves += [SerCurve(k, scenario.kind, tuple(per_kind[k])) for k in kinds]
    csv_path = out / f"{cfg['name']}_ser.csv"
    write_ser_csv(csv_path, curve_rows(curves, seed))
    write_manifest(out / f"{cfg['name']}_ser_manifest.json", {
        "command": "ser-sweep", "config": _manifest_config(cfg),
        "seed": seed, "csv": csv_path.name,
    })
    print(f"wrote {csv_path}")
    return 0


def cmd_ssfm_sweep(cfg: dict, seed: int, out: Path, args) -> int:
    from .ssfm import make_pulse, plan_from_link, ssfm_ser_point

    if cfg["mode"] != "ssfm":
        raise UsageError("ssfm-sweep needs a mode \"ssfm\" config")
    s = cfg["ssfm"]
    pulse = make_pulse(s["pulse"], sps=s["sps"], rolloff=s["rolloff"])
    plan = plan_from_link(cfg["link"], step_km=s["step_km"],
                          beta2_ps2_km=s["beta2_ps2_km"])
    rates = cfg["symbol_rates_gbaud"]
    powers = cfg["power_grid_dbm"]
    rows = []
    for ri, rate in enumerate(rates):
        if not 0.5 <= rate <= 5.0:
            print(f"warning: symbol rate {rate} Gbaud is outside the "
                  "studied range [0.5, 5]; running anyway", file=sys.stderr)
        for pi, p in enumerate(powers):
            pts = ssfm_ser_point(
                p, plan, pulse, rate * 1e9, seed,
                detectors=cfg["detectors"], m=cfg["m"],
                n_cal=s["n_cal"], n_eval=s["n_eval"], n_bins=s["n_bins"],
                n_bins_1d=s["n_bins_1d"],
                ase_mode=s["ase_mode"], dcf_mode=s["dcf_mode"],
                block_symbols=s["block_symbols"],
                point_index=ri * len(powers) + pi,
            )
            for kind in cfg["detectors"]:
                pt = pts[kind]
                rows.append({
                    "detector": kind, "scenario": "pm", "p_t_dbm": pt.p_t_dbm,
                    "ser": pt.ser, "ci95": pt.half_width_95,
                    "n_symbols": pt.n_symbols, "n_errors": pt.n_errors,
                    "seed": seed, "symbol_rate_gbaud": rate,
                })
    csv_path = out / f"{cfg['name']}_ssfm.csv"
    write_ser_csv(csv_path, rows, columns=CSV_COLUMNS + ("symbol_rate_gbaud",))
    write_manifest(out / f"{cfg['name']}_ssfm_manifest.json", {
        "command": "ssfm-sweep", "config": _manifest_config(cfg),
        "seed": seed, "csv": csv_path.name,
    })
    print(f"wrote {csv_path}")
    return 0


def cmd_validate(cfg: dict, seed: int, out: Path, args) -> int:
    checks = [
        ("noise budget consistency", _check_noise_budget),
        ("wrapped-phase mode recovery", _check_mode_recovery),
        ("zero-Kerr rotation null", _check_zero_kerr),
        ("channel draw determinism", _check_determinism),
    ]
    if cfg["mode"] == "ssfm":
        checks.append(("linear span roundtrip", _check_linear_roundtrip))
    failed = 0
    for name, fn in checks:
        try:
            fn(cfg, seed)
        except AssertionError as e:
            failed += 1
            print(f"FAIL - {name}: {e}")
        else:
            print(f"ok - {name}")
    if failed:
        raise RuntimeError(f"{failed} of {len(checks)} validation checks failed")
    return 0


# ------------------------------------------------------- validate checks

def _check_noise_budget(cfg, seed):
    link = cfg["link"]
    ns = noise_spec(link)
    lumped = link.n_segments * ns.sigma0_sq
    dist = link.length_km * ns.sigmad_sq
    assert math.isclose(lumped, ns.total_var, rel_tol=1e-12), \
        f"N*sigma0^2 = {lumped} vs total {ns.total_var}"
    assert math.isclose(dist, ns.total_var, rel_tol=1e-12), \
        f"L*sigmad^2 = {dist} vs total {ns.total_var}"


def _check_mode_recovery(cfg, seed):
    gen = RngStream(seed, domain=9_000_000).generator(0)
    mu, sigma, n = 1.0, 0.5, 200_000
    ph = np.angle(np.exp(1j * (mu + sigma * gen.standard_normal(n))))
    z = np.exp(1j * ph).mean()
    est = float(np.angle(z))
    se = sigma / math.sqrt(n)
    assert abs(est - mu) < 4 * se, f"mode {est} vs {mu} (se {se:.2e})"


def _check_zero_kerr(cfg, seed):
    # without Kerr the conditional rotation is identically zero: the pooled
    # rotation must vanish below 0.01 rad and every usable bin within its
    # own circular standard error budget
    link = dataclasses.replace(cfg["link"], gamma=0.0)
    plan = CalibrationPlan(n_draws=200_000, n_bins_1d=50, k_max=2)
    cal = calibrate_point(Scenario(kind="pm", link=link), -10.0, plan, seed)
    for cf in (cal.cf1d_x, cal.cf1d_y):
        usable = cf.counts >= plan.min_count
        assert usable.any(), "no usable amplitude bins"
        z = cf.sums[0][usable]
        c = cf.counts[usable]
        pooled = abs(float(np.angle(z.sum())))
        assert pooled < 0.01, f"pooled rotation {pooled:.4f} rad"
        rbar = np.minimum(np.abs(z) / c, 1.0 - 1e-12)
        se = np.sqrt(-2.0 * np.log(rbar) / c)
        worst = (np.abs(np.angle(z)) / se).max()
        assert worst < 5.0, f"worst bin at {worst:.1f} circular SEs"


def _check_determinism(cfg, seed):
    link = cfg["link"]
    ns = noise_spec(link)
    sym = np.full((256, 2), 1e-2 + 0j)
    a = draw_batch(sym, link, ns, seed)
    b = draw_batch(sym, link, ns, seed)
    assert np.array_equal(a.received, b.received), "draws differ across runs"


def _check_linear_roundtrip(cfg, seed):
    from .ssfm import SpanPlan, ideal_dcf, make_pulse, modulate, propagate_span

    s = cfg["ssfm"]
    plan0 = SpanPlan(1, 90.0, s["step_km"], s["beta2_ps2_km"], 0.0, 0.25, 0.0)
    gen = RngStream(seed, domain=9_000_001).generator(0)
    sym = (gen.standard_normal((256, 2)) + 1j * gen.standard_normal((256, 2))) * 1e-2
    w = modulate(sym, make_pulse("rect", sps=4), 1e9)
    outw = propagate_span(w, plan0)
    outw.field *= math.sqrt(plan0.gain)
    outw = ideal_dcf(outw, plan0)
    err = np.abs(outw.field - w.field).max() / np.abs(w.field).max()
    assert err < 1e-9, f"roundtrip error {err:.2e}"


# ------------------------------------------------------------------ main

def _manifest_config(cfg: dict) -> dict:
    doc = {}
    for k, v in cfg.items():
        if k == "link":
            doc[k] = dataclasses.asdict(v)
        elif k == "scenarios":
            doc[k] = [{"kind": sc.kind, "detectors": kinds} for sc, kinds in v]
        elif dataclasses.is_dataclass(v):
            doc[k] = dataclasses.asdict(v)
        else:
            doc[k] = v
    return doc


def main(argv=None) -> int:
    from . import __version__

    args = _build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        seed = _parse_seed(args.seed)
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg["version"] = __version__
        return args.func(cfg, seed, out, args)
    except Exception as e:  # contract: nonzero exit, JSON error on stderr
        code = 2 if isinstance(e, UsageError) else 1
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
