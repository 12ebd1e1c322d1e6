"""Shared builders for test links and operating points."""

import numpy as np

from nlpnkit.model import LinkConfig, NoiseSpec, dbm_to_watt, make_mpsk, noise_spec

REF_CARRIER_HZ = 193.55e12


def dist_link(n_steps=500, gamma=1.4, bandwidth_hz=28e9):
    """9000 km distributed reference link (alpha 0.25 dB/km, Fn 6 dB)."""
    return LinkConfig(
        amp_kind="distributed",
        length_km=9000.0,
        n_segments=n_steps,
        alpha_db_per_km=0.25,
        gamma=gamma,
        bandwidth_hz=bandwidth_hz,
        carrier_hz=REF_CARRIER_HZ,
        noise_figure_db=6.0,
    )


def lumped_link(n_spans=45, span_km=90.0, gamma=1.4, bandwidth_hz=28e9):
    return LinkConfig(
        amp_kind="lumped",
        length_km=n_spans * span_km,
        n_segments=n_spans,
        alpha_db_per_km=0.25,
        gamma=gamma,
        bandwidth_hz=bandwidth_hz,
        carrier_hz=REF_CARRIER_HZ,
        noise_figure_db=6.0,
    )


def noiseless() -> NoiseSpec:
    return NoiseSpec(sigma0_sq=0.0, sigmad_sq=0.0, total_var=0.0)


def pilot_pair(p_t_w, m=4):
    """(n-broadcastable) transmitted pair: first constellation point, both pols."""
    c = make_mpsk(m, p_t_w)
    return np.array([c.points[0], c.points[0]])


def pilot_block(n, p_t_w, m=4):
    return np.broadcast_to(pilot_pair(p_t_w, m), (n, 2))


def minus10_dbm():
    return dbm_to_watt(-10.0)


def ref_point(link=None):
    """(link, noise, symbols power) at the -10 dBm reference operating point."""
    link = link or dist_link()
    return link, noise_spec(link), minus10_dbm()
