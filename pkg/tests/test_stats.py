"""Tests for circular statistics, moment accumulation, and rotation maps."""

import numpy as np
import pytest
import scipy.stats

from helpers import dist_link, noiseless, pilot_block, pilot_pair, ref_point

from nlpnkit.channel import RngStream, draw_batch
from nlpnkit.model import noise_spec, snr_from_power
from nlpnkit.stats import (
    AmplitudeGrid,
    abs_coefficients,
    accumulate_cf,
    build_rotation_map,
    circular_mean_stderr,
    circular_mode_estimate,
    circular_variance,
    default_grid_1d,
    default_grid_2d,
    joint_density_grid,
    merge_cf,
    phase_pdf_series,
    residual_phase,
    wrap_phase,
)


def wrapped_gaussian(mu, sigma, n, seed):
    rng = np.random.default_rng(seed)
    return wrap_phase(mu + sigma * rng.standard_normal(n))


class TestWrap:
    def test_interval_convention(self):
        np.testing.assert_allclose(wrap_phase(np.pi), np.pi)
        np.testing.assert_allclose(wrap_phase(-np.pi), np.pi)
        np.testing.assert_allclose(wrap_phase(3 * np.pi / 2), -np.pi / 2)
        np.testing.assert_allclose(wrap_phase(0.3), 0.3)
        theta = np.linspace(-20, 20, 1001)
        w = wrap_phase(theta)
        assert (w > -np.pi).all() and (w <= np.pi).all()
        np.testing.assert_allclose(np.exp(1j * w), np.exp(1j * theta), atol=1e-12)

    def test_residual_phase(self):
        tx = np.array([1 + 1j, -2j])
        rx = tx * np.exp(1j * np.array([0.4, -0.7])) * 3.0
        np.testing.assert_allclose(residual_phase(rx, tx), [0.4, -0.7], atol=1e-12)


class TestCircularDescriptors:
    @pytest.mark.parametrize("mu", [-3.0, -1.0, 0.0, 1.0, 3.0])
    @pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0])
    def test_mode_recovery_wrapped_gaussian(self, mu, sigma):
        theta = wrapped_gaussian(mu, sigma, 20_000, seed=hash((mu, sigma)) % 2**32)
        est = circular_mode_estimate(theta)
        se = circular_mean_stderr(theta)
        assert abs(wrap_phase(est - mu)) < 3 * se

    def test_variance_point_mass(self):
        assert circular_variance(np.full(100, 0.7)) == pytest.approx(0.0, abs=1e-12)

    def test_variance_uniform(self):
        rng = np.random.default_rng(5)
        theta = rng.uniform(-np.pi, np.pi, 200_000)
        assert circular_variance(theta) == pytest.approx(1.0, abs=0.01)

    def test_variance_wrapped_gaussian_closed_form(self):
        # 1 - exp(-sigma^2/2) at sigma = 0.5 -> 0.1175030974154046
        theta = wrapped_gaussian(0.0, 0.5, 2_000_000, seed=8)
        assert circular_variance(theta) == pytest.approx(0.1175030974154046, abs=1.5e-3)

    def test_stderr_tracks_gaussian_rate(self):
        theta = wrapped_gaussian(0.3, 0.4, 40_000, seed=9)
        se = circular_mean_stderr(theta)
        assert se == pytest.approx(0.4 / np.sqrt(40_000), rel=0.15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            circular_variance(np.array([]))
        with pytest.raises(ValueError):
            circular_mode_estimate(np.array([]))


class TestGrid:
    def test_index_1d_boundaries(self):
        g = AmplitudeGrid(np.array([0.0, 1.0, 2.0, 3.0]))
        idx = g.index(np.array([0.0, 0.5, 1.0, 2.999, 3.0, 99.0]))
        np.testing.assert_array_equal(idx, [0, 0, 1, 2, 2, 2])

    def test_index_2d_roundtrip(self):
        g = default_grid_2d(10.0, 10.0, n_bins=16)
        assert g.shape == (16, 16)
        r = np.array([[0.1, 0.1], [5.0, 2.0], [999.0, 0.0]])
        idx = g.index(r)
        assert idx.shape == (3,) and (idx >= 0).all() and (idx < g.nbins).all()

    def test_bad_edges(self):
        with pytest.raises(ValueError):
            AmplitudeGrid(np.array([0.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            AmplitudeGrid(np.array([-0.5, 1.0]))

    def test_offset_grid_clamps_underflow(self):
        g = AmplitudeGrid(np.array([2.0, 3.0, 4.0]))
        assert g.index(np.array([0.1, 2.5, 9.0])).tolist() == [0, 0, 1]


class TestAccumulate:
    def test_high_snr_first_moment_near_one(self):
        link, noise, p = ref_point(dist_link(n_steps=50, gamma=0.0))
        sym = pilot_block(50_000, p)
        d = draw_batch(sym, link, noise, 17)
        theta = residual_phase(d.received[:, 0], sym[:, 0])
        cf = accumulate_cf(theta, d.r[:, 0], default_grid_1d(p / noise.total_var), k_max=4)
        nz = cf.counts >= 500
        ratios = np.abs(cf.sums[0, nz]) / cf.counts[nz]
        assert (ratios > 0.9).all()

    def test_uniform_phases_vanishing_moments(self):
        rng = np.random.default_rng(4)
        n = 400_000
        theta = rng.uniform(-np.pi, np.pi, n)
        r = rng.uniform(0, 5.9, n)
        grid = AmplitudeGrid(np.linspace(0.0, 6.0, 21))
        cf = accumulate_cf(theta, r, grid, k_max=4)
        nb = cf.counts
        assert (nb > 0).all()
        assert (np.abs(cf.sums) / nb < 5 / np.sqrt(nb)).all()

    def test_synthetic_quadratic_phase_law(self):
        # theta = c*r^2 + noise: per-bin mean direction must track c*r^2
        rng = np.random.default_rng(6)
        n = 500_000
        c = 0.05
        r = rng.uniform(1.0, 5.0, n)
        theta = wrap_phase(c * r**2 + 0.2 * rng.standard_normal(n))
        grid = AmplitudeGrid(np.linspace(0.0, 6.0, 61))
        cf = accumulate_cf(theta, r, grid, k_max=2)
        mids = 0.5 * (grid.edges_x[:-1] + grid.edges_x[1:])
        sel = cf.counts >= 2000
        est = cf.mean_direction()[sel]
        np.testing.assert_allclose(est, c * mids[sel] ** 2, atol=0.02)

    def test_counts_and_bound(self):
        theta = np.array([0.1, 0.2, 3.0])
        r = np.array([0.5, 0.6, 2.5])
        cf = accumulate_cf(theta, r, AmplitudeGrid(np.array([0.0, 1.0, 3.0])), k_max=3)
        assert cf.n == 3
        np.testing.assert_array_equal(cf.counts, [2, 1])
        assert (np.abs(cf.sums) <= cf.counts[None, :] + 1e-12).all()

    def test_merge_matches_single_pass_exactly(self):
        rng = np.random.default_rng(12)
        theta = rng.uniform(-np.pi, np.pi, 9000)
        r = rng.uniform(0, 6, 9000)
        grid = default_grid_1d(4.0, n_bins=40)
        whole = accumulate_cf(theta, r, grid, k_max=5)
        a = accumulate_cf(theta[:2000], r[:2000], grid, k_max=5)
        b = accumulate_cf(theta[2000:6500], r[2000:6500], grid, k_max=5)
        c = accumulate_cf(theta[6500:], r[6500:], grid, k_max=5)
        merged = merge_cf(merge_cf(a, b), c)
        merged2 = merge_cf(a, merge_cf(b, c))
        np.testing.assert_array_equal(merged.counts, whole.counts)
        np.testing.assert_allclose(merged.sums, whole.sums, rtol=1e-13)
        np.testing.assert_allclose(merged.sums, merged2.sums, rtol=1e-13)

    def test_merge_mismatch_rejected(self):
        g1 = default_grid_1d(4.0, n_bins=10)
        g2 = default_grid_1d(9.0, n_bins=10)
        a = accumulate_cf(np.array([0.1]), np.array([1.0]), g1, k_max=2)
        b = accumulate_cf(np.array([0.1]), np.array([1.0]), g2, k_max=2)
        with pytest.raises(ValueError):
            merge_cf(a, b)


class TestRotationMap:
    def test_sign_convention_injected_mean(self):
        # residual phases with mean +0.3 in a bin -> compensation -0.3,
        # and applying theta + theta_c centers the residual
        theta = wrapped_gaussian(0.3, 0.2, 50_000, seed=3)
        r = np.full(theta.size, 1.5)
        grid = AmplitudeGrid(np.linspace(0.0, 4.0, 5))
        cf = accumulate_cf(theta, r, grid, k_max=2)
        m = build_rotation_map(cf, min_count=50)
        comp = m.lookup(r)
        assert comp[0] == pytest.approx(-0.3, abs=0.01)
        centered = wrap_phase(theta + comp)
        assert abs(circular_mode_estimate(centered)) < 3 * circular_mean_stderr(centered)

    def test_deterministic_channel_single_bin(self):
        # noiseless channel: one occupied amplitude bin, compensation equals
        # the (wrapped) accumulated nonlinear phase so detection recovers s0
        link = dist_link(n_steps=20)
        sym = pilot_block(200, 1e-4)
        d = draw_batch(sym, link, noiseless(), 2)
        phi = d.phi_nl[0]
        theta = residual_phase(d.received[:, 0], sym[:, 0])
        grid = AmplitudeGrid(np.linspace(0.0, np.abs(sym[0, 0]) * 2, 11))
        cf = accumulate_cf(theta, np.abs(d.received[:, 0]), grid, k_max=1)
        m = build_rotation_map(cf, min_count=50)
        occupied = np.unique(grid.index(np.abs(d.received[:, 0])))
        assert occupied.size == 1
        assert m.theta_c[occupied[0]] == pytest.approx(wrap_phase(phi), abs=1e-9)

    def test_nearest_bin_fallback(self):
        theta = np.concatenate([np.full(100, 0.5), np.full(100, -0.2)])
        r = np.concatenate([np.full(100, 0.5), np.full(100, 3.5)])
        grid = AmplitudeGrid(np.linspace(0.0, 4.0, 9))  # bins of width 0.5
        cf = accumulate_cf(theta, r, grid, k_max=1)
        m = build_rotation_map(cf, min_count=50)
        # occupied: bin 1 (r=0.5) and bin 7 (r=3.5); others borrow nearest
        np.testing.assert_allclose(m.theta_c[[0, 1, 2, 3]], -0.5, atol=1e-12)
        np.testing.assert_allclose(m.theta_c[[5, 6, 7]], 0.2, atol=1e-12)
        assert m.theta_c[4] in (pytest.approx(-0.5), pytest.approx(0.2))  # tie bin
        assert m.usable.sum() == 2

    def test_no_usable_bins(self):
        cf = accumulate_cf(np.array([0.1]), np.array([1.0]), default_grid_1d(1.0), k_max=1)
        with pytest.raises(ValueError):
            build_rotation_map(cf, min_count=50)

    def test_joint_map_tightens_residual(self):
        # conditioning the rotation on both amplitudes must not be worse
        # than conditioning on one at an operating point with real coupling
        link, noise, p = ref_point(dist_link(n_steps=100))
        n = 150_000
        sym = pilot_block(n, p)
        cal = draw_batch(sym, link, noise, RngStream(21, domain=0))
        ev = draw_batch(sym, link, noise, RngStream(21, domain=1))
        rho = snr_from_power(p, link, noise).rho_x
        th_cal = residual_phase(cal.received[:, 0], sym[:, 0])
        cf1 = accumulate_cf(th_cal, cal.r[:, 0], default_grid_1d(rho), k_max=2)
        cf2 = accumulate_cf(th_cal, cal.r, default_grid_2d(rho, rho), k_max=2)
        m1 = build_rotation_map(cf1)
        m2 = build_rotation_map(cf2)
        th_ev = residual_phase(ev.received[:, 0], sym[:, 0])
        v1 = circular_variance(wrap_phase(th_ev + m1.lookup(ev.r[:, 0])))
        v2 = circular_variance(wrap_phase(th_ev + m2.lookup(ev.r)))
        assert v2 < v1

    def test_residual_centering_same_draws(self):
        # applying the map to its own calibration draws recenters each bin
        # exactly (the compensated first moment is real-positive)
        link, noise, p = ref_point(dist_link(n_steps=100))
        n = 100_000
        sym = pilot_block(n, p)
        d = draw_batch(sym, link, noise, 23)
        rho = p / noise.total_var
        theta = residual_phase(d.received[:, 0], sym[:, 0])
        grid = default_grid_1d(rho)
        cf = accumulate_cf(theta, d.r[:, 0], grid, k_max=2)
        m = build_rotation_map(cf)
        comp = wrap_phase(theta + m.lookup(d.r[:, 0]))
        cf_after = accumulate_cf(comp, d.r[:, 0], grid, k_max=2)
        ok = cf_after.usable(50)
        resid = np.abs(np.angle(cf_after.sums[0, ok]))
        assert resid.max() < 1e-10


class TestPdfSeries:
    def test_zero_coefficients_uniform(self):
        pdf = phase_pdf_series(
            accumulate_cf(
                np.random.default_rng(1).uniform(-np.pi, np.pi, 100_000),
                np.full(100_000, 1.0),
                AmplitudeGrid(np.array([0.0, 2.0])),
                k_max=6,
            )
        )
        theta = np.linspace(-np.pi, np.pi, 100)
        np.testing.assert_allclose(pdf(theta), 1 / (2 * np.pi), rtol=0.02)

    def test_integrates_to_one(self):
        theta = wrapped_gaussian(0.0, 0.5, 100_000, seed=2)
        r = np.abs(np.random.default_rng(3).normal(3, 0.5, 100_000))
        cf = accumulate_cf(theta, r, default_grid_1d(4.0), k_max=8)
        pdf = phase_pdf_series(cf)
        grid = np.linspace(-np.pi, np.pi, 20001)
        assert np.trapezoid(pdf(grid), grid) == pytest.approx(1.0, abs=1e-6)

    def test_matches_histogram_awgn(self):
        link, noise, p = ref_point(dist_link(n_steps=50, gamma=0.0))
        n = 400_000
        sym = pilot_block(n, p)
        d = draw_batch(sym, link, noise, 19)
        rho = p / noise.total_var
        theta = residual_phase(d.received[:, 0], sym[:, 0])
        # a peak of width ~1/sqrt(2*rho) rad needs k beyond ~sqrt(2*rho)*3
        cf = accumulate_cf(theta, d.r[:, 0], default_grid_1d(rho), k_max=16)
        pdf = phase_pdf_series(cf)
        hist, edges = np.histogram(theta, bins=128, range=(-np.pi, np.pi), density=True)
        mids = 0.5 * (edges[:-1] + edges[1:])
        l1 = np.trapezoid(np.abs(pdf(mids) - hist), mids)
        assert l1 < 0.02

    def test_coefficients_bounded_and_decaying(self):
        link, noise, p = ref_point(dist_link(n_steps=100))
        n = 200_000
        sym = pilot_block(n, p)
        d = draw_batch(sym, link, noise, 29)
        rho = p / noise.total_var
        theta = residual_phase(d.received[:, 0], sym[:, 0])
        cf = accumulate_cf(theta, d.r[:, 0], default_grid_1d(rho), k_max=4)
        c = abs_coefficients(cf)
        assert (c >= 0).all() and (c <= 1).all()
        assert (np.diff(c) <= 1e-12).all()

    def test_debias_shrinks_noise_floor(self):
        # pure noise: raw modulus floors at ~0.89*sqrt(B/n) per order;
        # subtracting the per-bin n_b leaves ~0.33*sqrt(B/n) (the positive
        # part of a centered exponential), a ~2.7x reduction
        rng = np.random.default_rng(7)
        n = 100_000
        theta = rng.uniform(-np.pi, np.pi, n)
        r = rng.uniform(0, 5.9, n)
        cf = accumulate_cf(theta, r, default_grid_1d(0.0), k_max=8)
        raw = abs_coefficients(cf, debias=False)
        cooked = abs_coefficients(cf, debias=True)
        assert raw.min() > 0.01  # the floor is material
        assert cooked.max() < 0.5 * raw.min()
        assert cooked.max() < 0.55 * 0.886 * np.sqrt(197 / n)

    def test_debias_preserves_real_coefficients(self):
        # a wrapped-Gaussian sample has c_k = exp(-k^2 s^2 / 2); the floor
        # correction must not eat significant orders
        theta = wrapped_gaussian(0.0, 0.4, 400_000, seed=8)
        r = np.abs(np.random.default_rng(9).normal(3, 0.7, 400_000))
        cf = accumulate_cf(theta, r, default_grid_1d(9.0, n_bins=50), k_max=8)
        cooked = abs_coefficients(cf, debias=True)
        k = np.arange(1, 9)
        want = np.exp(-0.5 * (k * 0.4) ** 2)
        np.testing.assert_allclose(cooked, want, atol=0.02)


class TestDensity4D:
    def test_normalization_and_lookup(self):
        rng = np.random.default_rng(11)
        n = 50_000
        theta = rng.uniform(-np.pi, np.pi, (n, 2))
        r = rng.uniform(0, 5, (n, 2))
        d = joint_density_grid(theta, r, n_phase=16, rho=(4.0, 4.0))
        assert d.n == n
        assert d.counts.sum() == n
        assert d.density().sum() == pytest.approx(1.0, rel=1e-12)
        ai = d.amp_grid.index(r[:5])
        counts = d.lookup_counts(theta[:5, 0], theta[:5, 1], ai)
        assert (counts >= 1).all()  # each draw's own cell contains it

    def test_amplitude_marginal_is_ricean(self):
        link, noise, p = ref_point(dist_link(n_steps=100))
        n = 200_000
        sym = pilot_block(n, p)
        d = draw_batch(sym, link, noise, 41)
        theta = np.stack(
            [residual_phase(d.received[:, k], sym[:, k]) for k in (0, 1)], axis=1
        )
        rho = p / noise.total_var
        dens = joint_density_grid(theta, d.r, n_phase=8, rho=(rho, rho))
        marg = dens.density().sum(axis=(0, 1, 3))  # amplitude_x marginal
        edges = dens.amp_grid.edges_x
        rice = scipy.stats.rice(b=np.sqrt(2 * rho), scale=np.sqrt(0.5))
        expect = np.diff(rice.cdf(edges))
        sel = expect > 1e-4
        np.testing.assert_allclose(marg[sel], expect[sel], atol=3e-3)

    def test_awgn_phase_symmetry(self):
        link, noise, p = ref_point(dist_link(n_steps=50, gamma=0.0))
        n = 300_000
        sym = pilot_block(n, p)
        d = draw_batch(sym, link, noise, 43)
        theta = np.stack(
            [residual_phase(d.received[:, k], sym[:, k]) for k in (0, 1)], axis=1
        )
        rho = p / noise.total_var
        dens = joint_density_grid(theta, d.r, n_phase=16, rho=(rho, rho))
        px = dens.density().sum(axis=(1, 2, 3))  # phase_x marginal
        np.testing.assert_allclose(px, px[::-1], atol=4 / np.sqrt(n))
