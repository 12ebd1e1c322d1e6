"""Tests for the Monte-Carlo channel: determinism, moments, closed forms."""

import numpy as np
import pytest
import scipy.stats

from helpers import dist_link, lumped_link, noiseless, pilot_block, ref_point

from nlpnkit._kernels import nlpn_accumulate
from nlpnkit.channel import (
    CHUNK,
    RngStream,
    draw_batch,
    draw_symbol_indices,
    iter_draws,
    propagate_distributed,
    propagate_lumped,
)
from nlpnkit.model import noise_spec


def _assert_draws_equal(a, b, sl=slice(None)):
    np.testing.assert_array_equal(a.received[sl], b.received)
    np.testing.assert_array_equal(a.linear_part[sl], b.linear_part)
    np.testing.assert_array_equal(a.phi_nl[sl], b.phi_nl)
    np.testing.assert_array_equal(a.r[sl], b.r)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        link, noise, p = ref_point(dist_link(n_steps=50))
        sym = pilot_block(3000, p)
        a = draw_batch(sym, link, noise, 42)
        b = draw_batch(sym, link, noise, 42)
        _assert_draws_equal(a, b)

    def test_different_seed_differs(self):
        link, noise, p = ref_point(dist_link(n_steps=50))
        sym = pilot_block(100, p)
        a = draw_batch(sym, link, noise, 1)
        b = draw_batch(sym, link, noise, 2)
        assert not np.array_equal(a.received, b.received)

    def test_domains_are_disjoint_streams(self):
        link, noise, p = ref_point(dist_link(n_steps=50))
        sym = pilot_block(100, p)
        a = draw_batch(sym, link, noise, RngStream(7, domain=0))
        b = draw_batch(sym, link, noise, RngStream(7, domain=1))
        assert not np.array_equal(a.received, b.received)

    def test_batch_split_invariance(self):
        link, noise, p = ref_point(dist_link(n_steps=50))
        n = 2 * CHUNK + 777
        sym = pilot_block(n, p)
        whole = draw_batch(sym, link, noise, 9)
        for cut in (1, CHUNK - 1, CHUNK, CHUNK + 5, n - 3):
            head = draw_batch(sym[:cut], link, noise, 9)
            tail = draw_batch(sym[cut:], link, noise, 9, start_index=cut)
            _assert_draws_equal(whole, head, slice(0, cut))
            _assert_draws_equal(whole, tail, slice(cut, None))

    def test_iter_draws_matches_draw_batch(self):
        link, noise, p = ref_point(dist_link(n_steps=50))
        sym = pilot_block(5000, p)
        whole = draw_batch(sym, link, noise, 5)
        for off, part in iter_draws(sym, link, noise, 5, batch_size=1234):
            _assert_draws_equal(whole, part, slice(off, off + len(part)))

    def test_gamma0_fast_path_split_invariance(self):
        link, noise, p = ref_point(dist_link(n_steps=50, gamma=0.0))
        n = CHUNK + 99
        sym = pilot_block(n, p)
        whole = draw_batch(sym, link, noise, 3)
        head = draw_batch(sym[:70], link, noise, 3)
        tail = draw_batch(sym[70:], link, noise, 3, start_index=70)
        _assert_draws_equal(whole, head, slice(0, 70))
        _assert_draws_equal(whole, tail, slice(70, None))

    def test_symbol_indices_deterministic_and_splittable(self):
        idx = draw_symbol_indices(5000, 4, RngStream(11, domain=2))
        again = draw_symbol_indices(5000, 4, RngStream(11, domain=2))
        np.testing.assert_array_equal(idx, again)
        tail = draw_symbol_indices(3000, 4, RngStream(11, domain=2), start_index=2000)
        np.testing.assert_array_equal(idx[2000:], tail)
        assert idx.min() >= 0 and idx.max() < 4


class TestStructuralInvariants:
    def test_received_is_rotated_linear_part(self):
        link, noise, p = ref_point(dist_link(n_steps=100))
        d = draw_batch(pilot_block(4000, p), link, noise, 13)
        np.testing.assert_allclose(
            d.received, d.linear_part * np.exp(-1j * d.phi_nl)[:, None], rtol=1e-12
        )

    def test_amplitude_preserved(self):
        link, noise, p = ref_point(dist_link(n_steps=100))
        d = draw_batch(pilot_block(4000, p), link, noise, 13)
        np.testing.assert_allclose(np.abs(d.received), np.abs(d.linear_part), rtol=1e-12)

    def test_phi_nonnegative(self):
        link, noise, p = ref_point(dist_link(n_steps=100))
        d = draw_batch(pilot_block(4000, p), link, noise, 13)
        assert (d.phi_nl >= 0).all()

    def test_amp_kind_validation(self):
        link, noise, p = ref_point(dist_link(n_steps=10))
        sym = pilot_block(10, p)
        with pytest.raises(ValueError):
            propagate_lumped(sym, link, noise, 1)
        lk = lumped_link()
        with pytest.raises(ValueError):
            propagate_distributed(sym, lk, noise_spec(lk), 1)

    def test_bad_symbol_shape(self):
        link, noise, p = ref_point(dist_link(n_steps=10))
        with pytest.raises(ValueError):
            draw_batch(np.zeros((5, 3), dtype=complex), link, noise, 1)


class TestClosedForms:
    def test_noiseless_lumped_phase(self):
        # 45 spans of 90 km, 0.5 mW per polarization:
        # phi = gamma * L_eff * N * (Px + Py) = 1.4 * 17.274090... * 45 * 1e-3
        link = lumped_link(n_spans=45, span_km=90.0)
        sym = pilot_block(4, 0.5e-3)
        d = propagate_lumped(sym, link, noiseless(), 1)
        np.testing.assert_allclose(d.phi_nl, 1.088267706687391, rtol=1e-12)
        np.testing.assert_allclose(
            d.received, sym * np.exp(-1j * 1.088267706687391), rtol=1e-12
        )

    def test_noiseless_distributed_phase(self):
        # gamma * L * (Px + Py) = 1.4 * 9000 * 2e-4 = 2.52 exactly
        link = dist_link(n_steps=500)
        d = propagate_distributed(pilot_block(3, 1e-4), link, noiseless(), 1)
        np.testing.assert_allclose(d.phi_nl, 2.52, rtol=1e-12)

    def test_single_step_distributed_equals_whole_length(self):
        # one step: phi = gamma * L * |S + n|^2 with a single noise draw
        link = dist_link(n_steps=1)
        noise = noise_spec(link)
        d = propagate_distributed(pilot_block(2048, 1e-4), link, noise, 21)
        expect = link.gamma * link.length_km * (np.abs(d.linear_part) ** 2).sum(axis=1)
        np.testing.assert_allclose(d.phi_nl, expect, rtol=1e-10)

    def test_gamma0_awgn_moments(self):
        link, noise, p = ref_point(dist_link(gamma=0.0))
        n = 1_000_000
        sym = pilot_block(n, p)
        d = draw_batch(sym, link, noise, 77)
        err = d.received - sym
        var = (np.abs(err) ** 2).mean(axis=0)
        np.testing.assert_allclose(var, noise.total_var, rtol=0.01)
        mean_err = err.mean(axis=0)
        assert (np.abs(mean_err) < 5 * np.sqrt(noise.total_var / n)).all()
        assert (d.phi_nl == 0).all()


class TestDistributions:
    def test_amplitude_is_ricean(self):
        link, noise, p = ref_point()
        rho = p / noise.total_var
        n = 200_000
        d = draw_batch(pilot_block(n, p), link, noise, 31)
        rice = scipy.stats.rice(b=np.sqrt(2 * rho), scale=np.sqrt(0.5))
        for pol in (0, 1):
            stat, pval = scipy.stats.kstest(d.r[:, pol], rice.cdf)
            assert pval > 1e-3, f"pol {pol}: KS p={pval}"
        assert d.r.mean() == pytest.approx(rice.mean(), rel=5e-3)

    def test_step_count_convergence(self):
        # phase spread at the default discretization tracks a finer one
        p = 1e-4
        stats = []
        for n_steps, n in ((500, 100_000), (2000, 100_000)):
            link = dist_link(n_steps=n_steps)
            noise = noise_spec(link)
            d = draw_batch(pilot_block(n, p), link, noise, 55)
            stats.append(d.phi_nl.var())
        assert stats[0] == pytest.approx(stats[1], rel=0.02)

    @pytest.mark.slow
    def test_step_count_convergence_full(self):
        p = 1e-4
        stats = []
        for n_steps in (500, 2000):
            link = dist_link(n_steps=n_steps)
            noise = noise_spec(link)
            d = draw_batch(pilot_block(1_000_000, p), link, noise, 55)
            stats.append(d.phi_nl.var())
        assert stats[0] == pytest.approx(stats[1], rel=0.02)


class TestRotationalInvariance:
    def test_exact_under_rotated_noise(self):
        # rotating signal and noise increments together rotates the output
        # and leaves the nonlinear phase untouched
        rng = np.random.default_rng(3)
        b_n, n_seg = 256, 64
        incr = rng.standard_normal((b_n, n_seg, 4))
        sig = 1e-3
        sx = np.full(b_n, 0.01 + 0.005j)
        sy = np.full(b_n, -0.002 + 0.012j)
        phi1, ehat1 = nlpn_accumulate(incr, sig, sx, sy)

        a, b = 1.1, -2.3
        rot = np.empty_like(incr)
        rot[..., 0] = incr[..., 0] * np.cos(a) - incr[..., 1] * np.sin(a)
        rot[..., 1] = incr[..., 0] * np.sin(a) + incr[..., 1] * np.cos(a)
        rot[..., 2] = incr[..., 2] * np.cos(b) - incr[..., 3] * np.sin(b)
        rot[..., 3] = incr[..., 2] * np.sin(b) + incr[..., 3] * np.cos(b)
        phi2, ehat2 = nlpn_accumulate(rot, sig, sx * np.exp(1j * a), sy * np.exp(1j * b))

        np.testing.assert_allclose(phi2, phi1, rtol=1e-10)
        np.testing.assert_allclose(ehat2[:, 0], ehat1[:, 0] * np.exp(1j * a), rtol=1e-10)
        np.testing.assert_allclose(ehat2[:, 1], ehat1[:, 1] * np.exp(1j * b), rtol=1e-10)

    def test_distributional_residual_phase(self):
        # theta_x - transmitted phase has the same law for any transmitted phase
        link, noise, p = ref_point(dist_link(n_steps=100))
        n = 50_000
        base = pilot_block(n, p)
        d0 = draw_batch(base, link, noise, 101)
        a = 2 * np.pi / 3
        d1 = draw_batch(base * np.exp(1j * a), link, noise, 102)
        res0 = np.angle(d0.received[:, 0] * np.conj(base[:, 0]))
        res1 = np.angle(d1.received[:, 0] * np.conj(base[:, 0] * np.exp(1j * a)))
        stat, pval = scipy.stats.ks_2samp(res0, res1)
        assert pval > 1e-3
