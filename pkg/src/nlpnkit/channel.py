"""Monte-Carlo sampling of the memoryless nonlinear-phase-noise channel.

The channel adds amplifier noise segment by segment and applies the
accumulated intensity-driven phase rotation as a single terminal factor:

    E = (S + sum_i n_i) * exp(-j*phi_nl),
    phi_nl = gamma * L_eff * sum_i (|S_x + W_x(i)|^2 + |S_y + W_y(i)|^2),

with W(i) the running noise sum.  Both polarizations rotate by the same
phi_nl, so the distortion is purely a common phase: |E| = |S + sum n_i|.
Lumped links inject one noise sample per span; distributed links use the
same recursion with the per-step variance of the discretized noise process
(the infinite-span limit).

Draws are reproducible and batch-split invariant: draw index i always
consumes the same RNG substream regardless of how a batch is chunked or
parallelized.  This is achieved by seeding a fresh generator per
fixed-size chunk of the (virtual) global draw sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import nlpn_accumulate
from .model import LinkConfig, NoiseSpec, effective_length

__all__ = [
    "CHUNK",
    "RngStream",
    "ChannelDraw",
    "draw_batch",
    "iter_draws",
    "propagate_lumped",
    "propagate_distributed",
    "draw_symbol_indices",
]

CHUNK = 2048
"""Draws per RNG chunk.  Fixed: changing it changes every sampled value."""

_BITGEN = np.random.SFC64
# Independence across chunks comes from SeedSequence entropy spawning, not
# from the generator's own stream features, so the fastest modern
# bit generator is used.  Swapping it changes sampled values.


@dataclass(frozen=True)
class RngStream:
    """Label of a reproducible random stream.

    Draw chunks are seeded as SeedSequence([seed, domain, chunk_index]) so
    distinct domains (calibration, evaluation, data symbols, ...) never
    overlap for the same master seed.
    """

    seed: int
    domain: int = 0

    def generator(self, chunk_index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=[int(self.seed), int(self.domain), int(chunk_index)])
        return np.random.Generator(_BITGEN(ss))


def _as_stream(rng: "RngStream | int") -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(seed=int(rng))


@dataclass
class ChannelDraw:
    """A batch of channel outputs (arrays over draws).

    Attributes
    ----------
    received : ndarray of complex, shape (n, 2)
        Rotated field E per polarization.
    linear_part : ndarray of complex, shape (n, 2)
        Field before the phase rotation, S + sum of noise.
    phi_nl : ndarray of float, shape (n,)
        Accumulated nonlinear phase, rad.
    r : ndarray of float, shape (n, 2)
        Received amplitude normalized by the root total noise power.
    """

    received: np.ndarray
    linear_part: np.ndarray
    phi_nl: np.ndarray
    r: np.ndarray

    def __len__(self) -> int:
        return self.received.shape[0]


def _concat(parts: list[ChannelDraw]) -> ChannelDraw:
    if len(parts) == 1:
        return parts[0]
    return ChannelDraw(
        received=np.concatenate([p.received for p in parts]),
        linear_part=np.concatenate([p.linear_part for p in parts]),
        phi_nl=np.concatenate([p.phi_nl for p in parts]),
        r=np.concatenate([p.r for p in parts]),
    )


def _finalize(ehat: np.ndarray, phi: np.ndarray, noise: NoiseSpec) -> ChannelDraw:
    received = ehat * np.exp(-1j * phi)[:, None]
    # noiseless configs have no noise scale; fall back to raw amplitude
    denom = np.sqrt(noise.total_var) if noise.total_var > 0 else 1.0
    r = np.abs(ehat) / denom
    return ChannelDraw(received=received, linear_part=ehat, phi_nl=phi, r=r)


def _chunk_draw(symbols: np.ndarray, link: LinkConfig, noise: NoiseSpec,
                rng: RngStream, chunk_index: int, lo: int, hi: int) -> ChannelDraw:
    """Draw rows [lo, hi) of the CHUNK-sized chunk `chunk_index`."""
    gen = rng.generator(chunk_index)
    if link.gamma == 0.0:
        # no intensity-phase coupling: one terminal Gaussian per polarization
        g = gen.standard_normal((CHUNK, 4))[lo:hi]
        w = (g[:, 0::2] + 1j * g[:, 1::2]) * np.sqrt(noise.total_var / 2.0)
        ehat = symbols + w
        phi = np.zeros(hi - lo)
        return _finalize(ehat, phi, noise)
    n_seg = link.n_segments
    sig = np.sqrt(noise.sigma0_sq / 2.0)
    incr = gen.standard_normal((CHUNK, n_seg, 4))[lo:hi]
    sx = np.ascontiguousarray(symbols[:, 0])
    sy = np.ascontiguousarray(symbols[:, 1])
    phi_raw, ehat = nlpn_accumulate(incr, sig, sx, sy)
    phi = (link.gamma * effective_length(link)) * phi_raw
    return _finalize(ehat, phi, noise)


def draw_batch(symbols: np.ndarray, link: LinkConfig, noise: NoiseSpec,
               rng: "RngStream | int", start_index: int = 0) -> ChannelDraw:
    """Propagate a batch of transmitted symbol pairs through the channel.

    Parameters
    ----------
    symbols : ndarray of complex, shape (n, 2)
        Transmitted field per draw, x and y polarizations, sqrt(W) units.
        Draw i occupies global stream position ``start_index + i``.
    link : LinkConfig
    noise : NoiseSpec
    rng : RngStream or int
        Stream label (an int is shorthand for ``RngStream(seed)``).
    start_index : int
        Global index of the first draw; lets a caller generate disjoint
        pieces of one logical batch in any order or in parallel.

    Returns
    -------
    ChannelDraw
        Batch arrays; row i is draw ``start_index + i``.

    Notes
    -----
    Splitting n draws across calls at any boundaries yields the same union
    of draws as one call, because chunk ``k`` of the stream always covers
    global rows [k*CHUNK, (k+1)*CHUNK) with a generator of its own.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    if symbols.ndim != 2 or symbols.shape[1] != 2:
        raise ValueError(f"symbols must have shape (n, 2), got {symbols.shape}")
    if not np.isfinite(symbols).all():
        raise ValueError("symbols must be finite")
    rng = _as_stream(rng)
    n = symbols.shape[0]
    parts = []
    pos = start_index
    while pos < start_index + n:
        k = pos // CHUNK
        lo = pos - k * CHUNK
        hi = min(CHUNK, start_index + n - k * CHUNK)
        rows = symbols[pos - start_index: pos - start_index + (hi - lo)]
        parts.append(_chunk_draw(rows, link, noise, rng, k, lo, hi))
        pos += hi - lo
    if not parts:
        z2 = np.zeros((0, 2), dtype=np.complex128)
        return ChannelDraw(z2, z2.copy(), np.zeros(0), np.zeros((0, 2)))
    return _concat(parts)


def iter_draws(symbols: np.ndarray, link: LinkConfig, noise: NoiseSpec,
               rng: "RngStream | int", start_index: int = 0,
               batch_size: int = 131072):
    """Yield ``(offset, ChannelDraw)`` batches without materializing all draws.

    Equivalent to slicing the result of :func:`draw_batch` but with memory
    bounded by ``batch_size`` draws; offsets are relative to ``symbols``.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    n = symbols.shape[0]
    for off in range(0, n, batch_size):
        m = min(batch_size, n - off)
        yield off, draw_batch(symbols[off:off + m], link, noise, rng,
                              start_index=start_index + off)


def propagate_lumped(symbols: np.ndarray, link: LinkConfig, noise: NoiseSpec,
                     rng: "RngStream | int", start_index: int = 0) -> ChannelDraw:
    """Per-span channel draw; requires ``link.amp_kind == 'lumped'``."""
    if link.amp_kind != "lumped":
        raise ValueError(f"expected a lumped link, got amp_kind={link.amp_kind!r}")
    return draw_batch(symbols, link, noise, rng, start_index)


def propagate_distributed(symbols: np.ndarray, link: LinkConfig, noise: NoiseSpec,
                          rng: "RngStream | int", start_index: int = 0) -> ChannelDraw:
    """Discretized continuous-amplification draw; requires a distributed link."""
    if link.amp_kind != "distributed":
        raise ValueError(f"expected a distributed link, got amp_kind={link.amp_kind!r}")
    return draw_batch(symbols, link, noise, rng, start_index)


def draw_symbol_indices(n: int, m: int, rng: "RngStream | int",
                        start_index: int = 0) -> np.ndarray:
    """Reproducible uniform symbol indices, shape (n, 2), values in [0, m).

    Uses the same chunked-stream scheme as :func:`draw_batch`, so index
    draws are also batch-split invariant.
    """
    rng = _as_stream(rng)
    out = np.empty((n, 2), dtype=np.int64)
    pos = start_index
    filled = 0
    while filled < n:
        k = pos // CHUNK
        lo = pos - k * CHUNK
        hi = min(CHUNK, lo + (n - filled))
        block = rng.generator(k).integers(0, m, size=(CHUNK, 2))
        out[filled:filled + (hi - lo)] = block[lo:hi]
        filled += hi - lo
        pos += hi - lo
    return out
