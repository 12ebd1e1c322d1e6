"""Numba hot loops for the Monte-Carlo channel.

The per-draw accumulation over noise partial sums is the single dominant
cost of calibration sweeps; a fused loop avoids materializing the cumulative
noise paths (B x N complex intermediates) that a vectorized formulation
would allocate.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def nlpn_accumulate(incr, sig, sx, sy):
    """Accumulate per-draw nonlinear phase and terminal linear field.

    Parameters
    ----------
    incr : float64[B, N, 4]
        Standard-normal increments per draw and segment, interleaved as
        (x_re, x_im, y_re, y_im).
    sig : float
        Per-quadrature noise scale; segment noise is sig*(incr_re + j*incr_im).
    sx, sy : complex128[B]
        Transmitted field per draw and polarization.

    Returns
    -------
    phi_raw : float64[B]
        sum_i |S_x + W_x(i)|^2 + |S_y + W_y(i)|^2 over segments i, where W
        is the running noise sum.  Multiply by gamma*L_eff to get the
        accumulated nonlinear phase.
    ehat : complex128[B, 2]
        Terminal linear field S + W(N) per polarization.
    """
    b_n, n_seg = incr.shape[0], incr.shape[1]
    phi_raw = np.empty(b_n)
    ehat = np.empty((b_n, 2), dtype=np.complex128)
    for b in range(b_n):
        sxr = sx[b].real
        sxi = sx[b].imag
        syr = sy[b].real
        syi = sy[b].imag
        wxr = 0.0
        wxi = 0.0
        wyr = 0.0
        wyi = 0.0
        acc = 0.0
        for i in range(n_seg):
            wxr += incr[b, i, 0]
            wxi += incr[b, i, 1]
            wyr += incr[b, i, 2]
            wyi += incr[b, i, 3]
            axr = sxr + sig * wxr
            axi = sxi + sig * wxi
            ayr = syr + sig * wyr
            ayi = syi + sig * wyi
            acc += axr * axr + axi * axi + ayr * ayr + ayi * ayi
        phi_raw[b] = acc
        ehat[b, 0] = complex(sxr + sig * wxr, sxi + sig * wxi)
        ehat[b, 1] = complex(syr + sig * wyr, syi + sig * wyi)
    return phi_raw, ehat
