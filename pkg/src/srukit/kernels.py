"""Fused lane kernels for the SRU recurrence.

Layout conventions shared by both kernels:

* ``u``: ``(L, B, D, K, d)`` projection output. Block 0 is the candidate
  ``W x``, block 1 the forget pre-activation, block 2 the reset
  pre-activation and, when ``K == 4``, block 3 the projected skip input.
* ``x``: ``(L, B, d)`` raw input, read as the skip input when ``K == 3``.
* per-direction vectors ``vf, vr, bf, br``: ``(D, d)``; ``alpha``: ``(D,)``.
* states ``c`` (and recomputed gates ``f, r``): ``(D, L, B, d)`` indexed by
  original time position. Only ``c`` and ``h`` are stored by the forward
  pass; the backward pass recomputes the gates, halving forward writes.
* ``h``: ``(L, B, D * d)``, directions concatenated on the feature axis.

Direction 1 walks time backwards. Time is the outer loop; within a step the
lanes are split into fixed blocks of ``LANE_BLOCK`` that run in parallel.
Each lane's arithmetic is the same whichever thread runs its block, so
results do not depend on the worker count.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

from srukit._parallel import numba_threads

LANE_BLOCK = 128

# Branch-free exp: Cody-Waite reduction by ln 2, degree-13 Taylor polynomial
# on |r| <= ln2/2 (truncation error < 1e-17), and 2^k assembled in the
# exponent bits. Written over lane buffers so LLVM emits SIMD code; the
# libm exp call would keep the loops scalar.
_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_ROUND_SHIFT = 6755399441055744.0  # 1.5 * 2**52: adding it rounds to an integer
_SHIFT_BITS = 0x4338000000000000    # bit pattern of _ROUND_SHIFT
_EXP_CLAMP = 708.0

_KW = dict(cache=True, error_model="numpy", fastmath={"contract"})


@njit(inline="always", **_KW)
def _exp_poly(r):
    p = 1.0 / 6227020800.0
    p = p * r + 1.0 / 479001600.0
    p = p * r + 1.0 / 39916800.0
    p = p * r + 1.0 / 3628800.0
    p = p * r + 1.0 / 362880.0
    p = p * r + 1.0 / 40320.0
    p = p * r + 1.0 / 5040.0
    p = p * r + 1.0 / 720.0
    p = p * r + 1.0 / 120.0
    p = p * r + 1.0 / 24.0
    p = p * r + 1.0 / 6.0
    p = p * r + 0.5
    p = p * r + 1.0
    return p * r + 1.0


@njit(inline="always", **_KW)
def _sigmoid_lanes(z, n, scale, out):
    """``out[:n] = 1 / (1 + exp(-z[:n]))``; ``scale`` is scratch space."""
    bits = scale.view(np.int64)
    for j in range(n):
        a = min(max(-z[j], -_EXP_CLAMP), _EXP_CLAMP)
        s = a * _LOG2E + _ROUND_SHIFT
        scale[j] = s
        k = s - _ROUND_SHIFT
        p = _exp_poly((a - k * _LN2_HI) - k * _LN2_LO)
        bits[j] = (bits[j] - _SHIFT_BITS + 1023) << 52
        out[j] = 1.0 / (1.0 + p * scale[j])


@njit(**_KW)
def sigmoid_lanes(z):
    """Vectorized logistic over a 1-d array (same arithmetic as the kernel)."""
    n = z.shape[0]
    out = np.empty(n, dtype=np.float64)
    scale = np.empty(n, dtype=np.float64)
    _sigmoid_lanes(z, n, scale, out)
    return out


@njit(inline="always", **_KW)
def _lanes(blk, B, nchunk, d):
    dr = blk // (B * nchunk)
    rem = blk % (B * nchunk)
    b = rem // nchunk
    j0 = (rem % nchunk) * LANE_BLOCK
    return dr, b, j0, min(j0 + LANE_BLOCK, d) - j0


@njit(inline="always", **_KW)
def _gates_block(u, bf, br, vf, vr, cp, cs, use_state, uo, vo, n, d, z, sc, f, r):
    """Recompute forget and reset gates of one lane block into ``f`` and ``r``."""
    uf, ur = u[uo + d : uo + d + n], u[uo + 2 * d : uo + 2 * d + n]
    bfs, brs = bf[vo : vo + n], br[vo : vo + n]
    if use_state:
        vfs, vrs = vf[vo : vo + n], vr[vo : vo + n]
        for k in range(n):
            z[k] = uf[k] + bfs[k] + vfs[k] * cp[k]
        _sigmoid_lanes(z, n, sc, f)
        for k in range(n):
            z[k] = ur[k] + brs[k] + vrs[k] * cs[k]
    else:
        for k in range(n):
            z[k] = uf[k] + bfs[k]
        _sigmoid_lanes(z, n, sc, f)
        for k in range(n):
            z[k] = ur[k] + brs[k]
    _sigmoid_lanes(z, n, sc, r)


@njit(**_KW)
def _forward_block(u, x, vf, vr, bf, br, a, cp, use_state, use_highway, K,
                   uo, xo, vo, so, ho, n, d, z, g, sc, h, c):
    u0, uf, ur = u[uo : uo + n], u[uo + d : uo + d + n], u[uo + 2 * d : uo + 2 * d + n]
    cs, hs = c[so : so + n], h[ho : ho + n]
    bfs, brs = bf[vo : vo + n], br[vo : vo + n]
    if use_state:
        vfs = vf[vo : vo + n]
        for k in range(n):
            z[k] = uf[k] + bfs[k] + vfs[k] * cp[k]
    else:
        for k in range(n):
            z[k] = uf[k] + bfs[k]
    _sigmoid_lanes(z, n, sc, g)
    for k in range(n):
        cs[k] = g[k] * cp[k] + (1.0 - g[k]) * u0[k]
    if use_state:
        vrs = vr[vo : vo + n]
        for k in range(n):
            z[k] = ur[k] + brs[k] + vrs[k] * cs[k]
    else:
        for k in range(n):
            z[k] = ur[k] + brs[k]
    _sigmoid_lanes(z, n, sc, g)
    if not use_highway:
        for k in range(n):
            hs[k] = cs[k]
    else:
        if K == 4:
            sk = u[uo + 3 * d : uo + 3 * d + n]
        else:
            sk = x[xo : xo + n]
        for k in range(n):
            hs[k] = g[k] * cs[k] + (1.0 - g[k]) * sk[k] * a


def _forward_body(u, x, vf, vr, bf, br, alpha, c0, use_state, use_highway, h, c, dims):
    # Arrays arrive flat and C-ordered; the block helper slices them so its
    # lane loops see unit strides. Time is the outer loop so each step
    # streams one contiguous slab of ``u``; a step's lane blocks run in
    # parallel.
    L, B, D, K, d = dims[0], dims[1], dims[2], dims[3], dims[4]
    nchunk = (d + LANE_BLOCK - 1) // LANE_BLOCK
    nblk = D * B * nchunk
    scratch = np.empty((nblk, 3, LANE_BLOCK), dtype=np.float64)
    for step in range(L):
        for blk in prange(nblk):
            dr, b, j0, n = _lanes(blk, B, nchunk, d)
            t = step if dr == 0 else L - 1 - step
            if step == 0:
                po = (dr * B + b) * d + j0
                cp = c0[po : po + n]
            else:
                tp = t - 1 if dr == 0 else t + 1
                po = ((dr * L + tp) * B + b) * d + j0
                cp = c[po : po + n]
            vo = dr * d + j0
            _forward_block(u, x, vf, vr, bf, br, alpha[dr], cp, use_state, use_highway, K,
                           ((t * B + b) * D + dr) * K * d + j0, (t * B + b) * d + j0, vo,
                           ((dr * L + t) * B + b) * d + j0, (t * B + b) * D * d + vo, n, d,
                           scratch[blk, 0], scratch[blk, 1], scratch[blk, 2], h, c)


@njit(**_KW)
def _backward_block(u, x, vf, vr, bf, br, a, cp, c, use_state, use_highway, K, gh,
                    gu, gskip, avf, avr, abf, abr, gc, uo, xo, vo, so, ho, n, d, z, sc, fs, rs):
    cs, gs = c[so : so + n], gh[ho : ho + n]
    _gates_block(u, bf, br, vf, vr, cp, cs, use_state, uo, vo, n, d, z, sc, fs, rs)
    u0 = u[uo : uo + n]
    g0, gf, gr = gu[uo : uo + n], gu[uo + d : uo + d + n], gu[uo + 2 * d : uo + 2 * d + n]
    if use_highway:
        if K == 4:
            sk = u[uo + 3 * d : uo + 3 * d + n]
            gsk = gu[uo + 3 * d : uo + 3 * d + n]
        else:
            sk = x[xo : xo + n]
            gsk = gskip[so : so + n]
        vrs = vr[vo : vo + n]
        for k in range(n):
            rt = rs[k]
            dzr = gs[k] * (cs[k] - a * sk[k]) * rt * (1.0 - rt)
            gr[k] = dzr
            gsk[k] = gs[k] * (1.0 - rt) * a
            abr[k] += dzr
            if use_state:
                gc[k] += gs[k] * rt + dzr * vrs[k]
                avr[k] += dzr * cs[k]
            else:
                gc[k] += gs[k] * rt
    else:
        for k in range(n):
            gr[k] = 0.0
            gc[k] += gs[k]
        if K == 4:
            gsk = gu[uo + 3 * d : uo + 3 * d + n]
            for k in range(n):
                gsk[k] = 0.0
    vfs = vf[vo : vo + n]
    for k in range(n):
        ft = fs[k]
        g0[k] = gc[k] * (1.0 - ft)
        dzf = gc[k] * (cp[k] - u0[k]) * ft * (1.0 - ft)
        gf[k] = dzf
        abf[k] += dzf
        if use_state:
            avf[k] += dzf * cp[k]
            gc[k] = gc[k] * ft + dzf * vfs[k]
        else:
            gc[k] = gc[k] * ft


def _backward_body(u, x, vf, vr, bf, br, alpha, c0, c, use_state, use_highway, gh,
              gu, gskip, gvf, gvr, gbf, gbr, carry, dims):
    # ``carry`` enters holding dL/dc_last and leaves holding dL/dc0; the
    # vector-gradient partials accumulate per lane in reverse time order.
    # Gates are recomputed from the stored states instead of being taped.
    L, B, D, K, d = dims[0], dims[1], dims[2], dims[3], dims[4]
    nchunk = (d + LANE_BLOCK - 1) // LANE_BLOCK
    nblk = D * B * nchunk
    scratch = np.empty((nblk, 4, LANE_BLOCK), dtype=np.float64)
    for step in range(L - 1, -1, -1):
        for blk in prange(nblk):
            dr, b, j0, n = _lanes(blk, B, nchunk, d)
            t = step if dr == 0 else L - 1 - step
            lo = (dr * B + b) * d + j0
            if step == 0:
                cp = c0[lo : lo + n]
            else:
                tp = t - 1 if dr == 0 else t + 1
                po = ((dr * L + tp) * B + b) * d + j0
                cp = c[po : po + n]
            vo = dr * d + j0
            _backward_block(u, x, vf, vr, bf, br, alpha[dr], cp, c, use_state, use_highway, K, gh,
                            gu, gskip, gvf[lo : lo + n], gvr[lo : lo + n], gbf[lo : lo + n],
                            gbr[lo : lo + n], carry[lo : lo + n],
                            ((t * B + b) * D + dr) * K * d + j0, (t * B + b) * d + j0, vo,
                            ((dr * L + t) * B + b) * d + j0, (t * B + b) * D * d + vo, n, d,
                            scratch[blk, 0], scratch[blk, 1], scratch[blk, 2], scratch[blk, 3])


def _gates_body(u, vf, vr, bf, br, c0, c, use_state, f, r, dims):
    L, B, D, K, d = dims[0], dims[1], dims[2], dims[3], dims[4]
    nchunk = (d + LANE_BLOCK - 1) // LANE_BLOCK
    nblk = D * B * nchunk
    scratch = np.empty((nblk, 2, LANE_BLOCK), dtype=np.float64)
    for t in range(L):
        for blk in prange(nblk):
            dr, b, j0, n = _lanes(blk, B, nchunk, d)
            lo = (dr * B + b) * d + j0
            so = ((dr * L + t) * B + b) * d + j0
            first = t == 0 if dr == 0 else t == L - 1
            if first:
                cp = c0[lo : lo + n]
            else:
                tp = t - 1 if dr == 0 else t + 1
                po = ((dr * L + tp) * B + b) * d + j0
                cp = c[po : po + n]
            _gates_block(u, bf, br, vf, vr, cp, c[so : so + n], use_state,
                         ((t * B + b) * D + dr) * K * d + j0, dr * d + j0, n, d,
                         scratch[blk, 0], scratch[blk, 1], f[so : so + n], r[so : so + n])


_forward = njit(parallel=True, **_KW)(_forward_body)
_backward = njit(parallel=True, **_KW)(_backward_body)
_gates = njit(parallel=True, **_KW)(_gates_body)


def _launch(kernel):
    numba.set_num_threads(numba_threads())
    return kernel


def _flat(a):
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1)


def _dims(u):
    return np.array(u.shape, dtype=np.int64)


def fused_forward(u, x, vf, vr, bf, br, alpha, c0, use_state, use_highway):
    """Run the fused forward pass; returns ``(h, c)``."""
    L, B, D, K, d = u.shape
    h = np.empty((L, B, D * d))
    c = np.empty((D, L, B, d))
    _launch(_forward)(
        _flat(u), _flat(x), _flat(vf), _flat(vr), _flat(bf), _flat(br), _flat(alpha), _flat(c0),
        bool(use_state), bool(use_highway), h.reshape(-1), c.reshape(-1), _dims(u),
    )
    return h, c


def recompute_gates(u, vf, vr, bf, br, c0, c, use_state):
    """Forget and reset gates ``(f, r)``, each ``(D, L, B, d)``, from stored states."""
    f = np.empty(c.shape)
    r = np.empty(c.shape)
    _launch(_gates)(
        _flat(u), _flat(vf), _flat(vr), _flat(bf), _flat(br), _flat(c0), _flat(c),
        bool(use_state), f.reshape(-1), r.reshape(-1), _dims(u),
    )
    return f, r


def fused_backward(u, x, vf, vr, bf, br, alpha, c0, c, use_state, use_highway, gh, gcl):
    """Reverse pass of :func:`fused_forward`.

    Returns ``(gu, gskip, gvf, gvr, gbf, gbr, gc0)``; the vector gradients are
    per-sample partials of shape ``(D, B, d)`` so the caller reduces them in
    a fixed order. ``gskip`` holds the skip-input gradient when ``K == 3``.
    """
    L, B, D, K, d = u.shape
    gu = np.empty((L, B, D, K, d))
    gskip = np.zeros((D, L, B, d) if K == 3 else (D, 1, 1, 1))
    gvf, gvr, gbf, gbr = (np.zeros((D, B, d)) for _ in range(4))
    gc0 = np.array(gcl, dtype=np.float64, order="C").reshape(D, B, d)
    _launch(_backward)(
        _flat(u), _flat(x), _flat(vf), _flat(vr), _flat(bf), _flat(br), _flat(alpha), _flat(c0),
        _flat(c), bool(use_state), bool(use_highway), _flat(gh), gu.reshape(-1),
        gskip.reshape(-1), gvf.reshape(-1), gvr.reshape(-1), gbf.reshape(-1), gbr.reshape(-1),
        gc0.reshape(-1), _dims(u),
    )
    return gu, gskip, gvf, gvr, gbf, gbr, gc0
