"""Compiled reduction kernels with a fixed floating-point evaluation order.

Every kernel accumulates in the operand dtype and rounds once per scalar
operation.  ``block <= 0`` selects the canonical sequential fold; a positive
``block`` splits the reduction into consecutive blocks whose partial sums are
then combined left to right.  ``preload`` seeds block 0 with the bias instead
of adding it after the reduction.  ``fused`` contracts each multiply-add into
a single rounding (fp32 only, evaluated exactly in fp64 then rounded).

numba is used without ``fastmath`` so LLVM may neither reassociate nor
contract; the loops below *are* the evaluation order.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _fma32(acc, a, b):
    return np.float32(np.float64(a) * np.float64(b) + np.float64(acc))


@njit(cache=True)
def _madd(acc, a, b, fused):
    if fused:
        return _fma32(acc, a, b)
    return acc + a * b


@njit(cache=True)
def reduce_row(x, w, bias, zero, block, preload, fused):
    m = x.shape[0]
    blk = m if block <= 0 else block
    total = zero
    part = zero
    first = True
    cnt = 0
    for i in range(m):
        if cnt == 0:
            part = bias if (first and preload) else zero
        part = _madd(part, x[i], w[i], fused)
        cnt += 1
        if cnt == blk or i == m - 1:
            if first:
                total = part
            else:
                total = total + part
            first = False
            cnt = 0
    if preload:
        if m == 0:
            total = bias
        return total
    return total + bias


@njit(cache=True)
def dot(a, b, zero, block):
    return reduce_row(a, b, zero, zero, block, False, False) if a.shape[0] > 0 else zero


@njit(cache=True)
def dense_forward(x, w, b, block, preload, fused):
    # one accumulator chain per output; chains are interleaved for speed but
    # each still folds its inputs in ascending order
    n, m = x.shape
    out_dim = w.shape[0]
    out = np.empty((n, out_dim), dtype=x.dtype)
    zero = np.zeros(1, dtype=x.dtype)[0]
    blk = m if block <= 0 else block
    part = np.empty(out_dim, dtype=x.dtype)
    total = np.empty(out_dim, dtype=x.dtype)
    wt = np.ascontiguousarray(w.T)
    for s in range(n):
        first = True
        cnt = 0
        for i in range(m):
            xv = x[s, i]
            if cnt == 0:
                for o in range(out_dim):
                    part[o] = b[o] if (first and preload) else zero
            for o in range(out_dim):
                part[o] = _madd(part[o], xv, wt[i, o], fused)
            cnt += 1
            if cnt == blk or i == m - 1:
                for o in range(out_dim):
                    total[o] = part[o] if first else total[o] + part[o]
                first = False
                cnt = 0
        for o in range(out_dim):
            if m == 0:
                out[s, o] = b[o]
            elif preload:
                out[s, o] = total[o]
            else:
                out[s, o] = total[o] + b[o]
    return out


@njit(cache=True)
def conv2d_forward(x, k, b, stride, pad, block, preload, fused):
    n, C, H, W = x.shape
    F, _, KH, KW = k.shape
    OH = (H + 2 * pad - KH) // stride + 1
    OW = (W + 2 * pad - KW) // stride + 1
    out = np.empty((n, F, OH, OW), dtype=x.dtype)
    zero = np.zeros(1, dtype=x.dtype)[0]
    m = C * KH * KW
    blk = m if block <= 0 else block
    # kt[idx, f] with idx enumerating (channel, kernel-row, kernel-col)
    kt = np.ascontiguousarray(k.reshape(F, m).T)
    part = np.empty(F, dtype=x.dtype)
    total = np.empty(F, dtype=x.dtype)
    for s in range(n):
        for oh in range(OH):
            for ow in range(OW):
                first = True
                cnt = 0
                idx = 0
                for c in range(C):
                    for r in range(KH):
                        ih = oh * stride + r - pad
                        for q in range(KW):
                            iw = ow * stride + q - pad
                            if ih >= 0 and ih < H and iw >= 0 and iw < W:
                                v = x[s, c, ih, iw]
                            else:
                                v = zero
                            if cnt == 0:
                                for f in range(F):
                                    part[f] = b[f] if (first and preload) else zero
                            for f in range(F):
                                part[f] = _madd(part[f], v, kt[idx, f], fused)
                            cnt += 1
                            if cnt == blk or idx == m - 1:
                                for f in range(F):
                                    total[f] = part[f] if first else total[f] + part[f]
                                first = False
                                cnt = 0
                            idx += 1
                for f in range(F):
                    out[s, f, oh, ow] = total[f] if preload else total[f] + b[f]
    return out


@njit(cache=True)
def dense_backward(x, w, g):
    n, fan_in = x.shape
    out_dim = w.shape[0]
    # gx[s, i] = sum over o ascending; gw[o, i] = sum over s ascending; gb[o] likewise
    gx = np.zeros_like(x)
    for s in range(n):
        for o in range(out_dim):
            gv = g[s, o]
            for i in range(fan_in):
                gx[s, i] = gx[s, i] + gv * w[o, i]
    gw = np.zeros_like(w)
    for o in range(out_dim):
        for s in range(n):
            gv = g[s, o]
            for i in range(fan_in):
                gw[o, i] = gw[o, i] + gv * x[s, i]
    gb = np.zeros(out_dim, dtype=x.dtype)
    for s in range(n):
        for o in range(out_dim):
            gb[o] = gb[o] + g[s, o]
    return gx, gw, gb


@njit(cache=True)
def conv2d_backward(x, k, g, stride, pad):
    n, C, H, W = x.shape
    F, _, KH, KW = k.shape
    OH = g.shape[2]
    OW = g.shape[3]
    # gk[f, c, r, q] accumulates over (s, oh, ow) ascending
    gk = np.zeros_like(k)
    for s in range(n):
        for oh in range(OH):
            for ow in range(OW):
                for f in range(F):
                    gv = g[s, f, oh, ow]
                    for c in range(C):
                        for r in range(KH):
                            ih = oh * stride + r - pad
                            if ih < 0 or ih >= H:
                                continue
                            for q in range(KW):
                                iw = ow * stride + q - pad
                                if iw < 0 or iw >= W:
                                    continue
                                gk[f, c, r, q] = gk[f, c, r, q] + gv * x[s, c, ih, iw]
    gb = np.zeros(F, dtype=x.dtype)
    for s in range(n):
        for oh in range(OH):
            for ow in range(OW):
                for f in range(F):
                    gb[f] = gb[f] + g[s, f, oh, ow]
    # scatter in (s, f, oh, ow, c, r, q) order
    gx = np.zeros_like(x)
    for s in range(n):
        for f in range(F):
            for oh in range(OH):
                for ow in range(OW):
                    gv = g[s, f, oh, ow]
                    for c in range(C):
                        for r in range(KH):
                            ih = oh * stride + r - pad
                            if ih < 0 or ih >= H:
                                continue
                            for q in range(KW):
                                iw = ow * stride + q - pad
                                if iw < 0 or iw >= W:
                                    continue
                                gx[s, c, ih, iw] = gx[s, c, ih, iw] + gv * k[f, c, r, q]
    return gx, gk, gb
