"""Compiled inner loops: stencil CG and the Strauss birth-death chain.

The stencil works on flattened C-ordered grids of any dimension.  Unknown
nodes are listed in ``idx``; every other node of the work array ``x`` is held
at zero, so neighbor sums pick up only unknown neighbors and the boundary
contribution lives entirely in ``b`` and ``diag``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _stencil(p, out, idx, strides, diag, inv_h2):
    for m in range(idx.size):
        i = idx[m]
        s = 0.0
        for k in range(strides.size):
            st = strides[k]
            s += p[i - st] + p[i + st]
        out[m] = diag[m] * p[i] - inv_h2 * s


@njit(cache=True)
def apply_operator(x, idx, strides, diag, inv_h2):
    out = np.empty(idx.size)
    _stencil(x, out, idx, strides, diag, inv_h2)
    return out


@njit(cache=True)
def pcg(idx, strides, diag, inv_h2, b, x, tol, maxiter):
    """Jacobi-preconditioned CG.  ``x`` is the full work grid, updated in place.

    Returns (iterations, relative residual ||b - Ax|| / ||b||).
    """
    n = idx.size
    bnorm = 0.0
    for m in range(n):
        bnorm += b[m] * b[m]
    bnorm = math.sqrt(bnorm)
    if bnorm == 0.0:
        for m in range(n):
            x[idx[m]] = 0.0
        return 0, 0.0

    r = np.empty(n)
    z = np.empty(n)
    ap = np.empty(n)
    p = np.zeros(x.size)
    _stencil(x, ap, idx, strides, diag, inv_h2)
    rr = 0.0
    rz = 0.0
    for m in range(n):
        r[m] = b[m] - ap[m]
        z[m] = r[m] / diag[m]
        p[idx[m]] = z[m]
        rr += r[m] * r[m]
        rz += r[m] * z[m]
    rel = math.sqrt(rr) / bnorm
    it = 0
    while rel > tol and it < maxiter:
        _stencil(p, ap, idx, strides, diag, inv_h2)
        pap = 0.0
        for m in range(n):
            pap += p[idx[m]] * ap[m]
        if pap <= 0.0:
            break
        alpha = rz / pap
        rr = 0.0
        rz_new = 0.0
        for m in range(n):
            i = idx[m]
            x[i] += alpha * p[i]
            r[m] -= alpha * ap[m]
            z[m] = r[m] / diag[m]
            rr += r[m] * r[m]
            rz_new += r[m] * z[m]
        beta = rz_new / rz
        rz = rz_new
        for m in range(n):
            i = idx[m]
            p[i] = z[m] + beta * p[i]
        it += 1
        rel = math.sqrt(rr) / bnorm
    # report the true residual, not the recursively updated one
    _stencil(x, ap, idx, strides, diag, inv_h2)
    rr = 0.0
    for m in range(n):
        d = b[m] - ap[m]
        rr += d * d
    return it, math.sqrt(rr) / bnorm


# ---------------------------------------------------------------- Strauss


@njit(cache=True)
def _cell_of(pt, lo, cell, ncell):
    c = 0
    for k in range(lo.size):
        j = int((pt[k] - lo[k]) / cell)
        if j < 0:
            j = 0
        elif j >= ncell[k]:
            j = ncell[k] - 1
        c = c * ncell[k] + j
    return c


@njit(cache=True)
def _count_close(pt, skip, pos, members, counts, lo, cell, ncell, offsets, rc2):
    d = lo.size
    home = np.empty(d, dtype=np.int64)
    for k in range(d):
        j = int((pt[k] - lo[k]) / cell)
        if j < 0:
            j = 0
        elif j >= ncell[k]:
            j = ncell[k] - 1
        home[k] = j
    total = 0
    for o in range(offsets.shape[0]):
        c = 0
        ok = True
        for k in range(d):
            j = home[k] + offsets[o, k]
            if j < 0 or j >= ncell[k]:
                ok = False
                break
            c = c * ncell[k] + j
        if not ok:
            continue
        for s in range(counts[c]):
            q = members[c, s]
            if q == skip:
                continue
            dist2 = 0.0
            for k in range(d):
                t = pos[q, k] - pt[k]
                dist2 += t * t
            if dist2 <= rc2:
                total += 1
    return total


@njit(cache=True)
def strauss_chain(lo, hi, alpha, beta, rc, moves, accepts, births, picks, cap):
    """Birth-death Metropolis-Hastings for density alpha^n beta^R on [lo, hi).

    Starts from the empty configuration, so with beta = 0 the chain never
    leaves the hard-core set.  Returns (points, accepted moves).
    """
    d = lo.size
    vol = 1.0
    for k in range(d):
        vol *= hi[k] - lo[k]
    cell = rc
    ncell = np.empty(d, dtype=np.int64)
    ntot = 1
    for k in range(d):
        ncell[k] = max(1, int(math.ceil((hi[k] - lo[k]) / cell)))
        ntot *= ncell[k]
    n_off = 3 ** d
    offsets = np.empty((n_off, d), dtype=np.int64)
    for o in range(n_off):
        t = o
        for k in range(d - 1, -1, -1):
            offsets[o, k] = t % 3 - 1
            t //= 3

    maxn = 64
    pos = np.empty((maxn, d))
    where = np.empty((maxn, 2), dtype=np.int64)
    members = np.empty((ntot, cap), dtype=np.int64)
    counts = np.zeros(ntot, dtype=np.int64)
    n = 0
    accepted = 0
    rc2 = rc * rc
    av = alpha * vol
    for step in range(moves.size):
        if moves[step] < 0.5:
            pt = births[step]
            t = _count_close(pt, -1, pos, members, counts, lo, cell, ncell, offsets, rc2)
            w = 1.0 if t == 0 else beta ** t
            ratio = av * w / (n + 1)
            if accepts[step] < ratio:
                if n == maxn:
                    maxn *= 2
                    pos2 = np.empty((maxn, d))
                    pos2[:n] = pos[:n]
                    pos = pos2
                    where2 = np.empty((maxn, 2), dtype=np.int64)
                    where2[:n] = where[:n]
                    where = where2
                c = _cell_of(pt, lo, cell, ncell)
                if counts[c] == members.shape[1]:
                    grown = np.empty((ntot, 2 * members.shape[1]), dtype=np.int64)
                    grown[:, : members.shape[1]] = members
                    members = grown
                pos[n] = pt
                members[c, counts[c]] = n
                where[n, 0] = c
                where[n, 1] = counts[c]
                counts[c] += 1
                n += 1
                accepted += 1
        elif n > 0:
            q = int(picks[step] * n)
            if q >= n:
                q = n - 1
            t = _count_close(pos[q], q, pos, members, counts, lo, cell, ncell, offsets, rc2)
            if t == 0:
                ratio = n / av
            elif beta == 0.0:
                ratio = math.inf
            else:
                ratio = n / (av * beta ** t)
            if accepts[step] < ratio:
                # unlink q from its cell
                c = where[q, 0]
                s = where[q, 1]
                last = members[c, counts[c] - 1]
                members[c, s] = last
                where[last, 1] = s
                counts[c] -= 1
                # move the last point into slot q
                n -= 1
                if q != n:
                    pos[q] = pos[n]
                    c2 = where[n, 0]
                    s2 = where[n, 1]
                    members[c2, s2] = q
                    where[q, 0] = c2
                    where[q, 1] = s2
                accepted += 1
    return pos[:n].copy(), accepted


# ------------------------------------------------- 3D full-grid fast path
#
# No fastmath: reassociated reductions came out differently depending on
# whether the kernel was freshly compiled or loaded from the cache.  Dot
# products instead use four interleaved accumulators in a fixed order.


@njit(cache=True)
def _dot(a, b):
    n = a.size
    s0 = s1 = s2 = s3 = 0.0
    m = 0
    while m + 4 <= n:
        s0 += a[m] * b[m]
        s1 += a[m + 1] * b[m + 1]
        s2 += a[m + 2] * b[m + 2]
        s3 += a[m + 3] * b[m + 3]
        m += 4
    while m < n:
        s0 += a[m] * b[m]
        m += 1
    return (s0 + s1) + (s2 + s3)


@njit(cache=True)
def _stencil3(p, out, diag, inv_h2):
    """out = A p on nodes with diag > 0, zero elsewhere."""
    n0, n1, n2 = p.shape
    for i in range(1, n0 - 1):
        for j in range(1, n1 - 1):
            for k in range(1, n2 - 1):
                s = (p[i - 1, j, k] + p[i + 1, j, k] + p[i, j - 1, k] + p[i, j + 1, k]
                     + p[i, j, k - 1] + p[i, j, k + 1])
                d = diag[i, j, k]
                out[i, j, k] = d * p[i, j, k] - inv_h2 * s if d > 0 else 0.0


@njit(cache=True)
def _update3(x, r, p, ap, diag, alpha):
    """x += alpha p, r -= alpha ap; returns (r.r, r.z) with z = r / diag."""
    xf, rf, pf, af, df = x.ravel(), r.ravel(), p.ravel(), ap.ravel(), diag.ravel()
    n = xf.size
    s0 = s1 = t0 = t1 = 0.0
    m = 0
    while m + 2 <= n:
        xf[m] += alpha * pf[m]
        xf[m + 1] += alpha * pf[m + 1]
        r0 = rf[m] - alpha * af[m]
        r1 = rf[m + 1] - alpha * af[m + 1]
        rf[m] = r0
        rf[m + 1] = r1
        s0 += r0 * r0
        s1 += r1 * r1
        t0 += r0 * r0 / df[m] if df[m] > 0 else 0.0
        t1 += r1 * r1 / df[m + 1] if df[m + 1] > 0 else 0.0
        m += 2
    while m < n:
        xf[m] += alpha * pf[m]
        r0 = rf[m] - alpha * af[m]
        rf[m] = r0
        s0 += r0 * r0
        t0 += r0 * r0 / df[m] if df[m] > 0 else 0.0
        m += 1
    return s0 + s1, t0 + t1


@njit(cache=True)
def pcg3(diag, inv_h2, b, x, tol, maxiter):
    """Same iteration as :func:`pcg` on full 3D arrays.

    Unknowns are the nodes with ``diag > 0``; ``diag`` must be 0 elsewhere
    (including the outer layer) and ``b``, ``x`` must vanish there.
    """
    bf = b.ravel()
    bnorm = math.sqrt(_dot(bf, bf))
    if bnorm == 0.0:
        x[:] = 0.0
        return 0, 0.0
    r = np.zeros_like(x)
    p = np.zeros_like(x)
    ap = np.zeros_like(x)
    rf, pf, apf = r.ravel(), p.ravel(), ap.ravel()
    dgf = diag.ravel()
    _stencil3(x, ap, diag, inv_h2)
    for m in range(rf.size):
        rf[m] = bf[m] - apf[m]
    rr, rz = _update3(x, r, p, ap, diag, 0.0)
    for m in range(rf.size):
        pf[m] = rf[m] / dgf[m] if dgf[m] > 0 else 0.0
    rel = math.sqrt(rr) / bnorm
    it = 0
    while rel > tol and it < maxiter:
        _stencil3(p, ap, diag, inv_h2)
        pap = _dot(pf, apf)
        if pap <= 0.0:
            break
        alpha = rz / pap
        rr, rz_new = _update3(x, r, p, ap, diag, alpha)
        beta = rz_new / rz
        rz = rz_new
        for m in range(pf.size):
            pf[m] = (rf[m] / dgf[m] if dgf[m] > 0 else 0.0) + beta * pf[m]
        it += 1
        rel = math.sqrt(rr) / bnorm
    _stencil3(x, ap, diag, inv_h2)
    for m in range(rf.size):
        rf[m] = bf[m] - apf[m]
    return it, math.sqrt(_dot(rf, rf)) / bnorm
