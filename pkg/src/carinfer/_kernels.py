"""Sequential allocation loops compiled with numba.

The kernels take every random number they need as a pre-drawn array so that
the numpy generator stays the only source of randomness.
"""
from __future__ import annotations

import numpy as np
from numba import njit

TIE_ATOL = 1e-12
REFACTOR_GROWTH = 1e6


@njit(cache=True)
def psr_kernel(Xp, A, uniforms, rho):
    """Pairwise sequential randomization over rows already in random order.

    Xp: (n, k) covariates in allocation order; A: inverse sample covariance;
    uniforms: n // 2 + 1 draws on [0, 1).  Returns 0/1 assignments in the same
    order as Xp.
    """
    n, k = Xp.shape
    T = np.zeros(n, dtype=np.int8)
    if n < 2:
        return T
    T[0] = 1
    T[1] = 0
    d = Xp[0] - Xp[1]
    n_pairs = n // 2
    for i in range(1, n_pairs):
        a = 2 * i
        b = a + 1
        m = i + 1  # per-arm size after this pair
        m1 = 0.0
        m2 = 0.0
        for r in range(k):
            up = d[r] + Xp[a, r] - Xp[b, r]
            dn = d[r] - Xp[a, r] + Xp[b, r]
            for c in range(k):
                m1 += up * A[r, c] * (d[c] + Xp[a, c] - Xp[b, c])
                m2 += dn * A[r, c] * (d[c] - Xp[a, c] + Xp[b, c])
        # M = diff' [(2/m) S]^-1 diff with diff = sums / m
        m1 /= 2.0 * m
        m2 /= 2.0 * m
        if abs(m1 - m2) <= TIE_ATOL:
            prob = 0.5
        elif m1 < m2:
            prob = rho
        else:
            prob = 1.0 - rho
        if uniforms[i] < prob:
            T[a] = 1
            T[b] = 0
            for r in range(k):
                d[r] += Xp[a, r] - Xp[b, r]
        else:
            T[a] = 0
            T[b] = 1
            for r in range(k):
                d[r] -= Xp[a, r] - Xp[b, r]
    if n % 2 == 1:
        T[n - 1] = 1 if uniforms[n_pairs] < 0.5 else 0
    return T


@njit(cache=True)
def _norm1(M):
    best = 0.0
    for c in range(M.shape[1]):
        s = 0.0
        for r in range(M.shape[0]):
            s += abs(M[r, c])
        if s > best:
            best = s
    return best


@njit(cache=True)
def _try_invert(FtF):
    s = np.linalg.svd(FtF)[1]
    if s[-1] < 1e-12 * s[0]:
        return False, FtF
    return True, np.linalg.inv(FtF)


@njit(cache=True)
def dabcd_kernel(X, uniforms, burn_in):
    """Atkinson's D_A biased coin in arrival order.

    Returns (T, n_fallback): units after burn-in whose F'F was singular get a
    fair coin and are counted in n_fallback.
    """
    n, k = X.shape
    dim = k + 1
    T = np.zeros(n, dtype=np.int8)
    FtF = np.zeros((dim, dim))
    b = np.zeros(dim)
    f = np.empty(dim)
    P = np.zeros((dim, dim))
    have_inv = False
    cond0 = 0.0
    n_fallback = 0
    for j in range(n):
        f[0] = 1.0
        for r in range(k):
            f[r + 1] = X[j, r]
        if j < burn_in:
            prob = 0.5
        else:
            if have_inv:
                cond = _norm1(FtF) * _norm1(P)
                if cond > REFACTOR_GROWTH * cond0:
                    have_inv = False
            if not have_inv:
                ok, inv = _try_invert(FtF)
                if ok:
                    P = inv
                    have_inv = True
                    cond0 = _norm1(FtF) * _norm1(P)
            if have_inv:
                q = 0.0
                for r in range(dim):
                    acc = 0.0
                    for c in range(dim):
                        acc += P[r, c] * b[c]
                    q += f[r] * acc
                lo = (1.0 - q) ** 2
                hi = (1.0 + q) ** 2
                prob = lo / (lo + hi)
            else:
                prob = 0.5
                n_fallback += 1
        sign = 1.0 if uniforms[j] < prob else -1.0
        T[j] = 1 if sign > 0 else 0
        for r in range(dim):
            b[r] += sign * f[r]
            for c in range(dim):
                FtF[r, c] += f[r] * f[c]
        if have_inv:
            # Sherman-Morrison: (A + f f')^-1 = P - P f f' P / (1 + f' P f)
            Pf = np.zeros(dim)
            for r in range(dim):
                for c in range(dim):
                    Pf[r] += P[r, c] * f[c]
            denom = 1.0
            for r in range(dim):
                denom += f[r] * Pf[r]
            for r in range(dim):
                for c in range(dim):
                    P[r, c] -= Pf[r] * Pf[c] / denom
    return T, n_fallback
