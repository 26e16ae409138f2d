"""Compiled inner loops for the periodic P1 discretisation.

Everything here works on plain float64 arrays and scalars so the kernels can
run with the GIL released. Node ``i`` sits at ``x = i*h``; cell ``c`` spans
nodes ``c`` and ``(c+1) % n``.

The advection form ``(m dv_x, phi) - (m dv, phi_x)`` is integrated exactly
per cell: with P1 trial/test functions the integrands are at most quadratic,
so the closed-form element integrals below replace quadrature.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)

# Newton status codes returned by the stepping kernels.
CONVERGED = 0
DIVERGED = 1
MAX_ITERS = 2


# --------------------------------------------------------------------------
# constant-coefficient cyclic tridiagonal systems (Sherman-Morrison)
# --------------------------------------------------------------------------

@njit(**_JIT)
def cyclic_factor(d, e, n):
    """Factorise the circulant matrix with diagonal ``d`` and off-diagonals ``e``.

    Returns ``(cp, inv, z, gamma, zden)`` for :func:`cyclic_solve`.
    """
    gamma = -d
    bb = np.full(n, d)
    bb[0] = d - gamma
    bb[n - 1] = d - e * e / gamma
    cp = np.empty(n)
    inv = np.empty(n)
    inv[0] = 1.0 / bb[0]
    cp[0] = e * inv[0]
    for i in range(1, n):
        denom = bb[i] - e * cp[i - 1]
        inv[i] = 1.0 / denom
        cp[i] = e * inv[i]
    rhs = np.zeros(n)
    rhs[0] = gamma
    rhs[n - 1] = e
    z = _thomas(cp, inv, e, rhs)
    zden = 1.0 + z[0] + e * z[n - 1] / gamma
    return cp, inv, z, gamma, zden


@njit(**_JIT)
def _thomas(cp, inv, e, r):
    n = r.size
    y = np.empty(n)
    y[0] = r[0] * inv[0]
    for i in range(1, n):
        y[i] = (r[i] - e * y[i - 1]) * inv[i]
    for i in range(n - 2, -1, -1):
        y[i] -= cp[i] * y[i + 1]
    return y


@njit(**_JIT)
def cyclic_solve(cp, inv, z, gamma, zden, e, r):
    y = _thomas(cp, inv, e, r)
    fact = (y[0] + e * y[y.size - 1] / gamma) / zden
    return y - fact * z


@njit(**_JIT)
def cyclic_matvec(d, e, x):
    n = x.size
    y = np.empty(n)
    for i in range(n):
        y[i] = d * x[i] + e * (x[i - 1] + x[(i + 1) % n])
    return y


# --------------------------------------------------------------------------
# Matern smoothing cascade
# --------------------------------------------------------------------------

@njit(**_JIT)
def dg0_load(w, h):
    """Load vector ``(w, v)`` for a DG0 field ``w`` against every P1 hat."""
    n = w.size
    out = np.empty(n)
    for i in range(n):
        out[i] = 0.5 * h * (w[i - 1] + w[i])
    return out


@njit(**_JIT)
def dg0_load_transpose(g, h):
    n = g.size
    out = np.empty(n)
    for c in range(n):
        out[c] = 0.5 * h * (g[c] + g[(c + 1) % n])
    return out


@njit(**_JIT)
def smooth_cascade(load, k, sm_cp, sm_inv, sm_z, sm_gamma, sm_zden, sm_e, h):
    """k elliptic stages; stage 1 takes ``load``, later stages take ``M x``."""
    md = 2.0 * h / 3.0
    mo = h / 6.0
    x = cyclic_solve(sm_cp, sm_inv, sm_z, sm_gamma, sm_zden, sm_e, load)
    for _ in range(k - 1):
        x = cyclic_solve(sm_cp, sm_inv, sm_z, sm_gamma, sm_zden, sm_e,
                         cyclic_matvec(md, mo, x))
    return x


@njit(**_JIT)
def smooth_path(dW, lam, dt, eta, k, sm_cp, sm_inv, sm_z, sm_gamma, sm_zden,
                sm_e, h):
    ns, n = dW.shape
    out = np.empty((ns, n))
    scale = 1.0 / np.sqrt(h)
    for s in range(ns):
        w = np.empty(n)
        for c in range(n):
            w[c] = eta * (dW[s, c] * scale + lam[s, c] * dt)
        out[s] = smooth_cascade(dg0_load(w, h), k, sm_cp, sm_inv, sm_z,
                                sm_gamma, sm_zden, sm_e, h)
    return out


# --------------------------------------------------------------------------
# SCH midpoint step
# --------------------------------------------------------------------------

@njit(**_JIT)
def sch_residual(m0, u0, m1, u1, dU, h, a2, mu, dt):
    """Rows ``[:, 0]`` momentum, ``[:, 1]`` Helmholtz, as load vectors."""
    n = m0.size
    out = np.zeros((n, 2))
    mo = h / 6.0
    for c in range(n):
        a = c
        b = (c + 1) % n
        mha = 0.5 * (m0[a] + m1[a])
        mhb = 0.5 * (m0[b] + m1[b])
        va = 0.5 * dt * (u0[a] + u1[a]) + dU[a]
        vb = 0.5 * dt * (u0[b] + u1[b]) + dU[b]
        dma = m1[a] - m0[a]
        dmb = m1[b] - m0[b]
        out[a, 0] += mo * (2.0 * dma + dmb)
        out[b, 0] += mo * (dma + 2.0 * dmb)
        g = mu * dt * (mha - mhb) / h
        out[a, 0] += g
        out[b, 0] -= g
        dv = (vb - va) / h
        mma = mo * (2.0 * mha + mhb)
        mmb = mo * (mha + 2.0 * mhb)
        s = mma * va + mmb * vb
        out[a, 0] += dv * mma + s / h
        out[b, 0] += dv * mmb - s / h
        # Helmholtz: (u, psi) + a2 (u_x, psi_x) - (m, psi)
        ka = a2 * (u1[a] - u1[b]) / h
        out[a, 1] += mo * (2.0 * u1[a] + u1[b]) + ka - mo * (2.0 * m1[a] + m1[b])
        out[b, 1] += mo * (u1[a] + 2.0 * u1[b]) - ka - mo * (m1[a] + 2.0 * m1[b])
    return out


@njit(**_JIT)
def _cell_forms(m0, u0, m1, u1, dU, dt, h, a, b):
    """Element derivative matrices of the advection form for one cell.

    Returns ``(Nm, Nv)`` with ``Nm[k, j] = d adv_k / d mhalf_j`` and
    ``Nv[k, j] = d adv_k / d v_j`` in local numbering (0 -> a, 1 -> b).
    """
    mha = 0.5 * (m0[a] + m1[a])
    mhb = 0.5 * (m0[b] + m1[b])
    va = 0.5 * dt * (u0[a] + u1[a]) + dU[a]
    vb = 0.5 * dt * (u0[b] + u1[b]) + dU[b]
    dv = (vb - va) / h
    Nm = np.empty((2, 2))
    Nm[0, 0] = dv * h / 3.0 + (2.0 * va + vb) / 6.0
    Nm[0, 1] = dv * h / 6.0 + (va + 2.0 * vb) / 6.0
    Nm[1, 0] = dv * h / 6.0 - (2.0 * va + vb) / 6.0
    Nm[1, 1] = dv * h / 3.0 - (va + 2.0 * vb) / 6.0
    q = 0.5 * (mha + mhb)
    Nv = np.zeros((2, 2))
    Nv[0, 1] = q
    Nv[1, 0] = -q
    return Nm, Nv


@njit(**_JIT)
def sch_jacobian(m0, u0, m1, u1, dU, h, a2, mu, dt):
    """Block-cyclic Jacobian w.r.t. interleaved unknowns ``(m1_i, u1_i)``.

    ``A[i]`` couples block row i to block i-1, ``B[i]`` to itself and
    ``C[i]`` to i+1. Within a block, row 0 is the momentum equation and row 1
    the Helmholtz relation; column 0 is ``m1``, column 1 is ``u1``.
    """
    n = m0.size
    A = np.empty((n, 2, 2))
    B = np.zeros((n, 2, 2))
    C = np.empty((n, 2, 2))
    md = h / 3.0
    mo = h / 6.0
    kv = 1.0 / h
    visc = 0.5 * mu * dt * kv
    for c in range(n):
        a = c
        b = (c + 1) % n
        mha = 0.5 * (m0[a] + m1[a])
        mhb = 0.5 * (m0[b] + m1[b])
        va = 0.5 * dt * (u0[a] + u1[a]) + dU[a]
        vb = 0.5 * dt * (u0[b] + u1[b]) + dU[b]
        dv = (vb - va) / h
        pa = (2.0 * va + vb) / 6.0
        pb = (va + 2.0 * vb) / 6.0
        q = 0.25 * dt * (mha + mhb)
        # diagonal contributions
        B[a, 0, 0] += md + visc + 0.5 * (dv * md + pa)
        B[b, 0, 0] += md + visc + 0.5 * (dv * md - pb)
        B[a, 1, 0] -= md
        B[b, 1, 0] -= md
        B[a, 1, 1] += md + a2 * kv
        B[b, 1, 1] += md + a2 * kv
        # row a, column b
        C[a, 0, 0] = mo - visc + 0.5 * (dv * mo + pb)
        C[a, 0, 1] = q
        C[a, 1, 0] = -mo
        C[a, 1, 1] = mo - a2 * kv
        # row b, column a
        A[b, 0, 0] = mo - visc + 0.5 * (dv * mo - pa)
        A[b, 0, 1] = -q
        A[b, 1, 0] = -mo
        A[b, 1, 1] = mo - a2 * kv
    return A, B, C


@njit(**_JIT)
def block_cyclic_solve(A, B, C, r):
    """Solve the 2x2-block cyclic tridiagonal system for ``r`` of shape (n, 2).

    The last block row/column is treated as a border: one block-Thomas sweep
    over blocks ``0..n-2`` with three right-hand sides (the data and the two
    border columns), then a 2x2 Schur complement for the last block.
    """
    n = B.shape[0]
    nin = n - 1
    G = np.empty((nin, 2, 2))
    Y = np.zeros((nin, 2, 3))
    for i in range(nin):
        Y[i, 0, 0] = r[i, 0]
        Y[i, 1, 0] = r[i, 1]
    for q in range(2):
        for j in range(2):
            Y[0, q, 1 + j] += A[0, q, j]
            Y[nin - 1, q, 1 + j] += C[nin - 1, q, j]
    for i in range(nin):
        d00 = B[i, 0, 0]
        d01 = B[i, 0, 1]
        d10 = B[i, 1, 0]
        d11 = B[i, 1, 1]
        if i > 0:
            a00 = A[i, 0, 0]
            a01 = A[i, 0, 1]
            a10 = A[i, 1, 0]
            a11 = A[i, 1, 1]
            d00 -= a00 * G[i - 1, 0, 0] + a01 * G[i - 1, 1, 0]
            d01 -= a00 * G[i - 1, 0, 1] + a01 * G[i - 1, 1, 1]
            d10 -= a10 * G[i - 1, 0, 0] + a11 * G[i - 1, 1, 0]
            d11 -= a10 * G[i - 1, 0, 1] + a11 * G[i - 1, 1, 1]
            for j in range(3):
                Y[i, 0, j] -= a00 * Y[i - 1, 0, j] + a01 * Y[i - 1, 1, j]
                Y[i, 1, j] -= a10 * Y[i - 1, 0, j] + a11 * Y[i - 1, 1, j]
        det = d00 * d11 - d01 * d10
        i00 = d11 / det
        i01 = -d01 / det
        i10 = -d10 / det
        i11 = d00 / det
        if i < nin - 1:
            G[i, 0, 0] = i00 * C[i, 0, 0] + i01 * C[i, 1, 0]
            G[i, 0, 1] = i00 * C[i, 0, 1] + i01 * C[i, 1, 1]
            G[i, 1, 0] = i10 * C[i, 0, 0] + i11 * C[i, 1, 0]
            G[i, 1, 1] = i10 * C[i, 0, 1] + i11 * C[i, 1, 1]
        for j in range(3):
            y0 = Y[i, 0, j]
            y1 = Y[i, 1, j]
            Y[i, 0, j] = i00 * y0 + i01 * y1
            Y[i, 1, j] = i10 * y0 + i11 * y1
    for i in range(nin - 2, -1, -1):
        for j in range(3):
            Y[i, 0, j] -= G[i, 0, 0] * Y[i + 1, 0, j] + G[i, 0, 1] * Y[i + 1, 1, j]
            Y[i, 1, j] -= G[i, 1, 0] * Y[i + 1, 0, j] + G[i, 1, 1] * Y[i + 1, 1, j]
    last = n - 1
    W = np.zeros((2, 3))
    for q in range(2):
        for j in range(3):
            W[q, j] = (C[last, q, 0] * Y[0, 0, j] + C[last, q, 1] * Y[0, 1, j]
                       + A[last, q, 0] * Y[nin - 1, 0, j]
                       + A[last, q, 1] * Y[nin - 1, 1, j])
    s00 = B[last, 0, 0] - W[0, 1]
    s01 = B[last, 0, 1] - W[0, 2]
    s10 = B[last, 1, 0] - W[1, 1]
    s11 = B[last, 1, 1] - W[1, 2]
    r0 = r[last, 0] - W[0, 0]
    r1 = r[last, 1] - W[1, 0]
    det = s00 * s11 - s01 * s10
    x0 = (s11 * r0 - s01 * r1) / det
    x1 = (-s10 * r0 + s00 * r1) / det
    x = np.empty((n, 2))
    for i in range(nin):
        for q in range(2):
            x[i, q] = Y[i, q, 0] - Y[i, q, 1] * x0 - Y[i, q, 2] * x1
    x[last, 0] = x0
    x[last, 1] = x1
    return x


@njit(**_JIT)
def block_transpose(A, B, C):
    n = B.shape[0]
    At = np.empty_like(A)
    Bt = np.empty_like(B)
    Ct = np.empty_like(C)
    for i in range(n):
        Bt[i] = B[i].T
        At[i] = C[i - 1].T
        Ct[i] = A[(i + 1) % n].T
    return At, Bt, Ct


@njit(**_JIT)
def dual_norm(R, m_cp, m_inv, m_z, m_gamma, m_zden, m_e):
    """sqrt(r^T M^{-1} r) summed over both residual rows."""
    total = 0.0
    for col in range(2):
        r = R[:, col].copy()
        y = cyclic_solve(m_cp, m_inv, m_z, m_gamma, m_zden, m_e, r)
        total += np.dot(r, y)
    return np.sqrt(max(total, 0.0))


@njit(**_JIT)
def sch_step(m0, u0, dU, h, a2, mu, dt, tol, max_iters, max_halvings,
             m_cp, m_inv, m_z, m_gamma, m_zden, m_e):
    """One implicit midpoint step. Returns ``(m1, u1, status, resnorm, iters)``."""
    n = m0.size
    m1 = m0.copy()
    u1 = u0.copy()
    R = sch_residual(m0, u0, m1, u1, dU, h, a2, mu, dt)
    rn = dual_norm(R, m_cp, m_inv, m_z, m_gamma, m_zden, m_e)
    for it in range(max_iters):
        if rn <= tol:
            return m1, u1, CONVERGED, rn, it
        A, B, C = sch_jacobian(m0, u0, m1, u1, dU, h, a2, mu, dt)
        dz = block_cyclic_solve(A, B, C, -R)
        lam = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            mt = m1 + lam * dz[:, 0]
            ut = u1 + lam * dz[:, 1]
            Rt = sch_residual(m0, u0, mt, ut, dU, h, a2, mu, dt)
            rt = dual_norm(Rt, m_cp, m_inv, m_z, m_gamma, m_zden, m_e)
            if rt < rn:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            return m1, u1, DIVERGED, rn, it
        m1 = mt
        u1 = ut
        R = Rt
        rn = rt
    if rn <= tol:
        return m1, u1, CONVERGED, rn, max_iters
    return m1, u1, MAX_ITERS, rn, max_iters


@njit(**_JIT)
def sch_evolve(m0, u0, dUs, h, a2, mu, dt, tol, max_iters, max_halvings,
               m_cp, m_inv, m_z, m_gamma, m_zden, m_e):
    """Apply ``dUs.shape[0]`` steps; trajectory arrays have one extra row.

    Returns ``(ms, us, status, resnorm, failed_step)``; ``failed_step`` is -1
    on success.
    """
    ns, n = dUs.shape
    ms = np.empty((ns + 1, n))
    us = np.empty((ns + 1, n))
    ms[0] = m0
    us[0] = u0
    for s in range(ns):
        m1, u1, status, rn, _ = sch_step(ms[s], us[s], dUs[s], h, a2, mu, dt,
                                         tol, max_iters, max_halvings, m_cp,
                                         m_inv, m_z, m_gamma, m_zden, m_e)
        if status != CONVERGED:
            return ms, us, status, rn, s
        ms[s + 1] = m1
        us[s + 1] = u1
    return ms, us, CONVERGED, 0.0, -1


@njit(**_JIT)
def sch_adjoint(ms, us, dUs, gm, gu, h, a2, mu, dt, first):
    """Reverse sweep through the stored trajectory.

    ``gm``, ``gu`` are derivatives of a scalar functional w.r.t. the final
    ``(m, u)``. Returns ``(g_dU, gm0, gu0)`` where ``g_dU[s]`` is the
    derivative w.r.t. the noise increment of step ``s`` (zero for
    ``s < first``) and ``gm0``, ``gu0`` refer to the state at step ``first``.
    """
    ns, n = dUs.shape
    g_dU = np.zeros((ns, n))
    lam_m = gm.copy()
    lam_u = gu.copy()
    Ml = np.array([[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]])
    Kl = np.array([[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]])
    for s in range(ns - 1, first - 1, -1):
        m0 = ms[s]
        u0 = us[s]
        m1 = ms[s + 1]
        u1 = us[s + 1]
        dU = dUs[s]
        A, B, C = sch_jacobian(m0, u0, m1, u1, dU, h, a2, mu, dt)
        At, Bt, Ct = block_transpose(A, B, C)
        rhs = np.empty((n, 2))
        rhs[:, 0] = lam_m
        rhs[:, 1] = lam_u
        mu_ = block_cyclic_solve(At, Bt, Ct, rhs)
        pm = mu_[:, 0]
        new_m = np.zeros(n)
        new_u = np.zeros(n)
        gd = np.zeros(n)
        for c in range(n):
            a = c
            b = (c + 1) % n
            Nm, Nv = _cell_forms(m0, u0, m1, u1, dU, dt, h, a, b)
            nodes = (a, b)
            for k in range(2):
                pk = pm[nodes[k]]
                for j in range(2):
                    col = nodes[j]
                    dm0 = -Ml[k, j] + 0.5 * mu * dt * Kl[k, j] + 0.5 * Nm[k, j]
                    new_m[col] -= pk * dm0
                    new_u[col] -= pk * 0.5 * dt * Nv[k, j]
                    gd[col] -= pk * Nv[k, j]
        g_dU[s] = gd
        lam_m = new_m
        lam_u = new_u
    return g_dU, lam_m, lam_u
