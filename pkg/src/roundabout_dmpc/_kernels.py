"""Compiled inner loops of the DMPC solver.

The decision vector is the flattened input sequence ``U = [a_0, d_0, a_1, d_1, ...]``.
Every cost term is a (possibly hinged) residual, so one pass produces the
objective, its gradient and the Gauss-Newton metric ``2 J^T J``.

Constraint parameter vector ``cp`` layout (see ``CP_*`` indices below).
"""
import math

import numpy as np
from numba import njit

CP_SIGMA, CP_VARRHO, CP_DMIN, CP_TH, CP_TAU, CP_AMAX, CP_LVEH, CP_MARGIN = range(8)
CP_FOLW, CP_TR, CP_WD, CP_HC, CP_WHC, CP_G, CP_CX, CP_CY = range(8, 16)
CP_VMIN, CP_VMAX, CP_SMAX = 16, 17, 18
CP_SIZE = 19


@njit(cache=True)
def _wrap(t):
    return t - 2.0 * math.pi * math.floor((t + math.pi) / (2.0 * math.pi))


@njit(cache=True)
def _accumulate(w, r, row, n, cost, grad, H, derivs):
    cost += w * r * r
    if derivs:
        for i in range(n):
            if row[i] != 0.0:
                grad[i] += 2.0 * w * r * row[i]
                for j in range(n):
                    H[i, j] += 2.0 * w * row[i] * row[j]
    return cost


@njit(cache=True)
def evaluate(U, s0, dt, wb, sref, Rc, Qc, lead_gap, lead_disp, fol_gap, fol_disp, fol_v,
             cp, ring_mask, kappa, mu, linear, Fs, Gs, sbar, derivs):
    """Objective (tracking + input + mu * hinge penalties) and derivatives.

    Returns ``(cost, grad, H, states, min_residual)`` where ``states`` has
    shape (N+1, 5) holding ``[x, y, theta, v, travelled]``.
    """
    N = U.shape[0] // 2
    n = 2 * N
    grad = np.zeros(n)
    H = np.zeros((n, n))
    S = np.zeros((5, n))
    S_new = np.zeros((5, n))
    states = np.zeros((N + 1, 5))
    states[0, 0:4] = s0
    row = np.zeros(n)
    ds = np.zeros(5)
    cost = 0.0
    min_res = 1e300
    vmin = cp[CP_VMIN]
    vmax = cp[CP_VMAX]
    for k in range(N):
        a = U[2 * k]
        st = U[2 * k + 1]
        x, y, th, v, p = states[k, 0], states[k, 1], states[k, 2], states[k, 3], states[k, 4]
        Fa = np.eye(5)
        Ga = np.zeros((5, 2))
        if linear:
            for i in range(4):
                acc = sbar[k + 1, i]
                for j in range(4):
                    acc += Fs[k, i, j] * (states[k, j] - sbar[k, j])
                acc += Gs[k, i, 0] * a + Gs[k, i, 1] * st
                states[k + 1, i] = acc
                for j in range(4):
                    Fa[i, j] = Fs[k, i, j]
                Ga[i, 0] = Gs[k, i, 0]
                Ga[i, 1] = Gs[k, i, 1]
        else:
            c = math.cos(th)
            s = math.sin(th)
            tn = math.tan(st)
            states[k + 1, 0] = x + dt * v * c
            states[k + 1, 1] = y + dt * v * s
            states[k + 1, 2] = th + dt * v / wb * tn
            vn = v + dt * a
            clamped = vn < vmin or vn > vmax
            states[k + 1, 3] = min(max(vn, vmin), vmax)
            Fa[0, 2] = -dt * v * s
            Fa[0, 3] = dt * c
            Fa[1, 2] = dt * v * c
            Fa[1, 3] = dt * s
            Fa[2, 3] = dt * tn / wb
            Ga[2, 1] = dt * v / (wb * math.cos(st) ** 2)
            if clamped:
                Fa[3, 3] = 0.0
            else:
                Ga[3, 0] = dt
        states[k + 1, 4] = p + dt * v
        Fa[4, 3] = dt
        if derivs:
            # S_{k+1} = Fa S_k + Ga E_k
            for i in range(5):
                for j in range(n):
                    acc = 0.0
                    for m in range(5):
                        acc += Fa[i, m] * S[m, j]
                    S_new[i, j] = acc
                S_new[i, 2 * k] += Ga[i, 0]
                S_new[i, 2 * k + 1] += Ga[i, 1]
            for i in range(5):
                for j in range(n):
                    S[i, j] = S_new[i, j]

        x1, y1, th1, v1, p1 = (states[k + 1, 0], states[k + 1, 1], states[k + 1, 2],
                               states[k + 1, 3], states[k + 1, 4])
        # tracking residuals Rc (s - sref)
        e0 = x1 - sref[k, 0]
        e1 = y1 - sref[k, 1]
        e2 = _wrap(th1 - sref[k, 2])
        e3 = v1 - sref[k, 3]
        for i in range(4):
            r = Rc[i, 0] * e0 + Rc[i, 1] * e1 + Rc[i, 2] * e2 + Rc[i, 3] * e3
            if derivs:
                for j in range(n):
                    row[j] = (Rc[i, 0] * S[0, j] + Rc[i, 1] * S[1, j] + Rc[i, 2] * S[2, j]
                              + Rc[i, 3] * S[3, j])
            cost = _accumulate(1.0, r, row, n, cost, grad, H, derivs)
        # input residuals Qc u
        for i in range(2):
            r = Qc[i, 0] * a + Qc[i, 1] * st
            if derivs:
                for j in range(n):
                    row[j] = 0.0
                row[2 * k] = Qc[i, 0]
                row[2 * k + 1] = Qc[i, 1]
            cost = _accumulate(1.0, r, row, n, cost, grad, H, derivs)

        # hinge penalties: residual >= 0 is feasible; ds = d residual / d aug state
        margin = cp[CP_MARGIN]
        for l in range(lead_gap.shape[0]):
            D = lead_gap[l] + lead_disp[l, k] - p1
            for c_id in range(3):
                for i in range(5):
                    ds[i] = 0.0
                ds[4] = -1.0
                if c_id == 0:
                    r = D - (cp[CP_SIGMA] * v1 + cp[CP_VARRHO]) - margin
                    ds[3] = -cp[CP_SIGMA]
                elif c_id == 1:
                    tau = cp[CP_TAU]
                    r = D - (cp[CP_DMIN] + v1 * cp[CP_TH] + v1 * tau
                             + 0.5 * cp[CP_AMAX] * tau * tau) - margin
                    ds[3] = -(cp[CP_TH] + tau)
                else:
                    r = D - (cp[CP_LVEH] + cp[CP_VARRHO] + v1 * cp[CP_TAU]) - margin
                    ds[3] = -cp[CP_TAU]
                if r < min_res:
                    min_res = r
                if r < 0.0:
                    if derivs:
                        for j in range(n):
                            acc = 0.0
                            for i in range(5):
                                acc += ds[i] * S[i, j]
                            row[j] = acc
                    cost = _accumulate(mu, r, row, n, cost, grad, H, derivs)
        for f in range(fol_gap.shape[0]):
            D = fol_gap[f] + p1 - fol_disp[f, k]
            vf = fol_v[f, k]
            for c_id in range(2):
                for i in range(5):
                    ds[i] = 0.0
                ds[4] = 1.0
                if c_id == 0:
                    r = D - (cp[CP_SIGMA] * v1 + cp[CP_VARRHO]) - margin
                    ds[3] = -cp[CP_SIGMA]
                else:
                    r = D - (cp[CP_DMIN] + vf * cp[CP_TH] + vf * cp[CP_TAU]) - margin
                if r < 0.0:
                    if derivs:
                        for j in range(n):
                            acc = 0.0
                            for i in range(5):
                                acc += ds[i] * S[i, j]
                            row[j] = acc
                    cost = _accumulate(mu * cp[CP_FOLW], r, row, n, cost, grad, H, derivs)
        # annulus
        if ring_mask[k] > 0.5:
            dx = x1 - cp[CP_CX]
            dy = y1 - cp[CP_CY]
            rad = math.sqrt(dx * dx + dy * dy) + 1e-12
            for c_id in range(2):
                sign = -1.0 if c_id == 0 else 1.0
                if c_id == 0:
                    r = cp[CP_TR] + 0.5 * cp[CP_WD] - rad
                else:
                    r = rad - (cp[CP_TR] - 0.5 * cp[CP_WD])
                if r < min_res:
                    min_res = r
                if r < 0.0:
                    if derivs:
                        for j in range(n):
                            row[j] = sign * (dx / rad * S[0, j] + dy / rad * S[1, j])
                    cost = _accumulate(mu, r, row, n, cost, grad, H, derivs)
        # rollover
        r = cp[CP_WHC] * cp[CP_G] - kappa[k] * v1 * v1 * cp[CP_HC]
        if r < 0.0:
            if derivs:
                for j in range(n):
                    row[j] = -2.0 * kappa[k] * v1 * cp[CP_HC] * S[3, j]
            cost = _accumulate(mu, r, row, n, cost, grad, H, derivs)
        # speed limits (active only in linear mode; the nonlinear rollout clamps)
        for c_id in range(2):
            r = v1 - vmin if c_id == 0 else vmax - v1
            if r < 0.0:
                sign = 1.0 if c_id == 0 else -1.0
                if derivs:
                    for j in range(n):
                        row[j] = sign * S[3, j]
                cost = _accumulate(mu, r, row, n, cost, grad, H, derivs)
    return cost, grad, H, states, min_res


@njit(cache=True)
def _project(U, amax, smax):
    out = U.copy()
    for k in range(U.shape[0] // 2):
        out[2 * k] = min(max(U[2 * k], -amax), amax)
        out[2 * k + 1] = min(max(U[2 * k + 1], -smax), smax)
    return out


@njit(cache=True)
def solve_penalty(U0, s0, dt, wb, sref, Rc, Qc, lead_gap, lead_disp, fol_gap, fol_disp, fol_v,
                  cp, ring_mask, kappa, weights, linear, Fs, Gs, sbar, max_iter, tol, newton):
    """Quadratic-penalty continuation with a projected descent inner loop.

    ``newton`` selects the Gauss-Newton scaled direction on the free
    variables; otherwise the raw negative gradient is used.  Returns
    ``(U, iterations, last_weight, cost_at_last_weight)``.
    """
    U = _project(U0, cp[CP_AMAX], cp[CP_SMAX])
    n = U.shape[0]
    lo = np.empty(n)
    hi = np.empty(n)
    for k in range(n // 2):
        lo[2 * k] = -cp[CP_AMAX]
        hi[2 * k] = cp[CP_AMAX]
        lo[2 * k + 1] = -cp[CP_SMAX]
        hi[2 * k + 1] = cp[CP_SMAX]
    iters = 0
    last_w = weights[0]
    cost = 0.0
    step = 1.0
    for wi in range(weights.shape[0]):
        mu = weights[wi]
        last_w = mu
        for it in range(max_iter):
            cost, g, H, _, _ = evaluate(U, s0, dt, wb, sref, Rc, Qc, lead_gap, lead_disp, fol_gap,
                                        fol_disp, fol_v, cp, ring_mask, kappa, mu, linear, Fs, Gs,
                                        sbar, True)
            iters += 1
            d = np.zeros(n)
            free = np.ones(n, dtype=np.bool_)
            for i in range(n):
                if (U[i] <= lo[i] + 1e-12 and g[i] > 0.0) or (U[i] >= hi[i] - 1e-12 and g[i] < 0.0):
                    free[i] = False
            if newton:
                idx = np.nonzero(free)[0]
                m = idx.shape[0]
                if m > 0:
                    Hf = np.empty((m, m))
                    gf = np.empty(m)
                    tr = 0.0
                    for i in range(m):
                        gf[i] = g[idx[i]]
                        tr += H[idx[i], idx[i]]
                        for j in range(m):
                            Hf[i, j] = H[idx[i], idx[j]]
                    reg = 1e-10 * tr / m + 1e-12
                    for i in range(m):
                        Hf[i, i] += reg
                    df = np.linalg.solve(Hf, -gf)
                    for i in range(m):
                        d[idx[i]] = df[i]
                alpha = 1.0
            else:
                for i in range(n):
                    if free[i]:
                        d[i] = -g[i]
                alpha = min(step * 2.0, 1e6)
            accepted = False
            U_new = U
            for _ in range(40):
                U_new = _project(U + alpha * d, cp[CP_AMAX], cp[CP_SMAX])
                dec = 0.0
                for i in range(n):
                    dec += g[i] * (U_new[i] - U[i])
                c_new, _, _, _, _ = evaluate(U_new, s0, dt, wb, sref, Rc, Qc, lead_gap, lead_disp,
                                             fol_gap, fol_disp, fol_v, cp, ring_mask, kappa, mu,
                                             linear, Fs, Gs, sbar, False)
                if c_new <= cost + 1e-4 * dec:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            step = alpha
            dn = 0.0
            for i in range(n):
                dn += (U_new[i] - U[i]) ** 2
            U = U_new
            if math.sqrt(dn) < tol:
                break
    cost, _, _, _, _ = evaluate(U, s0, dt, wb, sref, Rc, Qc, lead_gap, lead_disp, fol_gap, fol_disp,
                                fol_v, cp, ring_mask, kappa, last_w, linear, Fs, Gs, sbar, False)
    return U, iters, last_w, cost
