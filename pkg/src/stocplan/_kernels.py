"""Numba-compiled inner loops of the trajectory optimizer.

These kernels mirror the reference implementations in ``dynamics`` and
``costs`` operation-for-operation; they exist purely so the solver's rollout,
adjoint, projection, and sensitivity passes run at native speed.  Public
contracts (plan states, reported costs) are always recomputed through the
reference functions, so the kernels never define observable semantics.

No fastmath: results are IEEE-deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def rollout(u, x0, dt, wheelbases, m):
    """Forward pass: states plus per-step trig caches for the adjoint."""
    h = u.shape[0]
    n_x = x0.shape[0]
    states = np.empty((h + 1, n_x))
    states[0] = x0
    cs = np.empty((h, m))
    sn = np.empty((h, m))
    tn = np.empty((h, m))
    s2 = np.empty((h, m))
    for t in range(h):
        for j in range(m):
            r = 4 * j
            c = 2 * j
            theta = states[t, r + 2]
            phi = states[t, r + 3]
            ct = np.cos(theta)
            st = np.sin(theta)
            tp = np.tan(phi)
            cp = np.cos(phi)
            cs[t, j] = ct
            sn[t, j] = st
            tn[t, j] = tp
            s2[t, j] = 1.0 / (cp * cp)
            v = u[t, c]
            om = u[t, c + 1]
            states[t + 1, r + 0] = states[t, r + 0] + v * ct * dt
            states[t + 1, r + 1] = states[t, r + 1] + v * st * dt
            states[t + 1, r + 2] = theta + v * tp / wheelbases[j] * dt
            states[t + 1, r + 3] = phi + om * dt
    return states, cs, sn, tn, s2


@njit(cache=True)
def collision_value_grad(x, m, scale, r2, grad):
    """Pairwise collision penalty at one stacked state; accumulates into grad."""
    total = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            dx = x[4 * i] - x[4 * j]
            dy = x[4 * i + 1] - x[4 * j + 1]
            e = scale * np.exp(-(dx * dx + dy * dy - r2))
            total += e
            grad[4 * i] += -2.0 * e * dx
            grad[4 * i + 1] += -2.0 * e * dy
            grad[4 * j] += 2.0 * e * dx
            grad[4 * j + 1] += 2.0 * e * dy
    return total


@njit(cache=True)
def objective(states, u, goal, wx, wu, wxf, m, coll_scale, coll_r2,
              pen_lo, pen_up, mu_lo, mu_up, rho, use_pen):
    """(augmented objective, plain objective) of a rolled-out trajectory."""
    h = u.shape[0]
    n_x = goal.shape[0]
    n_u = u.shape[1]
    plain = 0.0
    dump = np.zeros(n_x)
    for t in range(h):
        sx = 0.0
        for a in range(n_x):
            da = states[t, a] - goal[a]
            for b in range(n_x):
                sx += da * wx[a, b] * (states[t, b] - goal[b])
        su = 0.0
        for a in range(n_u):
            for b in range(n_u):
                su += u[t, a] * wu[a, b] * u[t, b]
        plain += sx + su
        if coll_scale > 0.0 and m >= 2:
            plain += collision_value_grad(states[t], m, coll_scale, coll_r2, dump)
    sx = 0.0
    for a in range(n_x):
        da = states[h, a] - goal[a]
        for b in range(n_x):
            sx += da * wxf[a, b] * (states[h, b] - goal[b])
    plain += sx
    if not use_pen:
        return plain, plain
    pen = 0.0
    for t in range(h):
        for j in range(m):
            phi = states[t + 1, 4 * j + 3]
            up = mu_up[t, j] / rho + (phi - pen_up[t, j])
            if up < 0.0:
                up = 0.0
            lo = mu_lo[t, j] / rho + (pen_lo[t, j] - phi)
            if lo < 0.0:
                lo = 0.0
            pen += 0.5 * rho * (up * up - (mu_up[t, j] / rho) ** 2
                                + lo * lo - (mu_lo[t, j] / rho) ** 2)
    return plain + pen, plain


@njit(cache=True)
def adjoint_gradient(states, u, cs, sn, tn, s2, goal, wx, wu, wxf, dt,
                     wheelbases, m, coll_scale, coll_r2, pen_grad, use_pen):
    """Gradient of the (augmented) objective with respect to the controls."""
    h = u.shape[0]
    n_x = goal.shape[0]
    n_u = u.shape[1]
    grad = np.empty((h, n_u))
    lam = np.empty(n_x)
    # terminal adjoint
    for a in range(n_x):
        acc = 0.0
        for b in range(n_x):
            acc += 2.0 * wxf[a, b] * (states[h, b] - goal[b])
        lam[a] = acc
    if use_pen:
        for j in range(m):
            lam[4 * j + 3] += pen_grad[h - 1, j]
    scratch = np.empty(n_x)
    for t in range(h - 1, -1, -1):
        # B_t' lam and control-cost gradient
        for j in range(m):
            r = 4 * j
            c = 2 * j
            gu0 = dt * (cs[t, j] * lam[r] + sn[t, j] * lam[r + 1]
                        + tn[t, j] / wheelbases[j] * lam[r + 2])
            gu1 = dt * lam[r + 3]
            acc0 = 0.0
            acc1 = 0.0
            for b in range(n_u):
                acc0 += 2.0 * wu[c, b] * u[t, b]
                acc1 += 2.0 * wu[c + 1, b] * u[t, b]
            grad[t, c] = acc0 + gu0
            grad[t, c + 1] = acc1 + gu1
        # lam <- stage-state gradient + A_t' lam
        for a in range(n_x):
            acc = 0.0
            for b in range(n_x):
                acc += 2.0 * wx[a, b] * (states[t, b] - goal[b])
            scratch[a] = acc
        if coll_scale > 0.0 and m >= 2:
            collision_value_grad(states[t], m, coll_scale, coll_r2, scratch)
        for j in range(m):
            r = 4 * j
            v = u[t, 2 * j]
            scratch[r] += lam[r]
            scratch[r + 1] += lam[r + 1]
            scratch[r + 2] += lam[r + 2] + dt * v * (cs[t, j] * lam[r + 1]
                                                     - sn[t, j] * lam[r])
            scratch[r + 3] += lam[r + 3] + dt * v * s2[t, j] / wheelbases[j] * lam[r + 2]
        if use_pen and t >= 1:
            for j in range(m):
                scratch[4 * j + 3] += pen_grad[t - 1, j]
        lam[:] = scratch
    return grad


@njit(cache=True)
def control_sensitivities(u, cs, sn, tn, s2, dt, wheelbases, m):
    """d states / d controls, shape (H+1, n_x, H*n_u), for the Gauss-Newton model."""
    h = u.shape[0]
    n_u = u.shape[1]
    n_x = 4 * m
    dim = h * n_u
    sens = np.zeros((h + 1, n_x, dim))
    for t in range(h):
        for j in range(m):
            r = 4 * j
            v = u[t, 2 * j]
            a02 = -dt * v * sn[t, j]
            a12 = dt * v * cs[t, j]
            a23 = dt * v * s2[t, j] / wheelbases[j]
            for d in range(dim):
                sp0 = sens[t, r + 0, d]
                sp1 = sens[t, r + 1, d]
                sp2 = sens[t, r + 2, d]
                sp3 = sens[t, r + 3, d]
                sens[t + 1, r + 0, d] = sp0 + a02 * sp2
                sens[t + 1, r + 1, d] = sp1 + a12 * sp2
                sens[t + 1, r + 2, d] = sp2 + a23 * sp3
                sens[t + 1, r + 3, d] = sp3
            c = t * n_u + 2 * j
            sens[t + 1, r + 0, c] += dt * cs[t, j]
            sens[t + 1, r + 1, c] += dt * sn[t, j]
            sens[t + 1, r + 2, c] += dt * tn[t, j] / wheelbases[j]
            sens[t + 1, r + 3, c + 1] += dt
    return sens


@njit(cache=True)
def dykstra_box_rate(z, lo, hi, du, tol, max_sweeps):
    """Euclidean projection onto the box + rate-chain polyhedron (in place).

    Cyclic Dykstra over the interval set and the odd/even rate slabs.
    """
    h, n_u = z.shape
    p_box = np.zeros((h, n_u))
    p_odd = np.zeros((h, n_u))
    p_even = np.zeros((h, n_u))
    for _ in range(max_sweeps):
        change = 0.0
        # interval set
        for t in range(h):
            for k in range(n_u):
                y = z[t, k] + p_box[t, k]
                zn = min(max(y, lo[t, k]), hi[t, k])
                p_box[t, k] = y - zn
                d = zn - z[t, k]
                if d < 0.0:
                    d = -d
                if d > change:
                    change = d
                z[t, k] = zn
        # odd and even slab families (disjoint coordinate pairs)
        for start in (1, 2):
            if start == 1:
                p_cur = p_odd
            else:
                p_cur = p_even
            for t in range(start, h, 2):
                for k in range(n_u):
                    ya = z[t - 1, k] + p_cur[t - 1, k]
                    yb = z[t, k] + p_cur[t, k]
                    diff = yb - ya
                    excess = 0.0
                    if diff > du[k]:
                        excess = 0.5 * (diff - du[k])
                    elif diff < -du[k]:
                        excess = 0.5 * (diff + du[k])
                    za = ya + excess
                    zb = yb - excess
                    p_cur[t - 1, k] = ya - za
                    p_cur[t, k] = yb - zb
                    d = za - z[t - 1, k]
                    if d < 0.0:
                        d = -d
                    if d > change:
                        change = d
                    d = zb - z[t, k]
                    if d < 0.0:
                        d = -d
                    if d > change:
                        change = d
                    z[t - 1, k] = za
                    z[t, k] = zb
        if change <= tol:
            break
    return z
