"""Independent reference implementations used only by tests.

These deliberately avoid the package's Newton/SLSQP code paths: the power
flow oracle is a Gauss-Seidel fixed point on the complex bus equations, and
the NLP oracle is a quadratic-penalty continuation minimized with L-BFGS-B.
Agreement between these and the production implementations is the evidence
the tests rely on.
"""

from __future__ import annotations

import cmath

import numpy as np
from scipy.optimize import minimize


def fixed_point_power_flow(net, snap, ctrl, tol=1e-12, max_iter=50_000):
    """Gauss-Seidel power flow; returns (V complex array, converged flag).

    Controls are fixed exactly as in the production solver: switched shunts
    at ctrl steps, PV reactive output and curtailment fixed, generator buses
    hold voltage magnitude (no reactive limits), slack holds its complex
    voltage.
    """
    n = len(net.buses)
    idx = {b.id: i for i, b in enumerate(net.buses)}
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        y = br.series_g + 1j * br.series_b
        ysh = 1j * br.charging_b / 2.0
        tau = br.tap_ratio
        shift = cmath.exp(1j * br.phase_shift)
        Y[i, i] += (y + ysh) / tau**2
        Y[i, j] += -y * shift / tau
        Y[j, i] += -y / (shift * tau)
        Y[j, j] += y + ysh
    # bus shunts: fixed + switched + planned, as admittance to ground
    b_bus = np.array([b.shunt_b for b in net.buses], dtype=float)
    g_bus = np.array([b.shunt_g for b in net.buses], dtype=float)
    k = 0
    for s in net.switched_shunts:
        for blk in s.blocks:
            b_bus[idx[s.bus]] += blk.step_b * ctrl.shunt_steps[k]
            k += 1
    for c, bus in enumerate(net.candidate_buses):
        b_bus[idx[bus]] += ctrl.b_plus[c] - ctrl.b_minus[c]
    Y[np.arange(n), np.arange(n)] += g_bus + 1j * b_bus

    # scheduled complex injections (PV real power and reactive support fixed)
    s_inj = -(snap.d_p + 1j * snap.d_q) + 1j * ctrl.dr_q
    for c, pv in enumerate(net.pv_resources):
        s_inj[idx[pv.bus]] += (snap.pv_p_mpp[c] - ctrl.pv_curtail[c]
                               + 1j * ctrl.pv_q[c])
    p_fixed = np.zeros(n)
    vset = {}
    slack = None
    for g in net.generators:
        i = idx[g.bus]
        vset[i] = g.v_sched
        if g.is_slack_unit:
            slack = i
        else:
            p_fixed[i] += g.p_sched
    s_inj += p_fixed

    V = np.ones(n, dtype=complex)
    for i, vs in vset.items():
        V[i] = vs
    pv_buses = [i for i in vset if i != slack]

    for it in range(max_iter):
        max_dv = 0.0
        for i in range(n):
            if i == slack:
                continue
            i_others = Y[i] @ V - Y[i, i] * V[i]
            if i in vset:
                # reactive power follows from the current balance
                q_i = -np.imag(np.conj(V[i]) * (Y[i] @ V))
                s_i = np.real(s_inj[i]) + 1j * q_i
            else:
                s_i = s_inj[i]
            v_new = (np.conj(s_i / V[i]) - i_others) / Y[i, i]
            if i in vset:
                v_new = vset[i] * v_new / abs(v_new)
            max_dv = max(max_dv, abs(v_new - V[i]))
            V[i] = v_new
        if max_dv < tol:
            return V, True
    return V, False


def penalty_solve(ps, x0=None, stages=14, rho0=10.0, rho_growth=4.0,
                  maxiter=2000):
    """Augmented-Lagrangian penalty method for a ProblemSpec.

    Classic method of multipliers: minimize the shifted quadratic penalty
    with L-BFGS-B (bounds native), update multiplier estimates, grow the
    penalty weight. Moderate weights keep the subproblems well conditioned,
    so constraint violations reach ~1e-9 where plain quadratic penalties
    stall. Returns (x, objective at x).
    """
    x = np.clip(ps.x0 if x0 is None else x0, ps.lower, ps.upper)
    bounds = list(zip(
        np.where(np.isfinite(ps.lower), ps.lower, -1e12),
        np.where(np.isfinite(ps.upper), ps.upper, 1e12)))
    lam = np.zeros(len(ps.eq_names))
    mu = np.zeros(len(ps.ineq_names))
    rho = rho0
    for _ in range(stages):
        def fun(z):
            f = ps.objective(z)
            g = ps.gradient(z)
            if ps.eq_names:
                h = ps.eq_fun(z)
                J = ps.eq_jac(z).toarray()
                f += float(lam @ h) + rho * float(h @ h)
                g = g + J.T @ (lam + 2.0 * rho * h)
            if ps.ineq_names:
                c = ps.ineq_fun(z)
                Jc = ps.ineq_jac(z).toarray()
                shifted = np.maximum(mu / (2.0 * rho) + c, 0.0)
                f += rho * float(shifted @ shifted) - float(mu @ mu) / (4.0 * rho)
                g = g + Jc.T @ (2.0 * rho * shifted)
            return f, g

        res = minimize(fun, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter, "ftol": 1e-16,
                                "gtol": 1e-11, "maxcor": 30, "maxls": 60})
        x = res.x
        if ps.eq_names:
            lam = lam + 2.0 * rho * ps.eq_fun(x)
        if ps.ineq_names:
            mu = np.maximum(mu + 2.0 * rho * ps.ineq_fun(x), 0.0)
        if ps.feasibility(x) <= 1e-10:
            break
        rho *= rho_growth
    x = _restore_feasibility(ps, x)
    return x, float(ps.objective(x))


def _restore_feasibility(ps, x, iters=12):
    """Gauss-Newton projection onto the active constraint manifold.

    The penalty stages leave a small residual; minimum-norm Newton steps on
    the equalities (plus any violated inequalities) remove it with a
    second-order-small change to the objective. Pinned variables (equal
    bounds) are excluded from the step so clipping cannot undo it.
    """
    free = ps.upper - ps.lower > 1e-15
    for _ in range(iters):
        rows = []
        vals = []
        if ps.eq_names:
            h = ps.eq_fun(x)
            J = ps.eq_jac(x).toarray()
            rows.extend(J)
            vals.extend(h)
        if ps.ineq_names:
            c = ps.ineq_fun(x)
            Jc = ps.ineq_jac(x).toarray()
            for k in np.flatnonzero(c > 0):
                rows.append(Jc[k])
                vals.append(c[k])
        if not rows or max(abs(v) for v in vals) <= 1e-11:
            break
        A = np.array(rows)[:, free]
        b = np.array(vals)
        step_free, *_ = np.linalg.lstsq(A, -b, rcond=None)
        step = np.zeros_like(x)
        step[free] = step_free
        x = np.clip(x + step, ps.lower, ps.upper)
    return x


def fd_jacobian(f, x, h=1e-6):
    """Central finite differences of a vector- or scalar-valued function."""
    f0 = np.atleast_1d(f(x))
    J = np.zeros((len(f0), len(x)))
    for j in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2 * h)
    return J
