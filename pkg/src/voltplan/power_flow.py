"""Newton power flow in rectangular voltage coordinates.

State is (v_r, v_i) per bus. Branch currents follow the two-port model with
the tap/phase shifter on the from side:

    I_from = (y + j*b_c/2) / tau^2 * V_f  -  y * e^{+j*phi} / tau * V_t
    I_to   = (y + j*b_c/2)         * V_t  -  y * e^{-j*phi} / tau * V_f

with y = series_g + j*series_b and b_c the total line charging. Power
balance at each bus nets generation, demand, PV output, demand response,
and shunt injections (fixed + switched + planned capacitor/inductor)
against the complex power flowing into all incident circuits.
"""

from __future__ import annotations

import cmath
import time
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid_model import Branch, Network
from .timeseries import ScenarioSnapshot


class PowerFlowError(Exception):
    pass


class SingularJacobianError(PowerFlowError):
    def __init__(self, iteration: int, bus: str | None):
        where = f" (suspect bus {bus})" if bus else ""
        super().__init__(f"singular Jacobian at iteration {iteration}{where}")
        self.iteration = iteration
        self.bus = bus


@dataclass
class VoltageState:
    v_r: np.ndarray
    v_i: np.ndarray

    @property
    def complex(self) -> np.ndarray:
        return self.v_r + 1j * self.v_i

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.v_r, self.v_i)

    def copy(self) -> "VoltageState":
        return VoltageState(self.v_r.copy(), self.v_i.copy())


@dataclass
class ControlSet:
    """Fixed control values for a power-flow solve.

    gen_q and slack_p are placeholders on input (the solver determines
    them); every other field is held fixed. Arrays align with the network's
    canonical element ordering (see PowerFlowModel index maps).
    """

    gen_q: np.ndarray
    slack_p: float
    shunt_steps: np.ndarray       # one entry per (shunt, block), flattened
    pv_q: np.ndarray
    pv_curtail: np.ndarray
    dr_q: np.ndarray              # per bus
    b_plus: np.ndarray            # per candidate bus
    b_minus: np.ndarray

    @classmethod
    def schedule(cls, net: Network, snap: ScenarioSnapshot | None = None) -> "ControlSet":
        """Controls at schedule/initial values: switched shunts at their
        initial steps, PV at zero reactive output and zero curtailment,
        no demand response, no planned equipment."""
        steps = [float(blk.initial_steps) for s in net.switched_shunts for blk in s.blocks]
        n_pv = len(net.pv_resources)
        return cls(
            gen_q=np.zeros(len(net.generators)),
            slack_p=0.0,
            shunt_steps=np.array(steps, dtype=float),
            pv_q=np.zeros(n_pv),
            pv_curtail=np.zeros(n_pv),
            dr_q=np.zeros(len(net.buses)),
            b_plus=np.zeros(len(net.candidate_buses)),
            b_minus=np.zeros(len(net.candidate_buses)),
        )


@dataclass
class PowerFlowOptions:
    tol: float = 1e-8
    max_iter: int = 20
    enforce_q_limits: bool = True
    max_q_rounds: int = 6
    start: VoltageState | None = None


@dataclass
class PowerFlowSolution:
    state: VoltageState
    converged: bool
    iterations: int
    max_residual: float
    i_from: np.ndarray     # complex from-side current per branch
    i_to: np.ndarray       # complex to-side current per branch
    v_mag: np.ndarray
    gen_q: np.ndarray      # recovered reactive output per generator
    slack_p: float         # recovered slack-unit real output
    q_limited_buses: tuple[str, ...] = ()


def branch_currents(state: VoltageState, br: Branch, net: Network) -> tuple[float, float]:
    """From-side branch current (real, imaginary) for a single branch."""
    i = net.bus_index[br.from_bus]
    j = net.bus_index[br.to_bus]
    y = br.series_g + 1j * br.series_b
    yff = (y + 1j * br.charging_b / 2.0) / br.tap_ratio**2
    yft = -y * cmath.exp(1j * br.phase_shift) / br.tap_ratio
    cur = yff * (state.v_r[i] + 1j * state.v_i[i]) + yft * (state.v_r[j] + 1j * state.v_i[j])
    return cur.real, cur.imag


def branch_currents_to(state: VoltageState, br: Branch, net: Network) -> tuple[float, float]:
    """To-side branch current, measured flowing from the to bus into the line."""
    i = net.bus_index[br.from_bus]
    j = net.bus_index[br.to_bus]
    y = br.series_g + 1j * br.series_b
    ytt = y + 1j * br.charging_b / 2.0
    ytf = -y * cmath.exp(-1j * br.phase_shift) / br.tap_ratio
    cur = ytt * (state.v_r[j] + 1j * state.v_i[j]) + ytf * (state.v_r[i] + 1j * state.v_i[i])
    return cur.real, cur.imag


class PowerFlowModel:
    """Per-Network assembly cache: admittances, index maps, bus partitions.

    Instances hold no per-solve state; one model can serve concurrent
    solves over the same immutable Network.
    """

    def __init__(self, net: Network):
        self.net = net
        n = len(net.buses)
        self.n = n
        self.f_idx = np.array([net.bus_index[b.from_bus] for b in net.branches], dtype=int)
        self.t_idx = np.array([net.bus_index[b.to_bus] for b in net.branches], dtype=int)

        y = np.array([b.series_g + 1j * b.series_b for b in net.branches])
        bc = np.array([b.charging_b for b in net.branches])
        tau = np.array([b.tap_ratio for b in net.branches])
        shift = np.exp(1j * np.array([b.phase_shift for b in net.branches]))
        self.yff = (y + 0.5j * bc) / tau**2
        self.yft = -y * shift / tau
        self.ytf = -y / (shift * tau)
        self.ytt = y + 0.5j * bc

        nb = len(net.branches)
        rows = np.concatenate([self.f_idx, self.f_idx, self.t_idx, self.t_idx])
        cols = np.concatenate([self.f_idx, self.t_idx, self.t_idx, self.f_idx])
        vals = np.concatenate([self.yff, self.yft, self.ytt, self.ytf])
        self.ybus = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self.G = sp.csr_matrix(self.ybus.real)
        self.B = sp.csr_matrix(self.ybus.imag)
        # dense mirrors for the small-system fast path
        self.dense = n <= 200
        if self.dense:
            self.ybus_d = self.ybus.toarray()
            self.Gd = self.ybus_d.real.copy()
            self.Bd = self.ybus_d.imag.copy()

        self.g_s = np.array([b.shunt_g for b in net.buses])
        self.b_s = np.array([b.shunt_b for b in net.buses])

        # switched shunt blocks, flattened in (shunt, block) order
        self.shunt_bus_idx = np.array(
            [net.bus_index[s.bus] for s in net.switched_shunts for _ in s.blocks],
            dtype=int,
        )
        self.shunt_step_b = np.array(
            [blk.step_b for s in net.switched_shunts for blk in s.blocks]
        )
        self.shunt_max_steps = np.array(
            [blk.max_steps for s in net.switched_shunts for blk in s.blocks], dtype=float
        )
        self.shunt_initial = np.array(
            [blk.initial_steps for s in net.switched_shunts for blk in s.blocks], dtype=float
        )

        self.pv_bus_idx = np.array(
            [net.bus_index[p.bus] for p in net.pv_resources], dtype=int
        )
        self.gen_bus_idx = np.array(
            [net.bus_index[g.bus] for g in net.generators], dtype=int
        )
        self.cand_bus_idx = np.array(
            [net.bus_index[c] for c in net.candidate_buses], dtype=int
        )
        self.slack_bus = net.bus_index[net.slack_bus]
        slack_units = [k for k, g in enumerate(net.generators) if g.is_slack_unit]
        self.slack_gen = slack_units[0]

        # voltage-regulated buses: any bus carrying a generator
        self.vset = np.full(n, np.nan)
        for g in net.generators:
            self.vset[net.bus_index[g.bus]] = g.v_sched
        self.gen_buses = np.unique(self.gen_bus_idx)
        self.pv_buses = np.array(
            [b for b in self.gen_buses if b != self.slack_bus], dtype=int
        )

        self.target_idx = np.array(
            [net.bus_index[b] for b in net.target_buses], dtype=int
        )
        self.v_target = np.array(
            [net.bus(b).v_target for b in net.target_buses], dtype=float
        )

        # per-bus generator Q ranges for limit checking
        self.bus_q_min = np.zeros(n)
        self.bus_q_max = np.zeros(n)
        for g in net.generators:
            k = net.bus_index[g.bus]
            self.bus_q_min[k] += g.q_min
            self.bus_q_max[k] += g.q_max

    def total_shunt_b(self, ctrl: ControlSet) -> np.ndarray:
        b = self.b_s.copy()
        if len(self.shunt_bus_idx):
            np.add.at(b, self.shunt_bus_idx, self.shunt_step_b * ctrl.shunt_steps)
        if len(self.cand_bus_idx):
            np.add.at(b, self.cand_bus_idx, ctrl.b_plus - ctrl.b_minus)
        return b

    def injections(self, snap: ScenarioSnapshot, ctrl: ControlSet) -> tuple[np.ndarray, np.ndarray]:
        """Net scheduled P and Q injection per bus (excluding shunts/lines).

        The slack unit's P and every generator's Q enter as given in ctrl;
        the Newton solve overrides them implicitly via its bus equations.
        """
        p = -snap.d_p.copy()
        q = -snap.d_q + ctrl.dr_q
        for k, g in enumerate(self.net.generators):
            kb = self.gen_bus_idx[k]
            p[kb] += ctrl.slack_p if g.is_slack_unit else g.p_sched
            q[kb] += ctrl.gen_q[k]
        if len(self.pv_bus_idx):
            np.add.at(p, self.pv_bus_idx, snap.pv_p_mpp - ctrl.pv_curtail)
            np.add.at(q, self.pv_bus_idx, ctrl.pv_q)
        return p, q

    def line_currents(self, vr: np.ndarray, vi: np.ndarray) -> np.ndarray:
        if self.dense:
            return self.ybus_d @ (vr + 1j * vi)
        return self.ybus @ (vr + 1j * vi)

    def balance_residuals(self, snap, ctrl, vr, vi) -> tuple[np.ndarray, np.ndarray]:
        """dP, dQ per bus (full balance equations at every bus)."""
        p_inj, q_inj = self.injections(snap, ctrl)
        b_tot = self.total_shunt_b(ctrl)
        i_line = self.line_currents(vr, vi)
        ir, ii = i_line.real, i_line.imag
        vsq = vr**2 + vi**2
        dp = p_inj - self.g_s * vsq - (vr * ir + vi * ii)
        dq = q_inj + b_tot * vsq - (vi * ir - vr * ii)
        return dp, dq

    def balance_jacobian(self, ctrl, vr, vi) -> tuple[sp.csr_matrix, ...]:
        """Blocks d(dP)/dvr, d(dP)/dvi, d(dQ)/dvr, d(dQ)/dvi as csr."""
        i_line = self.line_currents(vr, vi)
        ir, ii = i_line.real, i_line.imag
        b_tot = self.total_shunt_b(ctrl)
        G, B = self.G, self.B
        dVr = sp.diags(vr)
        dVi = sp.diags(vi)
        dp_dvr = -sp.diags(2 * self.g_s * vr + ir) - dVr @ G - dVi @ B
        dp_dvi = -sp.diags(2 * self.g_s * vi + ii) + dVr @ B - dVi @ G
        dq_dvr = sp.diags(2 * b_tot * vr + ii) - dVi @ G + dVr @ B
        dq_dvi = sp.diags(2 * b_tot * vi - ir) + dVi @ B + dVr @ G
        return (dp_dvr.tocsr(), dp_dvi.tocsr(), dq_dvr.tocsr(), dq_dvi.tocsr())

    def balance_jacobian_dense(self, ctrl, vr, vi) -> tuple[np.ndarray, ...]:
        """Same blocks as balance_jacobian, dense (small systems only)."""
        i_line = self.line_currents(vr, vi)
        ir, ii = i_line.real, i_line.imag
        b_tot = self.total_shunt_b(ctrl)
        G, B = self.Gd, self.Bd
        vrG = vr[:, None] * G
        vrB = vr[:, None] * B
        viG = vi[:, None] * G
        viB = vi[:, None] * B
        n = self.n
        eye = np.arange(n)
        dp_dvr = -vrG - viB
        dp_dvr[eye, eye] -= 2 * self.g_s * vr + ir
        dp_dvi = vrB - viG
        dp_dvi[eye, eye] -= 2 * self.g_s * vi + ii
        dq_dvr = vrB - viG
        dq_dvr[eye, eye] += 2 * b_tot * vr + ii
        dq_dvi = viB + vrG
        dq_dvi[eye, eye] += 2 * b_tot * vi - ir
        return dp_dvr, dp_dvi, dq_dvr, dq_dvi


def residuals(net: Network, snap: ScenarioSnapshot, state: VoltageState,
              ctrl: ControlSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus real/reactive power balance residuals for a given state."""
    return PowerFlowModel(net).balance_residuals(snap, ctrl, state.v_r, state.v_i)


def _newton(model: PowerFlowModel, snap, ctrl, vr, vi, pq_fix_q, regulated,
            tol, max_iter):
    """Newton iteration on the active equation set.

    regulated: boolean mask of buses holding |V| = vset (slack excluded);
    pq_fix_q: additional fixed Q injection for buses demoted from regulation
    (Q clamped at a generator limit).
    """
    n = model.n
    slack = model.slack_bus
    vset = model.vset
    keep_q = np.ones(n)
    keep_q[regulated] = 0.0
    keep_q[slack] = 0.0
    keep_p = np.ones(n)
    keep_p[slack] = 0.0

    iterations = 0
    for it in range(max_iter + 1):
        dp, dq = model.balance_residuals(snap, ctrl, vr, vi)
        dq = dq + pq_fix_q
        f_p = keep_p * dp
        f_p[slack] = vset[slack] - vr[slack]
        f_q = keep_q * dq
        f_q[slack] = -vi[slack]
        reg = np.flatnonzero(regulated)
        f_q[reg] = vset[reg] ** 2 - (vr[reg] ** 2 + vi[reg] ** 2)
        f = np.concatenate([f_p, f_q])
        max_res = float(np.max(np.abs(f))) if len(f) else 0.0
        if max_res <= tol:
            return vr, vi, True, iterations, max_res
        if it == max_iter:
            return vr, vi, False, iterations, max_res

        if model.dense:
            jp_r, jp_i, jq_r, jq_i = model.balance_jacobian_dense(ctrl, vr, vi)
            J = np.empty((2 * n, 2 * n))
            J[:n, :n] = keep_p[:, None] * jp_r
            J[:n, n:] = keep_p[:, None] * jp_i
            J[n:, :n] = keep_q[:, None] * jq_r
            J[n:, n:] = keep_q[:, None] * jq_i
            J[slack, :] = 0.0
            J[slack, slack] = -1.0
            J[n + slack, :] = 0.0
            J[n + slack, n + slack] = -1.0
            J[n + reg, :] = 0.0
            J[n + reg, reg] = -2.0 * vr[reg]
            J[n + reg, n + reg] = -2.0 * vi[reg]
        else:
            jp_r, jp_i, jq_r, jq_i = model.balance_jacobian(ctrl, vr, vi)
            Dp = sp.diags(keep_p)
            Dq = sp.diags(keep_q)
            top = sp.hstack([Dp @ jp_r, Dp @ jp_i], format="lil")
            bot = sp.hstack([Dq @ jq_r, Dq @ jq_i], format="lil")
            top[slack, :] = 0.0
            top[slack, slack] = -1.0
            bot[slack, :] = 0.0
            bot[slack, n + slack] = -1.0
            for k in reg:
                bot[k, :] = 0.0
                bot[k, k] = -2.0 * vr[k]
                bot[k, n + k] = -2.0 * vi[k]
            J = sp.vstack([top, bot]).tocsc()

        try:
            if model.dense:
                step = np.linalg.solve(J, -f)
            else:
                step = spla.spsolve(J, -f)
        except (np.linalg.LinAlgError, RuntimeError) as e:
            raise SingularJacobianError(it, _suspect_bus(model, J)) from e
        if not np.all(np.isfinite(step)):
            raise SingularJacobianError(it, _suspect_bus(model, J))
        vr = vr + step[:n]
        vi = vi + step[n:]
        # the slack voltage is pinned; keep it exact against solve round-off
        vr[slack] = vset[slack]
        vi[slack] = 0.0
        iterations += 1
    return vr, vi, False, iterations, max_res


def _suspect_bus(model: PowerFlowModel, J) -> str | None:
    d = np.abs(J.diagonal())
    if len(d) == 0:
        return None
    k = int(np.argmin(d)) % model.n
    return model.net.buses[k].id


def solve_power_flow(net: Network, snap: ScenarioSnapshot, ctrl: ControlSet,
                     opts: PowerFlowOptions = PowerFlowOptions(),
                     model: PowerFlowModel | None = None) -> PowerFlowSolution:
    """Full Newton solve with analytic Jacobian and PV/PQ switching.

    Generator buses hold |V| at the scheduled value while their aggregate
    reactive output stays within limits; buses that would violate a limit
    are re-solved with Q clamped there. Non-convergence is reported, never
    retried from a different start.
    """
    model = model or PowerFlowModel(net)
    n = model.n
    if opts.start is not None:
        vr = opts.start.v_r.copy()
        vi = opts.start.v_i.copy()
    else:
        vr = np.ones(n)
        vi = np.zeros(n)
        vr[model.gen_buses] = model.vset[model.gen_buses]

    regulated = np.zeros(n, dtype=bool)
    regulated[model.pv_buses] = True
    pq_fix_q = np.zeros(n)
    q_limited: list[str] = []
    total_iters = 0
    rounds = opts.max_q_rounds if opts.enforce_q_limits else 1

    for _ in range(rounds):
        vr, vi, converged, iters, max_res = _newton(
            model, snap, ctrl, vr, vi, pq_fix_q, regulated, opts.tol, opts.max_iter
        )
        total_iters += iters
        if not converged:
            break
        if not opts.enforce_q_limits:
            break
        # aggregate generator Q needed at each regulated bus
        dp, dq = model.balance_residuals(snap, ctrl, vr, vi)
        switched = False
        for kb in np.flatnonzero(regulated):
            q_needed = -dq[kb]  # extra Q beyond scheduled values
            q_total = q_needed + sum(
                ctrl.gen_q[k] for k in range(len(net.generators))
                if model.gen_bus_idx[k] == kb
            )
            lo, hi = model.bus_q_min[kb], model.bus_q_max[kb]
            if q_total < lo - 1e-9 or q_total > hi + 1e-9:
                clamp = lo if q_total < lo else hi
                regulated[kb] = False
                # remove scheduled gen_q at this bus, inject the clamp instead
                sched = sum(
                    ctrl.gen_q[k] for k in range(len(net.generators))
                    if model.gen_bus_idx[k] == kb
                )
                pq_fix_q[kb] = clamp - sched
                q_limited.append(net.buses[kb].id)
                switched = True
        if not switched:
            break

    state = VoltageState(vr, vi)
    v = vr + 1j * vi
    i_from = model.yff * v[model.f_idx] + model.yft * v[model.t_idx]
    i_to = model.ytt * v[model.t_idx] + model.ytf * v[model.f_idx]
    gen_q, slack_p = _recover_dispatch(model, snap, ctrl, vr, vi, pq_fix_q, regulated)
    return PowerFlowSolution(
        state=state,
        converged=converged,
        iterations=total_iters,
        max_residual=max_res,
        i_from=i_from,
        i_to=i_to,
        v_mag=np.hypot(vr, vi),
        gen_q=gen_q,
        slack_p=slack_p,
        q_limited_buses=tuple(q_limited),
    )


def _recover_dispatch(model, snap, ctrl, vr, vi, pq_fix_q, regulated):
    """Back out generator Q and slack P from the converged balance."""
    net = model.net
    dp, dq = model.balance_residuals(snap, ctrl, vr, vi)
    gen_q = ctrl.gen_q.copy()
    handled = set()
    for k, g in enumerate(net.generators):
        kb = model.gen_bus_idx[k]
        if kb in handled:
            continue
        units = [j for j in range(len(net.generators)) if model.gen_bus_idx[j] == kb]
        if regulated[kb] or kb == model.slack_bus:
            need = -dq[kb] + sum(ctrl.gen_q[j] for j in units)
        else:
            # demoted or plain PQ bus with generators: clamped injection
            need = pq_fix_q[kb] + sum(ctrl.gen_q[j] for j in units)
        weights = np.array(
            [max(net.generators[j].q_max - net.generators[j].q_min, 1e-12) for j in units]
        )
        mins = np.array([net.generators[j].q_min for j in units])
        share = mins + (need - mins.sum()) * weights / weights.sum()
        for j, val in zip(units, share):
            gen_q[j] = val
        handled.add(kb)
    slack_p = ctrl.slack_p - dp[model.slack_bus]
    return gen_q, slack_p


def deviation_index(sol: PowerFlowSolution, net: Network) -> float:
    """Sum over target load buses of | |V_i| - v_target_i |."""
    if not sol.converged:
        raise PowerFlowError("deviation index requires a converged solution")
    model_idx = [net.bus_index[b] for b in net.target_buses]
    targets = np.array([net.bus(b).v_target for b in net.target_buses])
    if not model_idx:
        return 0.0
    return float(np.abs(sol.v_mag[model_idx] - targets).sum())


def violation_metric(sol: PowerFlowSolution, net: Network, deadband: float) -> float:
    """Dead-band-clipped deviation: sum of max(0, | |V|-target | - deadband)."""
    if deadband < 0:
        raise ValueError("deadband must be >= 0")
    if not sol.converged:
        raise PowerFlowError("violation metric requires a converged solution")
    model_idx = [net.bus_index[b] for b in net.target_buses]
    if not model_idx:
        return 0.0
    targets = np.array([net.bus(b).v_target for b in net.target_buses])
    dev = np.abs(sol.v_mag[model_idx] - targets)
    return float(np.maximum(dev - deadband, 0.0).sum())


def solve_snapshot(net: Network, snap: ScenarioSnapshot,
                   opts: PowerFlowOptions = PowerFlowOptions(),
                   model: PowerFlowModel | None = None) -> PowerFlowSolution:
    """Schedule-controlled power flow: the screening/baseline configuration."""
    return solve_power_flow(net, snap, ControlSet.schedule(net, snap), opts, model=model)
