"""Planning and operational OPF assembly plus the NLP driver.

Both OPF flavours share one variable layout (rectangular bus voltages,
generator reactive outputs, slack real output, switched-shunt steps, PV
reactive support and curtailment, demand response). The planning problem
adds per-candidate install decisions X+/X- relaxed to [0, 1] and continuous
capacitor/inductor susceptances B+/B- coupled through X*Bmin <= B <= X*Bmax,
and minimizes investment cost. The operational problem keeps existing
assets only and minimizes network losses plus a quadratic penalty on
dead-band slack.

Problems are generic smooth NLPs with sparse first derivatives; solve_nlp
drives scipy's trust-region interior-point method (SLSQP as an alternate)
and certifies the result with an in-house KKT check, so a claimed optimum
is never reported without verified feasibility and stationarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, NonlinearConstraint, minimize

from .grid_model import EquipmentCatalog, Network
from .power_flow import (ControlSet, PowerFlowModel, PowerFlowOptions,
                         VoltageState, solve_power_flow)
from .timeseries import ScenarioSnapshot


class OpfBuildError(Exception):
    pass


@dataclass
class ProblemSpec:
    """A smooth constrained NLP: min f(x) s.t. eq(x) = 0, ineq(x) <= 0,
    lower <= x <= upper. Derivative evaluators return scipy sparse
    matrices with a fixed sparsity pattern."""

    var_names: list[str]
    lower: np.ndarray
    upper: np.ndarray
    x0: np.ndarray
    x0_flat: np.ndarray
    objective: callable
    gradient: callable
    eq_fun: callable
    eq_jac: callable
    ineq_fun: callable
    ineq_jac: callable
    eq_names: list[str]
    ineq_names: list[str]
    hess: callable | None = None
    eq_jac_dense: callable | None = None    # same values as eq_jac, ndarray
    ineq_jac_dense: callable | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.var_names)

    def feasibility(self, x: np.ndarray) -> float:
        """Max constraint violation (equalities, inequalities, bounds)."""
        viol = 0.0
        if self.eq_names:
            viol = max(viol, float(np.max(np.abs(self.eq_fun(x)))))
        if self.ineq_names:
            viol = max(viol, float(np.max(np.maximum(self.ineq_fun(x), 0.0), initial=0.0)))
        viol = max(viol, float(np.max(np.maximum(self.lower - x, 0.0), initial=0.0)))
        viol = max(viol, float(np.max(np.maximum(x - self.upper, 0.0), initial=0.0)))
        return viol


@dataclass
class NlpSolution:
    point: np.ndarray
    objective_value: float
    kkt_stationarity: float
    feasibility: float
    complementarity: float
    status: str  # optimal | infeasible_detected | iteration_limit | numerical_failure
    iterations: int
    message: str = ""


@dataclass
class NlpOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-5
    max_iter: int = 300
    start: str = "warm"  # warm | flat
    method: str = "slsqp"  # slsqp | trust-constr; the other is the fallback
    ftol: float = 1e-12   # slsqp objective-change stop; loosen for bulk runs
    multistart: bool = False  # solve from both starts, keep the best optimum


@dataclass
class OpfOptions:
    """Shared builder knobs. deadband overrides the per-bus dead band when
    set; weight_v is the quadratic slack penalty of the operational mode."""

    deadband: float | None = None
    weight_v: float = 1000.0
    cost_scale: float = 1e6
    enforce_v_bounds: bool = False
    warm_start: VoltageState | None = None


class _Layout:
    """Name -> contiguous index range in the flat variable vector."""

    def __init__(self):
        self.blocks: dict[str, tuple[int, int]] = {}
        self.size = 0

    def add(self, name: str, count: int) -> None:
        self.blocks[name] = (self.size, count)
        self.size += count

    def idx(self, name: str) -> np.ndarray:
        start, count = self.blocks.get(name, (0, 0))
        return np.arange(start, start + count)

    def has(self, name: str) -> bool:
        return self.blocks.get(name, (0, 0))[1] > 0


def _coo(rows, cols, vals, shape) -> sp.csr_matrix:
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def build_planning_problem(net: Network, snap: ScenarioSnapshot,
                           fixed_plus: tuple[str, ...] = (),
                           fixed_minus: tuple[str, ...] = (),
                           opts: OpfOptions = OpfOptions(),
                           model: PowerFlowModel | None = None) -> ProblemSpec:
    """Relaxed var-planning OPF for one snapshot.

    Candidates in fixed_plus / fixed_minus have their install decision
    pinned to 1 (sizes stay continuous). Objective is investment cost in
    units of cost_scale currency.
    """
    unknown = (set(fixed_plus) | set(fixed_minus)) - set(net.candidate_buses)
    if unknown:
        raise OpfBuildError(f"fixed locations not in candidate set: {sorted(unknown)}")
    return _build_opf(net, snap, "planning", tuple(fixed_plus), tuple(fixed_minus),
                      opts, model)


def build_operational_problem(net: Network, snap: ScenarioSnapshot,
                              opts: OpfOptions = OpfOptions(),
                              model: PowerFlowModel | None = None) -> ProblemSpec:
    """Loss-minimizing operational OPF over existing assets with soft
    dead-band slacks (weight_v per pu^2)."""
    return _build_opf(net, snap, "operational", (), (), opts, model)


def _build_opf(net, snap, mode, fixed_plus, fixed_minus, opts, model=None):
    model = model or PowerFlowModel(net)
    n = model.n
    if len(snap.d_p) != n:
        raise OpfBuildError("snapshot/network mismatch: demand vector length")
    n_gen = len(net.generators)
    n_pv = len(net.pv_resources)
    n_blk = len(model.shunt_step_b)
    dr_buses = [i for i, b in enumerate(net.buses) if b.dr_q_min < 0 or b.dr_q_max > 0]
    n_dr = len(dr_buses)
    cands = net.candidate_buses
    n_c = len(cands) if mode == "planning" else 0
    targets = list(net.target_buses)
    t_idx = np.array([net.bus_index[b] for b in targets], dtype=int)
    v_tgt = np.array([net.bus(b).v_target for b in targets])
    if opts.deadband is not None:
        db = np.full(len(targets), float(opts.deadband))
    else:
        db = np.array([net.bus(b).v_deadband for b in targets])
    n_t = len(targets)
    n_s = n_t if mode == "operational" else 0
    slack = model.slack_bus
    vset_slack = net.generators[model.slack_gen].v_sched
    cat = net.equipment_catalog

    lay = _Layout()
    lay.add("vr", n)
    lay.add("vi", n)
    lay.add("qg", n_gen)
    lay.add("pg_slack", 1)
    lay.add("xsh", n_blk)
    lay.add("pvq", n_pv)
    lay.add("pvc", n_pv)
    lay.add("qdr", n_dr)
    if mode == "planning":
        lay.add("xcap", n_c)
        lay.add("xind", n_c)
        lay.add("bcap", n_c)
        lay.add("bind", n_c)
    else:
        lay.add("sdev", n_s)
    N = lay.size

    i_vr, i_vi = lay.idx("vr"), lay.idx("vi")
    i_qg, i_pg = lay.idx("qg"), lay.idx("pg_slack")
    i_xsh, i_pvq, i_pvc = lay.idx("xsh"), lay.idx("pvq"), lay.idx("pvc")
    i_qdr = lay.idx("qdr")
    i_xc, i_xi = lay.idx("xcap"), lay.idx("xind")
    i_bc, i_bi = lay.idx("bcap"), lay.idx("bind")
    i_s = lay.idx("sdev")

    lower = np.full(N, -np.inf)
    upper = np.full(N, np.inf)
    lower[i_vr], upper[i_vr] = 0.2, 1.6
    lower[i_vi], upper[i_vi] = -1.0, 1.0
    lower[i_vr[slack]] = upper[i_vr[slack]] = vset_slack
    lower[i_vi[slack]] = upper[i_vi[slack]] = 0.0
    for k, g in enumerate(net.generators):
        lower[i_qg[k]], upper[i_qg[k]] = g.q_min, g.q_max
    lower[i_xsh] = 0.0
    upper[i_xsh] = model.shunt_max_steps
    for k, pv in enumerate(net.pv_resources):
        lower[i_pvq[k]], upper[i_pvq[k]] = snap.pv_q_min[k], snap.pv_q_max[k]
        lower[i_pvc[k]] = 0.0
        upper[i_pvc[k]] = pv.max_curtail_fraction * snap.pv_p_mpp[k]
    for j, kb in enumerate(dr_buses):
        lower[i_qdr[j]] = net.buses[kb].dr_q_min
        upper[i_qdr[j]] = net.buses[kb].dr_q_max
    if mode == "planning":
        lower[i_xc], upper[i_xc] = 0.0, 1.0
        lower[i_xi], upper[i_xi] = 0.0, 1.0
        for j, c in enumerate(cands):
            if c in fixed_plus:
                lower[i_xc[j]] = 1.0
            if c in fixed_minus:
                lower[i_xi[j]] = 1.0
        lower[i_bc], upper[i_bc] = 0.0, cat.b_plus_max
        lower[i_bi], upper[i_bi] = 0.0, cat.b_minus_max
    else:
        lower[i_s], upper[i_s] = 0.0, np.inf

    var_names = (
        [f"vr[{b.id}]" for b in net.buses] + [f"vi[{b.id}]" for b in net.buses]
        + [f"qg[{g.id}]" for g in net.generators] + ["pg_slack"]
        + [f"xsh[{net.buses[kb].id}:{j}]" for j, kb in enumerate(model.shunt_bus_idx)]
        + [f"pvq[{p.bus}]" for p in net.pv_resources]
        + [f"pvc[{p.bus}]" for p in net.pv_resources]
        + [f"qdr[{net.buses[kb].id}]" for kb in dr_buses]
    )
    if mode == "planning":
        var_names += ([f"xcap[{c}]" for c in cands] + [f"xind[{c}]" for c in cands]
                      + [f"bcap[{c}]" for c in cands] + [f"bind[{c}]" for c in cands])
    else:
        var_names += [f"sdev[{b}]" for b in targets]

    dr_bus_arr = np.array(dr_buses, dtype=int)
    fixed_gen_p = sum(g.p_sched for g in net.generators if not g.is_slack_unit)

    def controls_from_x(x: np.ndarray) -> ControlSet:
        if mode == "planning":
            n_cand_all = len(net.candidate_buses)
            bp = x[i_bc]
            bm = x[i_bi]
        else:
            bp = np.zeros(len(net.candidate_buses))
            bm = np.zeros(len(net.candidate_buses))
        dr_full = np.zeros(n)
        if n_dr:
            dr_full[dr_bus_arr] = x[i_qdr]
        return ControlSet(
            gen_q=x[i_qg], slack_p=float(x[i_pg[0]]), shunt_steps=x[i_xsh],
            pv_q=x[i_pvq], pv_curtail=x[i_pvc], dr_q=dr_full,
            b_plus=bp, b_minus=bm,
        )

    # --- equality constraints: power balance at all buses, |V| setpoints ---
    pv_reg_buses = [kb for kb in model.gen_buses if kb != slack]
    vset_at = {kb: model.vset[kb] for kb in pv_reg_buses}
    eq_names = ([f"p_balance[{b.id}]" for b in net.buses]
                + [f"q_balance[{b.id}]" for b in net.buses]
                + [f"gen_vset[{net.buses[kb].id}]" for kb in pv_reg_buses])
    n_eq = len(eq_names)

    def eq_fun(x):
        vr, vi = x[i_vr], x[i_vi]
        ctrl = controls_from_x(x)
        dp, dq = model.balance_residuals(snap, ctrl, vr, vi)
        vs = np.array([vr[kb] ** 2 + vi[kb] ** 2 - vset_at[kb] ** 2
                       for kb in pv_reg_buses])
        return np.concatenate([dp, dq, vs])

    gen_bus_rows = model.gen_bus_idx  # per generator, its bus row
    pv_bus_rows = model.pv_bus_idx
    shunt_bus_rows = model.shunt_bus_idx
    cand_rows = model.cand_bus_idx

    pv_reg_arr = np.array(pv_reg_buses, dtype=int)

    def eq_jac_dense(x):
        vr, vi = x[i_vr], x[i_vi]
        ctrl = controls_from_x(x)
        J = np.zeros((n_eq, N))
        if model.dense:
            jp_r, jp_i, jq_r, jq_i = model.balance_jacobian_dense(ctrl, vr, vi)
        else:
            jp_r, jp_i, jq_r, jq_i = (m.toarray() for m in
                                      model.balance_jacobian(ctrl, vr, vi))
        J[np.ix_(np.arange(n), i_vr)] = jp_r
        J[np.ix_(np.arange(n), i_vi)] = jp_i
        J[np.ix_(n + np.arange(n), i_vr)] = jq_r
        J[np.ix_(n + np.arange(n), i_vi)] = jq_i
        # controls in the P rows
        J[slack, i_pg[0]] = 1.0
        if n_pv:
            J[pv_bus_rows, i_pvc] += -1.0
        # controls in the Q rows
        J[n + gen_bus_rows, i_qg] += 1.0
        if n_pv:
            J[n + pv_bus_rows, i_pvq] += 1.0
        if n_dr:
            J[n + dr_bus_arr, i_qdr] += 1.0
        vsq = vr**2 + vi**2
        if n_blk:
            np.add.at(J, (n + shunt_bus_rows, i_xsh),
                      model.shunt_step_b * vsq[shunt_bus_rows])
        if mode == "planning" and n_c:
            J[n + cand_rows, i_bc] += vsq[cand_rows]
            J[n + cand_rows, i_bi] += -vsq[cand_rows]
        # |V| setpoint rows
        if len(pv_reg_arr):
            r = 2 * n + np.arange(len(pv_reg_arr))
            J[r, i_vr[pv_reg_arr]] = 2 * vr[pv_reg_arr]
            J[r, i_vi[pv_reg_arr]] = 2 * vi[pv_reg_arr]
        return J

    def eq_jac(x):
        return sp.csr_matrix(eq_jac_dense(x))

    # --- inequality constraints ---
    ineq_names: list[str] = []
    ineq_names += [f"deadband[{b}]" for b in targets]
    n_br = len(net.branches)
    ineq_names += [f"current_from[{k}]" for k in range(n_br)]
    ineq_names += [f"current_to[{k}]" for k in range(n_br)]
    ineq_names += [f"pv_ellipse[{p.bus}]" for p in net.pv_resources]
    if mode == "planning":
        ineq_names += [f"link_cap_lo[{c}]" for c in cands]
        ineq_names += [f"link_cap_hi[{c}]" for c in cands]
        ineq_names += [f"link_ind_lo[{c}]" for c in cands]
        ineq_names += [f"link_ind_hi[{c}]" for c in cands]
    vb_buses = []
    if opts.enforce_v_bounds:
        vb_buses = [i for i, b in enumerate(net.buses)
                    if b.v_min is not None and b.v_max is not None]
        ineq_names += [f"v_upper[{net.buses[i].id}]" for i in vb_buses]
        ineq_names += [f"v_lower[{net.buses[i].id}]" for i in vb_buses]
    n_ineq = len(ineq_names)
    cap2 = np.array([br.current_limit**2 for br in net.branches])
    s_rt = np.array([pv.s_rating for pv in net.pv_resources])
    k_f = np.array([pv.q_capability_factor for pv in net.pv_resources])
    vb_arr = np.array(vb_buses, dtype=int)
    vmax2 = np.array([net.buses[i].v_max**2 for i in vb_buses])
    vmin2 = np.array([net.buses[i].v_min**2 for i in vb_buses])

    def _currents(vr, vi):
        v = vr + 1j * vi
        i_f = model.yff * v[model.f_idx] + model.yft * v[model.t_idx]
        i_t = model.ytt * v[model.t_idx] + model.ytf * v[model.f_idx]
        return i_f, i_t

    def ineq_fun(x):
        vr, vi = x[i_vr], x[i_vi]
        out = np.empty(n_ineq)
        pos = 0
        vmag_t = np.hypot(vr[t_idx], vi[t_idx])
        dev = vmag_t - v_tgt
        if mode == "operational":
            out[pos:pos + n_t] = dev**2 - (db + x[i_s]) ** 2
        else:
            out[pos:pos + n_t] = dev**2 - db**2
        pos += n_t
        i_f, i_t = _currents(vr, vi)
        out[pos:pos + n_br] = np.abs(i_f) ** 2 - cap2
        pos += n_br
        out[pos:pos + n_br] = np.abs(i_t) ** 2 - cap2
        pos += n_br
        if n_pv:
            p_out = snap.pv_p_mpp - x[i_pvc]
            out[pos:pos + n_pv] = (p_out / s_rt) ** 2 + (x[i_pvq] / (k_f * s_rt)) ** 2 - 1.0
        pos += n_pv
        if mode == "planning" and n_c:
            out[pos:pos + n_c] = x[i_xc] * cat.b_plus_min - x[i_bc]
            pos += n_c
            out[pos:pos + n_c] = x[i_bc] - x[i_xc] * cat.b_plus_max
            pos += n_c
            out[pos:pos + n_c] = x[i_xi] * cat.b_minus_min - x[i_bi]
            pos += n_c
            out[pos:pos + n_c] = x[i_bi] - x[i_xi] * cat.b_minus_max
            pos += n_c
        if len(vb_arr):
            vsq = vr[vb_arr] ** 2 + vi[vb_arr] ** 2
            out[pos:pos + len(vb_arr)] = vsq - vmax2
            pos += len(vb_arr)
            out[pos:pos + len(vb_arr)] = vmin2 - vsq
            pos += len(vb_arr)
        return out

    fi, ti = model.f_idx, model.t_idx
    gff, bff = model.yff.real, model.yff.imag
    gft, bft = model.yft.real, model.yft.imag
    gtf, btf = model.ytf.real, model.ytf.imag
    gtt, btt = model.ytt.real, model.ytt.imag

    def ineq_jac_dense(x):
        vr, vi = x[i_vr], x[i_vi]
        J = np.zeros((n_ineq, N))

        def add(r, c, v):
            J[r, c] = v

        pos = 0
        vmag_t = np.maximum(np.hypot(vr[t_idx], vi[t_idx]), 1e-12)
        dev = vmag_t - v_tgt
        coef = 2.0 * dev / vmag_t
        r = np.arange(n_t)
        add(r, i_vr[t_idx], coef * vr[t_idx])
        add(r, i_vi[t_idx], coef * vi[t_idx])
        if mode == "operational":
            add(r, i_s, -2.0 * (db + x[i_s]))
        pos += n_t

        i_f, i_t = _currents(vr, vi)
        irf, iif = i_f.real, i_f.imag
        irt, iit = i_t.real, i_t.imag
        r = pos + np.arange(n_br)
        add(r, i_vr[fi], 2 * (irf * gff + iif * bff))
        add(r, i_vi[fi], 2 * (-irf * bff + iif * gff))
        add(r, i_vr[ti], 2 * (irf * gft + iif * bft))
        add(r, i_vi[ti], 2 * (-irf * bft + iif * gft))
        pos += n_br
        r = pos + np.arange(n_br)
        add(r, i_vr[ti], 2 * (irt * gtt + iit * btt))
        add(r, i_vi[ti], 2 * (-irt * btt + iit * gtt))
        add(r, i_vr[fi], 2 * (irt * gtf + iit * btf))
        add(r, i_vi[fi], 2 * (-irt * btf + iit * gtf))
        pos += n_br
        if n_pv:
            r = pos + np.arange(n_pv)
            add(r, i_pvc, -2 * (snap.pv_p_mpp - x[i_pvc]) / s_rt**2)
            add(r, i_pvq, 2 * x[i_pvq] / (k_f * s_rt) ** 2)
        pos += n_pv
        if mode == "planning" and n_c:
            r = pos + np.arange(n_c)
            add(r, i_xc, np.full(n_c, cat.b_plus_min))
            add(r, i_bc, -np.ones(n_c))
            pos += n_c
            r = pos + np.arange(n_c)
            add(r, i_bc, np.ones(n_c))
            add(r, i_xc, np.full(n_c, -cat.b_plus_max))
            pos += n_c
            r = pos + np.arange(n_c)
            add(r, i_xi, np.full(n_c, cat.b_minus_min))
            add(r, i_bi, -np.ones(n_c))
            pos += n_c
            r = pos + np.arange(n_c)
            add(r, i_bi, np.ones(n_c))
            add(r, i_xi, np.full(n_c, -cat.b_minus_max))
            pos += n_c
        if len(vb_arr):
            r = pos + np.arange(len(vb_arr))
            add(r, i_vr[vb_arr], 2 * vr[vb_arr])
            add(r, i_vi[vb_arr], 2 * vi[vb_arr])
            pos += len(vb_arr)
            r = pos + np.arange(len(vb_arr))
            add(r, i_vr[vb_arr], -2 * vr[vb_arr])
            add(r, i_vi[vb_arr], -2 * vi[vb_arr])
            pos += len(vb_arr)
        return J

    def ineq_jac(x):
        return sp.csr_matrix(ineq_jac_dense(x))

    # --- objective ---
    if mode == "planning":
        c0 = cat.cost_fixed / opts.cost_scale
        cp = cat.cost_cap_per_pu / opts.cost_scale
        cm = cat.cost_ind_per_pu / opts.cost_scale
        grad_const = np.zeros(N)
        grad_const[i_xc] = c0
        grad_const[i_xi] = c0
        grad_const[i_bc] = cp
        grad_const[i_bi] = cm

        def objective(x):
            return float(grad_const @ x)

        def gradient(x):
            return grad_const.copy()

        hess_const = sp.csc_matrix((N, N))

        def hess(x):
            return hess_const
    else:
        wv = opts.weight_v
        demand_total = float(snap.d_p.sum())
        pv_total = float(snap.pv_p_mpp.sum())

        def objective(x):
            losses = float(x[i_pg[0]]) + fixed_gen_p + pv_total - float(x[i_pvc].sum()) - demand_total
            return losses + wv * float((x[i_s] ** 2).sum())

        def gradient(x):
            g = np.zeros(N)
            g[i_pg] = 1.0
            g[i_pvc] = -1.0
            g[i_s] = 2.0 * wv * x[i_s]
            return g

        hd = np.zeros(N)
        hd[i_s] = 2.0 * wv

        def hess(x):
            return sp.diags(hd).tocsc()

    # --- starting points ---
    x0 = np.zeros(N)
    x0[i_vr] = 1.0
    x0[i_vr[model.gen_buses]] = model.vset[model.gen_buses]
    x0[i_xsh] = model.shunt_initial
    x0[i_qg] = np.clip(0.0, lower[i_qg], upper[i_qg])
    x0_flat = x0.copy()
    if mode == "planning":
        x0_flat[i_xc] = x0_flat[i_xi] = 0.05
        x0_flat[i_bc] = 0.05 * 0.5 * (cat.b_plus_min + cat.b_plus_max)
        x0_flat[i_bi] = 0.05 * 0.5 * (cat.b_minus_min + cat.b_minus_max)
        x0_flat[i_xc] = np.maximum(x0_flat[i_xc], lower[i_xc])
        x0_flat[i_xi] = np.maximum(x0_flat[i_xi], lower[i_xi])
        x0_flat[i_bc] = np.maximum(x0_flat[i_bc], lower[i_xc] * cat.b_plus_min)
        x0_flat[i_bi] = np.maximum(x0_flat[i_bi], lower[i_xi] * cat.b_minus_min)

    warm = opts.warm_start
    if warm is None:
        try:
            pf = solve_power_flow(net, snap, ControlSet.schedule(net, snap),
                                  PowerFlowOptions(), model=model)
            if pf.converged:
                warm = pf.state
                x0[i_qg] = np.clip(pf.gen_q, lower[i_qg], upper[i_qg])
                x0[i_pg] = pf.slack_p
        except Exception:
            warm = None
    if warm is not None:
        x0[i_vr] = np.clip(warm.v_r, lower[i_vr], upper[i_vr])
        x0[i_vi] = np.clip(warm.v_i, lower[i_vi], upper[i_vi])
    if mode == "operational":
        vmag_t = np.hypot(x0[i_vr][t_idx], x0[i_vi][t_idx])
        x0[i_s] = np.maximum(np.abs(vmag_t - v_tgt) - db, 0.0) + 1e-4
    else:
        x0[i_xc] = np.maximum(0.05, lower[i_xc])
        x0[i_xi] = np.maximum(0.05, lower[i_xi])
        x0[i_bc] = np.clip(x0[i_xc] * 0.5 * (cat.b_plus_min + cat.b_plus_max),
                           lower[i_bc], upper[i_bc])
        x0[i_bi] = np.clip(x0[i_xi] * 0.5 * (cat.b_minus_min + cat.b_minus_max),
                           lower[i_bi], upper[i_bi])
    x0 = np.clip(x0, lower, upper)
    x0_flat = np.clip(x0_flat, lower, upper)

    meta = {
        "mode": mode,
        "layout": dict(lay.blocks),
        "cost_scale": opts.cost_scale,
        "candidates": list(cands),
        "targets": targets,
        "deadband": db.tolist(),
        "fixed_plus": list(fixed_plus),
        "fixed_minus": list(fixed_minus),
        "weight_v": opts.weight_v,
    }
    return ProblemSpec(
        var_names=var_names, lower=lower, upper=upper, x0=x0, x0_flat=x0_flat,
        objective=objective, gradient=gradient,
        eq_fun=eq_fun, eq_jac=eq_jac, ineq_fun=ineq_fun, ineq_jac=ineq_jac,
        eq_names=eq_names, ineq_names=ineq_names, hess=hess,
        eq_jac_dense=eq_jac_dense, ineq_jac_dense=ineq_jac_dense, meta=meta,
    )


def kkt_diagnostics(ps: ProblemSpec, x: np.ndarray,
                    active_tol: float = 1e-6) -> tuple[float, float]:
    """Certify first-order conditions at x without trusting the solver.

    Fits multipliers for the active set (free on equalities, nonnegative on
    active inequalities and bounds) by projecting out the equality columns
    with a QR factorization and solving NNLS for the rest. Returns
    (stationarity, complementarity) as infinity norms, stationarity scaled
    by max(1, |grad f|).
    """
    from scipy.optimize import nnls

    g = ps.gradient(x)
    n = len(x)
    free_cols: list[np.ndarray] = []
    if ps.eq_names:
        free_cols = list(ps.eq_jac(x).toarray())
    pos_cols: list[np.ndarray] = []
    act_vals: list[float] = []
    if ps.ineq_names:
        c = ps.ineq_fun(x)
        J = ps.ineq_jac(x).toarray()
        for k in range(len(c)):
            if c[k] >= -active_tol:
                pos_cols.append(J[k])
                act_vals.append(float(c[k]))
    for j in range(n):
        if x[j] - ps.lower[j] <= active_tol:
            e = np.zeros(n)
            e[j] = -1.0
            pos_cols.append(e)
            act_vals.append(float(ps.lower[j] - x[j]))
        if ps.upper[j] - x[j] <= active_tol:
            e = np.zeros(n)
            e[j] = 1.0
            pos_cols.append(e)
            act_vals.append(float(x[j] - ps.upper[j]))
    scale = max(1.0, float(np.max(np.abs(g))))
    if not free_cols and not pos_cols:
        return float(np.max(np.abs(g))) / scale, 0.0

    A_eq = np.array(free_cols).T if free_cols else np.zeros((n, 0))
    A_in = np.array(pos_cols).T if pos_cols else np.zeros((n, 0))
    n_eq_cols = A_eq.shape[1]
    # fast path: unconstrained fit; valid whenever the inequality/bound
    # multipliers come out with the right sign anyway
    A_full = np.hstack([A_eq, A_in])
    z, *_ = np.linalg.lstsq(A_full, -g, rcond=None)
    mu = z[n_eq_cols:]
    if (mu >= -1e-9).all():
        resid = A_full @ z + g
        stationarity = float(np.max(np.abs(resid))) / scale
        comp = max((abs(m * c) for m, c in zip(mu, act_vals)), default=0.0)
        return stationarity, comp
    if A_eq.shape[1]:
        Q, _ = np.linalg.qr(A_eq, mode="reduced")
        proj = lambda v: v - Q @ (Q.T @ v)
    else:
        proj = lambda v: v
    mu = np.zeros(A_in.shape[1])
    if A_in.shape[1]:
        Pg = proj(-g)
        PA = np.column_stack([proj(A_in[:, k]) for k in range(A_in.shape[1])])
        mu, _ = nnls(PA, Pg, maxiter=10 * max(PA.shape))
    resid = g + A_in @ mu
    if A_eq.shape[1]:
        lam, *_ = np.linalg.lstsq(A_eq, -resid, rcond=None)
        resid = resid + A_eq @ lam
    stationarity = float(np.max(np.abs(resid))) / scale
    comp = 0.0
    for k in range(min(len(act_vals), len(mu))):
        comp = max(comp, abs(mu[k] * act_vals[k]))
    return stationarity, comp


def _run_scipy(ps: ProblemSpec, x0: np.ndarray, opts: NlpOptions):
    constraints = []
    if ps.eq_names:
        constraints.append(NonlinearConstraint(
            ps.eq_fun, 0.0, 0.0, jac=lambda x: ps.eq_jac(x)))
    if ps.ineq_names:
        constraints.append(NonlinearConstraint(
            ps.ineq_fun, -np.inf, 0.0, jac=lambda x: ps.ineq_jac(x)))
    bounds = Bounds(ps.lower, ps.upper)
    if opts.method == "slsqp":
        eq_jac = ps.eq_jac_dense or (lambda x: ps.eq_jac(x).toarray())
        ineq_jac = ps.ineq_jac_dense or (lambda x: ps.ineq_jac(x).toarray())
        cons = []
        if ps.eq_names:
            cons.append({"type": "eq", "fun": ps.eq_fun, "jac": eq_jac})
        if ps.ineq_names:
            cons.append({"type": "ineq", "fun": lambda x: -ps.ineq_fun(x),
                         "jac": lambda x: -ineq_jac(x)})
        lb = np.where(np.isfinite(ps.lower), ps.lower, -1e10)
        ub = np.where(np.isfinite(ps.upper), ps.upper, 1e10)
        return minimize(ps.objective, x0, jac=ps.gradient, method="SLSQP",
                        bounds=list(zip(lb, ub)), constraints=cons,
                        options={"maxiter": opts.max_iter, "ftol": opts.ftol})
    return minimize(
        ps.objective, x0, jac=ps.gradient, hess=ps.hess, method="trust-constr",
        bounds=bounds, constraints=constraints,
        options={"maxiter": opts.max_iter, "gtol": opts.opt_tol,
                 "xtol": 1e-12, "barrier_tol": 1e-10, "verbose": 0},
    )


def solve_nlp(ps: ProblemSpec, opts: NlpOptions = NlpOptions()) -> NlpSolution:
    """Solve to first-order KKT tolerances; deterministic for fixed options.

    The returned status is decided by an independent feasibility and
    stationarity check at the candidate point, never by the backend's own
    claim alone. Failed attempts are retried, first from the other starting
    point, then with the alternate backend.
    """
    starts = [ps.x0 if opts.start == "warm" else ps.x0_flat]
    alt = ps.x0_flat if opts.start == "warm" else ps.x0
    if alt is not None and not np.array_equal(starts[0], alt):
        starts.append(alt)
    other = "trust-constr" if opts.method == "slsqp" else "slsqp"
    attempts = [(opts.method, x0) for x0 in starts] + [(other, x0) for x0 in starts]

    best: NlpSolution | None = None
    best_opt: NlpSolution | None = None
    for method, x0 in attempts:
        if best_opt is not None and method != opts.method:
            break  # fallback backend not needed once an optimum exists
        try:
            res = _run_scipy(ps, np.clip(x0, ps.lower, ps.upper),
                             replace(opts, method=method))
            x = np.asarray(res.x, dtype=float)
        except Exception as e:  # solver blew up: report, try next attempt
            cand = NlpSolution(
                point=np.clip(x0, ps.lower, ps.upper), objective_value=math.nan,
                kkt_stationarity=math.inf, feasibility=math.inf,
                complementarity=math.inf, status="numerical_failure",
                iterations=0, message=f"{type(e).__name__}: {e}")
            best = best or cand
            continue
        feas = ps.feasibility(x)
        stat, comp = kkt_diagnostics(ps, x, active_tol=max(opts.feas_tol, 1e-8))
        iters = int(getattr(res, "niter", getattr(res, "nit", 0)))
        if feas <= opts.feas_tol and stat <= opts.opt_tol:
            status = "optimal"
        elif iters >= opts.max_iter:
            status = "iteration_limit"
        elif feas > opts.feas_tol:
            status = "infeasible_detected"
        else:
            status = "numerical_failure"
        cand = NlpSolution(
            point=x, objective_value=float(ps.objective(x)),
            kkt_stationarity=stat, feasibility=feas, complementarity=comp,
            status=status, iterations=iters, message=str(getattr(res, "message", "")))
        if status == "optimal":
            if not opts.multistart:
                return cand
            # keep searching the primary method's starts for a better optimum
            if best_opt is None or cand.objective_value < best_opt.objective_value:
                best_opt = cand
            continue
        if best is None or (cand.feasibility, cand.kkt_stationarity) < (
                best.feasibility, best.kkt_stationarity):
            best = cand
    return best_opt or best


def investment_cost(plan_values: dict[str, dict[str, float]],
                    catalog: EquipmentCatalog) -> float:
    """Total investment cost in currency units.

    plan_values maps bus -> {x_plus, x_minus, b_plus, b_minus} with
    susceptances in pu; fixed charges are paid per install decision.
    """
    total = 0.0
    for vals in plan_values.values():
        total += catalog.cost_fixed * (vals.get("x_plus", 0.0) + vals.get("x_minus", 0.0))
        total += vals.get("b_plus", 0.0) * catalog.cost_cap_per_pu
        total += vals.get("b_minus", 0.0) * catalog.cost_ind_per_pu
    return total


def extract_plan_values(ps: ProblemSpec, x: np.ndarray) -> dict[str, dict[str, float]]:
    """Per-candidate planning variable values from a planning solution."""
    if ps.meta.get("mode") != "planning":
        raise OpfBuildError("not a planning problem")
    lay = ps.meta["layout"]
    cands = ps.meta["candidates"]

    def block(name):
        start, count = lay.get(name, (0, 0))
        return x[start:start + count]

    xc, xi, bc, bi = block("xcap"), block("xind"), block("bcap"), block("bind")
    return {
        c: {"x_plus": float(xc[j]), "x_minus": float(xi[j]),
            "b_plus": float(bc[j]), "b_minus": float(bi[j])}
        for j, c in enumerate(cands)
    }
