"""Plan application, yearly re-simulation, and the outer planning loop.

Verification re-runs the full year on the planned network. In
powerflow_only mode every step is a schedule-controlled power flow; in
operational_opf mode each step runs the loss-minimizing OPF over all
assets (planned equipment included, as switchable devices by default),
rounds switched-shunt steps to integers, and re-checks the rounded
operating point with a power flow before scoring violations.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .grid_model import Network, ShuntBlock, SwitchedShunt
from .opf_engine import NlpOptions, OpfOptions, build_operational_problem, solve_nlp
from .plan_decision import FinalPlan
from .power_flow import (ControlSet, PowerFlowModel, PowerFlowOptions,
                         deviation_index, solve_power_flow, solve_snapshot,
                         violation_metric)
from .scenario_planner import PlanEntry
from .timeseries import ProfileSet, snapshot

log = logging.getLogger(__name__)


class VerificationError(Exception):
    pass


@dataclass(frozen=True)
class StepRecord:
    timestamp: pd.Timestamp
    deviation_index: float
    violation_metric: float
    converged: bool


@dataclass
class ViolationReport:
    steps: tuple[StepRecord, ...]
    deadband: float
    mode: str
    mean: float
    max: float
    total: float
    count_violated: int
    count_nonconverged: int
    runtime_seconds: float

    @classmethod
    def from_steps(cls, steps, deadband, mode, runtime):
        ok = [s for s in steps if s.converged]
        metrics = np.array([s.violation_metric for s in ok]) if ok else np.zeros(0)
        return cls(
            steps=tuple(steps), deadband=deadband, mode=mode,
            mean=float(metrics.mean()) if len(metrics) else 0.0,
            max=float(metrics.max()) if len(metrics) else 0.0,
            total=float(metrics.sum()),
            count_violated=int((metrics > 0).sum()),
            count_nonconverged=sum(1 for s in steps if not s.converged),
            runtime_seconds=runtime,
        )


def plan_entries(plan: FinalPlan | list[PlanEntry]) -> list[PlanEntry]:
    return list(plan.entries) if isinstance(plan, FinalPlan) else list(plan)


def apply_plan(net: Network, plan: FinalPlan | list[PlanEntry],
               as_switchable: bool = False) -> Network:
    """New network with the planned equipment installed.

    Fixed-shunt form adds the susceptance to the bus (capacitor +, inductor
    -). Switchable form adds a switched-shunt bank in catalog-step blocks,
    initially off, for the operational OPF to dispatch.
    """
    entries = plan_entries(plan)
    for e in entries:
        if e.bus not in net.bus_index:
            raise VerificationError(f"plan names unknown bus {e.bus!r}")
    if not entries:
        return net
    if not as_switchable:
        added: dict[str, float] = {}
        for e in entries:
            sign = 1.0 if e.kind == "capacitor" else -1.0
            added[e.bus] = added.get(e.bus, 0.0) + sign * e.susceptance_pu
        return net.with_bus_shunts(added)
    step_pu = net.equipment_catalog.step_b
    extra = []
    for e in entries:
        n_steps = max(int(round(e.susceptance_pu / step_pu)), 1)
        block_b = e.susceptance_pu / n_steps
        sign = 1.0 if e.kind == "capacitor" else -1.0
        extra.append(SwitchedShunt(
            bus=e.bus,
            blocks=(ShuntBlock(step_b=sign * block_b, max_steps=n_steps,
                               initial_steps=0),),
        ))
    return net.with_switched_shunts(tuple(extra))


@dataclass
class EvaluateOptions:
    jobs: int = 1
    skip_clean_steps: bool = True   # operational mode: trust a clean power flow
    pf: PowerFlowOptions = field(default_factory=PowerFlowOptions)
    nlp: NlpOptions = field(default_factory=lambda: NlpOptions(opt_tol=1e-4, ftol=1e-9))
    weight_v: float = 1000.0
    pv_q_disabled: bool = False     # force zero PV reactive support
    max_nonconverged_frac: float = 0.2
    repair_passes: int = 6          # post-rounding discrete switch adjustments


def _discrete_repair(net, model, snap, ctrl, deadband, opts):
    """Nudge rounded switched-shunt steps to recover the dead band.

    Nearest-integer rounding can leave the voltage half a block outside the
    band; an operator would simply switch one more block in or out. Each
    pass moves one block at the worst-violating bus and keeps the move only
    if the total violation improves. Returns the best (solution, ctrl).
    """
    best = solve_power_flow(net, snap, ctrl, opts.pf, model=model)
    if not best.converged:
        return best, ctrl
    best_metric = violation_metric(best, net, deadband)
    if best_metric == 0.0 or not len(model.shunt_bus_idx):
        return best, ctrl
    t_idx = model.target_idx
    targets = model.v_target
    for _ in range(opts.repair_passes):
        dev = best.v_mag[t_idx] - targets
        excess = np.abs(dev) - deadband
        if excess.max() <= 0:
            break
        kb = t_idx[int(np.argmax(excess))]
        need_b = 1.0 if dev[int(np.argmax(excess))] < 0 else -1.0
        # blocks at the violating bus able to move susceptance the right way
        cand = None
        for j in np.flatnonzero(model.shunt_bus_idx == kb):
            step = model.shunt_step_b[j]
            direction = 1.0 if step * need_b > 0 else -1.0
            new_val = ctrl.shunt_steps[j] + direction
            if 0.0 <= new_val <= model.shunt_max_steps[j]:
                if cand is None or abs(step) > abs(model.shunt_step_b[cand[0]]):
                    cand = (j, new_val)
        if cand is None:
            break
        trial_ctrl = replace(ctrl, shunt_steps=ctrl.shunt_steps.copy())
        trial_ctrl.shunt_steps[cand[0]] = cand[1]
        trial = solve_power_flow(net, snap, trial_ctrl, opts.pf, model=model)
        if not trial.converged:
            break
        metric = violation_metric(trial, net, deadband)
        if metric >= best_metric - 1e-12:
            break
        best, best_metric, ctrl = trial, metric, trial_ctrl
    return best, ctrl


def _evaluate_step(net, model, ps, t, mode, deadband, opts):
    snap = snapshot(ps, t, net)
    if opts.pv_q_disabled:
        snap = replace(snap, pv_q_min=np.zeros_like(snap.pv_q_min),
                       pv_q_max=np.zeros_like(snap.pv_q_max))
    try:
        pf = solve_snapshot(net, snap, opts.pf, model=model)
    except Exception:
        return StepRecord(t, math.nan, math.nan, False)
    if mode == "powerflow_only":
        if not pf.converged:
            return StepRecord(t, math.nan, math.nan, False)
        return StepRecord(t, deviation_index(pf, net),
                          violation_metric(pf, net, deadband), True)

    if (opts.skip_clean_steps and pf.converged
            and violation_metric(pf, net, deadband) == 0.0):
        return StepRecord(t, deviation_index(pf, net), 0.0, True)

    opf_opts = OpfOptions(deadband=deadband, weight_v=opts.weight_v,
                          warm_start=pf.state if pf.converged else None)
    try:
        prob = build_operational_problem(net, snap, opf_opts, model=model)
        sol = solve_nlp(prob, opts.nlp)
    except Exception:
        return StepRecord(t, math.nan, math.nan, False)
    if sol.status not in ("optimal", "iteration_limit") or sol.feasibility > 1e-4:
        return StepRecord(t, math.nan, math.nan, False)
    lay = prob.meta["layout"]
    x = sol.point

    def block(name):
        start, count = lay.get(name, (0, 0))
        return x[start:start + count]

    steps_real = block("xsh")
    rounded = np.clip(np.floor(steps_real + 0.5), 0.0, model.shunt_max_steps)
    ctrl = ControlSet(
        gen_q=block("qg").copy(), slack_p=float(block("pg_slack")[0]),
        shunt_steps=rounded, pv_q=block("pvq").copy(),
        pv_curtail=block("pvc").copy(), dr_q=np.zeros(len(net.buses)),
        b_plus=np.zeros(len(net.candidate_buses)),
        b_minus=np.zeros(len(net.candidate_buses)),
    )
    dr_start, dr_count = lay.get("qdr", (0, 0))
    if dr_count:
        dr_buses = [i for i, b in enumerate(net.buses)
                    if b.dr_q_min < 0 or b.dr_q_max > 0]
        for j, kb in enumerate(dr_buses):
            ctrl.dr_q[kb] = x[dr_start + j]
    try:
        pf2, _ = _discrete_repair(net, model, snap, ctrl, deadband, opts)
    except Exception:
        return StepRecord(t, math.nan, math.nan, False)
    if not pf2.converged:
        return StepRecord(t, math.nan, math.nan, False)
    return StepRecord(t, deviation_index(pf2, net),
                      violation_metric(pf2, net, deadband), True)


def evaluate_year(net: Network, ps: ProfileSet, mode: str, deadband: float,
                  opts: EvaluateOptions = EvaluateOptions()) -> ViolationReport:
    """Violation metrics for every time step of the profile set.

    Non-converged steps are counted and excluded from aggregates; more than
    max_nonconverged_frac of them aborts the evaluation.
    """
    if mode not in ("powerflow_only", "operational_opf"):
        raise ValueError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    model = PowerFlowModel(net)
    stamps = list(ps.timestamps)
    if opts.jobs > 1:
        with ThreadPoolExecutor(max_workers=opts.jobs) as pool:
            records = list(pool.map(
                lambda t: _evaluate_step(net, model, ps, t, mode, deadband, opts),
                stamps))
    else:
        records = [_evaluate_step(net, model, ps, t, mode, deadband, opts)
                   for t in stamps]
    bad = sum(1 for r in records if not r.converged)
    if stamps and bad / len(stamps) > opts.max_nonconverged_frac:
        raise VerificationError(
            f"{bad}/{len(stamps)} steps failed to converge "
            f"(> {opts.max_nonconverged_frac:.0%}); aborting")
    return ViolationReport.from_steps(records, deadband, mode,
                                      time.perf_counter() - t0)


@dataclass
class GroupComparison:
    base_total: float
    planned_total: float
    abs_reduction: float
    pct_reduction: float | None  # None when the base total is zero


def reduction_stats(base: ViolationReport, planned: ViolationReport,
                    groups: dict[str, set] | None = None) -> dict[str, GroupComparison]:
    """Violation reduction, overall and per scenario group."""
    base_ts = [s.timestamp for s in base.steps]
    plan_ts = [s.timestamp for s in planned.steps]
    if base_ts != plan_ts:
        raise VerificationError("reports cover different timestamp axes")

    def totals(members: set | None) -> tuple[float, float]:
        tb = tp = 0.0
        for sb, sp in zip(base.steps, planned.steps):
            if members is not None and sb.timestamp not in members:
                continue
            if sb.converged:
                tb += sb.violation_metric
            if sp.converged:
                tp += sp.violation_metric
        return tb, tp

    out: dict[str, GroupComparison] = {}
    groups = {"overall": None, **(groups or {})}
    for name, members in groups.items():
        tb, tp = totals(members)
        out[name] = GroupComparison(
            base_total=tb, planned_total=tp, abs_reduction=tb - tp,
            pct_reduction=(100.0 * (tb - tp) / tb) if tb > 0 else None,
        )
    return out


def needs_iteration(report: ViolationReport,
                    max_total_pu: float = 5.0,
                    max_step_pu: float = 0.05) -> tuple[bool, list[pd.Timestamp]]:
    """Whether another planning round is needed, plus the scenarios to seed
    it with (offending steps, worst first)."""
    offenders = [s for s in report.steps
                 if s.converged and s.violation_metric > max_step_pu]
    trigger = bool(offenders) or report.total > max_total_pu
    if trigger and not offenders:
        offenders = [s for s in report.steps
                     if s.converged and s.violation_metric > 0]
    offenders.sort(key=lambda s: (-s.violation_metric, s.timestamp.value))
    return trigger, [s.timestamp for s in offenders]


def run_outer_loop(net: Network, ps: ProfileSet, *, top_k: int,
                   plan_round, decide_round, verify_cfg: dict,
                   max_rounds: int = 3,
                   select=None) -> tuple[FinalPlan, list, dict]:
    """Plan / verify / extend-scenarios loop, capped at max_rounds.

    plan_round(timestamps) -> list of scenario plans; decide_round(plans) ->
    FinalPlan; verify_cfg carries mode/deadband/thresholds/options for the
    in-loop verification. The scenario set grows strictly each round.
    Returns (final plan, per-round history, last verification artifacts).
    """
    from .scenario_planner import select_scenarios

    selected = list(select(ps, net, top_k) if select else
                    select_scenarios(ps, net, top_k))
    history = []
    final = None
    artifacts: dict = {}
    for round_no in range(1, max_rounds + 1):
        plans = plan_round(selected)
        final = decide_round(plans)
        planned_net = apply_plan(net, final,
                                 as_switchable=verify_cfg.get("as_switchable", True))
        report = evaluate_year(planned_net, ps, verify_cfg["mode"],
                               verify_cfg["deadband"],
                               verify_cfg.get("opts", EvaluateOptions()))
        more, offenders = needs_iteration(
            report, verify_cfg.get("max_total_pu", 5.0),
            verify_cfg.get("max_step_pu", 0.05))
        history.append({
            "round": round_no, "n_scenarios": len(selected),
            "plan_cost": final.cost, "total_violation": report.total,
            "needs_iteration": more,
        })
        artifacts = {"report": report, "plans": plans, "selected": list(selected)}
        if not more or round_no == max_rounds:
            break
        fresh = [t for t in offenders if t not in selected][:top_k]
        if not fresh:
            break  # nothing new to add: the scenario set cannot grow
        selected.extend(fresh)
    return final, history, artifacts
