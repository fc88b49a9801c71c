"""Scenario screening and the repetitive per-scenario planning loop.

Screening runs a schedule-controlled power flow on every time step, scores
it with the voltage-deviation index, and keeps the worst. Planning for one
scenario alternates relaxed OPF solves with fixing the install decision of
any candidate whose susceptance reached the catalog minimum, until no new
locations appear; sizes are then snapped to the discrete catalog.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .grid_model import EquipmentCatalog, Network
from .opf_engine import (NlpOptions, OpfOptions, build_planning_problem,
                         extract_plan_values, investment_cost, solve_nlp)
from .power_flow import (PowerFlowModel, PowerFlowOptions, deviation_index,
                         solve_snapshot)
from .timeseries import ProfileSet, ScenarioSnapshot, snapshot

log = logging.getLogger(__name__)


class PlanningError(Exception):
    pass


class PlanningInfeasibleError(PlanningError):
    def __init__(self, timestamp, iteration: int, status: str):
        super().__init__(
            f"planning solve failed at {timestamp} (loop iteration {iteration}): {status}"
        )
        self.timestamp = timestamp
        self.iteration = iteration
        self.status = status


@dataclass(frozen=True)
class PlanEntry:
    bus: str
    kind: str  # capacitor | inductor
    size_mvar: float
    susceptance_pu: float


@dataclass
class ScenarioPlan:
    timestamp: pd.Timestamp
    relaxed: dict[str, dict[str, float]]  # bus -> x_plus/x_minus/b_plus/b_minus
    discrete: tuple[PlanEntry, ...]
    cost: float
    loop_iterations: int
    solve_log: tuple[str, ...]

    def discrete_values(self) -> dict[str, dict[str, float]]:
        """Discrete entries in the investment_cost input shape."""
        vals: dict[str, dict[str, float]] = {}
        for e in self.discrete:
            d = vals.setdefault(e.bus, {"x_plus": 0.0, "x_minus": 0.0,
                                        "b_plus": 0.0, "b_minus": 0.0})
            if e.kind == "capacitor":
                d["x_plus"] = 1.0
                d["b_plus"] += e.susceptance_pu
            else:
                d["x_minus"] = 1.0
                d["b_minus"] += e.susceptance_pu
        return vals


@dataclass
class PlanOptions:
    deadband: float | None = None
    rounding: str = "nearest"  # nearest | ceiling
    net_out: bool = False
    nlp: NlpOptions = field(default_factory=lambda: NlpOptions(multistart=True))
    opf: OpfOptions = field(default_factory=OpfOptions)
    fix_tol: float = 1e-9


@dataclass(frozen=True)
class ScreenRecord:
    timestamp: pd.Timestamp
    converged: bool
    deviation: float  # inf used for ranking when not converged


def screen_timesteps(ps: ProfileSet, net: Network,
                     pf_opts: PowerFlowOptions = PowerFlowOptions()) -> list[ScreenRecord]:
    """Deviation index per time step under schedule controls."""
    model = PowerFlowModel(net)
    out = []
    for t in ps.timestamps:
        snap = snapshot(ps, t, net)
        try:
            sol = solve_snapshot(net, snap, pf_opts, model=model)
        except Exception:
            out.append(ScreenRecord(t, False, float("inf")))
            continue
        if sol.converged:
            out.append(ScreenRecord(t, True, deviation_index(sol, net)))
        else:
            out.append(ScreenRecord(t, False, float("inf")))
    return out


def select_scenarios(ps: ProfileSet, net: Network, top_k: int,
                     pf_opts: PowerFlowOptions = PowerFlowOptions()) -> list[pd.Timestamp]:
    """Top-k most severe time steps, worst first.

    Non-converged steps rank above all converged ones (divergence signals
    extreme stress); ties break toward the earlier timestamp.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    records = screen_timesteps(ps, net, pf_opts)
    n_usable = len(records)
    if n_usable < top_k:
        raise PlanningError(
            f"only {n_usable} time steps available for top_k={top_k}")
    order = sorted(records, key=lambda r: (-r.deviation, r.timestamp.value))
    picked = order[:top_k]
    flagged = [r for r in picked if not r.converged]
    if flagged:
        log.warning("%d selected scenarios had non-converged screening flows",
                    len(flagged))
    return [r.timestamp for r in picked]


def round_sizes(relaxed_pu: float, catalog: EquipmentCatalog, *,
                polarity: str = "plus", mva_base: float = 100.0,
                mode: str = "nearest") -> float:
    """Snap a relaxed susceptance to the catalog, in Mvar.

    Rounds to the nearest catalog step (or up, with mode="ceiling"); results
    below the catalog minimum size drop to zero (equipment not installed).
    """
    if relaxed_pu < 0:
        raise ValueError("relaxed size must be >= 0")
    step_mvar = catalog.step_b * mva_base
    min_pu = catalog.b_plus_min if polarity == "plus" else catalog.b_minus_min
    min_mvar = min_pu * mva_base
    mvar = relaxed_pu * mva_base
    if mode == "ceiling":
        steps = np.ceil(mvar / step_mvar - 1e-12)
    else:
        steps = np.floor(mvar / step_mvar + 0.5)
    size = float(steps * step_mvar)
    if size < min_mvar - 1e-9:
        return 0.0
    return size


def plan_scenario(net: Network, snap: ScenarioSnapshot,
                  opts: PlanOptions = PlanOptions()) -> ScenarioPlan:
    """Repetitive relaxed planning for one scenario.

    Each pass solves the relaxed problem, then pins the install decision of
    every candidate whose relaxed size reached the catalog minimum; the loop
    stops when a pass adds no new locations. The pinned-location set grows
    monotonically, so at most |C| + 1 passes run (enforced).
    """
    cands = net.candidate_buses
    if not cands:
        raise PlanningError("network has no candidate locations")
    cat = net.equipment_catalog
    opf_opts = opts.opf
    if opts.deadband is not None:
        from dataclasses import replace as _rep
        opf_opts = _rep(opf_opts, deadband=opts.deadband)

    fixed_plus: set[str] = set()
    fixed_minus: set[str] = set()
    solve_log: list[str] = []
    max_loops = len(cands) + 1
    iteration = 0
    values: dict[str, dict[str, float]] = {}
    warm = None
    model = PowerFlowModel(net)
    while iteration < max_loops:
        iteration += 1
        ps = build_planning_problem(net, snap, tuple(sorted(fixed_plus)),
                                    tuple(sorted(fixed_minus)), opf_opts,
                                    model=model)
        if warm is not None and len(warm) == ps.n:
            ps.x0 = np.clip(warm, ps.lower, ps.upper)
        sol = solve_nlp(ps, opts.nlp)
        solve_log.append(sol.status)
        if sol.status != "optimal":
            raise PlanningInfeasibleError(snap.timestamp, iteration, sol.status)
        warm = sol.point
        values = extract_plan_values(ps, sol.point)
        new_plus = {c for c, v in values.items()
                    if v["b_plus"] >= cat.b_plus_min - opts.fix_tol} - fixed_plus
        new_minus = {c for c, v in values.items()
                     if v["b_minus"] >= cat.b_minus_min - opts.fix_tol} - fixed_minus
        if not new_plus and not new_minus:
            break
        fixed_plus |= new_plus
        fixed_minus |= new_minus

    entries: list[PlanEntry] = []
    for c in cands:
        v = values.get(c, {})
        bp = v.get("b_plus", 0.0) if c in fixed_plus else 0.0
        bm = v.get("b_minus", 0.0) if c in fixed_minus else 0.0
        if opts.net_out and bp > 0 and bm > 0:
            net_b = bp - bm
            bp, bm = (net_b, 0.0) if net_b >= 0 else (0.0, -net_b)
        size_p = round_sizes(bp, cat, polarity="plus", mva_base=net.mva_base,
                             mode=opts.rounding)
        if size_p > 0:
            entries.append(PlanEntry(c, "capacitor", size_p, size_p / net.mva_base))
        size_m = round_sizes(bm, cat, polarity="minus", mva_base=net.mva_base,
                             mode=opts.rounding)
        if size_m > 0:
            entries.append(PlanEntry(c, "inductor", size_m, size_m / net.mva_base))

    plan = ScenarioPlan(
        timestamp=snap.timestamp,
        relaxed=values,
        discrete=tuple(entries),
        cost=0.0,
        loop_iterations=iteration,
        solve_log=tuple(solve_log),
    )
    plan.cost = investment_cost(plan.discrete_values(), cat)
    return plan
