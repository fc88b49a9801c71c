"""voltplan command line: plan | verify | report | powerflow | synth.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 infeasible.
Every file the commands write embeds the effective configuration; two runs
with identical config and seed produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import grid_model, reports
from .config import ConfigError, RunConfig, build_config, flat_bus_tuple
from .grid_model import CaseError, load_case, save_case
from .opf_engine import NlpOptions, OpfOptions
from .plan_decision import ClusterOptions, DecisionError, decide
from .power_flow import (PowerFlowError, PowerFlowOptions, deviation_index,
                         solve_snapshot, violation_metric)
from .scenario_planner import (PlanningError, PlanningInfeasibleError,
                               PlanOptions, plan_scenario, select_scenarios)
from .timeseries import (ProfileError, SynthConfig, load_profiles,
                         save_profiles, snapshot, synthesize_year)
from .verifier import (EvaluateOptions, VerificationError, apply_plan,
                       evaluate_year, needs_iteration, reduction_stats,
                       run_outer_loop)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}, sort_keys=True),
          file=sys.stderr)
    return code


def _apply_catalog_overrides(net, cfg: RunConfig):
    cat = net.equipment_catalog
    kw = {}
    if cfg.step_mvar is not None:
        kw["step_b"] = cfg.step_mvar / net.mva_base
    if cfg.min_mvar is not None:
        kw["b_plus_min"] = cfg.min_mvar / net.mva_base
        kw["b_minus_min"] = cfg.min_mvar / net.mva_base
    if cfg.max_mvar is not None:
        kw["b_plus_max"] = cfg.max_mvar / net.mva_base
        kw["b_minus_max"] = cfg.max_mvar / net.mva_base
    if cfg.cost_fixed is not None:
        kw["cost_fixed"] = cfg.cost_fixed
    if cfg.cost_per_mvar is not None:
        kw["cost_cap_per_pu"] = cfg.cost_per_mvar * net.mva_base
        kw["cost_ind_per_pu"] = cfg.cost_per_mvar * net.mva_base
    if not kw:
        return net
    return dataclasses.replace(net, equipment_catalog=dataclasses.replace(cat, **kw))


def _load_inputs(cfg: RunConfig):
    net = load_case(cfg.case_path)
    net = _apply_catalog_overrides(net, cfg)
    if cfg.profiles_path:
        ps = load_profiles(cfg.profiles_path, net)
    else:
        ps = synthesize_year(net, SynthConfig(
            resolution_hours=cfg.resolution_hours,
            pv_penetration=cfg.pv_penetration,
            cloud_volatility=cfg.cloud_volatility,
            seed=cfg.seed, days=cfg.synth_days, start=cfg.synth_start,
            flat_shape_buses=flat_bus_tuple(cfg)))
    return net, ps


def _plan_options(cfg: RunConfig) -> PlanOptions:
    return PlanOptions(
        deadband=cfg.deadband_plan, rounding=cfg.rounding, net_out=cfg.net_out,
        nlp=NlpOptions(feas_tol=cfg.feas_tol, opt_tol=cfg.opt_tol,
                       max_iter=cfg.max_iter, multistart=True),
        opf=OpfOptions(weight_v=cfg.weight_v,
                       enforce_v_bounds=cfg.enforce_v_bounds))


def _eval_options(cfg: RunConfig) -> EvaluateOptions:
    return EvaluateOptions(
        jobs=cfg.jobs, skip_clean_steps=cfg.skip_clean_steps,
        nlp=NlpOptions(feas_tol=cfg.feas_tol, opt_tol=max(cfg.opt_tol, 1e-4),
                       max_iter=cfg.max_iter, ftol=1e-9),
        weight_v=cfg.weight_v)


def _parallel_plans(net, ps, stamps, popts, jobs):
    def one(t):
        return plan_scenario(net, snapshot(ps, t, net), popts)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, stamps))
    return [one(t) for t in stamps]


def cmd_plan(cfg: RunConfig) -> int:
    try:
        net, ps = _load_inputs(cfg)
    except (CaseError, ProfileError, ValueError) as e:
        return _fail(EXIT_INPUT, "input", str(e))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    popts = _plan_options(cfg)
    copts = ClusterOptions(k_max=cfg.k_max, seed=cfg.seed,
                           reduce_var=cfg.reduce_var, restarts=cfg.restarts)

    def plan_round(stamps):
        return _parallel_plans(net, ps, stamps, popts, cfg.jobs)

    def decide_round(plans):
        return decide(plans, cfg.approach, net.equipment_catalog,
                      cluster_opts=copts, min_cluster_size=cfg.min_cluster_size,
                      net=net, features=cfg.features)

    try:
        if cfg.max_rounds <= 1:
            selected = select_scenarios(ps, net, cfg.top_k)
            plans = plan_round(selected)
            final = decide_round(plans)
            history = [{"round": 1, "n_scenarios": len(selected),
                        "plan_cost": final.cost}]
        else:
            final, history, artifacts = run_outer_loop(
                net, ps, top_k=cfg.top_k, plan_round=plan_round,
                decide_round=decide_round,
                verify_cfg={"mode": cfg.verify_mode,
                            "deadband": cfg.deadband_verify,
                            "max_total_pu": cfg.max_total_pu,
                            "max_step_pu": cfg.max_step_pu,
                            "as_switchable": cfg.plan_as_switchable,
                            "opts": _eval_options(cfg)},
                max_rounds=cfg.max_rounds)
            plans = artifacts["plans"]
            selected = artifacts["selected"]
    except PlanningInfeasibleError as e:
        return _fail(EXIT_INFEASIBLE, "infeasible", str(e))
    except (PlanningError, DecisionError) as e:
        return _fail(EXIT_NUMERICAL, "planning", str(e))
    except VerificationError as e:
        return _fail(EXIT_NUMERICAL, "verification", str(e))

    cfg_dict = cfg.to_dict()
    for p in plans:
        name = f"scenario_{p.timestamp.strftime('%Y%m%dT%H%M')}.json"
        reports.write_json(out / name, reports.scenario_plan_dict(p),
                           reports.SCENARIO_PLAN_SCHEMA)
    reports.write_json(out / "final_plan.json",
                       reports.final_plan_dict(final, cfg_dict),
                       reports.FINAL_PLAN_SCHEMA)
    reports.write_cost_table(out / "cost_table.csv", final, net.equipment_catalog)
    merged = apply_plan(net, final, as_switchable=False)
    save_case(merged, out / "case_with_plan.json")

    total_cap = sum(e.size_mvar for e in final.entries if e.kind == "capacitor")
    total_ind = sum(e.size_mvar for e in final.entries if e.kind == "inductor")
    print(f"scenarios planned: {len(plans)} (rounds: {len(history)})")
    print(f"final plan [{final.approach}]: {len(final.entries)} installs, "
          f"{total_cap:g} Mvar capacitive, {total_ind:g} Mvar inductive, "
          f"cost ${final.cost:,.0f}")
    for e in final.entries:
        print(f"  bus {e.bus}: {e.kind} {e.size_mvar:g} Mvar")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, plan_path: str) -> int:
    try:
        net, ps = _load_inputs(cfg)
        entries, plan_raw = reports.parse_final_plan(plan_path)
    except (CaseError, ProfileError, ValueError, OSError) as e:
        return _fail(EXIT_INPUT, "input", str(e))
    except Exception as e:  # jsonschema.ValidationError and friends
        return _fail(EXIT_INPUT, "input", f"{plan_path}: {e}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    as_switch = cfg.plan_as_switchable and cfg.verify_mode == "operational_opf"
    planned_net = apply_plan(net, entries, as_switchable=as_switch)
    eopts = _eval_options(cfg)
    try:
        base = evaluate_year(net, ps, cfg.verify_mode, cfg.deadband_verify, eopts)
        planned = evaluate_year(planned_net, ps, cfg.verify_mode,
                                cfg.deadband_verify, eopts)
    except VerificationError as e:
        return _fail(EXIT_NUMERICAL, "verification", str(e))

    groups: dict[str, set] = {}
    sel = {pd.Timestamp(t) for t in plan_raw.get("source_scenarios", [])}
    if sel:
        groups["selected"] = sel
        groups["outside"] = {s.timestamp for s in base.steps
                             if s.timestamp not in sel}
    assignments = (plan_raw.get("provenance") or {}).get("assignments") or {}
    clusters: dict[str, set] = {}
    for ts, cid in assignments.items():
        clusters.setdefault(f"cluster_{cid}", set()).add(pd.Timestamp(ts))
    groups.update(sorted(clusters.items()))
    comps = reduction_stats(base, planned, groups)
    needs = needs_iteration(planned, cfg.max_total_pu, cfg.max_step_pu)

    rep = reports.report_dict(base, planned, comps, needs, cfg.to_dict())
    reports.write_json(out / "report.json", rep, reports.REPORT_SCHEMA)
    reports.write_report_csv(out / "report.csv", rep)
    merged = apply_plan(net, entries, as_switchable=False)
    save_case(merged, out / "case_with_plan.json")

    ov = comps["overall"]
    pct = "n/a" if ov.pct_reduction is None else f"{ov.pct_reduction:.1f}%"
    print(f"total violation: base {ov.base_total:.4f} pu -> planned "
          f"{ov.planned_total:.4f} pu (reduction {pct})")
    for name, c in comps.items():
        if name == "overall":
            continue
        p = "n/a" if c.pct_reduction is None else f"{c.pct_reduction:.1f}%"
        print(f"  {name}: {c.base_total:.4f} -> {c.planned_total:.4f} ({p})")
    if needs[0]:
        shortlist = ", ".join(t.isoformat() for t in needs[1][:5])
        print(f"another planning round is needed; worst new scenarios: {shortlist}")
    else:
        print("plan meets the violation thresholds; no further round needed")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_report(report_path: str, fmt: str, out_dir: str) -> int:
    try:
        rep = json.loads(Path(report_path).read_text())
    except OSError as e:
        return _fail(EXIT_INPUT, "input", str(e))
    except json.JSONDecodeError as e:
        return _fail(EXIT_INPUT, "input",
                     f"{report_path}: invalid JSON at line {e.lineno}: {e.msg}")
    try:
        written = reports.emit_report_figures(rep, out_dir, fmt)
    except (ValueError, KeyError) as e:
        return _fail(EXIT_INPUT, "input", f"cannot render report: {e}")
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


def cmd_powerflow(cfg: RunConfig, at: str | None, as_json: bool) -> int:
    try:
        net, ps = _load_inputs(cfg)
        if at is None:
            t = ps.timestamps[0]
        else:
            t = pd.Timestamp(at)
        snap = snapshot(ps, t, net)
    except (CaseError, ProfileError, ValueError) as e:
        return _fail(EXIT_INPUT, "input", str(e))
    try:
        sol = solve_snapshot(net, snap)
    except PowerFlowError as e:
        return _fail(EXIT_NUMERICAL, "powerflow", str(e))
    if not sol.converged:
        return _fail(EXIT_NUMERICAL, "powerflow",
                     f"did not converge at {t}: residual {sol.max_residual:.3e}")
    angles = np.degrees(np.arctan2(sol.state.v_i, sol.state.v_r))
    if as_json:
        doc = {
            "timestamp": t.isoformat(),
            "iterations": sol.iterations,
            "max_residual": sol.max_residual,
            "buses": [
                {"id": b.id, "v_mag": float(sol.v_mag[i]),
                 "angle_deg": float(angles[i])}
                for i, b in enumerate(net.buses)
            ],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "circuit": br.circuit,
                 "i_from": abs(sol.i_from[k]), "i_to": abs(sol.i_to[k]),
                 "loading": max(abs(sol.i_from[k]), abs(sol.i_to[k])) / br.current_limit}
                for k, br in enumerate(net.branches)
            ],
            "deviation_index": deviation_index(sol, net),
            "violation_metric": violation_metric(sol, net, cfg.deadband_verify),
        }
        print(json.dumps(reports._round_floats(doc), indent=1, sort_keys=True))
        return EXIT_OK
    print(f"power flow at {t}: {sol.iterations} iterations, "
          f"max residual {sol.max_residual:.2e}")
    print(f"{'bus':>6} {'|V| pu':>9} {'angle deg':>10}")
    for i, b in enumerate(net.buses):
        print(f"{b.id:>6} {sol.v_mag[i]:9.5f} {angles[i]:10.4f}")
    print(f"{'branch':>12} {'|I| from':>9} {'|I| to':>9} {'loading':>8}")
    for k, br in enumerate(net.branches):
        load_frac = max(abs(sol.i_from[k]), abs(sol.i_to[k])) / br.current_limit
        print(f"{br.from_bus+'-'+br.to_bus:>12} {abs(sol.i_from[k]):9.4f} "
              f"{abs(sol.i_to[k]):9.4f} {load_frac:8.2%}")
    print(f"deviation index: {deviation_index(sol, net):.6f} pu; "
          f"violation ({cfg.deadband_verify} band): "
          f"{violation_metric(sol, net, cfg.deadband_verify):.6f} pu")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out_path: str) -> int:
    try:
        net = load_case(cfg.case_path)
    except CaseError as e:
        return _fail(EXIT_INPUT, "input", str(e))
    try:
        ps = synthesize_year(net, SynthConfig(
            resolution_hours=cfg.resolution_hours,
            pv_penetration=cfg.pv_penetration,
            cloud_volatility=cfg.cloud_volatility,
            seed=cfg.seed, days=cfg.synth_days, start=cfg.synth_start,
            flat_shape_buses=flat_bus_tuple(cfg)))
    except ValueError as e:
        return _fail(EXIT_INPUT, "input", str(e))
    save_profiles(ps, out_path)
    print(f"wrote {len(ps.timestamps)} steps x "
          f"{len(ps.bus_ids)} buses / {len(ps.pv_ids)} pv to {out_path}")
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    skip = {"case_path", "profiles_path"}
    p.add_argument("--case", dest="case_path", help="case JSON file")
    p.add_argument("--profiles", dest="profiles_path", help="profiles CSV")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                           metavar="BOOL", default=None)
        elif f.name in ("top_k", "seed", "max_iter", "max_rounds", "jobs",
                        "min_cluster_size", "k_max", "restarts", "synth_days"):
            p.add_argument(flag, type=int, default=None)
        elif f.name in ("approach", "rounding", "verify_mode", "features",
                        "out_dir", "synth_start", "flat_shape_buses"):
            p.add_argument(flag, type=str, default=None)
        else:
            p.add_argument(flag, type=float, default=None)


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None)
                 for f in dataclasses.fields(RunConfig)}
    return build_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="voltplan",
        description="Reactive power planning: screen a year of snapshots, "
                    "size capacitors/inductors per scenario, fuse the plans, "
                    "verify by re-simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="screen scenarios and build the final plan")
    _add_config_args(p_plan)

    p_verify = sub.add_parser("verify", help="re-simulate the year with a plan")
    _add_config_args(p_verify)
    p_verify.add_argument("--plan", required=True, help="final plan JSON")

    p_report = sub.add_parser("report", help="render figures from a report")
    p_report.add_argument("--report", required=True, help="report JSON from verify")
    p_report.add_argument("--format", choices=["svg", "csv"], default="svg")
    p_report.add_argument("--out-dir", default="voltplan_out")

    p_pf = sub.add_parser("powerflow", help="solve one snapshot and print it")
    _add_config_args(p_pf)
    p_pf.add_argument("--at", help="ISO timestamp within the profiles")
    p_pf.add_argument("--json", action="store_true", dest="as_json")

    p_synth = sub.add_parser("synth", help="write a synthetic year as CSV")
    _add_config_args(p_synth)
    p_synth.add_argument("--out", required=True, help="output CSV path")

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.report, args.format, args.out_dir)
        cfg = _config_from_args(args)
        if args.command == "plan":
            if not cfg.case_path:
                return _fail(EXIT_INPUT, "input", "no case file given (--case)")
            return cmd_plan(cfg)
        if args.command == "verify":
            if not cfg.case_path:
                return _fail(EXIT_INPUT, "input", "no case file given (--case)")
            return cmd_verify(cfg, args.plan)
        if args.command == "powerflow":
            if not cfg.case_path:
                return _fail(EXIT_INPUT, "input", "no case file given (--case)")
            return cmd_powerflow(cfg, args.at, args.as_json)
        if args.command == "synth":
            if not cfg.case_path:
                return _fail(EXIT_INPUT, "input", "no case file given (--case)")
            return cmd_synth(cfg, args.out)
    except ConfigError as e:
        return _fail(EXIT_INPUT, "config", str(e))
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
