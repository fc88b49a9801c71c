"""File outputs: plan/report JSON with schema validation, CSV tables, and
standalone SVG figures (violation histogram, grouped means, reductions).

All writers produce byte-identical files for identical inputs: keys are
sorted, floats rounded to 1e-9, and the SVG is assembled from plain strings
(no plotting library, no timestamps).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import jsonschema

from .plan_decision import FinalPlan
from .scenario_planner import PlanEntry, ScenarioPlan
from .verifier import GroupComparison, ViolationReport

PLAN_ENTRY_SCHEMA = {
    "type": "object",
    "properties": {
        "bus": {"type": "string"},
        "kind": {"enum": ["capacitor", "inductor"]},
        "size_mvar": {"type": "number", "minimum": 0},
        "susceptance_pu": {"type": "number", "minimum": 0},
    },
    "required": ["bus", "kind", "size_mvar", "susceptance_pu"],
    "additionalProperties": False,
}

SCENARIO_PLAN_SCHEMA = {
    "type": "object",
    "properties": {
        "timestamp": {"type": "string"},
        "entries": {"type": "array", "items": PLAN_ENTRY_SCHEMA},
        "cost": {"type": "number", "minimum": 0},
        "loop_iterations": {"type": "integer", "minimum": 1},
        "relaxed": {"type": "object"},
    },
    "required": ["timestamp", "entries", "cost", "loop_iterations"],
    "additionalProperties": False,
}

FINAL_PLAN_SCHEMA = {
    "type": "object",
    "properties": {
        "entries": {"type": "array", "items": PLAN_ENTRY_SCHEMA},
        "cost": {"type": "number", "minimum": 0},
        "approach": {"enum": ["max_combine", "cluster_representative"]},
        "source_scenarios": {"type": "array", "items": {"type": "string"}},
        "provenance": {"type": "object"},
        "config": {"type": "object"},
    },
    "required": ["entries", "cost", "approach", "source_scenarios"],
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "deadband": {"type": "number"},
        "mode": {"type": "string"},
        "base": {"type": "object"},
        "planned": {"type": "object"},
        "comparisons": {"type": "object"},
        "needs_iteration": {"type": "object"},
        "config": {"type": "object"},
    },
    "required": ["deadband", "mode", "base", "planned", "comparisons"],
    "additionalProperties": False,
}


def _round_floats(obj, digits=9):
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    return obj


def write_json(path: str | Path, obj: dict, schema: dict | None = None) -> None:
    obj = _round_floats(obj)
    if schema is not None:
        jsonschema.validate(obj, schema)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def scenario_plan_dict(plan: ScenarioPlan) -> dict:
    return {
        "timestamp": plan.timestamp.isoformat(),
        "entries": [entry_dict(e) for e in plan.discrete],
        "cost": plan.cost,
        "loop_iterations": plan.loop_iterations,
        "relaxed": plan.relaxed,
    }


def entry_dict(e: PlanEntry) -> dict:
    return {"bus": e.bus, "kind": e.kind, "size_mvar": e.size_mvar,
            "susceptance_pu": e.susceptance_pu}


def final_plan_dict(plan: FinalPlan, config: dict | None = None) -> dict:
    out = {
        "entries": [entry_dict(e) for e in plan.entries],
        "cost": plan.cost,
        "approach": plan.approach,
        "source_scenarios": [t.isoformat() for t in plan.source_scenarios],
        "provenance": plan.provenance,
    }
    if config is not None:
        out["config"] = config
    return out


def parse_final_plan(path: str | Path) -> tuple[list[PlanEntry], dict]:
    """Load and validate a final-plan JSON; returns (entries, raw dict)."""
    import pandas as pd
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(
            f"{path}: invalid plan JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    jsonschema.validate(raw, FINAL_PLAN_SCHEMA)
    entries = [PlanEntry(d["bus"], d["kind"], d["size_mvar"], d["susceptance_pu"])
               for d in raw["entries"]]
    return entries, raw


def report_dict(base: ViolationReport, planned: ViolationReport,
                comparisons: dict[str, GroupComparison],
                needs: tuple[bool, list] | None = None,
                config: dict | None = None) -> dict:
    def side(rep: ViolationReport) -> dict:
        return {
            "steps": [
                {"timestamp": s.timestamp.isoformat(),
                 "deviation_index": s.deviation_index,
                 "violation_metric": s.violation_metric,
                 "converged": s.converged}
                for s in rep.steps
            ],
            "aggregates": {
                "mean": rep.mean, "max": rep.max, "total": rep.total,
                "count_violated": rep.count_violated,
                "count_nonconverged": rep.count_nonconverged,
            },
        }

    out = {
        "deadband": base.deadband,
        "mode": base.mode,
        "base": side(base),
        "planned": side(planned),
        "comparisons": {
            name: {"base_total": c.base_total, "planned_total": c.planned_total,
                   "abs_reduction": c.abs_reduction,
                   "pct_reduction": c.pct_reduction}
            for name, c in comparisons.items()
        },
    }
    if needs is not None:
        out["needs_iteration"] = {
            "required": needs[0],
            "new_scenarios": [t.isoformat() for t in needs[1]],
        }
    if config is not None:
        out["config"] = config
    return out


def write_report_csv(path: str | Path, report: dict) -> None:
    """One row per timestep plus aggregate rows, base and planned side by side."""
    lines = ["timestamp,base_deviation,base_violation,base_converged,"
             "planned_deviation,planned_violation,planned_converged"]
    base_steps = report["base"]["steps"]
    plan_steps = report["planned"]["steps"]
    for b, p in zip(base_steps, plan_steps):
        lines.append(
            f"{b['timestamp']},{_fmt(b['deviation_index'])},{_fmt(b['violation_metric'])},"
            f"{int(b['converged'])},{_fmt(p['deviation_index'])},"
            f"{_fmt(p['violation_metric'])},{int(p['converged'])}")
    for name in ("mean", "max", "total", "count_violated", "count_nonconverged"):
        lines.append(f"aggregate_{name},{_fmt(report['base']['aggregates'][name])},,,"
                     f"{_fmt(report['planned']['aggregates'][name])},,")
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 9))
    return str(v)


def write_cost_table(path: str | Path, plan: FinalPlan, catalog) -> None:
    lines = ["bus,kind,size_mvar,susceptance_pu,fixed_cost,variable_cost,total_cost"]
    for e in sorted(plan.entries, key=lambda e: (e.bus, e.kind)):
        per_pu = (catalog.cost_cap_per_pu if e.kind == "capacitor"
                  else catalog.cost_ind_per_pu)
        var_cost = e.susceptance_pu * per_pu
        lines.append(f"{e.bus},{e.kind},{_fmt(e.size_mvar)},{_fmt(e.susceptance_pu)},"
                     f"{_fmt(catalog.cost_fixed)},{_fmt(var_cost)},"
                     f"{_fmt(catalog.cost_fixed + var_cost)}")
    lines.append(f"total,,,,,,{_fmt(plan.cost)}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- SVG rendering ---------------------------------------------------------

_W, _H, _MARG = 640, 360, 50


def _svg_doc(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">')
    style = ('<style>text{font-family:sans-serif;font-size:11px}'
             '.title{font-size:14px;font-weight:bold}</style>')
    t = f'<text class="title" x="{_W/2}" y="20" text-anchor="middle">{title}</text>'
    return "\n".join([head, style, t] + body + ["</svg>"]) + "\n"


def _bars(groups: list[str], series: dict[str, list[float]], title: str,
          colors=("#4878a8", "#e08214", "#52a858", "#9467bd")) -> str:
    body = []
    all_vals = [v for vals in series.values() for v in vals if v is not None]
    vmax = max(all_vals + [1e-9])
    plot_w, plot_h = _W - 2 * _MARG, _H - 2 * _MARG
    n_g, n_s = len(groups), len(series)
    group_w = plot_w / max(n_g, 1)
    bar_w = group_w * 0.7 / max(n_s, 1)
    for gi, g in enumerate(groups):
        x0 = _MARG + gi * group_w
        body.append(f'<text x="{x0 + group_w/2:.1f}" y="{_H - _MARG + 14}" '
                    f'text-anchor="middle">{g}</text>')
        for si, (name, vals) in enumerate(series.items()):
            v = vals[gi]
            if v is None:
                continue
            h = plot_h * v / vmax
            x = x0 + group_w * 0.15 + si * bar_w
            y = _H - _MARG - h
            body.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                        f'height="{h:.1f}" fill="{colors[si % len(colors)]}"/>')
            body.append(f'<text x="{x + bar_w/2:.1f}" y="{y - 3:.1f}" '
                        f'text-anchor="middle">{v:.3g}</text>')
    for si, name in enumerate(series):
        body.append(f'<rect x="{_MARG + si*120}" y="28" width="10" height="10" '
                    f'fill="{colors[si % len(colors)]}"/>')
        body.append(f'<text x="{_MARG + si*120 + 14}" y="37">{name}</text>')
    body.append(f'<line x1="{_MARG}" y1="{_H-_MARG}" x2="{_W-_MARG}" '
                f'y2="{_H-_MARG}" stroke="black"/>')
    return _svg_doc(body, title)


def render_histogram(values: list[float], bins: int, title: str) -> str:
    vals = [v for v in values if v is not None]
    if not vals:
        vals = [0.0]
    lo, hi = 0.0, max(max(vals), 1e-9)
    width = (hi - lo) / bins or 1.0
    counts = [0] * bins
    for v in vals:
        k = min(int((v - lo) / width), bins - 1)
        counts[k] += 1
    labels = [f"{lo + k*width:.3g}" for k in range(bins)]
    return _bars(labels, {"steps": [float(c) for c in counts]}, title)


def render_group_means(comparisons: dict, title: str) -> str:
    groups = list(comparisons.keys())
    base = [comparisons[g]["base_total"] for g in groups]
    planned = [comparisons[g]["planned_total"] for g in groups]
    return _bars(groups, {"base": base, "planned": planned}, title)


def render_reductions(comparisons: dict, title: str) -> str:
    groups = list(comparisons.keys())
    pct = [comparisons[g]["pct_reduction"] for g in groups]
    return _bars(groups, {"reduction %": pct}, title)


def emit_report_figures(report: dict, out_dir: str | Path, fmt: str = "svg",
                        bins: int = 20) -> list[Path]:
    """Write the three standard figures (or their CSV equivalents)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    planned_viol = [s["violation_metric"] for s in report["planned"]["steps"]
                    if s["converged"]]
    comps = report["comparisons"]
    written = []
    if fmt == "svg":
        specs = [
            ("violation_histogram.svg",
             render_histogram(planned_viol, bins, "Per-step violation distribution")),
            ("group_means.svg",
             render_group_means(comps, "Total violation by scenario group")),
            ("reductions.svg",
             render_reductions(comps, "Violation reduction by scenario group")),
        ]
        for name, text in specs:
            (out_dir / name).write_text(text)
            written.append(out_dir / name)
    elif fmt == "csv":
        hist_lines = ["violation_metric"] + [_fmt(v) for v in planned_viol]
        (out_dir / "violation_histogram.csv").write_text("\n".join(hist_lines) + "\n")
        comp_lines = ["group,base_total,planned_total,abs_reduction,pct_reduction"]
        for g, c in comps.items():
            comp_lines.append(f"{g},{_fmt(c['base_total'])},{_fmt(c['planned_total'])},"
                              f"{_fmt(c['abs_reduction'])},{_fmt(c['pct_reduction'])}")
        (out_dir / "group_means.csv").write_text("\n".join(comp_lines) + "\n")
        (out_dir / "reductions.csv").write_text("\n".join(comp_lines) + "\n")
        written = [out_dir / "violation_histogram.csv", out_dir / "group_means.csv",
                   out_dir / "reductions.csv"]
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return written
