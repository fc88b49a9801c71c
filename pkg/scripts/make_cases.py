#!/usr/bin/env python3
"""Author the bundled desk-scale cases.

Writes case_2bus.json, case_5bus.json and case_14bus.json into
src/voltplan/cases/. The 14-bus grid reuses the classic 14-node topology
(20 branches, 5 machines, 3 in-line transformers) with parameters chosen so
that peak-load hours sag well below target at the load buses, giving the
planner something to fix.
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
OUT = HERE.parent / "src" / "voltplan" / "cases"


def bus(id, kind="load", base_kv=44.0, **kw):
    d = dict(
        id=id, base_kv=base_kv, bus_kind=kind, shunt_g=0.0, shunt_b=0.0,
        is_target_load=False, v_target=None, v_deadband=0.005,
        v_min=0.9, v_max=1.1, demand_p=0.0, demand_q=0.0,
        dr_q_min=0.0, dr_q_max=0.0,
    )
    d.update(kw)
    return d


def branch(f, t, r, x, b=0.0, tap=1.0, shift=0.0, limit=3.0, circuit="1"):
    y = 1.0 / complex(r, x)
    return dict(
        from_bus=f, to_bus=t, circuit=circuit, series_g=round(y.real, 10),
        series_b=round(y.imag, 10), charging_b=b, tap_ratio=tap,
        phase_shift=shift, current_limit=limit,
    )


def gen(busid, gid, p, v, qmin, qmax, slack=False):
    return dict(bus=busid, id=gid, p_sched=p, v_sched=v,
                q_min=qmin, q_max=qmax, is_slack_unit=slack)


def catalog(**kw):
    d = dict(b_plus_min=0.05, b_plus_max=0.30, b_minus_min=0.05,
             b_minus_max=0.30, step_b=0.05, cost_fixed=100000.0,
             cost_cap_per_pu=2000000.0, cost_ind_per_pu=2000000.0)
    d.update(kw)
    return d


def case_2bus():
    return {
        "mva_base": 100.0,
        "buses": [
            bus("b1", kind="slack", base_kv=100.0),
            bus("b2", base_kv=100.0, is_target_load=True, v_target=1.0,
                demand_p=0.5, demand_q=0.0),
        ],
        "branches": [branch("b1", "b2", 0.0, 0.1, limit=3.0)],
        "generators": [gen("b1", "g1", 0.0, 1.0, -5.0, 5.0, slack=True)],
        "switched_shunts": [],
        "pv_resources": [],
        "equipment_catalog": catalog(),
        # target bus kept for deviation metrics but excluded from candidacy
        "candidate_exclusions": ["b2"],
    }


def case_5bus():
    """Planning toy: radial-ish 5-bus feeder, 2 candidate buses, no PV.

    Bus n4/n5 sag under the default load; capacitors from the small
    {5, 10} Mvar catalog can restore the dead band.
    """
    buses = [
        bus("n1", kind="slack", base_kv=100.0),
        bus("n2", base_kv=100.0, demand_p=0.3, demand_q=0.1),
        bus("n3", base_kv=100.0, demand_p=0.4, demand_q=0.15),
        bus("n4", base_kv=44.0, is_target_load=True, v_target=1.0,
            demand_p=0.45, demand_q=0.22),
        bus("n5", base_kv=44.0, is_target_load=True, v_target=1.0,
            demand_p=0.35, demand_q=0.18),
    ]
    branches = [
        branch("n1", "n2", 0.01, 0.06, b=0.02),
        branch("n1", "n3", 0.012, 0.07, b=0.02),
        branch("n2", "n3", 0.015, 0.09, b=0.01),
        branch("n2", "n4", 0.02, 0.14),
        branch("n3", "n5", 0.02, 0.16),
        branch("n4", "n5", 0.03, 0.2),
    ]
    return {
        "mva_base": 100.0,
        "buses": buses,
        "branches": branches,
        "generators": [gen("n1", "sg1", 0.0, 1.02, -9.0, 9.0, slack=True)],
        "switched_shunts": [],
        "pv_resources": [],
        "equipment_catalog": catalog(b_plus_max=0.10, b_minus_max=0.10),
        "candidate_exclusions": [],
    }


def case_14bus():
    """14-node sub-transmission grid, heavily loaded.

    Buses 1, 2, 3, 6, 8 carry machines; 1 is the slack. Eleven buses are
    target load buses (all but the slack and buses 2, 8), which also makes
    them the candidate locations.
    """
    # demands and impedances tuned so that a seasonal synthetic year keeps
    # typical hours inside a 0.005-pu dead band around each bus target while
    # winter evening peaks sag the weak 12-13-14 tail well below it and
    # light summer nights push the same tail above it
    load = {
        "2": (0.08, 0.03), "3": (0.25, 0.075), "4": (0.17, 0.055),
        "5": (0.125, 0.045), "6": (0.14, 0.05), "7": (0.10, 0.038),
        "9": (0.17, 0.062), "10": (0.125, 0.045), "11": (0.11, 0.038),
        "12": (0.27, 0.10), "13": (0.33, 0.125), "14": (0.28, 0.107),
    }
    # per-bus targets sit at the typical (median-year) operating point;
    # generator buses that are targets must target their own setpoint or the
    # dead band could never be met
    target = {
        "3": 1.005, "4": 0.986, "5": 0.985, "6": 1.015, "7": 1.003,
        "9": 0.999, "10": 0.997, "11": 1.001, "12": 0.941, "13": 0.951,
        "14": 0.928,
    }
    buses = []
    for i in range(1, 15):
        bid = str(i)
        kind = "slack" if bid == "1" else ("generator" if bid in {"2", "3", "6", "8"} else "load")
        dp, dq = load.get(bid, (0.0, 0.0))
        buses.append(bus(
            bid, kind=kind, base_kv=100.0 if int(bid) <= 5 else 44.0,
            is_target_load=bid in target,
            v_target=target.get(bid),
            demand_p=dp, demand_q=dq,
        ))
    # stiff meshed core (impedances scaled down) feeding a weak radial tail
    # (12-13-14 corridor scaled up): PV reverse flow barely moves the core
    # while tail load swings move the tail a lot
    zf_core = 0.55
    zf_tail = 1.25
    tail = {("6", "12"), ("6", "13"), ("12", "13"), ("13", "14"), ("9", "14")}
    lines = [
        ("1", "2", 0.01938, 0.05917, 0.0528),
        ("1", "5", 0.05403, 0.22304, 0.0492),
        ("2", "3", 0.04699, 0.19797, 0.0438),
        ("2", "4", 0.05811, 0.17632, 0.034),
        ("2", "5", 0.05695, 0.17388, 0.0346),
        ("3", "4", 0.06701, 0.17103, 0.0128),
        ("4", "5", 0.01335, 0.04211, 0.0),
        ("6", "11", 0.09498, 0.1989, 0.0),
        ("6", "12", 0.12291, 0.25581, 0.0),
        ("6", "13", 0.06615, 0.13027, 0.0),
        ("7", "8", 0.0, 0.17615, 0.0),
        ("7", "9", 0.0, 0.11001, 0.0),
        ("9", "10", 0.03181, 0.0845, 0.0),
        ("9", "14", 0.12711, 0.27038, 0.0),
        ("10", "11", 0.08205, 0.19207, 0.0),
        ("12", "13", 0.22092, 0.19988, 0.0),
        ("13", "14", 0.17093, 0.34802, 0.0),
    ]
    xfmrs = [
        ("4", "7", 0.0, 0.20912, 0.978),
        ("4", "9", 0.0, 0.55618, 0.969),
        ("5", "6", 0.0, 0.25202, 0.932),
    ]

    def zf(f, t):
        return zf_tail if (f, t) in tail else zf_core

    branches = [branch(f, t, r * zf(f, t), x * zf(f, t), b=b * zf(f, t))
                for f, t, r, x, b in lines]
    branches += [branch(f, t, r * zf(f, t), x * zf(f, t), tap=tp)
                 for f, t, r, x, tp in xfmrs]
    gens = [
        gen("1", "g1", 0.0, 1.02, -9.0, 9.0, slack=True),
        gen("2", "g2", 0.4, 1.015, -0.8, 1.2),
        gen("3", "g3", 0.0, 1.005, -0.5, 1.0),
        gen("6", "g6", 0.0, 1.015, -0.4, 0.8),
        gen("8", "g8", 0.0, 1.01, -0.3, 0.6),
    ]
    shunts = [dict(bus="9", blocks=[dict(step_b=0.02, max_steps=2, initial_steps=1)])]
    # PV aggregates sit at electrically stiff buses so midday reverse flow
    # does not flip the system into overvoltage; their reactive range helps
    # but cannot reach the weak 12-13-14 tail
    pvs = [
        dict(bus="4", s_rating=1.5, q_min=-0.15, q_max=0.15,
             q_capability_factor=1.0, max_curtail_fraction=1.0),
        dict(bus="5", s_rating=1.2, q_min=-0.12, q_max=0.12,
             q_capability_factor=1.0, max_curtail_fraction=1.0),
        dict(bus="9", s_rating=0.2, q_min=-0.05, q_max=0.05,
             q_capability_factor=1.0, max_curtail_fraction=1.0),
    ]
    return {
        "mva_base": 100.0,
        "buses": buses,
        "branches": branches,
        "generators": gens,
        "switched_shunts": shunts,
        "pv_resources": pvs,
        "equipment_catalog": catalog(b_plus_max=0.40, b_minus_max=0.40),
        "candidate_exclusions": [],
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, data in [
        ("case_2bus", case_2bus()),
        ("case_5bus", case_5bus()),
        ("case_14bus", case_14bus()),
    ]:
        path = OUT / f"{name}.json"
        path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    sys.exit(main())
