"""Grid data model: buses, branches, generators, shunts, PV aggregates.

All electrical quantities are stored in per-unit on the system MVA base
(``Network.mva_base``); equipment Mvar ratings are susceptance_pu * mva_base,
defined at 1.0 pu voltage. Networks are immutable after loading and safe to
share across threads; "mutation" (e.g. installing planned equipment) builds a
new Network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path


class CaseError(Exception):
    """Raised when a case file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"[{self.severity}] {self.code}: {self.message}"


@dataclass(frozen=True)
class Bus:
    id: str
    base_kv: float
    bus_kind: str = "load"  # slack | generator | load | passive
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    is_target_load: bool = False
    v_target: float | None = None
    v_deadband: float = 0.0
    v_min: float | None = None
    v_max: float | None = None
    demand_p: float = 0.0
    demand_q: float = 0.0
    dr_q_min: float = 0.0
    dr_q_max: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    circuit: str = "1"
    series_g: float = 0.0
    series_b: float = 0.0
    charging_b: float = 0.0
    tap_ratio: float = 1.0
    phase_shift: float = 0.0
    current_limit: float = 10.0

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.from_bus, self.to_bus, self.circuit)


@dataclass(frozen=True)
class Generator:
    bus: str
    id: str
    p_sched: float = 0.0
    v_sched: float = 1.0
    q_min: float = -9.99
    q_max: float = 9.99
    is_slack_unit: bool = False


@dataclass(frozen=True)
class ShuntBlock:
    step_b: float
    max_steps: int
    initial_steps: int = 0


@dataclass(frozen=True)
class SwitchedShunt:
    bus: str
    blocks: tuple[ShuntBlock, ...]


@dataclass(frozen=True)
class PvResource:
    bus: str
    s_rating: float
    q_min: float = 0.0
    q_max: float = 0.0
    q_capability_factor: float = 1.0
    max_curtail_fraction: float = 1.0


@dataclass(frozen=True)
class EquipmentCatalog:
    """Discrete capacitor/inductor catalog.

    Realizes the admissible size sets as arithmetic progressions
    {b_min, b_min+step_b, ..., b_max} per polarity. Costs are currency for
    the fixed charge and currency per pu susceptance for the variable part.
    """

    b_plus_min: float = 0.05
    b_plus_max: float = 0.30
    b_minus_min: float = 0.05
    b_minus_max: float = 0.30
    step_b: float = 0.05
    cost_fixed: float = 100_000.0
    cost_cap_per_pu: float = 2_000_000.0
    cost_ind_per_pu: float = 2_000_000.0


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    switched_shunts: tuple[SwitchedShunt, ...] = ()
    pv_resources: tuple[PvResource, ...] = ()
    mva_base: float = 100.0
    equipment_catalog: EquipmentCatalog = field(default_factory=EquipmentCatalog)
    candidate_exclusions: tuple[str, ...] = ()

    @cached_property
    def bus_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack_bus(self) -> str:
        for g in self.generators:
            if g.is_slack_unit:
                return g.bus
        raise CaseError("network has no slack unit")

    @cached_property
    def target_buses(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.is_target_load)

    @cached_property
    def candidate_buses(self) -> tuple[str, ...]:
        return candidate_locations(self)

    @cached_property
    def generators_at(self) -> dict[str, tuple[Generator, ...]]:
        out: dict[str, list[Generator]] = {}
        for g in self.generators:
            out.setdefault(g.bus, []).append(g)
        return {k: tuple(v) for k, v in out.items()}

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def with_bus_shunts(self, added_b: dict[str, float]) -> "Network":
        """New Network with extra fixed shunt susceptance added per bus."""
        new_buses = tuple(
            replace(b, shunt_b=b.shunt_b + added_b.get(b.id, 0.0)) for b in self.buses
        )
        return replace(self, buses=new_buses)

    def with_switched_shunts(self, extra: tuple[SwitchedShunt, ...]) -> "Network":
        return replace(self, switched_shunts=self.switched_shunts + extra)


def candidate_locations(net: Network, exclude: tuple[str, ...] = ()) -> tuple[str, ...]:
    """Candidate buses for new var equipment: the target load buses minus
    exclusions (case-file exclusions plus any passed here). Deterministic,
    in bus order."""
    dropped = set(net.candidate_exclusions) | set(exclude)
    return tuple(b.id for b in net.buses if b.is_target_load and b.id not in dropped)


def validate(net: Network) -> list[Diagnostic]:
    """Check every structural invariant; returns one diagnostic per violation.

    An empty list means the network is well-formed.
    """
    diags: list[Diagnostic] = []
    err = lambda code, msg: diags.append(Diagnostic("error", code, msg))

    seen_bus = set()
    for b in net.buses:
        if b.id in seen_bus:
            err("duplicate_bus", f"bus id {b.id!r} appears more than once")
        seen_bus.add(b.id)
        if b.base_kv <= 0:
            err("bad_base_kv", f"bus {b.id}: base_kv must be > 0, got {b.base_kv}")
        if b.v_deadband < 0:
            err("bad_deadband", f"bus {b.id}: v_deadband must be >= 0")
        if b.is_target_load and b.v_target is None:
            err("missing_target", f"bus {b.id}: is_target_load requires v_target")
        if b.v_min is not None and b.v_max is not None and b.v_target is not None:
            if not (b.v_min < b.v_target < b.v_max):
                err("bad_v_bounds", f"bus {b.id}: require v_min < v_target < v_max")
        if not (b.dr_q_min <= 0.0 <= b.dr_q_max):
            err("bad_dr_range", f"bus {b.id}: require dr_q_min <= 0 <= dr_q_max")
        if b.bus_kind not in ("slack", "generator", "load", "passive"):
            err("bad_bus_kind", f"bus {b.id}: unknown bus_kind {b.bus_kind!r}")

    slack_buses = [b.id for b in net.buses if b.bus_kind == "slack"]
    if len(slack_buses) != 1:
        err("slack_count", f"exactly one slack bus required, found {len(slack_buses)}")

    ids = set(seen_bus)
    seen_branch = set()
    for br in net.branches:
        if br.from_bus not in ids:
            err("dangling_ref", f"branch {br.key}: unknown from_bus {br.from_bus!r}")
        if br.to_bus not in ids:
            err("dangling_ref", f"branch {br.key}: unknown to_bus {br.to_bus!r}")
        if br.from_bus == br.to_bus:
            err("self_loop", f"branch {br.key}: from_bus equals to_bus")
        if br.key in seen_branch:
            err("duplicate_branch", f"branch {br.key} appears more than once")
        seen_branch.add(br.key)
        if br.tap_ratio <= 0:
            err("bad_tap", f"branch {br.key}: tap_ratio must be > 0")
        if br.current_limit <= 0:
            err("bad_current_limit", f"branch {br.key}: current_limit must be > 0")

    slack_units = [g for g in net.generators if g.is_slack_unit]
    if len(slack_units) != 1:
        err("slack_unit_count",
            f"exactly one slack unit required, found {len(slack_units)}")
    elif slack_buses and slack_units[0].bus != slack_buses[0]:
        err("slack_mismatch",
            f"slack unit sits on bus {slack_units[0].bus!r}, "
            f"slack bus is {slack_buses[0]!r}")

    vset_at: dict[str, float] = {}
    for g in net.generators:
        if g.bus not in ids:
            err("dangling_ref", f"generator {g.id!r}: unknown bus {g.bus!r}")
        if g.q_min > g.q_max:
            err("bad_q_range", f"generator {g.id!r}: q_min > q_max")
        if g.v_sched <= 0:
            err("bad_v_sched", f"generator {g.id!r}: v_sched must be > 0")
        if g.bus in vset_at and abs(vset_at[g.bus] - g.v_sched) > 1e-12:
            err("vset_conflict",
                f"generator {g.id!r}: conflicting v_sched at bus {g.bus!r}")
        vset_at.setdefault(g.bus, g.v_sched)

    for s in net.switched_shunts:
        if s.bus not in ids:
            err("dangling_ref", f"switched shunt at unknown bus {s.bus!r}")
        for k, blk in enumerate(s.blocks):
            if blk.max_steps < 1:
                err("bad_steps", f"shunt {s.bus!r} block {k}: max_steps must be >= 1")
            if not (0 <= blk.initial_steps <= blk.max_steps):
                err("bad_initial_steps",
                    f"shunt {s.bus!r} block {k}: initial_steps out of range")
            if blk.step_b == 0:
                err("zero_step_b", f"shunt {s.bus!r} block {k}: step_b must be nonzero")

    for pv in net.pv_resources:
        if pv.bus not in ids:
            err("dangling_ref", f"pv resource at unknown bus {pv.bus!r}")
        if pv.s_rating <= 0:
            err("bad_s_rating", f"pv at {pv.bus!r}: s_rating must be > 0")
        if not (pv.q_min <= 0.0 <= pv.q_max):
            err("bad_pv_q_range", f"pv at {pv.bus!r}: require q_min <= 0 <= q_max")
        if not (0 < pv.q_capability_factor <= 1.5):
            err("bad_q_factor", f"pv at {pv.bus!r}: q_capability_factor out of (0, 1.5]")
        if not (0 <= pv.max_curtail_fraction <= 1):
            err("bad_curtail", f"pv at {pv.bus!r}: max_curtail_fraction out of [0, 1]")

    cat = net.equipment_catalog
    if not (0 < cat.b_plus_min <= cat.b_plus_max):
        err("bad_catalog", "require 0 < b_plus_min <= b_plus_max")
    if not (0 < cat.b_minus_min <= cat.b_minus_max):
        err("bad_catalog", "require 0 < b_minus_min <= b_minus_max")
    if cat.step_b <= 0:
        err("bad_catalog", "step_b must be > 0")
    if min(cat.cost_fixed, cat.cost_cap_per_pu, cat.cost_ind_per_pu) < 0:
        err("bad_catalog", "costs must be >= 0")

    targets = set(b.id for b in net.buses if b.is_target_load)
    for x in net.candidate_exclusions:
        if x not in ids:
            err("dangling_ref", f"candidate exclusion names unknown bus {x!r}")
    for c in candidate_locations(net):
        if c not in targets:
            err("bad_candidate", f"candidate {c!r} is not a target load bus")

    if net.mva_base <= 0:
        err("bad_mva_base", "mva_base must be > 0")
    return diags


_BUS_KEYS = {f for f in Bus.__dataclass_fields__}
_BRANCH_KEYS = {f for f in Branch.__dataclass_fields__}
_GEN_KEYS = {f for f in Generator.__dataclass_fields__}
_SHUNT_KEYS = {"bus", "blocks"}
_BLOCK_KEYS = {f for f in ShuntBlock.__dataclass_fields__}
_PV_KEYS = {f for f in PvResource.__dataclass_fields__}
_CATALOG_KEYS = {f for f in EquipmentCatalog.__dataclass_fields__}
_TOP_KEYS = {"mva_base", "buses", "branches", "generators", "switched_shunts",
             "pv_resources", "equipment_catalog", "candidate_exclusions"}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise CaseError(f"{where}: unknown keys {sorted(unknown)}")


def load_case(path: str | Path) -> Network:
    """Load and validate a case JSON file.

    Raises CaseError with parse context on malformed JSON, with the full
    diagnostic list when any invariant is violated, and on dangling
    references.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise CaseError(f"cannot read case file {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseError(
            f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(raw, dict):
        raise CaseError(f"{path}: top level must be a JSON object")
    _check_keys(raw, _TOP_KEYS, str(path))

    def build(cls, entries, allowed, where):
        out = []
        for i, obj in enumerate(entries or []):
            _check_keys(obj, allowed, f"{where}[{i}]")
            try:
                out.append(cls(**obj))
            except TypeError as e:
                raise CaseError(f"{where}[{i}]: {e}") from e
        return tuple(out)

    buses = build(Bus, raw.get("buses"), _BUS_KEYS, "buses")
    branches = build(Branch, raw.get("branches"), _BRANCH_KEYS, "branches")
    generators = build(Generator, raw.get("generators"), _GEN_KEYS, "generators")
    pvs = build(PvResource, raw.get("pv_resources"), _PV_KEYS, "pv_resources")

    shunts = []
    for i, obj in enumerate(raw.get("switched_shunts") or []):
        _check_keys(obj, _SHUNT_KEYS, f"switched_shunts[{i}]")
        blocks = []
        for j, blk in enumerate(obj.get("blocks") or []):
            _check_keys(blk, _BLOCK_KEYS, f"switched_shunts[{i}].blocks[{j}]")
            blocks.append(ShuntBlock(**blk))
        shunts.append(SwitchedShunt(bus=obj["bus"], blocks=tuple(blocks)))

    cat_raw = raw.get("equipment_catalog") or {}
    _check_keys(cat_raw, _CATALOG_KEYS, "equipment_catalog")
    catalog = EquipmentCatalog(**cat_raw)

    net = Network(
        buses=buses,
        branches=branches,
        generators=generators,
        switched_shunts=tuple(shunts),
        pv_resources=pvs,
        mva_base=float(raw.get("mva_base", 100.0)),
        equipment_catalog=catalog,
        candidate_exclusions=tuple(raw.get("candidate_exclusions") or ()),
    )
    diags = validate(net)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise CaseError(
            f"{path}: case failed validation:\n" + "\n".join(str(d) for d in errors)
        )
    return net


def network_to_dict(net: Network) -> dict:
    def drop_defaults(obj, cls):
        d = {}
        for name, f in cls.__dataclass_fields__.items():
            v = getattr(obj, name)
            d[name] = v
        return d

    return {
        "mva_base": net.mva_base,
        "buses": [drop_defaults(b, Bus) for b in net.buses],
        "branches": [drop_defaults(b, Branch) for b in net.branches],
        "generators": [drop_defaults(g, Generator) for g in net.generators],
        "switched_shunts": [
            {"bus": s.bus, "blocks": [drop_defaults(b, ShuntBlock) for b in s.blocks]}
            for s in net.switched_shunts
        ],
        "pv_resources": [drop_defaults(p, PvResource) for p in net.pv_resources],
        "equipment_catalog": drop_defaults(net.equipment_catalog, EquipmentCatalog),
        "candidate_exclusions": list(net.candidate_exclusions),
    }


def save_case(net: Network, path: str | Path) -> None:
    """Write a case JSON that load_case reads back to an equal Network."""
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1, sort_keys=True) + "\n")
