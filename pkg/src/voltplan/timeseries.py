"""Year-long load and PV profiles: CSV ingestion, snapshots, synthesis.

Profiles travel as tidy CSV (one row per timestamp/element/field) and live in
memory as dense arrays aligned to the network's bus and PV ordering. A
ScenarioSnapshot is one time step's worth of data, the unit of work for the
power-flow and OPF layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .grid_model import Network


class ProfileError(Exception):
    """Raised on malformed or inconsistent profile data."""


PROFILE_COLUMNS = ["timestamp", "element_kind", "element_id", "field", "value"]


@dataclass(frozen=True)
class ProfileSet:
    """Per-bus load and per-PV output series on a shared uniform time axis.

    Arrays are (n_steps, n_elements), pu. ``pv_q_min``/``pv_q_max`` are None
    when the source data carried no PV reactive-limit series; snapshots then
    fall back to the static PvResource bounds.
    """

    timestamps: pd.DatetimeIndex
    bus_ids: tuple[str, ...]
    pv_ids: tuple[str, ...]
    load_p: np.ndarray
    load_q: np.ndarray
    pv_p_mpp: np.ndarray
    pv_q_min: np.ndarray | None = None
    pv_q_max: np.ndarray | None = None

    def index_of(self, t) -> int:
        t = pd.Timestamp(t)
        loc = self.timestamps.get_indexer([t])
        if loc[0] < 0:
            raise ProfileError(f"timestamp {t.isoformat()} not in profile set")
        return int(loc[0])


@dataclass(frozen=True)
class ScenarioSnapshot:
    """One time step bound to a Network: demands, PV operating points, PV
    reactive limits. Vectors are aligned to net.buses / net.pv_resources."""

    timestamp: pd.Timestamp
    d_p: np.ndarray
    d_q: np.ndarray
    pv_p_mpp: np.ndarray
    pv_q_min: np.ndarray
    pv_q_max: np.ndarray


def snapshot(ps: ProfileSet, t, net: Network) -> ScenarioSnapshot:
    """Extract the snapshot at timestamp ``t``; pure in (ps, t, net)."""
    k = ps.index_of(t)
    n_pv = len(net.pv_resources)
    if ps.pv_q_min is not None:
        q_min = ps.pv_q_min[k].copy()
        q_max = ps.pv_q_max[k].copy()
    else:
        q_min = np.array([pv.q_min for pv in net.pv_resources], dtype=float)
        q_max = np.array([pv.q_max for pv in net.pv_resources], dtype=float)
    return ScenarioSnapshot(
        timestamp=ps.timestamps[k],
        d_p=ps.load_p[k].copy(),
        d_q=ps.load_q[k].copy(),
        pv_p_mpp=ps.pv_p_mpp[k].copy() if n_pv else np.zeros(0),
        pv_q_min=q_min,
        pv_q_max=q_max,
    )


def baseline_snapshot(net: Network, t="2030-01-01 00:00") -> ScenarioSnapshot:
    """Snapshot built from the case file's default demands (no profiles)."""
    return ScenarioSnapshot(
        timestamp=pd.Timestamp(t),
        d_p=np.array([b.demand_p for b in net.buses], dtype=float),
        d_q=np.array([b.demand_q for b in net.buses], dtype=float),
        pv_p_mpp=np.zeros(len(net.pv_resources)),
        pv_q_min=np.array([pv.q_min for pv in net.pv_resources], dtype=float),
        pv_q_max=np.array([pv.q_max for pv in net.pv_resources], dtype=float),
    )


def _check_axis(ts: pd.DatetimeIndex) -> None:
    if len(ts) < 2:
        return
    deltas = np.diff(ts.asi8)
    if (deltas <= 0).any():
        raise ProfileError("timestamps not strictly increasing")
    if (deltas != deltas[0]).any():
        k = int(np.argmax(deltas != deltas[0]))
        raise ProfileError(
            f"non-uniform resolution: gap after {ts[k].isoformat()}"
        )


def load_profiles(path: str | Path, net: Network) -> ProfileSet:
    """Read a tidy profiles CSV and build a gap-free ProfileSet.

    Errors on missing timestamp rows (non-uniform axis or holes in any
    series), unknown element ids, and negative pv p_mpp values. Bus series
    absent from the file default to the case's static demand.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ProfileError(f"cannot read profiles {path}: {e}") from e
    if list(df.columns) != PROFILE_COLUMNS:
        raise ProfileError(
            f"{path}: expected columns {PROFILE_COLUMNS}, got {list(df.columns)}"
        )
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    df["element_id"] = df["element_id"].astype(str)
    ts = pd.DatetimeIndex(sorted(df["timestamp"].unique()))
    _check_axis(ts)

    bus_ids = tuple(b.id for b in net.buses)
    pv_ids = tuple(pv.bus for pv in net.pv_resources)
    known_bus = set(bus_ids)
    known_pv = set(pv_ids)

    for kind, eid in df[["element_kind", "element_id"]].drop_duplicates().itertuples(index=False):
        if kind == "bus":
            if eid not in known_bus:
                raise ProfileError(f"{path}: unknown bus id {eid!r}")
        elif kind == "pv":
            if eid not in known_pv:
                raise ProfileError(f"{path}: unknown pv id {eid!r}")
        else:
            raise ProfileError(f"{path}: unknown element_kind {kind!r}")

    nT = len(ts)
    pos = {t: i for i, t in enumerate(ts)}

    def series_table(kind: str, fld: str, ids: tuple[str, ...], defaults: np.ndarray,
                     required: bool) -> np.ndarray | None:
        sub = df[(df["element_kind"] == kind) & (df["field"] == fld)]
        if sub.empty:
            if required:
                return None
            return np.tile(defaults, (nT, 1))
        out = np.full((nT, len(ids)), np.nan)
        col = {e: j for j, e in enumerate(ids)}
        rows = sub["timestamp"].map(pos).to_numpy()
        cols = sub["element_id"].map(col).to_numpy()
        out[rows, cols] = sub["value"].to_numpy(dtype=float)
        # ids with no rows at all fall back to defaults
        seen = set(sub["element_id"].unique())
        for e, j in col.items():
            if e not in seen:
                out[:, j] = defaults[j]
        if np.isnan(out).any():
            i, j = np.argwhere(np.isnan(out))[0]
            raise ProfileError(
                f"{path}: missing {kind}/{fld} row for {ids[j]!r} "
                f"at {ts[i].isoformat()}"
            )
        return out

    d_p0 = np.array([b.demand_p for b in net.buses], dtype=float)
    d_q0 = np.array([b.demand_q for b in net.buses], dtype=float)
    load_p = series_table("bus", "load_p", bus_ids, d_p0, required=False)
    load_q = series_table("bus", "load_q", bus_ids, d_q0, required=False)

    if pv_ids:
        pv_p = series_table("pv", "p_mpp", pv_ids, np.zeros(len(pv_ids)), required=True)
        if pv_p is None:
            raise ProfileError(f"{path}: pv p_mpp series required but absent")
        if (pv_p < 0).any():
            i, j = np.argwhere(pv_p < 0)[0]
            raise ProfileError(
                f"{path}: negative pv p_mpp for {pv_ids[j]!r} at {ts[i].isoformat()}"
            )
        qmin0 = np.array([pv.q_min for pv in net.pv_resources])
        qmax0 = np.array([pv.q_max for pv in net.pv_resources])
        has_q = ((df["element_kind"] == "pv") & (df["field"] == "q_min")).any()
        pv_qmin = series_table("pv", "q_min", pv_ids, qmin0, required=False) if has_q else None
        pv_qmax = series_table("pv", "q_max", pv_ids, qmax0, required=False) if has_q else None
    else:
        pv_p = np.zeros((nT, 0))
        pv_qmin = pv_qmax = None

    return ProfileSet(
        timestamps=ts, bus_ids=bus_ids, pv_ids=pv_ids,
        load_p=load_p, load_q=load_q, pv_p_mpp=pv_p,
        pv_q_min=pv_qmin, pv_q_max=pv_qmax,
    )


def save_profiles(ps: ProfileSet, path: str | Path) -> None:
    """Write the tidy CSV format load_profiles reads."""
    rows: list[tuple] = []
    iso = [t.isoformat() for t in ps.timestamps]
    for j, b in enumerate(ps.bus_ids):
        for i, t in enumerate(iso):
            rows.append((t, "bus", b, "load_p", repr(float(ps.load_p[i, j]))))
            rows.append((t, "bus", b, "load_q", repr(float(ps.load_q[i, j]))))
    for j, p in enumerate(ps.pv_ids):
        for i, t in enumerate(iso):
            rows.append((t, "pv", p, "p_mpp", repr(float(ps.pv_p_mpp[i, j]))))
            if ps.pv_q_min is not None:
                rows.append((t, "pv", p, "q_min", repr(float(ps.pv_q_min[i, j]))))
                rows.append((t, "pv", p, "q_max", repr(float(ps.pv_q_max[i, j]))))
    with open(path, "w") as f:
        f.write(",".join(PROFILE_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join(r) + "\n")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic year generator.

    pv_penetration is the ratio of annual PV energy to annual load energy;
    cloud_volatility in [0, 1] scales stochastic irradiance dips (0 = clear
    sky). Identical (config, seed) pairs reproduce bit-identical profiles.
    """

    resolution_hours: float = 1.0
    pv_penetration: float = 0.25
    cloud_volatility: float = 0.3
    seed: int = 0
    start: str = "2030-01-01"
    days: int = 365
    load_noise: float = 0.003
    load_swing: float = 0.045     # diurnal peak-to-mean swing of the load shape
    load_seasonal: float = 0.04   # winter-peak seasonal amplitude
    # weather events: short episodes of unusually high (cold snap) or low
    # (mild holiday) demand; these create the extreme scenarios the planner
    # is meant to find
    high_events: int = 8
    low_events: int = 6
    high_event_amp: tuple[float, float] = (1.15, 1.25)
    low_event_amp: tuple[float, float] = (0.76, 0.84)
    event_days: tuple[int, int] = (2, 4)
    # buses with flat (industrial-style) profiles: damped diurnal swing
    flat_shape_buses: tuple[str, ...] = ()
    flat_damping: float = 0.3


def _load_shape(hours: np.ndarray, days: np.ndarray, dows: np.ndarray,
                swing: float, seasonal_amp: float) -> np.ndarray:
    seasonal = 1.0 + seasonal_amp * np.cos(2 * np.pi * (days - 15) / 365.0)
    weekly = np.where(dows >= 5, 0.985, 1.0)
    # evening residential peak, commercial midday plateau, overnight dip
    diurnal = (1.0
               + swing * np.exp(-0.5 * ((hours - 19.0) / 2.6) ** 2)
               + 0.9 * swing * np.exp(-0.5 * ((hours - 13.0) / 3.2) ** 2)
               - 0.5 * swing * np.exp(-0.5 * ((hours - 3.0) / 2.4) ** 2))
    return seasonal * weekly * diurnal


def _event_multiplier(nT: int, steps_per_day: int, config: SynthConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative demand episodes: cold snaps in the cold months,
    low-demand spells in the mild ones."""
    n_days = nT // steps_per_day
    mult = np.ones(nT)
    t = np.arange(nT, dtype=float) / steps_per_day  # in days

    def apply(day0, dur, amp):
        # raised-cosine window with half-day ramps
        lo, hi = day0, day0 + dur
        w = np.clip(np.minimum(t - lo, hi - t) / 0.5, 0.0, 1.0)
        w = 0.5 - 0.5 * np.cos(np.pi * w)
        w[(t < lo) | (t > hi)] = 0.0
        np.multiply(mult, 1.0 + (amp - 1.0) * w, out=mult)

    cold_days = [d for d in range(n_days)
                 if d % 365 < 60 or d % 365 >= 300]
    mild_days = [d for d in range(n_days) if 120 <= d % 365 < 270]
    for _ in range(config.high_events):
        day0 = cold_days[rng.integers(len(cold_days))] if cold_days else 0
        dur = int(rng.integers(config.event_days[0], config.event_days[1] + 1))
        amp = rng.uniform(*config.high_event_amp)
        apply(day0, dur, amp)
    for _ in range(config.low_events):
        day0 = mild_days[rng.integers(len(mild_days))] if mild_days else 0
        dur = int(rng.integers(config.event_days[0], config.event_days[1] + 1))
        amp = rng.uniform(*config.low_event_amp)
        apply(day0, dur, amp)
    return mult


def _clear_sky(hours: np.ndarray, days: np.ndarray) -> np.ndarray:
    # broad daylight window symmetric around 12:00 so noon is the daily
    # maximum; flattened top keeps the midday peak-to-energy ratio modest
    season = np.cos(2 * np.pi * (days - 172) / 365.0)
    daylight = 13.0 + 2.0 * season
    amplitude = 0.80 + 0.20 * season
    phase = (hours - (12.0 - daylight / 2.0)) / daylight
    bell = np.sin(np.pi * np.clip(phase, 0.0, 1.0)) ** 0.75
    bell[(phase <= 0.0) | (phase >= 1.0)] = 0.0
    return amplitude * bell


def synthesize_year(net: Network, config: SynthConfig = SynthConfig()) -> ProfileSet:
    """Generate a deterministic synthetic year of load and PV data.

    Load: per-bus base demand x seasonal/weekly/diurnal shape x lognormal
    noise. PV: clear-sky half-wave (zero at night, peak at noon) x an AR(1)
    cloud factor, scaled so annual PV energy / annual load energy equals
    pv_penetration up to clipping at the inverter rating.
    """
    if not (0.0 <= config.pv_penetration <= 1.0):
        raise ValueError("pv_penetration must be within [0, 1]")
    rng = np.random.default_rng(config.seed)
    steps_per_day = int(round(24.0 / config.resolution_hours))
    nT = config.days * steps_per_day
    ts = pd.date_range(config.start, periods=nT,
                       freq=pd.Timedelta(hours=config.resolution_hours))
    hours = ts.hour.to_numpy() + ts.minute.to_numpy() / 60.0
    days = ts.dayofyear.to_numpy().astype(float)
    dows = ts.dayofweek.to_numpy()

    bus_ids = tuple(b.id for b in net.buses)
    pv_ids = tuple(pv.bus for pv in net.pv_resources)
    base_p = np.array([b.demand_p for b in net.buses], dtype=float)
    base_q = np.array([b.demand_q for b in net.buses], dtype=float)

    shape = _load_shape(hours, days, dows, config.load_swing, config.load_seasonal)
    flat = _load_shape(hours, days, dows,
                       config.load_swing * config.flat_damping,
                       config.load_seasonal)
    events = _event_multiplier(nT, steps_per_day, config, rng)
    sigma = config.load_noise
    noise = np.exp(sigma * rng.standard_normal((nT, len(bus_ids))) - 0.5 * sigma**2)
    flat_set = set(config.flat_shape_buses)
    per_bus_shape = np.column_stack(
        [flat if b in flat_set else shape for b in bus_ids])
    factor = per_bus_shape * events[:, None] * noise
    load_p = base_p[None, :] * factor
    load_q = base_q[None, :] * factor  # constant power factor per bus

    n_pv = len(pv_ids)
    if n_pv == 0 or config.pv_penetration == 0.0:
        pv_p = np.zeros((nT, n_pv))
    else:
        clear = _clear_sky(hours, days)
        # AR(1) cloudiness in [0, 1], persistent over a few hours
        rho = 0.85 ** config.resolution_hours
        cloud = np.empty((nT, n_pv))
        state = rng.random(n_pv)
        for i in range(nT):
            state = rho * state + (1 - rho) * rng.random(n_pv)
            cloud[i] = state
        cloud_factor = 1.0 - config.cloud_volatility * cloud
        normalized = clear[:, None] * cloud_factor
        ratings = np.array([pv.s_rating for pv in net.pv_resources])
        load_energy = float(load_p.sum())
        shape_energy = float((normalized * ratings[None, :]).sum())
        alpha = config.pv_penetration * load_energy / shape_energy
        if alpha > 1.0:
            raise ValueError(
                f"pv ratings too small for penetration {config.pv_penetration}: "
                f"would need scale {alpha:.2f} > 1"
            )
        pv_p = normalized * (alpha * ratings[None, :])

    return ProfileSet(
        timestamps=ts, bus_ids=bus_ids, pv_ids=pv_ids,
        load_p=load_p, load_q=load_q, pv_p_mpp=pv_p,
    )
