"""Fusing per-scenario plans into one final plan.

Two strategies: elementwise max over all scenario plans (conservative), or
cluster the scenario plans (PCA reduction + diagonal-covariance Gaussian
mixture chosen by BIC), keep only well-populated clusters, pick each
cluster's most representative scenario by its contribution to the leading
principal components, and max-combine just those representatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .grid_model import EquipmentCatalog, Network
from .opf_engine import investment_cost
from .scenario_planner import PlanEntry, ScenarioPlan

log = logging.getLogger(__name__)


class DecisionError(Exception):
    pass


@dataclass
class FinalPlan:
    entries: tuple[PlanEntry, ...]
    cost: float
    approach: str  # max_combine | cluster_representative
    source_scenarios: tuple[pd.Timestamp, ...]
    provenance: dict = field(default_factory=dict)

    def values(self) -> dict[str, dict[str, float]]:
        vals: dict[str, dict[str, float]] = {}
        for e in self.entries:
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
class ClusterModel:
    feature_matrix: np.ndarray
    pca_components: np.ndarray      # rows: component vectors (descending)
    pca_eigenvalues: np.ndarray
    reduced_dim: int
    scores: np.ndarray              # rows x reduced_dim
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray           # diagonal, per cluster
    assignments: np.ndarray         # 1-based cluster ids
    chosen_k: int
    bic_curve: dict[int, float]
    seed: int
    warnings: tuple[str, ...] = ()


@dataclass
class ClusterOptions:
    k_max: int = 8
    seed: int = 0
    reduce_var: float = 0.8
    restarts: int = 10
    em_iters: int = 500
    var_floor: float = 1e-8


def feature_matrix(plans: list[ScenarioPlan], net: Network,
                   features: str = "relaxed") -> np.ndarray:
    """Scenario-by-feature matrix: per candidate (b_plus, b_minus).

    Uses the relaxed sizes by default (continuous, information-rich); pass
    features="discrete" to encode the rounded sizes instead.
    """
    if len(plans) < 2:
        raise DecisionError("feature matrix needs at least 2 plans")
    cands = net.candidate_buses
    rows = []
    for p in plans:
        if features == "relaxed":
            if not p.relaxed:
                raise DecisionError(
                    f"plan at {p.timestamp} carries no relaxed values; "
                    "re-plan or use features='discrete'")
            vals = p.relaxed
        else:
            vals = p.discrete_values()
        row = []
        for c in cands:
            v = vals.get(c, {})
            row.extend([v.get("b_plus", 0.0), v.get("b_minus", 0.0)])
        rows.append(row)
    return np.asarray(rows, dtype=float)


def _pca(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centered PCA by SVD: (components, eigenvalues, scores)."""
    centered = m - m.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    n = max(m.shape[0] - 1, 1)
    eig = s**2 / n
    scores = u * s
    return vt, eig, scores


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def _em_fit(x: np.ndarray, k: int, rng: np.random.Generator,
            iters: int, floor: float):
    """One EM run for a diagonal-covariance mixture; returns
    (loglik, weights, means, variances, responsibilities) or None when the
    fit degenerates. The log-likelihood is asserted non-decreasing."""
    n, d = x.shape
    means = _kmeanspp_centers(x, k, rng)
    var = np.maximum(x.var(axis=0, keepdims=True), floor) * np.ones((k, d))
    w = np.full(k, 1.0 / k)
    prev = -np.inf
    resp = None
    for _ in range(iters):
        # E step in log space
        log_det = np.sum(np.log(2 * np.pi * var), axis=1)
        dist = ((x[:, None, :] - means[None, :, :]) ** 2 / var[None, :, :]).sum(axis=2)
        log_p = -0.5 * (dist + log_det[None, :]) + np.log(w)[None, :]
        m = log_p.max(axis=1, keepdims=True)
        log_norm = m + np.log(np.exp(log_p - m).sum(axis=1, keepdims=True))
        ll = float(log_norm.sum())
        if not np.isfinite(ll):
            return None
        assert ll >= prev - 1e-7 * max(1.0, abs(prev)), \
            "EM log-likelihood decreased"
        resp = np.exp(log_p - log_norm)
        if abs(ll - prev) <= 1e-10 * max(1.0, abs(ll)):
            prev = ll
            break
        prev = ll
        # M step
        nk = resp.sum(axis=0)
        if (nk < 1e-10).any():
            return None  # empty component: degenerate run
        w = nk / n
        means = (resp.T @ x) / nk[:, None]
        var = (resp.T @ (x**2)) / nk[:, None] - means**2
        var = np.maximum(var, floor)
    # a converged run is degenerate when a component collapsed: fewer than
    # two effective members, or variance pinned at the floor in a dimension
    # where the data itself has spread (likelihood blow-up, not structure)
    nk = resp.sum(axis=0)
    if (nk < 2.0 - 1e-9).any():
        return None
    data_var = x.var(axis=0)
    for dim in range(d):
        if data_var[dim] > 1e-12 and (var[:, dim] <= floor * 1.01).any():
            return None
    return prev, w, means, var, resp


def cluster_plans(m: np.ndarray, opts: ClusterOptions = ClusterOptions()) -> ClusterModel:
    """PCA-reduce, fit mixtures for k = 1..k_max, choose k by BIC.

    BIC = p*ln(n) - 2*ln(L) with p = k(2d+1) - 1 free parameters in d
    reduced dimensions; ties break toward the smaller k. Degenerate k values
    are skipped with a recorded warning.
    """
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    if n < 2:
        raise DecisionError("clustering needs at least 2 rows")
    comps, eig, scores_full = _pca(m)
    total = eig.sum()
    if total <= 1e-15:
        dim = 1
    else:
        frac = np.cumsum(eig) / total
        dim = int(np.searchsorted(frac, opts.reduce_var - 1e-12) + 1)
        dim = min(dim, max(n - 1, 1), len(eig))
    x = scores_full[:, :dim]

    warnings: list[str] = []
    fits: dict[int, tuple] = {}
    bic: dict[int, float] = {}
    for k in range(1, min(opts.k_max, n) + 1):
        best = None
        for r in range(opts.restarts):
            rng = np.random.default_rng(
                np.random.SeedSequence([opts.seed, k, r]))
            fit = _em_fit(x, k, rng, opts.em_iters, opts.var_floor)
            if fit is None:
                continue
            if best is None or fit[0] > best[0]:
                best = fit
        if best is None:
            warnings.append(f"k={k}: all EM restarts degenerate, skipped")
            continue
        ll = best[0]
        p = k * (2 * dim + 1) - 1
        bic[k] = p * np.log(n) - 2.0 * ll
        fits[k] = best
    if not fits:
        raise DecisionError("no mixture size could be fitted")
    chosen_k = min(bic, key=lambda k: (bic[k], k))
    ll, w, means, var, resp = fits[chosen_k]
    assignments = resp.argmax(axis=1) + 1
    if warnings:
        for wmsg in warnings:
            log.warning("cluster_plans: %s", wmsg)
    return ClusterModel(
        feature_matrix=m, pca_components=comps, pca_eigenvalues=eig,
        reduced_dim=dim, scores=x, weights=w, means=means, variances=var,
        assignments=assignments, chosen_k=chosen_k, bic_curve=bic,
        seed=opts.seed, warnings=tuple(warnings),
    )


@dataclass
class PcaContributions:
    per_component: np.ndarray  # rows x n_components, percentages
    combined: np.ndarray       # rows, eigenvalue-weighted fusion
    eigenvalues: np.ndarray


def pca_contributions(sub_matrix: np.ndarray) -> PcaContributions:
    """Per-row contribution to the first two principal components.

    Contribution of row i to component c is score^2 / sum of squared scores,
    in percent; the combined value weights the components by eigenvalue. If
    only one component carries variance, it is used alone; an all-constant
    matrix yields uniform contributions.
    """
    m = np.asarray(sub_matrix, dtype=float)
    if m.shape[0] < 2:
        raise DecisionError("contributions need at least 2 rows")
    _, eig, scores = _pca(m)
    keep = [c for c in range(min(2, len(eig))) if eig[c] > 1e-15]
    n = m.shape[0]
    if not keep:
        uniform = np.full((n, 1), 100.0 / n)
        return PcaContributions(uniform, uniform[:, 0].copy(), np.zeros(1))
    per = np.empty((n, len(keep)))
    for j, c in enumerate(keep):
        ss = float((scores[:, c] ** 2).sum())
        per[:, j] = scores[:, c] ** 2 / ss * 100.0
    lam = eig[keep]
    combined = (per * lam[None, :]).sum(axis=1) / lam.sum()
    return PcaContributions(per, combined, lam)


def select_representatives(cm: ClusterModel, plans: list[ScenarioPlan],
                           min_cluster_size: int = 3) -> list[pd.Timestamp]:
    """One representative scenario per surviving cluster.

    Clusters smaller than min_cluster_size are eliminated; within each
    survivor the member with the largest combined PCA contribution wins,
    ties to the earlier timestamp. Plans must be in the feature-matrix row
    order.
    """
    if len(plans) != len(cm.assignments):
        raise DecisionError("plans and cluster assignments disagree in length")
    reps: list[pd.Timestamp] = []
    survivors = 0
    for cid in range(1, cm.chosen_k + 1):
        members = np.flatnonzero(cm.assignments == cid)
        if len(members) < min_cluster_size:
            continue
        survivors += 1
        if len(members) == 1:
            reps.append(plans[members[0]].timestamp)
            continue
        contrib = pca_contributions(cm.feature_matrix[members]).combined
        best = max(
            range(len(members)),
            key=lambda j: (contrib[j], -plans[members[j]].timestamp.value),
        )
        reps.append(plans[members[best]].timestamp)
    if survivors == 0:
        raise DecisionError(
            f"all clusters smaller than min_cluster_size={min_cluster_size}; "
            "reduce min_cluster_size")
    return reps


def combine_max(plans: list[ScenarioPlan], catalog: EquipmentCatalog) -> FinalPlan:
    """Elementwise max of the discrete sizes over plans, per bus and
    polarity."""
    if not plans:
        raise DecisionError("combine_max needs at least one plan")
    cand_sets = {tuple(sorted(p.relaxed.keys())) for p in plans if p.relaxed}
    if len(cand_sets) > 1:
        raise DecisionError("plans come from different candidate sets")
    best: dict[tuple[str, str], PlanEntry] = {}
    for p in plans:
        for e in p.discrete:
            key = (e.bus, e.kind)
            if key not in best or e.size_mvar > best[key].size_mvar:
                best[key] = e
    entries = tuple(sorted(best.values(), key=lambda e: (e.bus, e.kind)))
    fp = FinalPlan(
        entries=entries, cost=0.0, approach="max_combine",
        source_scenarios=tuple(p.timestamp for p in plans),
    )
    fp.cost = investment_cost(fp.values(), catalog)
    return fp


def decide(plans: list[ScenarioPlan], approach: str, catalog: EquipmentCatalog,
           cluster_opts: ClusterOptions = ClusterOptions(),
           min_cluster_size: int = 3, net: Network | None = None,
           features: str = "relaxed") -> FinalPlan:
    """Final decision: approach "max" combines everything; approach
    "cluster" combines one representative per surviving cluster. A cluster
    request with fewer than two plans falls back to max with a warning."""
    if not plans:
        raise DecisionError("no plans to decide over")
    if approach not in ("max", "cluster"):
        raise DecisionError(f"unknown approach {approach!r}")
    if approach == "max" or len(plans) < 2:
        if approach == "cluster":
            log.warning("cluster approach needs >= 2 plans; falling back to max")
        return combine_max(plans, catalog)
    if net is None:
        raise DecisionError("cluster approach needs the network for features")
    m = feature_matrix(plans, net, features=features)
    cm = cluster_plans(m, cluster_opts)
    reps = select_representatives(cm, plans, min_cluster_size=min_cluster_size)
    rep_set = set(reps)
    rep_plans = [p for p in plans if p.timestamp in rep_set]
    fused = combine_max(rep_plans, catalog)
    return FinalPlan(
        entries=fused.entries, cost=fused.cost, approach="cluster_representative",
        source_scenarios=tuple(p.timestamp for p in rep_plans),
        provenance={
            "assignments": {str(p.timestamp): int(a)
                            for p, a in zip(plans, cm.assignments)},
            "bic_curve": {int(k): float(v) for k, v in cm.bic_curve.items()},
            "chosen_k": cm.chosen_k,
            "representatives": [str(t) for t in reps],
            "min_cluster_size": min_cluster_size,
            "seed": cm.seed,
        },
    )
