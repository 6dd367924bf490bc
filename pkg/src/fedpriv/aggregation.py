"""Update aggregation: FedAvg, dynamic weighting, anomaly filtering, Krum.

All aggregators consume immutable update lists and sum in canonical
client_id order, so results are independent of input permutation and of any
parallelism in how updates were produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import ClientUpdate, ParamVector, ShapeError


@dataclass(frozen=True)
class WeightVector:
    """Non-negative per-client weights summing to one."""

    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise ValueError("empty weight vector")
        if any(x < 0 for x in w):
            raise ValueError("weights must be >= 0")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class AggregatorConfig:
    strategy: str = "robust"  # fedavg | weighted | robust
    krum_f: int = 1
    multi_krum_m: int = 5
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    filter_c: float = 2.0
    staleness_tau: int = 3
    staleness_rho: float = 0.5

    def __post_init__(self) -> None:
        if self.strategy not in ("fedavg", "weighted", "robust"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.krum_f < 0:
            raise ValueError("krum_f must be >= 0")
        if self.multi_krum_m < 1:
            raise ValueError("multi_krum_m must be >= 1")
        if self.filter_c < 0:
            raise ValueError("filter_c must be >= 0")
        if not (0.0 < self.staleness_rho <= 1.0):
            raise ValueError("staleness_rho must lie in (0, 1]")
        if self.staleness_tau < 0:
            raise ValueError("staleness_tau must be >= 0")


@dataclass
class AnomalyReport:
    """Per-client suspicion scores and the resulting filter decision."""

    scores: dict[int, float]
    threshold: float
    filtered: frozenset[int]
    lambdas: tuple[float, float, float]
    selected: tuple[int, ...] = ()
    applied: tuple[int, ...] = ()
    fallback: bool = False


def _canonical(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates")
    return sorted(updates, key=lambda u: u.client_id)


def n_weights(updates: Sequence[ClientUpdate]) -> WeightVector:
    """Classical FedAvg weights n_i / sum(n_j), aligned with the input order."""
    total = float(sum(u.sample_count for u in updates))
    return WeightVector(tuple(u.sample_count / total for u in updates))


def weighted_aggregate(
    updates: Sequence[ClientUpdate], weights: WeightVector, base: ParamVector
) -> ParamVector:
    """base + sum_i w_i * delta_i, summed in client_id order."""
    if len(updates) != len(weights):
        raise ValueError("update and weight counts disagree")
    for u in updates:
        if not u.delta.same_layout(base):
            raise ShapeError("update layout does not match the base model")
    order = sorted(range(len(updates)), key=lambda i: updates[i].client_id)
    acc = np.zeros(base.size)
    for i in order:
        acc += weights.weights[i] * updates[i].delta.values
    return base.with_values(base.values + acc)


def fedavg(updates: Sequence[ClientUpdate], base: ParamVector) -> ParamVector:
    """Sample-count-weighted mean of deltas applied to the base model."""
    if not updates:
        raise ValueError("no client updates")
    return weighted_aggregate(updates, n_weights(updates), base)


def compute_weights(
    updates: Sequence[ClientUpdate],
    history: Mapping[int, float] | None = None,
) -> WeightVector:
    """Dynamic weights from sample size, update magnitude, and quality history.

    w~_i = (n_i / sum n) * q_i * m_i with q_i the clipped history EMA and
    m_i = clip(median_j ||d_j|| / max(||d_i||, 1e-12), 0.5, 1.5); the result
    is normalized to sum to one and aligned with the input order.
    """
    if not updates:
        raise ValueError("no client updates")
    norms = np.array([u.delta.norm() for u in updates])
    median = float(np.median(norms))
    total_n = float(sum(u.sample_count for u in updates))
    raw = []
    for u, nrm in zip(updates, norms):
        q = 1.0 if history is None else float(history.get(u.client_id, 1.0))
        q = min(max(q, 0.5), 1.5)
        m = min(max(median / max(float(nrm), 1e-12), 0.5), 1.5)
        raw.append((u.sample_count / total_n) * q * m)
    total = sum(raw)
    return WeightVector(tuple(r / total for r in raw))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        # a zero vector has no direction: score it as perfectly aligned
        return 1.0
    return float(np.dot(a, b) / (na * nb))


def anomaly_scores(
    updates: Sequence[ClientUpdate],
    global_mean_delta: ParamVector,
    lambdas: tuple[float, float, float],
    filter_c: float,
) -> AnomalyReport:
    """S_i = l1*||d_i|| + l2*(1 - cos(d_i, mean)) + l3*max(0, loss_delta_i).

    Threshold is mean(S) + filter_c * std(S); clients strictly above it are
    filtered. The (1 - cos) form makes larger scores uniformly mean "more
    anomalous".
    """
    ups = _canonical(updates)
    l1, l2, l3 = lambdas
    mean_vals = global_mean_delta.values
    scores: dict[int, float] = {}
    for u in ups:
        d = u.delta.values
        s = (
            l1 * float(np.linalg.norm(d))
            + l2 * (1.0 - _cosine(d, mean_vals))
            + l3 * max(0.0, float(u.loss_delta))
        )
        scores[u.client_id] = s
    arr = np.array([scores[u.client_id] for u in ups])
    threshold = float(arr.mean() + filter_c * arr.std())
    filtered = frozenset(cid for cid, s in scores.items() if s > threshold)
    return AnomalyReport(
        scores=scores, threshold=threshold, filtered=filtered, lambdas=(l1, l2, l3)
    )


def krum_select(
    updates: Sequence[ClientUpdate], f: int, m_select: int
) -> list[int]:
    """Multi-Krum: client ids of the m_select lowest-scoring updates.

    score(i) sums the squared L2 distances from update i to its n-f-2 nearest
    other updates; ties break toward the lowest client_id.
    """
    ups = _canonical(updates)
    n = len(ups)
    if f < 0:
        raise ValueError("f must be >= 0")
    if n < 2 * f + 3:
        raise ValueError(f"krum needs n >= 2f+3, got n={n}, f={f}")
    if not (1 <= m_select <= n - f - 2):
        raise ValueError(f"m_select must lie in [1, n-f-2], got {m_select}")
    mat = np.stack([u.delta.values for u in ups])
    k = n - f - 2
    scored = []
    for i in range(n):
        diffs = mat - mat[i]
        d2 = np.einsum("ij,ij->i", diffs, diffs)
        d2 = np.delete(d2, i)
        d2.sort()
        scored.append((float(d2[:k].sum()), ups[i].client_id))
    scored.sort()
    return [cid for _, cid in scored[:m_select]]


def staleness_discount(update: ClientUpdate, tau: int, rho: float) -> float:
    """rho^staleness while staleness <= tau; older updates are dropped (0)."""
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must lie in (0, 1]")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if update.staleness > tau:
        return 0.0
    return float(rho**update.staleness)


def robust_aggregate(
    updates: Sequence[ClientUpdate],
    cfg: AggregatorConfig,
    base: ParamVector,
    history: Mapping[int, float] | None = None,
) -> tuple[ParamVector, AnomalyReport]:
    """Anomaly filter, Krum selection, then weighted aggregation.

    Staleness multipliers are folded into the weights and renormalized. When
    too few clients survive the filter for Krum, the pipeline falls back to
    weighted aggregation over the survivors and flags the report.
    """
    ups = _canonical(updates)
    mean_vals = np.mean(np.stack([u.delta.values for u in ups]), axis=0)
    mean_delta = base.with_values(mean_vals)
    report = anomaly_scores(ups, mean_delta, cfg.lambdas, cfg.filter_c)
    survivors = [u for u in ups if u.client_id not in report.filtered]

    f = cfg.krum_f
    if len(survivors) >= 2 * f + 3:
        m_sel = max(1, min(cfg.multi_krum_m, len(survivors) - f - 2))
        selected_ids = krum_select(survivors, f, m_sel)
        fallback = False
    else:
        selected_ids = [u.client_id for u in survivors]
        fallback = True
    chosen = [u for u in ups if u.client_id in set(selected_ids)]

    weights = compute_weights(chosen, history)
    mults = [staleness_discount(u, cfg.staleness_tau, cfg.staleness_rho) for u in chosen]
    folded = np.array(weights.weights) * np.array(mults)
    mass = float(folded.sum())
    if mass <= 0.0:
        # every selected update was too stale; leave the model untouched
        report = replace(
            report, selected=tuple(selected_ids), applied=(), fallback=True
        )
        return base.copy(), report
    folded_w = WeightVector(tuple(folded / mass))
    new_params = weighted_aggregate(chosen, folded_w, base)
    applied = tuple(u.client_id for u, w in zip(chosen, folded_w.weights) if w > 0)
    report = replace(
        report, selected=tuple(selected_ids), applied=applied, fallback=fallback
    )
    return new_params, report
