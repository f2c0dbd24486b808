"""Proportional-hazards outcome model on the sequence embedding: Cox
partial likelihood (with log-sum-exp stabilization and Breslow tie
handling), the Breslow cumulative baseline hazard, and survival-curve
prediction S(t | h) = exp(-L0(t) * exp(eta))."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class SurvivalLabel:
    """Time-to-event in days measured from the end of the observation
    window; event=1 for an observed death, 0 for censoring."""

    time: float
    event: int

    def __post_init__(self):
        if self.time <= 0:
            raise ValueError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")


def labels_to_arrays(labels) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([l.time for l in labels], dtype=float)
    events = np.array([l.event for l in labels], dtype=float)
    return times, events


@dataclass
class BreslowTable:
    """Step estimate of the cumulative baseline hazard; L0(t) jumps at the
    sorted unique event times and is 0 before the first."""

    event_times: np.ndarray
    cumulative_baseline: np.ndarray

    def __post_init__(self):
        self.event_times = np.asarray(self.event_times, dtype=float)
        self.cumulative_baseline = np.asarray(self.cumulative_baseline, dtype=float)
        if np.any(np.diff(self.event_times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if np.any(self.cumulative_baseline < 0) or np.any(np.diff(self.cumulative_baseline) < 0):
            raise ValueError("cumulative baseline must be non-negative and non-decreasing")

    def baseline_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("horizon must be non-negative")
        idx = np.searchsorted(self.event_times, t, side="right")
        padded = np.concatenate([[0.0], self.cumulative_baseline])
        return padded[idx]


def _risk_matrix(times: np.ndarray) -> np.ndarray:
    # R[i, j] = 1 iff patient j is still at risk at patient i's time
    return (times[None, :] >= times[:, None]).astype(float)


def cox_partial_loglik(eta, labels) -> float:
    """Normalized partial log-likelihood
    (1 / #events) * sum_{i: d_i=1} [eta_i - log sum_{j: t_j >= t_i} exp(eta_j)].
    """
    eta = np.asarray(eta, dtype=float).reshape(-1)
    times, events = labels_to_arrays(labels)
    if eta.shape[0] != times.shape[0]:
        raise ValueError("eta and labels length mismatch")
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("partial likelihood undefined: no events in batch")
    m = eta.max()
    log_denoms = m + np.log(_risk_matrix(times) @ np.exp(eta - m))
    return float(((eta - log_denoms) * events).sum() / n_events)


def cox_loss_nodes(graph: ad.Graph, eta: ad.Node, times: np.ndarray,
                   events: np.ndarray) -> ad.Node:
    """Negative normalized partial log-likelihood as a graph node, for
    minimization. ``eta`` is a [B, 1] node."""
    n = eta.value.shape[0]
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("partial likelihood undefined: no events in batch")
    m = float(eta.value.max())  # constant shift; gradient-exact
    shifted = ad.sub(eta, graph.constant(np.full((n, 1), m)))
    denom = ad.matmul(graph.constant(_risk_matrix(times)), ad.exp(shifted))
    log_denom = ad.add(ad.log(denom), graph.constant(np.full((n, 1), m)))
    terms = ad.sub(eta, log_denom)
    weights = graph.constant((events / n_events).reshape(n, 1))
    return ad.neg(ad.reduce_sum(ad.mul(weights, terms)))


def breslow_fit(eta, labels) -> BreslowTable:
    """Cumulative baseline hazard with Breslow tie handling:
    L0(t) = sum_{event times t_k <= t} d_k / sum_{j: t_j >= t_k} exp(eta_j).
    """
    eta = np.asarray(eta, dtype=float).reshape(-1)
    times, events = labels_to_arrays(labels)
    if eta.size == 0:
        raise ValueError("empty input")
    exp_eta = np.exp(eta)
    event_times = np.unique(times[events == 1])
    increments = []
    for t in event_times:
        d = int(((times == t) & (events == 1)).sum())
        denom = exp_eta[times >= t].sum()
        increments.append(d / denom)
    return BreslowTable(event_times=event_times,
                        cumulative_baseline=np.cumsum(increments))


def predict_survival(table: BreslowTable, eta, t) -> np.ndarray:
    """S(t | eta) = exp(-L0(t) * exp(eta)); scalar or broadcastable inputs."""
    base = table.baseline_at(t)
    return np.exp(-base * np.exp(np.asarray(eta, dtype=float)))
