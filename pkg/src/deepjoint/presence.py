"""The two observation-process heads and their likelihoods.

The gap head models P(next gap < eps | history) = 1 - exp(-Lambda(h, eps))
through the anchored monotone network; its instantaneous intensity is the
eps-derivative of Lambda, materialized as a derivative graph so the
likelihood trains end to end. The missingness head is a per-lab Bernoulli
classifier on [h, eps]; its loss is the standard binary cross-entropy,
computed from logits for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class PresenceTargets:
    """Training target for the interval following one encounter."""

    next_gap: float
    next_mask: np.ndarray
    censored: bool = False

    def __post_init__(self):
        if not self.censored and self.next_gap <= 0:
            raise ValueError("uncensored gaps must be positive")
        if self.next_gap < 0:
            raise ValueError("gaps cannot be negative")


# ---------------------------------------------------------------------------
# node-level builders (shared by the value-level ops and the trainer)
# ---------------------------------------------------------------------------

def intensity_terms_nodes(graph: ad.Graph, cfg: nets.MLPConfig, prefix: str,
                          h_stack: ad.Node | None, eps_leaf: ad.Node):
    """Cumulative intensity Lambda [N,1] and its per-row eps-derivative
    lambda [N,1] (a derivative graph over the same parameters)."""
    big_lambda = nets.positive_mlp_nodes(graph, cfg, prefix, h_stack, eps_leaf)
    lam = ad.grad_wrt_input(ad.reduce_sum(big_lambda), eps_leaf)
    if np.any(lam.value < 0):
        raise ad.DomainError("intensity derivative went negative; "
                             "monotone construction violated")
    return big_lambda, lam


def missingness_logits_nodes(graph: ad.Graph, cfg: nets.MLPConfig, prefix: str,
                             h_stack: ad.Node, eps_const: ad.Node) -> ad.Node:
    return nets.mlp_nodes(graph, cfg, prefix, ad.concat([h_stack, eps_const], axis=1))


def bce_terms_nodes(graph: ad.Graph, logits: ad.Node, targets: np.ndarray) -> ad.Node:
    """Per-entry binary cross-entropy from logits:
    -[o log p + (1-o) log(1-p)] = softplus(z) - o*z."""
    o = graph.constant(targets)
    return ad.sub(ad.softplus(logits), ad.mul(o, logits))


# ---------------------------------------------------------------------------
# value-level operations
# ---------------------------------------------------------------------------

def cumulative_intensity(cfg: nets.MLPConfig, params: dict, h, eps: float,
                         prefix: str = "intensity") -> float:
    """Lambda(h, eps) >= 0, zero at eps=0, non-decreasing in eps."""
    return nets.positive_mlp_forward(cfg, params, h, eps, prefix=prefix)


def gap_cdf(cfg: nets.MLPConfig, params: dict, h, eps: float,
            prefix: str = "intensity") -> float:
    """P(next gap < eps | h) = 1 - exp(-Lambda(h, eps))."""
    return 1.0 - np.exp(-cumulative_intensity(cfg, params, h, eps, prefix=prefix))


def _collect_intervals(state_seqs, target_seqs, include_censored: bool):
    """Flatten per-patient (embedding, target) pairs; returns the stacked
    embeddings, gaps, masks, a censoring flag per row, and per-row weights
    implementing mean-over-intervals then mean-over-patients."""
    rows_h, gaps, masks, censored, weights = [], [], [], [], []
    per_patient = []
    for states, targets in zip(state_seqs, target_seqs):
        if len(targets) > len(states):
            raise ValueError("more targets than embeddings")
        included = [(s, t) for s, t in zip(states, targets)
                    if include_censored or not t.censored]
        if included:
            per_patient.append(len(included))
            for s, t in included:
                if not t.censored and t.next_gap <= 0:
                    raise ValueError("uncensored gap must be positive")
                rows_h.append(np.asarray(s.h if isinstance(s, nets.EmbeddingState) else s,
                                         dtype=float))
                gaps.append(t.next_gap)
                masks.append(np.asarray(t.next_mask, dtype=float))
                censored.append(t.censored)
    if not per_patient:
        raise ValueError("no patient contributes an interval")
    n_patients = len(per_patient)
    for count in per_patient:
        weights.extend([1.0 / (count * n_patients)] * count)
    return (np.stack(rows_h), np.array(gaps).reshape(-1, 1),
            np.stack(masks), np.array(censored, dtype=bool),
            np.array(weights).reshape(-1, 1))


def temporal_loglik(cfg: nets.MLPConfig, params: dict, state_seqs, target_seqs,
                    prefix: str = "intensity", include_censored: bool = False) -> float:
    """Gap-process loss (negated log-likelihood), averaged per patient then
    across patients: mean_i mean_j [Lambda(eps_j) - log lambda(eps_j)].
    Censored final intervals contribute only their Lambda term, and only
    when ``include_censored`` is set."""
    h, gaps, _, censored, weights = _collect_intervals(state_seqs, target_seqs,
                                                       include_censored)
    graph = ad.Graph(params)
    eps_leaf = graph.input(gaps)
    big_lambda, lam = intensity_terms_nodes(graph, cfg, prefix,
                                            graph.constant(h), eps_leaf)
    if np.any(lam.value[~censored] <= 0):
        raise ad.DomainError("zero intensity at an uncensored gap")
    uncens = (~censored).astype(float).reshape(-1, 1)
    terms = big_lambda.value - uncens * np.log(np.maximum(lam.value, PROB_CLAMP))
    return float((weights * terms).sum())


def missingness_probs(cfg: nets.MLPConfig, params: dict, h, eps: float,
                      prefix: str = "missingness") -> np.ndarray:
    """Per-lab observation probabilities M(h, eps), clamped away from 0/1."""
    graph = ad.Graph(params)
    h_row = graph.constant(np.asarray(h, dtype=float).reshape(1, -1))
    eps_c = graph.constant(np.array([[float(eps)]]))
    logits = missingness_logits_nodes(graph, cfg, prefix, h_row, eps_c)
    probs = 1.0 / (1.0 + np.exp(-logits.value[0]))
    return np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)


def missingness_loglik(cfg: nets.MLPConfig, params: dict, state_seqs, target_seqs,
                       prefix: str = "missingness") -> float:
    """Binary cross-entropy summed over labs, averaged per patient then
    across patients. Censored final intervals are excluded."""
    h, gaps, masks, _, weights = _collect_intervals(state_seqs, target_seqs,
                                                    include_censored=False)
    graph = ad.Graph(params)
    logits = missingness_logits_nodes(graph, cfg, prefix, graph.constant(h),
                                      graph.constant(gaps))
    terms = bce_terms_nodes(graph, logits, masks)
    # the logits formulation is the clamped-BCE computed stably; saturation
    # cannot produce log(0), so every term must come out finite
    ad.check_finite(terms.value, "missingness cross-entropy")
    return float((weights * terms.value.sum(axis=1, keepdims=True)).sum())
