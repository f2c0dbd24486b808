"""Evaluation metrics: truncated time-dependent concordance, integrated
(Antolini-style) concordance, IPCW Brier score with Graf weights, patient
bootstrap for uncertainty, and the transfer loss used to score
transportability between observation regimes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .survival import labels_to_arrays


class MetricError(ValueError):
    """Raised when a metric is undefined on the given sample (no comparable
    pairs, censoring weight blow-up, ...)."""


# ---------------------------------------------------------------------------
# concordance
# ---------------------------------------------------------------------------

def _pair_mask(times: np.ndarray, events: np.ndarray, horizon: float) -> np.ndarray:
    """comparable[i, j]: patient i had an event at t_i <= horizon and
    patient j outlived them (t_i < t_j)."""
    earlier = times[:, None] < times[None, :]
    usable = (events == 1) & (times <= horizon)
    return earlier & usable[:, None]


def cindex_td(risk, labels, horizon: float) -> float:
    """Truncated concordance of risk-at-horizon scores; risk ties count 0.5."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    risk = np.asarray(risk, dtype=float).reshape(-1)
    times, events = labels_to_arrays(labels)
    comparable = _pair_mask(times, events, horizon)
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise MetricError("no comparable pairs at this horizon")
    higher = risk[:, None] > risk[None, :]
    tied = risk[:, None] == risk[None, :]
    concordant = (higher + 0.5 * tied)[comparable].sum()
    return float(concordant / n_pairs)


def cindex_integrated(surv_matrix, times_grid, labels, max_horizon: float) -> float:
    """Concordance aggregated over event times: each comparable pair (i, j)
    is scored with risk 1 - S(t_i | .) evaluated at the earlier patient's
    event time. ``surv_matrix[k, m]`` is patient k's predicted survival at
    ``times_grid[m]``; the grid must contain every event time up to
    ``max_horizon``."""
    surv_matrix = np.asarray(surv_matrix, dtype=float)
    times_grid = np.asarray(times_grid, dtype=float)
    times, events = labels_to_arrays(labels)
    comparable = _pair_mask(times, events, max_horizon)
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise MetricError("no comparable pairs up to the horizon")
    event_times = np.unique(times[(events == 1) & (times <= max_horizon)])
    col_of = {}
    for t in event_times:
        hits = np.nonzero(times_grid == t)[0]
        if hits.size == 0:
            raise ValueError(f"curves not evaluable at event time {t}")
        col_of[t] = hits[0]
    concordant = 0.0
    for i in np.nonzero((events == 1) & (times <= max_horizon))[0]:
        js = np.nonzero(comparable[i])[0]
        if js.size == 0:
            continue
        col = col_of[times[i]]
        risk_i = 1.0 - surv_matrix[i, col]
        risk_js = 1.0 - surv_matrix[js, col]
        concordant += (risk_i > risk_js).sum() + 0.5 * (risk_i == risk_js).sum()
    return float(concordant / n_pairs)


# ---------------------------------------------------------------------------
# censoring distribution and Brier score
# ---------------------------------------------------------------------------

class CensoringDistribution:
    """Kaplan-Meier estimate of the censoring survival function G, fit by
    treating censorings (event == 0) as the events."""

    def __init__(self, labels):
        times, events = labels_to_arrays(labels)
        order = np.argsort(times)
        times, events = times[order], events[order]
        self.jump_times = []
        self.survival_values = []
        g = 1.0
        for t in np.unique(times[events == 0]):
            c = int(((times == t) & (events == 0)).sum())
            at_risk = int((times >= t).sum())
            g *= 1.0 - c / at_risk
            self.jump_times.append(t)
            self.survival_values.append(g)
        self.jump_times = np.asarray(self.jump_times)
        self.survival_values = np.asarray(self.survival_values)

    def survival(self, t, left: bool = False) -> np.ndarray:
        """G(t); with ``left`` the left limit G(t-)."""
        side = "left" if left else "right"
        idx = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side=side)
        padded = np.concatenate([[1.0], self.survival_values])
        return padded[idx]


def brier(surv_at_horizon, labels, horizon: float,
          censoring_labels=None, max_weight: float | None = None) -> float:
    """IPCW Brier score with standard Graf weights.

    Patients dead by the horizon are weighted by 1/G(t_i-), survivors by
    1/G(horizon); patients censored before the horizon get weight 0. The
    censoring distribution is estimated on ``censoring_labels`` (defaults
    to the evaluation sample itself). ``max_weight`` optionally caps the
    inverse-probability weights instead of erroring near G ~ 0."""
    surv = np.asarray(surv_at_horizon, dtype=float).reshape(-1)
    times, events = labels_to_arrays(labels)
    cens = CensoringDistribution(labels if censoring_labels is None else censoring_labels)

    g_horizon = float(cens.survival(horizon))
    dead = (times <= horizon) & (events == 1)
    alive = times > horizon
    if (np.any(alive) and g_horizon == 0.0) and max_weight is None:
        raise MetricError("censoring survival is zero at the horizon; "
                          "weights undefined")
    weights = np.zeros_like(surv)
    if np.any(dead):
        g_dead = cens.survival(times[dead], left=True)
        if np.any(g_dead == 0.0) and max_weight is None:
            raise MetricError("censoring survival is zero before an event; "
                              "weights undefined")
        with np.errstate(divide="ignore"):
            weights[dead] = 1.0 / g_dead
    if np.any(alive):
        with np.errstate(divide="ignore"):
            weights[alive] = 1.0 / g_horizon
    if max_weight is not None:
        weights = np.minimum(weights, max_weight)
    targets = np.where(alive, 1.0, 0.0)
    residuals = np.where(dead | alive, (targets - surv) ** 2, 0.0)
    return float((weights * residuals).mean())


# ---------------------------------------------------------------------------
# bootstrap and transfer loss
# ---------------------------------------------------------------------------

def bootstrap(report_fn, predictions, labels, iters: int = 100, seed: int = 0,
              max_retries: int = 10):
    """Resample patients with replacement (predictions fixed, no refit),
    recompute the metrics, and report their mean and std.

    ``report_fn(pred_subset, label_subset)`` may return a float or a dict of
    floats. Degenerate resamples (MetricError) are redrawn up to
    ``max_retries`` times each and logged."""
    if iters < 2:
        raise ValueError("need at least 2 bootstrap iterations")
    predictions = np.asarray(predictions, dtype=float)
    n = len(labels)
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(iters):
        for attempt in range(max_retries + 1):
            idx = rng.integers(0, n, size=n)
            try:
                value = report_fn(predictions[idx], [labels[k] for k in idx])
                break
            except MetricError:
                if attempt == max_retries:
                    raise
                warnings.warn("degenerate bootstrap resample skipped")
        results.append(value if isinstance(value, dict) else {"metric": value})
    keys = results[0].keys()
    out = {k: (float(np.mean([r[k] for r in results])),
               float(np.std([r[k] for r in results], ddof=1)))
           for k in keys}
    return out if len(keys) > 1 or "metric" not in keys else out["metric"]


def transfer_loss(internal: float, transferred: float,
                  internal_tag: str | None = None,
                  transferred_tag: str | None = None) -> float:
    """|internal - transferred|; the smaller, the more transportable. Both
    metrics must come from the identical test set, enforced via optional
    identity tags."""
    if internal_tag is not None and transferred_tag is not None \
            and internal_tag != transferred_tag:
        raise ValueError(f"metrics computed on different test sets: "
                         f"{internal_tag!r} vs {transferred_tag!r}")
    return abs(internal - transferred)


@dataclass
class EvaluationReport:
    """Bootstrap summary of one model on one test set: per-horizon C-index
    and Brier plus the integrated C-index, each as (mean, std)."""

    horizons: list
    cindex: dict = field(default_factory=dict)          # horizon -> (mean, std)
    brier: dict = field(default_factory=dict)           # horizon -> (mean, std)
    integrated_cindex: tuple = (float("nan"), float("nan"))
    n_bootstrap: int = 0
    test_tag: str = ""

    def __post_init__(self):
        for horizon, (mean, std) in list(self.cindex.items()):
            if not (0.0 <= mean <= 1.0) or std < 0:
                raise ValueError(f"invalid C-index summary at {horizon}")
        for horizon, (mean, std) in list(self.brier.items()):
            if mean < 0 or std < 0:
                raise ValueError(f"invalid Brier summary at {horizon}")

    def to_dict(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "cindex": {str(h): list(v) for h, v in self.cindex.items()},
            "brier": {str(h): list(v) for h, v in self.brier.items()},
            "integrated_cindex": list(self.integrated_cindex),
            "n_bootstrap": self.n_bootstrap,
            "test_tag": self.test_tag,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvaluationReport":
        return cls(
            horizons=payload["horizons"],
            cindex={float(h): tuple(v) for h, v in payload["cindex"].items()},
            brier={float(h): tuple(v) for h, v in payload["brier"].items()},
            integrated_cindex=tuple(payload["integrated_cindex"]),
            n_bootstrap=payload["n_bootstrap"],
            test_tag=payload.get("test_tag", ""),
        )
