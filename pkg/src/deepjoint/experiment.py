"""Experiment harnesses: the regime-transfer protocol (train in one
observation regime, score on the other regime's test set against the
internally trained model) and the perturbation-sensitivity probe (loss
response to small distortions of the observation process)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics as mx
from .data import EncounterSequence, prepare_cohort, split_regime_matched
from .model import (HEAD_INTENSITY, HEAD_MISSINGNESS, HEAD_SURVIVAL,
                    JointModel, batch_forward, build_tensors,
                    predict_eta_from_tensors, survival_matrix, test_set_tag)
from .seeding import derive_seed, rng_for
from .training import TrainConfig, fit_strategy


# ---------------------------------------------------------------------------
# transfer harness
# ---------------------------------------------------------------------------

@dataclass
class TransferCell:
    """One strategy evaluated on one regime's test set: the internally
    trained model against the transferred one."""

    strategy: str
    eval_regime: str
    metric: str
    internal: tuple       # bootstrap (mean, std)
    transfer: tuple
    difference: tuple     # |internal - transfer| per resample
    point_internal: float
    point_transfer: float

    @property
    def point_difference(self) -> float:
        return mx.transfer_loss(self.point_internal, self.point_transfer)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "eval_regime": self.eval_regime,
                "metric": self.metric,
                "internal": list(self.internal), "transfer": list(self.transfer),
                "difference": list(self.difference),
                "point_internal": self.point_internal,
                "point_transfer": self.point_transfer,
                "point_difference": self.point_difference}


def _curves_on(model: JointModel, seqs, grid):
    ds = prepare_cohort(seqs, model.cfg.prepare_strategy, model.stats)
    eta = predict_eta_from_tensors(model, build_tensors(model, ds))
    return survival_matrix(model, eta, grid)


def paired_transfer_bootstrap(curves_internal, curves_transfer, grid, labels,
                              horizons, max_horizon, iters, seed):
    """Bootstrap internal and transferred metrics on shared resamples so the
    per-resample difference is meaningful."""
    stacked = np.concatenate([curves_internal, curves_transfer], axis=1)
    m = curves_internal.shape[1]

    def metric_dict(curves, lbls):
        out = {}
        for h in horizons:
            col = int(np.nonzero(grid == h)[0][0])
            out[f"cindex@{h:g}"] = mx.cindex_td(1.0 - curves[:, col], lbls, h)
        out["integrated"] = mx.cindex_integrated(curves, grid, lbls, max_horizon)
        return out

    def report_fn(pred, lbls):
        internal = metric_dict(pred[:, :m], lbls)
        transfer = metric_dict(pred[:, m:], lbls)
        out = {}
        for key in internal:
            out[f"internal:{key}"] = internal[key]
            out[f"transfer:{key}"] = transfer[key]
            out[f"difference:{key}"] = abs(internal[key] - transfer[key])
        return out

    summary = mx.bootstrap(report_fn, stacked, labels, iters=iters, seed=seed)
    points = report_fn(stacked, labels)
    return summary, points


def run_transfer(cohort, strategies, base_cfg: TrainConfig,
                 model_overrides: dict | None = None,
                 horizons=(7.0, 30.0), max_horizon: float = 30.0,
                 bootstrap_iters: int = 100, seed: int = 0,
                 test_frac: float = 0.2):
    """Train every strategy once per regime (size-matched training pools) and
    score internal vs transferred models on each regime's test set.

    Returns (cells, info). ``model_overrides`` may map strategy name to a
    dict of ModelConfig overrides ("*" for a shared default)."""
    splits = split_regime_matched(cohort, seed=seed, test_frac=test_frac)
    regimes = sorted(splits.by_regime)
    overrides = model_overrides or {}
    cells, info = [], {"regimes": regimes, "seed": seed,
                       "train_sizes": {r: len(splits.train(r)) for r in regimes},
                       "test_sizes": {r: len(splits.test(r)) for r in regimes}}

    for strategy in strategies:
        per_strategy = overrides.get(strategy, overrides.get("*", {}))
        models = {}
        for regime in regimes:
            cfg = TrainConfig(**{**base_cfg.to_dict(),
                                 "seed": derive_seed(seed, "train", strategy, regime)})
            models[regime], _, _, _, _ = fit_strategy(
                splits.train(regime), strategy, cfg, model_overrides=per_strategy)
        for eval_regime in regimes:
            other = regimes[1 - regimes.index(eval_regime)]
            test_seqs = splits.test(eval_regime)
            labels = [s.label for s in test_seqs]
            times = np.array([l.time for l in labels])
            events = np.array([l.event for l in labels])
            grid = np.unique(np.concatenate(
                [times[(events == 1) & (times <= max_horizon)], list(horizons)]))
            curves_int = _curves_on(models[eval_regime], test_seqs, grid)
            curves_tra = _curves_on(models[other], test_seqs, grid)
            summary, points = paired_transfer_bootstrap(
                curves_int, curves_tra, grid, labels, horizons, max_horizon,
                bootstrap_iters, derive_seed(seed, "boot", strategy, eval_regime))
            for metric in [f"cindex@{h:g}" for h in horizons] + ["integrated"]:
                cells.append(TransferCell(
                    strategy=strategy, eval_regime=eval_regime, metric=metric,
                    internal=summary[f"internal:{metric}"],
                    transfer=summary[f"transfer:{metric}"],
                    difference=summary[f"difference:{metric}"],
                    point_internal=points[f"internal:{metric}"],
                    point_transfer=points[f"transfer:{metric}"]))
    return cells, info


def format_transfer_table(cells, metric: str = "integrated") -> str:
    """Plain-text table mirroring the Transfer / Internal / Difference layout."""
    regimes = sorted({c.eval_regime for c in cells})
    strategies = list(dict.fromkeys(c.strategy for c in cells))
    lines = []
    header = f"{'model':>12}"
    for regime in regimes:
        header += f" | {'transfer':>15} {'internal':>15} {'difference':>15}"
    lines.append(f"[{metric}] evaluated on regime: " + " / ".join(regimes))
    lines.append(header)
    lines.append("-" * len(header))
    for strategy in strategies:
        row = f"{strategy:>12}"
        for regime in regimes:
            cell = next(c for c in cells if c.strategy == strategy
                        and c.eval_regime == regime and c.metric == metric)
            row += (f" | {cell.transfer[0]:.3f} ({cell.transfer[1]:.3f})"
                    f" {cell.internal[0]:.3f} ({cell.internal[1]:.3f})"
                    f" {cell.difference[0]:.3f} ({cell.difference[1]:.3f})")
        lines.append(row)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# perturbation probe
# ---------------------------------------------------------------------------

def jitter_gaps(seq: EncounterSequence, radius: float, rng) -> EncounterSequence:
    """Multiply every inter-encounter gap by exp(u), u ~ Uniform(-r, r); the
    perturbed encounters are kept inside the observation window (a sub-
    nanohour stagger preserves strictly increasing times at the boundary)."""
    gaps = seq.gaps() * np.exp(rng.uniform(-radius, radius, size=seq.n_encounters))
    times = np.cumsum(gaps)
    ceiling = 24.0 - 1e-9 * np.arange(seq.n_encounters - 1, -1, -1)
    times = np.minimum(times, ceiling)
    if times.size == 0:
        raise ValueError("perturbation radius produced an empty sequence")
    return EncounterSequence(patient_id=seq.patient_id, times=times,
                             values=seq.values.copy(), mask=seq.mask.copy(),
                             label=seq.label, regime=seq.regime)


def dropout_mask(seq: EncounterSequence, radius: float, rng) -> EncounterSequence:
    """Flip each observed entry to missing with probability r; downstream
    preparation re-imputes the gaps."""
    drop = rng.uniform(size=seq.mask.shape) < radius
    mask = np.where(drop, 0.0, seq.mask)
    return EncounterSequence(patient_id=seq.patient_id, times=seq.times.copy(),
                             values=seq.values.copy(), mask=mask,
                             label=seq.label, regime=seq.regime)


PERTURBATION_KINDS = {"gap-jitter": jitter_gaps, "mask-dropout": dropout_mask}


def per_patient_losses(model: JointModel, seqs, alpha: float = 0.0) -> dict:
    """Per-patient task losses under the fitted model.

    Survival uses the full likelihood with the frozen Breslow baseline
    (dropping the per-event baseline mass, constant under input
    perturbations): L0(t_i) * exp(eta_i) - d_i * eta_i. Presence losses are
    the per-patient interval averages. "combined" mirrors the training
    combination with task weights 1."""
    if model.breslow is None:
        raise ValueError("model has no fitted baseline hazard")
    ds = prepare_cohort(seqs, model.cfg.prepare_strategy, model.stats)
    tensors = build_tensors(model, ds)
    eta = predict_eta_from_tensors(model, tensors)
    times = tensors.times
    events = tensors.events
    surv = model.breslow.baseline_at(times) * np.exp(eta) - events * eta
    out = {HEAD_SURVIVAL: surv}

    presence_heads = set(model.cfg.heads) & {HEAD_INTENSITY, HEAD_MISSINGNESS}
    if presence_heads:
        rows = _presence_row_values(model, tensors)
        n = tensors.n
        t_max = tensors.X.shape[1]
        norms = np.maximum(tensors.interval_mask.sum(axis=1), 1.0)
        mask_flat = tensors.interval_mask.T.reshape(-1)
        if HEAD_INTENSITY in presence_heads:
            terms = (rows["big_lambda"] - np.log(rows["lam"]))[:, 0] * mask_flat
            out[HEAD_INTENSITY] = terms.reshape(t_max, n).sum(axis=0) / norms
        if HEAD_MISSINGNESS in presence_heads:
            terms = rows["bce"].sum(axis=1) * mask_flat
            out[HEAD_MISSINGNESS] = terms.reshape(t_max, n).sum(axis=0) / norms
    combined = (1.0 - alpha) * out[HEAD_SURVIVAL] if presence_heads else out[HEAD_SURVIVAL].copy()
    for head in presence_heads:
        combined = combined + alpha * out[head]
    out["combined"] = combined
    return out


def _forward_with_rows(model, tensors):
    """batch_forward plus the raw per-row presence values."""
    from . import autodiff as ad
    from . import nets, presence

    graph = ad.Graph(model.params)
    cfg = model.cfg
    from .model import _encode_batch, _last_state
    hs = _encode_batch(graph, model, tensors)
    h_stack = ad.concat(hs, axis=0)
    eps_values = tensors.gap_targets.T.reshape(-1, 1)
    rows = {}
    if HEAD_INTENSITY in cfg.heads:
        eps_leaf = graph.input(eps_values)
        big_lambda, lam = presence.intensity_terms_nodes(
            graph, cfg.intensity_cfg(), "intensity", h_stack, eps_leaf)
        rows["big_lambda"] = big_lambda.value
        rows["lam"] = np.maximum(lam.value, 1e-300)
    if HEAD_MISSINGNESS in cfg.heads:
        logits = presence.missingness_logits_nodes(
            graph, cfg.missingness_cfg(), "missingness", h_stack,
            graph.constant(eps_values))
        terms = presence.bce_terms_nodes(
            graph, logits,
            tensors.mask_targets.transpose(1, 0, 2).reshape(-1, cfg.n_labs))
        rows["bce"] = terms.value
    return graph, None, rows


def run_perturbation(model: JointModel, seqs, radius: float, kinds,
                     n_perturbations: int = 5, seed: int = 0,
                     alpha: float = 0.0) -> dict:
    """Empirical sensitivity: mean absolute per-patient loss change over
    perturbed copies of every sequence, per head and combined."""
    base = per_patient_losses(model, seqs, alpha=alpha)
    report = {}
    for kind in kinds:
        if kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {kind!r}")
        perturb = PERTURBATION_KINDS[kind]
        deltas = {key: [] for key in base}
        for copy_idx in range(n_perturbations):
            perturbed = [perturb(s, radius,
                                 rng_for(seed, "perturb", kind, copy_idx, s.patient_id))
                         for s in seqs]
            losses = per_patient_losses(model, perturbed, alpha=alpha)
            for key in base:
                deltas[key].append(np.abs(losses[key] - base[key]))
        report[kind] = {key: float(np.mean(np.concatenate(stack)))
                        for key, stack in deltas.items()}
    return report
