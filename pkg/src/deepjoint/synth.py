"""Synthetic cohorts with an informative observation process.

A latent health trajectory drives (1) when encounters happen, via an
inhomogeneous Poisson process whose intensity rises with severity, (2)
which labs get measured, via per-lab logits shifted by severity, (3) the
lab values themselves, and (4) the survival outcome. A shift knob perturbs
only the observation process of regime B: RNG streams are split per
purpose so latent trajectories and survival draws are bit-identical with
and without the shift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import (EncounterSequence, TRUTH_FORMAT, FORMAT_VERSION, WINDOW_HOURS)
from .metrics import cindex_td
from .seeding import rng_for
from .survival import SurvivalLabel

_MAX_REDRAWS = 100


@dataclass
class GeneratorConfig:
    n_patients: int = 4000            # total; regimes alternate A/B
    n_labs: int = 8
    latent_dim: int = 2
    base_rate: float = 0.35           # encounters/hour at severity 0
    informativeness: float = 0.8      # severity gain on rate and mask logits
    lab_logits: list = field(default_factory=list)  # default linspace(-0.5, 1)
    shift_rate: float = -0.15         # regime-B base-rate offset
    shift_logit: float = -1.0         # regime-B lab-logit offset
    weibull_shape: float = 1.5
    weibull_scale_days: float = 60.0
    risk_gain: float = 2.0
    censoring_rate: float = 0.2
    noise_std: float = 0.4
    ou_reversion: float = 0.15        # per hour
    ou_sigma: float = 0.35
    grid_step_hours: float = 0.5
    severity_weights: list = field(default_factory=list)  # default e_0
    seed: int = 0

    def __post_init__(self):
        if not self.lab_logits:
            self.lab_logits = np.linspace(-0.5, 1.0, self.n_labs).tolist()
        if not self.severity_weights:
            self.severity_weights = [1.0] + [0.0] * (self.latent_dim - 1)
        if len(self.lab_logits) != self.n_labs:
            raise ValueError("lab_logits must have one entry per lab")
        if len(self.severity_weights) != self.latent_dim:
            raise ValueError("severity_weights must match latent_dim")
        if self.base_rate <= 0 or self.base_rate + self.shift_rate <= 0:
            raise ValueError("observation rates must stay positive in both regimes")
        for rate, regime in ((self.base_rate, "A"), (self.base_rate + self.shift_rate, "B")):
            if rate * WINDOW_HOURS < 1.0:
                raise ValueError(
                    f"regime {regime} expects {rate * WINDOW_HOURS:.2f} encounters "
                    "per window; raise base_rate (or shift_rate) so at least one "
                    "encounter is expected")
        if not (0.0 <= self.censoring_rate < 1.0):
            raise ValueError("censoring_rate must lie in [0, 1)")
        if self.n_patients < 2:
            raise ValueError("need at least 2 patients")

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "GeneratorConfig":
        return cls(**payload)


@dataclass
class GroundTruth:
    """Oracle-only record: never fed to models."""

    patient_id: str
    latent_times: np.ndarray
    latent: np.ndarray
    true_risk: float
    gap_intensities: np.ndarray


def _ou_path(rng, cfg: GeneratorConfig, grid: np.ndarray) -> np.ndarray:
    """Mean-reverting latent trajectory on the hour grid (exact AR(1)
    discretization, stationary start)."""
    theta, sigma, dt = cfg.ou_reversion, cfg.ou_sigma, cfg.grid_step_hours
    stationary_std = sigma / np.sqrt(2.0 * theta)
    decay = np.exp(-theta * dt)
    step_std = stationary_std * np.sqrt(1.0 - decay ** 2)
    draws = rng.normal(size=(grid.size, cfg.latent_dim))
    z = np.empty((grid.size, cfg.latent_dim))
    z[0] = stationary_std * draws[0]
    for t in range(1, grid.size):
        z[t] = decay * z[t - 1] + step_std * draws[t]
    return z


def _thinned_times(rng, rate: float, kappa: float, grid, sev) -> np.ndarray:
    """Inhomogeneous Poisson times on the window by thinning against the
    piecewise-linear severity interpolant (whose max sits on a grid node)."""
    lam_max = rate * np.exp(kappa * sev.max())
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam_max)
        if t >= WINDOW_HOURS:
            break
        lam_t = rate * np.exp(kappa * np.interp(t, grid, sev))
        if rng.uniform() <= lam_t / lam_max:
            times.append(t)
    return np.asarray(times)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def _draw_masks(rng, logits_at_enc: np.ndarray) -> np.ndarray:
    """Bernoulli masks per encounter; encounters are measurement events, so
    all-zero rows are redrawn (falling back to the most likely lab)."""
    probs = _sigmoid(logits_at_enc)
    mask = (rng.uniform(size=probs.shape) < probs).astype(float)
    for row in range(mask.shape[0]):
        tries = 0
        while mask[row].sum() == 0 and tries < _MAX_REDRAWS:
            mask[row] = (rng.uniform(size=probs.shape[1]) < probs[row]).astype(float)
            tries += 1
        if mask[row].sum() == 0:
            mask[row, int(np.argmax(probs[row]))] = 1.0
    return mask


def generate(cfg: GeneratorConfig):
    """Build the cohort and its oracle ground truth.

    Returns (list of EncounterSequence, list of GroundTruth)."""
    grid = np.arange(0.0, WINDOW_HOURS + 1e-9, cfg.grid_step_hours)
    lab_map = rng_for(cfg.seed, "labmap").normal(size=(cfg.n_labs, cfg.latent_dim))
    sev_w = np.asarray(cfg.severity_weights)

    cohort, truths, death_times = [], [], []
    for i in range(cfg.n_patients):
        regime = "A" if i % 2 == 0 else "B"
        rate = cfg.base_rate + (cfg.shift_rate if regime == "B" else 0.0)
        logits = np.asarray(cfg.lab_logits) + (cfg.shift_logit if regime == "B" else 0.0)

        z = _ou_path(rng_for(cfg.seed, i, "latent"), cfg, grid)
        sev = z @ sev_w

        obs_rng = rng_for(cfg.seed, i, "obs", regime)
        times = _thinned_times(obs_rng, rate, cfg.informativeness, grid, sev)
        redraws = 0
        while times.size == 0:
            redraws += 1
            if redraws > _MAX_REDRAWS:
                raise RuntimeError(f"patient {i}: no encounters after "
                                   f"{_MAX_REDRAWS} redraws; raise base_rate")
            times = _thinned_times(obs_rng, rate, cfg.informativeness, grid, sev)

        sev_at_enc = np.interp(times, grid, sev)
        mask = _draw_masks(rng_for(cfg.seed, i, "mask", regime),
                           logits[None, :] + cfg.informativeness * sev_at_enc[:, None])

        z_at_enc = np.column_stack([np.interp(times, grid, z[:, d])
                                    for d in range(cfg.latent_dim)])
        noise = rng_for(cfg.seed, i, "noise").normal(
            scale=cfg.noise_std, size=(times.size, cfg.n_labs))
        values = z_at_enc @ lab_map.T + noise
        values = np.where(mask == 1.0, values, np.nan)

        risk = cfg.risk_gain * float(sev[-1])
        draw = max(rng_for(cfg.seed, i, "survival").exponential(1.0), 1e-12)
        death = cfg.weibull_scale_days * (draw * np.exp(-risk)) ** (1.0 / cfg.weibull_shape)
        death_times.append(death)

        cohort.append(dict(patient_id=f"s{i:05d}", times=times, values=values,
                           mask=mask, regime=regime))
        truths.append(GroundTruth(
            patient_id=f"s{i:05d}", latent_times=grid, latent=z, true_risk=risk,
            gap_intensities=rate * np.exp(cfg.informativeness * sev_at_enc)))

    death_times = np.asarray(death_times)
    censor_rate = _calibrate_censoring(death_times, cfg.censoring_rate)
    out = []
    for i, raw in enumerate(cohort):
        death = death_times[i]
        if censor_rate > 0:
            censor = rng_for(cfg.seed, i, "censor").exponential(1.0 / censor_rate)
        else:
            censor = np.inf
        observed = min(death, censor)
        out.append(EncounterSequence(
            patient_id=raw["patient_id"], times=raw["times"], values=raw["values"],
            mask=raw["mask"],
            label=SurvivalLabel(time=float(max(observed, 1e-9)),
                                event=int(death <= censor)),
            regime=raw["regime"]))
    return out, truths


def _calibrate_censoring(death_times: np.ndarray, target: float) -> float:
    """Exponential censoring rate c with empirical P(C < T) = target."""
    if target == 0.0:
        return 0.0

    def censored_fraction(c):
        return float(np.mean(1.0 - np.exp(-c * death_times))) - target

    hi = 1.0
    while censored_fraction(hi) < 0:
        hi *= 2.0
        if hi > 1e9:
            raise RuntimeError("failed to calibrate censoring rate")
    return brentq(censored_fraction, 0.0, hi, xtol=1e-12)


def oracle_cindex(cohort, truths, horizon: float) -> float:
    """Concordance of the true risk scores: an upper-bound reference for any
    model trained on this cohort."""
    truth_by_id = {t.patient_id: t for t in truths}
    try:
        risk = np.array([truth_by_id[s.patient_id].true_risk for s in cohort])
    except KeyError as err:
        raise ValueError(f"missing ground truth for patient {err}")
    return cindex_td(risk, [s.label for s in cohort], horizon)


# ---------------------------------------------------------------------------
# ground-truth sidecar
# ---------------------------------------------------------------------------

def save_ground_truth(truths, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": TRUTH_FORMAT, "version": FORMAT_VERSION}) + "\n")
        for t in truths:
            fh.write(json.dumps({
                "patient_id": t.patient_id,
                "latent_times": np.asarray(t.latent_times).tolist(),
                "latent": np.asarray(t.latent).tolist(),
                "true_risk": t.true_risk,
                "gap_intensities": np.asarray(t.gap_intensities).tolist(),
            }) + "\n")


def load_ground_truth(path) -> list:
    truths = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if lineno == 1:
                if record.get("format") != TRUTH_FORMAT:
                    raise ValueError(f"{path}: not a ground-truth file")
                continue
            truths.append(GroundTruth(
                patient_id=record["patient_id"],
                latent_times=np.asarray(record["latent_times"]),
                latent=np.asarray(record["latent"]),
                true_risk=float(record["true_risk"]),
                gap_intensities=np.asarray(record["gap_intensities"])))
    return truths
