"""Cohort data model and input preparation.

Covers the cohort line-format, train-only normalization statistics with
provenance tags, LOCF + mean imputation, the seven input-preparation
strategies, and the random / regime-matched patient splits used by the
transfer experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .presence import PresenceTargets
from .seeding import rng_for
from .survival import SurvivalLabel

WINDOW_HOURS = 24.0
COHORT_FORMAT = "deepjoint-cohort"
TRUTH_FORMAT = "deepjoint-truth"
FORMAT_VERSION = 1

STRATEGIES = ("last", "count", "ignore", "resample", "gru_d", "feature", "deepjoint")
# ablation tags accepted by the CLI; they share deepjoint's input preparation
ABLATIONS = ("deepjoint_i", "deepjoint_m")


class CohortFormatError(ValueError):
    """Malformed cohort file; message carries the offending line number."""


@dataclass
class EncounterSequence:
    """One patient's irregular record inside the observation window."""

    patient_id: str
    times: np.ndarray        # hours since window start, strictly increasing
    values: np.ndarray       # [L, K] raw lab values, NaN where unobserved
    mask: np.ndarray         # [L, K] 1 = observed
    label: SurvivalLabel
    regime: str = "A"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError(f"{self.patient_id}: at least one encounter required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"{self.patient_id}: encounter times must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] > WINDOW_HOURS + 1e-9:
            raise ValueError(f"{self.patient_id}: encounter times must lie in "
                             f"[0, {WINDOW_HOURS}]h")
        if self.values.shape != self.mask.shape or self.values.shape[0] != self.times.size:
            raise ValueError(f"{self.patient_id}: values/mask/times shapes disagree")
        if not np.all(np.isin(self.mask, (0.0, 1.0))):
            raise ValueError(f"{self.patient_id}: mask entries must be 0 or 1")
        observed = self.mask == 1.0
        if not np.all(np.isfinite(self.values[observed])):
            raise ValueError(f"{self.patient_id}: observed values must be finite")
        # unobserved entries are undefined; normalize their storage to NaN
        self.values = np.where(observed, self.values, np.nan)

    @property
    def n_encounters(self) -> int:
        return int(self.times.size)

    @property
    def n_labs(self) -> int:
        return int(self.values.shape[1])

    def gaps(self) -> np.ndarray:
        """Inter-encounter gaps in hours; the first is measured from the
        window start."""
        return np.diff(self.times, prepend=0.0)


# ---------------------------------------------------------------------------
# normalization statistics (train split only)
# ---------------------------------------------------------------------------

@dataclass
class NormalizationStats:
    lab_mean: np.ndarray
    lab_std: np.ndarray
    gap_mean: float
    gap_std: float
    source_split: str = "train"

    def to_dict(self) -> dict:
        return {"lab_mean": self.lab_mean.tolist(), "lab_std": self.lab_std.tolist(),
                "gap_mean": self.gap_mean, "gap_std": self.gap_std,
                "source_split": self.source_split}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormalizationStats":
        return cls(lab_mean=np.asarray(payload["lab_mean"]),
                   lab_std=np.asarray(payload["lab_std"]),
                   gap_mean=float(payload["gap_mean"]), gap_std=float(payload["gap_std"]),
                   source_split=payload["source_split"])


def _safe_std(std: np.ndarray | float):
    return np.where(np.asarray(std) < 1e-12, 1.0, std)


def compute_stats(cohort, source_split: str = "train") -> NormalizationStats:
    """Per-lab value mean/std (over observed entries), per-lab count stats,
    and gap stats, tagged with the split they came from."""
    if not cohort:
        raise ValueError("cannot compute statistics on an empty split")
    k = cohort[0].n_labs
    values = np.concatenate([seq.values.reshape(-1, k) for seq in cohort])
    observed = ~np.isnan(values)
    lab_mean = np.zeros(k)
    lab_std = np.ones(k)
    for j in range(k):
        col = values[observed[:, j], j]
        if col.size:
            lab_mean[j] = col.mean()
            lab_std[j] = col.std()
    gaps = np.concatenate([seq.gaps() for seq in cohort])
    return NormalizationStats(
        lab_mean=lab_mean, lab_std=_safe_std(lab_std),
        gap_mean=float(gaps.mean()), gap_std=float(_safe_std(gaps.std())),
        source_split=source_split)


def _require_train_stats(stats: NormalizationStats):
    if stats.source_split != "train":
        raise ValueError("normalization statistics must come from the train "
                         f"split, got {stats.source_split!r}")


# ---------------------------------------------------------------------------
# imputation and strategy preparation
# ---------------------------------------------------------------------------

def impute_locf(seq: EncounterSequence, lab_means: np.ndarray) -> np.ndarray:
    """Dense raw-value matrix: each gap takes the most recent observation of
    that lab; entries with no prior observation take the train lab mean."""
    lab_means = np.asarray(lab_means, dtype=float)
    if lab_means.shape != (seq.n_labs,):
        raise ValueError(f"lab means cover {lab_means.shape[0]} labs, "
                         f"sequence has {seq.n_labs}")
    out = np.empty_like(seq.values)
    last = lab_means.copy()
    for t in range(seq.n_encounters):
        observed = seq.mask[t] == 1.0
        last = np.where(observed, seq.values[t], last)
        out[t] = last
    return out


def _z_labs(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (values - stats.lab_mean) / stats.lab_std


def _z_gaps(gaps: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (gaps - stats.gap_mean) / stats.gap_std


@dataclass
class PreparedPatient:
    patient_id: str
    label: SurvivalLabel
    regime: str
    vector: np.ndarray | None = None          # non-longitudinal strategies
    steps: list | None = None                 # encoder inputs per encounter
    targets: list | None = None               # PresenceTargets per interval
    raw_gaps: np.ndarray | None = None        # hours, for perturbation probes


@dataclass
class PreparedDataset:
    strategy: str
    patients: list
    stats: NormalizationStats
    input_dim: int


def resample_hourly(seq: EncounterSequence, stats: NormalizationStats) -> np.ndarray:
    """Hourly grid of the window: within-hour mean of observed values, then
    carry-forward across hours; hours before any observation take the train
    lab mean. Returned raw (not z-scored)."""
    k = seq.n_labs
    grid = np.empty((int(WINDOW_HOURS), k))
    slot = np.minimum(seq.times.astype(int), int(WINDOW_HOURS) - 1)
    last = stats.lab_mean.copy()
    for h in range(int(WINDOW_HOURS)):
        rows = slot == h
        if rows.any():
            vals = seq.values[rows]
            msk = seq.mask[rows]
            with np.errstate(invalid="ignore"):
                sums = np.nansum(np.where(msk == 1.0, vals, np.nan), axis=0)
            counts = msk.sum(axis=0)
            hour_mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
            last = np.where(counts > 0, hour_mean, last)
        grid[h] = last
    return grid


def presence_targets(seq: EncounterSequence) -> list:
    """One target per interval after encounters 1..L-1, plus a flagged
    censored target for the remainder of the window after the last one."""
    targets = []
    for j in range(seq.n_encounters - 1):
        targets.append(PresenceTargets(
            next_gap=float(seq.times[j + 1] - seq.times[j]),
            next_mask=seq.mask[j + 1].copy()))
    targets.append(PresenceTargets(
        next_gap=float(max(WINDOW_HOURS - seq.times[-1], 0.0)),
        next_mask=np.zeros(seq.n_labs), censored=True))
    return targets


def prepare(seq: EncounterSequence, strategy: str,
            stats: NormalizationStats) -> PreparedPatient:
    """Turn one patient into the model input for a handling strategy.

    Pure and deterministic given the (train-split) statistics.
    """
    _require_train_stats(stats)
    if strategy in ABLATIONS:
        strategy = "deepjoint"
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of "
                         f"{STRATEGIES + ABLATIONS}")
    imputed = impute_locf(seq, stats.lab_mean)
    gaps = seq.gaps()
    base = dict(patient_id=seq.patient_id, label=seq.label, regime=seq.regime,
                raw_gaps=gaps)

    if strategy == "last":
        return PreparedPatient(vector=_z_labs(imputed[-1], stats), **base)
    if strategy == "count":
        counts = seq.mask.sum(axis=0)
        return PreparedPatient(
            vector=np.concatenate([_z_labs(imputed[-1], stats), counts]), **base)
    if strategy == "ignore":
        z = _z_labs(imputed, stats)
        return PreparedPatient(steps=[{"x": z[t]} for t in range(len(z))], **base)
    if strategy == "resample":
        z = _z_labs(resample_hourly(seq, stats), stats)
        return PreparedPatient(steps=[{"x": z[t]} for t in range(len(z))], **base)
    if strategy == "gru_d":
        z_obs = np.where(seq.mask == 1.0, _z_labs(np.nan_to_num(seq.values), stats), 0.0)
        zero_means = np.zeros(seq.n_labs)  # train mean is 0 in z-space
        steps = [{"x": z_obs[t], "mask": seq.mask[t].copy(),
                  "eps": float(gaps[t]), "means": zero_means}
                 for t in range(seq.n_encounters)]
        return PreparedPatient(steps=steps, **base)
    # feature / deepjoint: [values, mask, z-scored gap] per encounter
    z = _z_labs(imputed, stats)
    z_gap = _z_gaps(gaps, stats)
    steps = [{"x": np.concatenate([z[t], seq.mask[t], [z_gap[t]]])}
             for t in range(seq.n_encounters)]
    return PreparedPatient(steps=steps, targets=presence_targets(seq), **base)


def strategy_input_dim(strategy: str, n_labs: int) -> int:
    if strategy in ABLATIONS:
        strategy = "deepjoint"
    return {"last": n_labs, "count": 2 * n_labs, "ignore": n_labs,
            "resample": n_labs, "gru_d": n_labs,
            "feature": 2 * n_labs + 1, "deepjoint": 2 * n_labs + 1}[strategy]


def prepare_cohort(cohort, strategy: str, stats: NormalizationStats) -> PreparedDataset:
    patients = [prepare(seq, strategy, stats) for seq in cohort]
    return PreparedDataset(strategy=strategy, patients=patients, stats=stats,
                           input_dim=strategy_input_dim(strategy, cohort[0].n_labs))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class Splits:
    train: list
    val: list
    test: list


def _shuffled(cohort, rng) -> list:
    ordered = sorted(cohort, key=lambda s: s.patient_id)
    perm = rng.permutation(len(ordered))
    return [ordered[i] for i in perm]


def split_random(cohort, test_frac: float = 0.2, val_frac: float = 0.1,
                 seed: int = 0) -> Splits:
    """Patient-level disjoint train/val/test split; ``val_frac`` is taken
    from the post-test training pool."""
    if not (0.0 < test_frac < 1.0 and 0.0 < val_frac < 1.0):
        raise ValueError("fractions must lie in (0, 1)")
    shuffled = _shuffled(cohort, rng_for(seed, "split-random"))
    n = len(shuffled)
    n_test = int(round(test_frac * n))
    n_val = int(round(val_frac * (n - n_test)))
    if n_test == 0 or n_val == 0 or n - n_test - n_val <= 0:
        raise ValueError(f"cohort of {n} patients too small for the requested splits")
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    return Splits(train=train, val=val, test=test)


@dataclass
class RegimeSplits:
    """Per-regime train/test with the larger regime's training pool
    subsampled to the smaller's size, so transfer comparisons are not
    confounded by data quantity."""

    by_regime: dict
    original_train_sizes: dict

    def train(self, regime: str) -> list:
        return self.by_regime[regime]["train"]

    def test(self, regime: str) -> list:
        return self.by_regime[regime]["test"]


def split_regime_matched(cohort, seed: int = 0, test_frac: float = 0.2) -> RegimeSplits:
    regimes = sorted({seq.regime for seq in cohort})
    if len(regimes) != 2:
        raise ValueError(f"expected exactly two regimes, found {regimes}")
    pools, original = {}, {}
    for regime in regimes:
        members = [s for s in cohort if s.regime == regime]
        shuffled = _shuffled(members, rng_for(seed, "split-regime", regime))
        n_test = int(round(test_frac * len(members)))
        if n_test == 0 or len(members) - n_test == 0:
            raise ValueError(f"regime {regime!r} too small to split")
        pools[regime] = {"test": shuffled[:n_test], "train": shuffled[n_test:]}
        original[regime] = len(pools[regime]["train"])
    target = min(original.values())
    for regime in regimes:
        train = pools[regime]["train"]
        if len(train) > target:
            idx = rng_for(seed, "split-regime-subsample", regime).choice(
                len(train), size=target, replace=False)
            pools[regime]["train"] = [train[i] for i in sorted(idx)]
    return RegimeSplits(by_regime=pools, original_train_sizes=original)


# ---------------------------------------------------------------------------
# cohort file format (line-delimited JSON with a leading format header)
# ---------------------------------------------------------------------------

def save_cohort(cohort, path):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": COHORT_FORMAT, "version": FORMAT_VERSION,
                  "n_labs": cohort[0].n_labs if cohort else 0}
        fh.write(json.dumps(header) + "\n")
        for seq in cohort:
            labs = [[None if m == 0.0 else v for v, m in zip(row_v, row_m)]
                    for row_v, row_m in zip(seq.values.tolist(), seq.mask.tolist())]
            record = {"patient_id": seq.patient_id, "times": seq.times.tolist(),
                      "labs": labs,
                      "label": {"time_days": seq.label.time, "event": seq.label.event},
                      "regime": seq.regime}
            fh.write(json.dumps(record) + "\n")


def load_cohort(path) -> list:
    cohort = []
    n_labs = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise CohortFormatError(f"{path}: line {lineno}: invalid JSON ({err})")
            if lineno == 1:
                if record.get("format") != COHORT_FORMAT:
                    raise CohortFormatError(
                        f"{path}: line 1: expected a {COHORT_FORMAT!r} header")
                if record.get("version") != FORMAT_VERSION:
                    raise CohortFormatError(
                        f"{path}: line 1: unsupported version {record.get('version')}")
                n_labs = record.get("n_labs")
                continue
            try:
                labs = record["labs"]
                if n_labs is not None and any(len(row) != n_labs for row in labs):
                    raise ValueError(f"expected {n_labs} labs per encounter")
                values = np.array([[np.nan if v is None else float(v) for v in row]
                                   for row in labs])
                mask = np.array([[0.0 if v is None else 1.0 for v in row]
                                 for row in labs])
                seq = EncounterSequence(
                    patient_id=str(record["patient_id"]),
                    times=np.asarray(record["times"], dtype=float),
                    values=values, mask=mask,
                    label=SurvivalLabel(time=float(record["label"]["time_days"]),
                                        event=int(record["label"]["event"])),
                    regime=str(record.get("regime", "A")))
            except CohortFormatError:
                raise
            except (KeyError, TypeError, ValueError) as err:
                raise CohortFormatError(f"{path}: line {lineno}: {err}")
            cohort.append(seq)
    if n_labs is None:
        raise CohortFormatError(f"{path}: missing format header")
    return cohort
