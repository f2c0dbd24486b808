import numpy as np
import pytest

from deepjoint import data
from deepjoint.survival import SurvivalLabel


def seq(pid="p0", times=(1.0, 5.0, 12.0), values=None, mask=None, k=3,
        time_days=10.0, event=1, regime="A"):
    times = np.asarray(times, dtype=float)
    ln = len(times)
    if values is None:
        values = np.arange(ln * k, dtype=float).reshape(ln, k)
    if mask is None:
        mask = np.ones((ln, k))
    return data.EncounterSequence(patient_id=pid, times=times, values=values,
                                  mask=mask, label=SurvivalLabel(time_days, event),
                                  regime=regime)


def small_cohort(n=30, seed=0, regimes=("A", "B")):
    rng = np.random.default_rng(seed)
    cohort = []
    for i in range(n):
        ln = int(rng.integers(1, 6))
        times = np.sort(rng.uniform(0, 24, size=ln))
        times += np.linspace(0, 1e-6, ln)  # force strict increase
        times = np.clip(times, 0, 24.0)
        mask = (rng.uniform(size=(ln, 3)) > 0.3).astype(float)
        mask[:, 0] = np.maximum(mask[:, 0], (mask.sum(axis=1) == 0))
        values = rng.normal(loc=[1.0, -2.0, 5.0], scale=[1.0, 0.5, 2.0],
                            size=(ln, 3))
        cohort.append(seq(pid=f"p{i:03d}", times=times, values=values, mask=mask,
                          time_days=float(rng.uniform(0.5, 60)),
                          event=int(rng.integers(0, 2)),
                          regime=regimes[i % len(regimes)]))
    return cohort


def train_stats(cohort=None):
    return data.compute_stats(cohort or small_cohort(), source_split="train")


def test_sequence_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        seq(times=(1.0, 1.0))
    with pytest.raises(ValueError, match="at least one encounter"):
        seq(times=())
    with pytest.raises(ValueError, match=r"\[0, 24"):
        seq(times=(1.0, 30.0))
    with pytest.raises(ValueError, match="0 or 1"):
        seq(mask=np.full((3, 3), 0.5))


def test_unobserved_values_are_nan():
    mask = np.array([[1.0, 0.0, 1.0]])
    s = seq(times=(2.0,), values=np.array([[1.0, 2.0, 3.0]]), mask=mask)
    assert np.isnan(s.values[0, 1])
    assert s.values[0, 0] == 1.0


def test_gaps_first_measured_from_window_start():
    s = seq(times=(1.5, 5.0, 6.0))
    np.testing.assert_allclose(s.gaps(), [1.5, 3.5, 1.0])


def test_impute_locf_fully_observed_is_identity():
    s = seq()
    out = data.impute_locf(s, np.zeros(3))
    np.testing.assert_array_equal(out, s.values)


def test_impute_locf_never_observed_lab_takes_train_mean():
    mask = np.zeros((3, 3))
    mask[:, 0] = 1.0
    s = seq(values=np.ones((3, 3)), mask=mask)
    means = np.array([0.0, 7.0, -3.0])
    out = data.impute_locf(s, means)
    np.testing.assert_array_equal(out[:, 1], [7.0, 7.0, 7.0])
    np.testing.assert_array_equal(out[:, 2], [-3.0, -3.0, -3.0])


def test_impute_locf_gap_filled_by_previous_observation():
    mask = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    values = np.array([[1.0, 10.0, 3.0], [2.0, np.nan, 4.0], [3.0, 30.0, 5.0]])
    s = seq(values=values, mask=mask)
    out = data.impute_locf(s, np.zeros(3))
    assert out[1, 1] == 10.0


def test_impute_locf_rejects_wrong_lab_count():
    with pytest.raises(ValueError, match="labs"):
        data.impute_locf(seq(), np.zeros(5))


def test_prepare_requires_train_statistics():
    stats = data.compute_stats(small_cohort(), source_split="test")
    with pytest.raises(ValueError, match="train"):
        data.prepare(seq(), "last", stats)


def test_prepare_rejects_unknown_strategy():
    with pytest.raises(ValueError, match="unknown strategy"):
        data.prepare(seq(), "mystery", train_stats())


def test_prepare_count_single_encounter_counts_equal_mask():
    mask = np.array([[1.0, 0.0, 1.0]])
    s = seq(times=(3.0,), values=np.array([[1.0, np.nan, 3.0]]), mask=mask)
    prepared = data.prepare(s, "count", train_stats())
    np.testing.assert_array_equal(prepared.vector[3:], mask[0])


def test_prepare_last_uses_imputed_last_encounter():
    stats = train_stats()
    mask = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0]])
    values = np.array([[1.0, 2.0, 3.0], [4.0, np.nan, 6.0]])
    s = seq(times=(1.0, 2.0), values=values, mask=mask)
    prepared = data.prepare(s, "last", stats)
    expected = (np.array([4.0, 2.0, 6.0]) - stats.lab_mean) / stats.lab_std
    np.testing.assert_allclose(prepared.vector, expected)


def test_resample_same_hour_observations_average():
    stats = train_stats()
    mask = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    values = np.array([[2.0, np.nan, np.nan], [4.0, np.nan, np.nan]])
    s = seq(times=(5.2, 5.9), values=values, mask=mask)
    grid = data.resample_hourly(s, stats)
    assert grid[5, 0] == pytest.approx(3.0)
    # hours before any observation hold the train mean
    assert grid[0, 0] == pytest.approx(stats.lab_mean[0])
    # hours after carry the last value forward
    assert grid[23, 0] == pytest.approx(3.0)


def test_ignore_equals_resample_for_hourly_fully_observed_patient():
    stats = train_stats()
    times = np.arange(24) + 0.5
    values = np.random.default_rng(4).normal(size=(24, 3))
    s = seq(times=times, values=values, mask=np.ones((24, 3)))
    ignore = data.prepare(s, "ignore", stats)
    resample = data.prepare(s, "resample", stats)
    for a, b in zip(ignore.steps, resample.steps):
        np.testing.assert_allclose(a["x"], b["x"], atol=1e-12)


def test_prepare_feature_tensor_hand_assembly():
    stats = train_stats()
    mask = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    values = np.where(mask == 1.0, [[1., 2., 3.], [4., 5., 6.], [7., 8., 9.]], np.nan)
    s = seq(times=(2.0, 8.0, 20.0), values=values, mask=mask)
    prepared = data.prepare(s, "feature", stats)
    assert len(prepared.steps) == 3
    imputed = data.impute_locf(s, stats.lab_mean)
    for t, step in enumerate(prepared.steps):
        z = (imputed[t] - stats.lab_mean) / stats.lab_std
        gap = s.gaps()[t]
        z_gap = (gap - stats.gap_mean) / stats.gap_std
        np.testing.assert_allclose(step["x"], np.concatenate([z, mask[t], [z_gap]]))
    # presence targets: two real intervals plus a censored remainder
    assert len(prepared.targets) == 3
    assert prepared.targets[0].next_gap == pytest.approx(6.0)
    np.testing.assert_array_equal(prepared.targets[0].next_mask, mask[1])
    assert not prepared.targets[0].censored
    assert prepared.targets[2].censored
    assert prepared.targets[2].next_gap == pytest.approx(4.0)


def test_prepare_gru_d_streams():
    stats = train_stats()
    mask = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    values = np.where(mask == 1.0, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], np.nan)
    s = seq(times=(2.0, 8.0), values=values, mask=mask)
    prepared = data.prepare(s, "gru_d", stats)
    step = prepared.steps[0]
    assert step["eps"] == pytest.approx(2.0)
    np.testing.assert_array_equal(step["mask"], mask[0])
    assert step["x"][1] == 0.0  # unobserved entries carried as zeros
    np.testing.assert_array_equal(step["means"], np.zeros(3))


def test_prepare_is_deterministic():
    stats = train_stats()
    s = seq()
    a = data.prepare(s, "deepjoint", stats)
    b = data.prepare(s, "deepjoint", stats)
    for sa, sb in zip(a.steps, b.steps):
        np.testing.assert_array_equal(sa["x"], sb["x"])


def test_split_random_sizes_and_determinism():
    cohort = small_cohort(10)
    splits = data.split_random(cohort, test_frac=0.2, val_frac=0.25, seed=3)
    assert len(splits.test) == 2
    assert len(splits.val) == 2
    assert len(splits.train) == 6
    again = data.split_random(cohort, test_frac=0.2, val_frac=0.25, seed=3)
    assert [s.patient_id for s in splits.train] == [s.patient_id for s in again.train]
    ids = {s.patient_id for split in (splits.train, splits.val, splits.test)
           for s in split}
    assert ids == {s.patient_id for s in cohort}
    total = len(splits.train) + len(splits.val) + len(splits.test)
    assert total == len(cohort)


def test_split_random_too_small():
    with pytest.raises(ValueError, match="too small"):
        data.split_random(small_cohort(3), test_frac=0.2, val_frac=0.1, seed=0)


def test_split_regime_matched_equal_sizes_untouched():
    cohort = small_cohort(40)  # 20 per regime
    splits = data.split_regime_matched(cohort, seed=1)
    assert len(splits.train("A")) == len(splits.train("B")) == 16
    assert len(splits.test("A")) == len(splits.test("B")) == 4


def test_split_regime_matched_subsamples_larger_regime():
    cohort = [s for s in small_cohort(1000, regimes=("A",))]
    for i, s in enumerate(small_cohort(250, seed=9, regimes=("B",))):
        cohort.append(data.EncounterSequence(
            patient_id=f"q{i:03d}", times=s.times, values=s.values, mask=s.mask,
            label=s.label, regime="B"))
    splits = data.split_regime_matched(cohort, seed=2)
    assert splits.original_train_sizes == {"A": 800, "B": 200}
    assert len(splits.train("A")) == 200
    assert len(splits.test("A")) == 200
    assert len(splits.test("B")) == 50
    # matched training set is a subset of the regime's own training pool
    a_ids = {s.patient_id for s in splits.train("A")}
    assert a_ids <= {s.patient_id for s in cohort if s.regime == "A"}
    test_ids = {s.patient_id for s in splits.test("A")}
    assert not (a_ids & test_ids)


def test_split_regime_matched_requires_two_regimes():
    with pytest.raises(ValueError, match="two regimes"):
        data.split_regime_matched(small_cohort(10, regimes=("A",)))


def test_cohort_roundtrip(tmp_path):
    cohort = small_cohort(12)
    path = tmp_path / "cohort.jsonl"
    data.save_cohort(cohort, path)
    loaded = data.load_cohort(path)
    assert len(loaded) == len(cohort)
    for a, b in zip(cohort, loaded):
        assert a.patient_id == b.patient_id
        np.testing.assert_allclose(a.times, b.times)
        np.testing.assert_array_equal(a.mask, b.mask)
        observed = a.mask == 1.0
        np.testing.assert_allclose(a.values[observed], b.values[observed])
        assert a.label == b.label
        assert a.regime == b.regime


def test_load_cohort_line_numbered_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    header = '{"format": "deepjoint-cohort", "version": 1, "n_labs": 2}'
    good = ('{"patient_id": "a", "times": [1.0], "labs": [[1.0, null]], '
            '"label": {"time_days": 3.0, "event": 1}, "regime": "A"}')
    path.write_text(header + "\n" + good + "\nnot json\n")
    with pytest.raises(data.CohortFormatError, match="line 3"):
        data.load_cohort(path)
    path.write_text(good + "\n")
    with pytest.raises(data.CohortFormatError, match="header"):
        data.load_cohort(path)
    path.write_text(header + "\n" + good.replace('[[1.0, null]]', '[[1.0]]') + "\n")
    with pytest.raises(data.CohortFormatError, match="line 2"):
        data.load_cohort(path)


def test_stats_exclude_unobserved_entries():
    mask = np.array([[1.0, 0.0, 1.0]])
    s = seq(times=(1.0,), values=np.array([[2.0, np.nan, 4.0]]), mask=mask)
    stats = data.compute_stats([s, s])
    assert stats.lab_mean[0] == pytest.approx(2.0)
    assert stats.lab_mean[1] == 0.0  # never observed: defaults, never used
    assert stats.lab_std[1] == 1.0
