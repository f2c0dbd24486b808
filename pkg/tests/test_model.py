import numpy as np
import pytest

from deepjoint import autodiff as ad
from deepjoint import model as jm
from deepjoint import nets, presence, synth
from deepjoint.data import compute_stats, prepare_cohort
from deepjoint.survival import cox_partial_loglik


@pytest.fixture(scope="module")
def small_world():
    cohort, _ = synth.generate(synth.GeneratorConfig(n_patients=60, n_labs=3, seed=4))
    stats = compute_stats(cohort, source_split="train")
    return cohort, stats


def make_model(strategy, stats, n_labs=3, seed=0, **overrides):
    defaults = dict(hidden_dim=4, surv_layers=1, surv_width=6,
                    intensity_layers=1, intensity_width=5,
                    missingness_layers=1, missingness_width=5)
    defaults.update(overrides)
    cfg = jm.ModelConfig(strategy=strategy, n_labs=n_labs, **defaults)
    return jm.JointModel(cfg, stats, seed=seed)


def test_strategy_head_wiring():
    assert jm.STRATEGY_HEADS["feature"] == (jm.HEAD_SURVIVAL,)
    assert jm.STRATEGY_HEADS["deepjoint_m"] == (jm.HEAD_SURVIVAL, jm.HEAD_MISSINGNESS)
    assert jm.STRATEGY_HEADS["deepjoint_i"] == (jm.HEAD_SURVIVAL, jm.HEAD_INTENSITY)
    with pytest.raises(ValueError):
        jm.ModelConfig(strategy="nope", n_labs=3)


def test_vector_strategy_has_no_encoder(small_world):
    cohort, stats = small_world
    model = make_model("last", stats)
    assert not model.param_ids("enc")
    ds = prepare_cohort(cohort, "last", stats)
    eta = jm.predict_eta(model, ds)
    assert eta.shape == (len(cohort),)


def test_zero_survival_head_gives_zero_eta(small_world):
    cohort, stats = small_world
    model = make_model("feature", stats, surv_layers=0)
    for pid in model.param_ids("surv"):
        model.params[pid].tensor = np.zeros_like(model.params[pid].tensor)
    ds = prepare_cohort(cohort, "feature", stats)
    np.testing.assert_array_equal(jm.predict_eta(model, ds), np.zeros(len(cohort)))


def test_batch_survival_loss_matches_value_level(small_world):
    cohort, stats = small_world
    model = make_model("feature", stats)
    ds = prepare_cohort(cohort, "feature", stats)
    tensors = jm.build_tensors(model, ds)
    _, fwd = jm.batch_forward(model, tensors)
    eta = jm.predict_eta(model, ds)
    labels = [p.label for p in ds.patients]
    assert fwd.loss_surv.value.item() == pytest.approx(
        -cox_partial_loglik(eta, labels), abs=1e-10)


def test_batch_presence_losses_match_per_patient_ops(small_world):
    """The batched padded-stack losses must agree exactly with the
    per-patient value-level likelihood operations."""
    cohort, stats = small_world
    model = make_model("deepjoint", stats, seed=3)
    ds = prepare_cohort(cohort, "deepjoint", stats)
    tensors = jm.build_tensors(model, ds)
    _, fwd = jm.batch_forward(model, tensors)

    enc_cfg = model.cfg.encoder_cfg()
    state_seqs, target_seqs = [], []
    for p in ds.patients:
        states = nets.encode_sequence(enc_cfg, model.params, p.steps)
        state_seqs.append([s.h for s in states])
        target_seqs.append(p.targets)
    li = presence.temporal_loglik(model.cfg.intensity_cfg(), model.params,
                                  state_seqs, target_seqs)
    lm = presence.missingness_loglik(model.cfg.missingness_cfg(), model.params,
                                     state_seqs, target_seqs)
    assert fwd.presence_losses[jm.HEAD_INTENSITY].value.item() == pytest.approx(li, rel=1e-9)
    assert fwd.presence_losses[jm.HEAD_MISSINGNESS].value.item() == pytest.approx(lm, rel=1e-9)


def test_batch_presence_loss_censored_flag(small_world):
    cohort, stats = small_world
    model = make_model("deepjoint_i", stats, seed=5)
    ds = prepare_cohort(cohort, "deepjoint", stats)
    tensors = jm.build_tensors(model, ds)
    _, base = jm.batch_forward(model, tensors, include_censored_interval=False)
    _, with_cens = jm.batch_forward(model, tensors, include_censored_interval=True)

    enc_cfg = model.cfg.encoder_cfg()
    state_seqs = [[s.h for s in nets.encode_sequence(enc_cfg, model.params, p.steps)]
                  for p in ds.patients]
    target_seqs = [p.targets for p in ds.patients]
    expected = presence.temporal_loglik(model.cfg.intensity_cfg(), model.params,
                                        state_seqs, target_seqs,
                                        include_censored=True)
    assert with_cens.presence_losses[jm.HEAD_INTENSITY].value.item() == \
        pytest.approx(expected, rel=1e-9)
    assert base.presence_losses[jm.HEAD_INTENSITY].value.item() != \
        with_cens.presence_losses[jm.HEAD_INTENSITY].value.item()


def test_gru_d_batch_matches_sequential_encoding(small_world):
    cohort, stats = small_world
    model = make_model("gru_d", stats, seed=7)
    ds = prepare_cohort(cohort, "gru_d", stats)
    eta = jm.predict_eta(model, ds)
    enc_cfg = model.cfg.encoder_cfg()
    for k in (0, 5, 17):
        states = nets.encode_sequence(enc_cfg, model.params, ds.patients[k].steps)
        graph = ad.Graph(model.params)
        h = graph.constant(states[-1].h.reshape(1, -1))
        eta_k = nets.mlp_nodes(graph, model.cfg.surv_cfg(), "surv", h).value.item()
        assert eta[k] == pytest.approx(eta_k, abs=1e-12)


def test_lstm_batch_matches_sequential_encoding(small_world):
    cohort, stats = small_world
    model = make_model("feature", stats, seed=9, rnn_layers=2)
    ds = prepare_cohort(cohort, "feature", stats)
    eta = jm.predict_eta(model, ds)
    enc_cfg = model.cfg.encoder_cfg()
    for k in (1, 8):
        states = nets.encode_sequence(enc_cfg, model.params, ds.patients[k].steps)
        graph = ad.Graph(model.params)
        h = graph.constant(states[-1].h.reshape(1, -1))
        eta_k = nets.mlp_nodes(graph, model.cfg.surv_cfg(), "surv", h).value.item()
        assert eta[k] == pytest.approx(eta_k, abs=1e-12)


def test_checkpoint_roundtrip_bitwise(tmp_path, small_world):
    cohort, stats = small_world
    model = make_model("deepjoint", stats, seed=11)
    ds = prepare_cohort(cohort, "deepjoint", stats)
    jm.refit_breslow(model, ds)
    eta_before = jm.predict_eta(model, ds)
    path = tmp_path / "model.npz"
    jm.save_checkpoint(model, path, train_config={"lr": 1e-3})
    loaded, train_cfg = jm.load_checkpoint(path)
    assert train_cfg == {"lr": 1e-3}
    assert loaded.param_ids() == model.param_ids()
    for pid in model.param_ids():
        np.testing.assert_array_equal(loaded.params[pid].tensor,
                                      model.params[pid].tensor)
    eta_after = jm.predict_eta(loaded, ds)
    np.testing.assert_array_equal(eta_before, eta_after)
    np.testing.assert_array_equal(loaded.breslow.cumulative_baseline,
                                  model.breslow.cumulative_baseline)


def test_evaluate_produces_report(small_world):
    cohort, stats = small_world
    model = make_model("last", stats)
    ds = prepare_cohort(cohort, "last", stats)
    jm.refit_breslow(model, ds)
    report = jm.evaluate(model, ds, horizons=[7.0, 30.0], n_bootstrap=10, seed=1)
    assert set(report.cindex) == {7.0, 30.0}
    assert set(report.brier) == {7.0, 30.0}
    assert 0.0 <= report.integrated_cindex[0] <= 1.0
    assert report.n_bootstrap == 10
    assert report.test_tag == jm.test_set_tag(ds)


def test_evaluate_deterministic(small_world):
    cohort, stats = small_world
    model = make_model("count", stats)
    ds = prepare_cohort(cohort, "count", stats)
    jm.refit_breslow(model, ds)
    a = jm.evaluate(model, ds, horizons=[7.0], n_bootstrap=15, seed=3)
    b = jm.evaluate(model, ds, horizons=[7.0], n_bootstrap=15, seed=3)
    assert a.cindex == b.cindex and a.brier == b.brier
    assert a.integrated_cindex == b.integrated_cindex
