import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepjoint import autodiff as ad
from deepjoint import nets, presence
from oracles import finite_difference_grads, max_rel_err


def unit_rate_params(prefix="intensity"):
    """Depth-0 head with Lambda(eps) ~= eps: softplus(eps + 30) - softplus(30)
    is the identity to within ~1e-13 and its derivative is ~1."""
    return {
        f"{prefix}/layer0/W": ad.Parameter(f"{prefix}/layer0/W", np.array([[1.0]])),
        f"{prefix}/layer0/b": ad.Parameter(f"{prefix}/layer0/b", np.array([[30.0]])),
    }


def unit_rate_cfg():
    return nets.MLPConfig(input_dim=1, hidden_layers=[], output_dim=1,
                          activation="softplus")


def random_head(seed, d=3, hidden=(4,)):
    cfg = nets.MLPConfig(input_dim=d + 1, hidden_layers=list(hidden),
                         output_dim=1, activation="softplus")
    return cfg, nets.init_mlp_params(cfg, "intensity", seed)


def test_cumulative_intensity_zero_at_zero():
    cfg, params = random_head(0)
    h = np.random.default_rng(0).normal(size=3)
    assert presence.cumulative_intensity(cfg, params, h, 0.0) == 0.0
    assert presence.gap_cdf(cfg, params, h, 0.0) == 0.0


@given(st.integers(0, 5_000))
@settings(max_examples=200, deadline=None)
def test_gap_cdf_is_a_valid_cdf(seed):
    rng = np.random.default_rng(seed)
    cfg, params = random_head(seed)
    h = rng.normal(size=3)
    e1, e2 = sorted(rng.uniform(0.0, 12.0, size=2))
    c1 = presence.gap_cdf(cfg, params, h, e1)
    c2 = presence.gap_cdf(cfg, params, h, e2)
    assert 0.0 <= c1 < 1.0 and 0.0 <= c2 < 1.0
    assert c1 <= c2 + 1e-12


def test_cumulative_intensity_rejects_negative_eps():
    cfg, params = random_head(1)
    with pytest.raises(ValueError):
        presence.cumulative_intensity(cfg, params, np.zeros(3), -0.1)


def one_patient(h_rows, gaps, masks=None, censored_last=False):
    k = 3 if masks is None else len(masks[0])
    states = [np.asarray(h) for h in h_rows]
    targets = []
    for j, gap in enumerate(gaps):
        mask = np.zeros(k) if masks is None else np.asarray(masks[j], dtype=float)
        targets.append(presence.PresenceTargets(
            next_gap=gap, next_mask=mask,
            censored=censored_last and j == len(gaps) - 1))
    return states, targets


def test_temporal_loglik_unit_rate_single_interval():
    # with Lambda(eps) = eps the loss term is eps - log 1 = eps
    states, targets = one_patient([[0.0]], [2.5])
    # the depth-0 head takes eps only: feed empty embeddings
    cfg = unit_rate_cfg()
    value = presence.temporal_loglik(cfg, unit_rate_params(), [[np.zeros(0)]],
                                     [targets])
    assert value == pytest.approx(2.5, abs=1e-9)


def test_temporal_loglik_three_interval_exponential_oracle():
    gaps = [0.7, 1.9, 3.2]
    _, targets = one_patient([[0.0]] * 3, gaps)
    cfg = unit_rate_cfg()
    value = presence.temporal_loglik(cfg, unit_rate_params(),
                                     [[np.zeros(0)] * 3], [targets])
    # Exp(1) negative log-likelihood by hand: mean of (gap - log 1)
    assert value == pytest.approx(sum(gaps) / 3.0, abs=1e-9)


def test_temporal_loglik_single_encounter_patient_contributes_nothing():
    cfg, params = random_head(3)
    lone_states, lone_targets = [np.zeros(3)], []  # one encounter, no intervals
    states, targets = one_patient([np.zeros(3), np.ones(3)], [1.0, 2.0])
    both = presence.temporal_loglik(cfg, params,
                                    [lone_states, states], [lone_targets, targets])
    alone = presence.temporal_loglik(cfg, params, [states], [targets])
    assert both == pytest.approx(alone, abs=1e-14)
    with pytest.raises(ValueError, match="no patient"):
        presence.temporal_loglik(cfg, params, [lone_states], [lone_targets])


def test_temporal_loglik_rejects_nonpositive_gap():
    with pytest.raises(ValueError):
        presence.PresenceTargets(next_gap=0.0, next_mask=np.zeros(2))


def test_temporal_loglik_censored_interval_optional():
    cfg, params = random_head(5)
    states, targets = one_patient([np.zeros(3), np.ones(3)], [1.0, 4.0],
                                  censored_last=True)
    base = presence.temporal_loglik(cfg, params, [states], [targets])
    with_cens = presence.temporal_loglik(cfg, params, [states], [targets],
                                         include_censored=True)
    # the censored interval contributes only its survival term Lambda(4),
    # and the per-patient average renormalizes: (term(1.0) + Lambda(4)) / 2
    lam4 = presence.cumulative_intensity(cfg, params, np.ones(3), 4.0)
    assert with_cens == pytest.approx((base + lam4) / 2.0, abs=1e-10)


def test_temporal_loglik_gradients_through_derivative_graph():
    cfg, params = random_head(11, d=2, hidden=(3,))
    rng = np.random.default_rng(11)
    state_seqs = [[rng.normal(size=2) for _ in range(3)]]
    _, targets = one_patient([[0, 0]] * 3, list(rng.uniform(0.5, 3.0, size=3)))
    target_seqs = [targets]

    def loss_nodes():
        h, gaps, _, _, weights = presence._collect_intervals(state_seqs, target_seqs, False)
        graph = ad.Graph(params)
        eps_leaf = graph.input(gaps)
        big, lam = presence.intensity_terms_nodes(graph, cfg, "intensity",
                                                  graph.constant(h), eps_leaf)
        terms = ad.sub(big, ad.log(lam))
        return ad.reduce_sum(ad.mul(graph.constant(weights), terms))

    grads = ad.backward(loss_nodes())
    fd = finite_difference_grads(lambda: float(loss_nodes().value), params)
    for pid in params:
        assert max_rel_err(grads[pid], fd[pid]) <= 1e-4, pid


def test_temporal_loglik_improves_with_training():
    rng = np.random.default_rng(0)
    gaps = rng.exponential(scale=1.0, size=120)
    cfg = nets.MLPConfig(input_dim=1, hidden_layers=[4], output_dim=1,
                         activation="softplus")
    params = nets.init_mlp_params(cfg, "intensity", 0)
    state_seqs = [[np.zeros(0)] * len(gaps)]
    target_seqs = [[presence.PresenceTargets(g, np.zeros(1)) for g in gaps]]

    def loss_and_grads():
        h, eps, _, _, w = presence._collect_intervals(state_seqs, target_seqs, False)
        graph = ad.Graph(params)
        eps_leaf = graph.input(eps)
        big, lam = presence.intensity_terms_nodes(graph, cfg, "intensity", None, eps_leaf)
        loss = ad.reduce_sum(ad.mul(graph.constant(w), ad.sub(big, ad.log(lam))))
        return loss.value.item(), ad.backward(loss)

    state = ad.AdamState()
    first, _ = loss_and_grads()
    for _ in range(150):
        _, grads = loss_and_grads()
        ad.adam_step(params, grads, state, lr=0.05)
    last, _ = loss_and_grads()
    assert last < first


def test_missingness_probs_zero_params_are_half():
    k, d = 4, 3
    cfg = nets.MLPConfig(input_dim=d + 1, hidden_layers=[], output_dim=k)
    params = {k2: ad.Parameter(k2, np.zeros_like(p.tensor))
              for k2, p in nets.init_mlp_params(cfg, "missingness", 0).items()}
    probs = presence.missingness_probs(cfg, params, np.ones(d), 2.0)
    assert probs.shape == (k,)
    np.testing.assert_allclose(probs, 0.5, atol=1e-15)


def test_missingness_probs_match_straight_line_oracle():
    k, d = 3, 2
    cfg = nets.MLPConfig(input_dim=d + 1, hidden_layers=[4], output_dim=k,
                         activation="tanh")
    params = nets.init_mlp_params(cfg, "missingness", 8)
    rng = np.random.default_rng(8)
    h, eps = rng.normal(size=d), 1.7
    x = np.concatenate([h, [eps]])
    z = np.tanh(x @ params["missingness/layer0/W"].tensor
                + params["missingness/layer0/b"].tensor[0])
    z = z @ params["missingness/layer1/W"].tensor + params["missingness/layer1/b"].tensor[0]
    expected = 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(presence.missingness_probs(cfg, params, h, eps),
                               expected, atol=1e-12)


def test_missingness_loglik_half_probs_is_k_log2():
    k, d = 3, 2
    cfg = nets.MLPConfig(input_dim=d + 1, hidden_layers=[], output_dim=k)
    params = {k2: ad.Parameter(k2, np.zeros_like(p.tensor))
              for k2, p in nets.init_mlp_params(cfg, "missingness", 0).items()}
    states, targets = one_patient([np.zeros(d), np.zeros(d)], [1.0, 2.0],
                                  masks=[[1, 0, 1], [0, 0, 1]])
    value = presence.missingness_loglik(cfg, params, [states], [targets])
    assert value == pytest.approx(k * math.log(2.0), abs=1e-12)


def test_missingness_loglik_perfect_prediction_is_zero():
    k, d = 3, 1
    cfg = nets.MLPConfig(input_dim=d + 1, hidden_layers=[], output_dim=k)
    params = nets.init_mlp_params(cfg, "missingness", 0)
    params["missingness/layer0/W"].tensor = np.zeros((d + 1, k))
    params["missingness/layer0/b"].tensor = np.array([[40.0, -40.0, 40.0]])
    states, targets = one_patient([np.zeros(d), np.zeros(d)], [1.0, 1.0],
                                  masks=[[1, 0, 1], [1, 0, 1]])
    value = presence.missingness_loglik(cfg, params, [states], [targets])
    assert value == pytest.approx(0.0, abs=1e-12)


def test_missingness_loglik_two_interval_hand_bce():
    k, d = 3, 2
    cfg = nets.MLPConfig(input_dim=d + 1, hidden_layers=[2], output_dim=k,
                         activation="softplus")
    params = nets.init_mlp_params(cfg, "missingness", 13)
    rng = np.random.default_rng(13)
    hs = [rng.normal(size=d), rng.normal(size=d)]
    gaps = [0.8, 2.2]
    masks = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]
    states, targets = one_patient(hs, gaps, masks=masks)
    value = presence.missingness_loglik(cfg, params, [states], [targets])
    # hand BCE from the clamped probabilities
    expected = 0.0
    for h, g, o in zip(hs, gaps, masks):
        p = presence.missingness_probs(cfg, params, h, g)
        term = -sum(oi * math.log(pi) + (1 - oi) * math.log(1 - pi)
                    for oi, pi in zip(o, p))
        expected += term / 2.0
    assert value == pytest.approx(expected, rel=1e-10)
