import math

import numpy as np
import pytest

from tailtp import autodiff as ad
from tailtp.autodiff import ParamSet, backward
from tailtp.encoders import ModelSpec, encode, init_params
from tailtp.objectives import (MiniBatch, adversarial_losses, bce_from_scores, bce_loss, disc_logit,
                               disc_loglik, disc_prob, init_disc_params)


def test_bce_zero_scores_is_two_ln2():
    out = bce_from_scores(ad.const([0.0]), ad.const([[0.0]])).value
    assert out == pytest.approx(2 * math.log(2), abs=1e-15)


def test_bce_zero_scores_per_window_is_n_plus_one_ln2():
    out = bce_from_scores(ad.const(np.zeros(4)), ad.const(np.zeros((4, 3)))).value
    assert out == pytest.approx(4 * math.log(2), abs=1e-14)


def test_bce_limit_goes_to_zero():
    assert bce_from_scores(ad.const([60.0]), ad.const([[-60.0]])).value < 1e-25


def _bce_oracle(emb_table, emb, targets, negatives):
    total = 0.0
    for e, t, negs in zip(emb, targets, negatives):
        y = float(e @ emb_table[t])
        total += -math.log(1 / (1 + math.exp(-y)))
        for j in negs:
            yn = float(e @ emb_table[j])
            total += -math.log(1 - 1 / (1 + math.exp(-yn)))
    return total / len(targets)


def test_bce_matches_straight_line_oracle(rng):
    params = init_params(ModelSpec("gru", 4, 3, 3), rng)
    batch = MiniBatch(0, [[0, 1, 2], [3, 4, 1]], [3, 2], [[4, 1], [1, 3]], 0)
    nodes = params.nodes(trainable=False)
    emb = encode("gru", batch.windows, nodes).value
    ref = _bce_oracle(params["item_emb"], emb, batch.targets, batch.negatives)
    assert abs(bce_loss(batch, nodes, "gru").value - ref) < 1e-12


def test_bce_nonnegative(rng):
    for _ in range(20):
        pos = ad.const(rng.normal(scale=5, size=6))
        neg = ad.const(rng.normal(scale=5, size=(6, 3)))
        assert bce_from_scores(pos, neg).value >= 0


def _disc_at_half(dim=2):
    # zero output layer -> f_d = 0.5 everywhere
    return ParamSet({"disc.W_1": np.ones((dim, 2)), "disc.b_1": np.zeros(2),
                     "disc.W_2": np.zeros((2, 1)), "disc.b_2": np.zeros(1)})


@pytest.mark.parametrize("label", [0, 1])
def test_disc_loglik_at_half(label):
    out = disc_loglik(ad.const(np.ones((1, 2))), label, _disc_at_half().nodes(trainable=False)).value
    assert out == pytest.approx(-math.log(2), abs=1e-15)


def test_disc_loglik_limit_and_clamp():
    d = _disc_at_half()
    d["disc.b_2"] = np.array([1e6])
    nodes = d.nodes(trainable=False)
    emb = ad.const(np.ones((1, 2)))
    assert disc_loglik(emb, 1, nodes).value == pytest.approx(0.0, abs=1e-12)
    assert disc_loglik(emb, 0, nodes).value == pytest.approx(-30.0, abs=1e-9)
    p = disc_prob(np.ones((1, 2)), d)
    assert 0 < p[0] < 1


def test_disc_loglik_nonpositive(rng):
    disc = init_disc_params(3, 5, rng).nodes(trainable=False)
    for _ in range(20):
        emb = ad.const(rng.normal(scale=3, size=(4, 3)))
        assert disc_loglik(emb, int(rng.integers(0, 2)), disc).value <= 0


def test_combination_rule_with_half_discriminator(rng):
    params = init_params(ModelSpec("gru", 6, 2, 3), rng)
    batch = MiniBatch(0, rng.integers(1, 7, size=(4, 3)), rng.integers(1, 7, 4), rng.integers(1, 7, (4, 2)), 0)
    out = adversarial_losses(batch, params.nodes(), _disc_at_half().nodes(), 0.1, "gru")
    assert out.loglik == pytest.approx(-math.log(2), abs=1e-15)
    # shifting bce to 1.0 gives 1.0 + 0.1 * (-0.6931) = 0.9307
    assert 1.0 + (out.predictor.value - out.bce.value) == pytest.approx(0.9307, abs=1e-4)


def _instance(rng, kind="gru"):
    params = init_params(ModelSpec(kind, 6, 3, 3), rng)
    disc = init_disc_params(3, 3, rng)
    batch = MiniBatch(0, rng.integers(1, 7, size=(4, 3)), rng.integers(1, 7, 4), rng.integers(1, 7, (4, 2)), 1)
    return params, disc, batch


def test_predictor_loss_combines_bce_and_loglik(rng):
    params, disc, batch = _instance(rng)
    out = adversarial_losses(batch, params.nodes(), disc.nodes(), 0.1, "gru")
    assert out.predictor.value == pytest.approx(out.bce.value + 0.1 * out.loglik, abs=1e-14)
    assert out.discriminator.value == pytest.approx(-out.loglik, abs=1e-14)


def test_lambda_zero_is_exactly_bce(rng):
    params, disc, batch = _instance(rng)
    out = adversarial_losses(batch, params.nodes(), disc.nodes(), 0.0, "gru")
    assert out.predictor is out.bce
    ref = bce_loss(batch, params.nodes(), "gru").value
    assert out.predictor.value == ref


@pytest.mark.parametrize("kind", ["gru", "attention"])
def test_stop_gradient_contract(kind):
    rng = np.random.default_rng(5)
    for _ in range(10):
        params, disc, batch = _instance(rng, kind)
        leaves, dleaves = params.nodes(), disc.nodes()
        out = adversarial_losses(batch, leaves, dleaves, 1.0, kind)
        backward(out.discriminator)
        assert all(not n.grad.any() for n in leaves.values())
        assert any(n.grad.any() for n in dleaves.values())
        leaves, dleaves = params.nodes(), disc.nodes()
        out = adversarial_losses(batch, leaves, dleaves, 1.0, kind)
        backward(out.predictor)
        assert all(not n.grad.any() for n in dleaves.values())


def test_stop_gradient_finite_difference(rng):
    """Perturbing theta leaves the discriminator loss's theta-gradient at zero,
    and the predictor loss does not move when only the frozen copy of theta_d moves."""
    params, disc, batch = _instance(rng)
    leaves, dleaves = params.nodes(), disc.nodes()
    out = adversarial_losses(batch, leaves, dleaves, 0.5, "gru")
    backward(out.predictor)
    # gradient of the predictor loss w.r.t. theta_d is zero, yet the value depends on theta_d
    assert all(not n.grad.any() for n in dleaves.values())
    bumped = disc.copy()
    bumped["disc.b_2"] = bumped["disc.b_2"] + 1e-3
    moved = adversarial_losses(batch, params.nodes(), bumped.nodes(), 0.5, "gru").predictor.value
    assert moved != out.predictor.value


def test_negative_lambda_rejected(rng):
    params, disc, batch = _instance(rng)
    with pytest.raises(ValueError):
        adversarial_losses(batch, params.nodes(), disc.nodes(), -0.1, "gru")


def test_minibatch_validation():
    with pytest.raises(ValueError):
        MiniBatch(0, np.zeros((2, 3)), [1], [[2]], 0)
    with pytest.raises(ValueError):
        MiniBatch(0, np.zeros((1, 3)), [1], [[2]], 2)


def test_disc_logit_shape(rng):
    disc = init_disc_params(3, 4, rng).nodes(trainable=False)
    assert disc_logit(ad.const(np.ones(3)), disc).shape == (1,)
