"""Contrastive residual loss algebra, gradient assembly, and the baseline
losses against scalar oracles."""

import numpy as np
import pytest

from cretta import kernels
from cretta.autodiff import Tensor, finite_difference
from cretta.buffer import make_pairs
from cretta.model import Classifier, build_param_mask, clone_as_target, \
    energy, forward
from cretta.objectives import (assemble_cretta_gradient, build_pair_batch,
                               cretta_logit, cretta_loss, entropy_loss,
                               gradient_weight, nce_loss, no_contrastive_loss,
                               no_contrastive_sigma_loss,
                               pairwise_non_residual_loss,
                               per_pair_energy_gradients, pseudo_label_loss,
                               weighted_energy_surrogate)

LN2 = float(np.log(2.0))


def _pair_batch_from_logits(l_values, beta=1.0):
    """PairBatch whose logits are exactly l_values: the phi gap carries the
    value, both theta energies are zero constants on the tape."""
    l = np.asarray(l_values, dtype=np.float64)
    n = l.size
    idx = np.arange(n)
    zeros = Tensor(np.zeros(n), requires_grad=True)
    return build_pair_batch(np.zeros((n, 1)), np.zeros((n, 1)),
                            e_phi_s=np.zeros(n), e_phi_t=l / beta,
                            e_theta_s=zeros, e_theta_t=zeros * 1.0,
                            pairs=(idx, idx), beta=beta)


def test_logit_hand_value():
    assert cretta_logit(-2.0, -1.0, -2.0, -3.0, beta=1.0) == 2.0


def test_logit_zero_when_models_agree(rng):
    for _ in range(20):
        e_s, e_t = rng.normal(size=2)
        assert cretta_logit(e_s, e_t, e_s, e_t, beta=1.7) == 0.0


def test_logit_linear_in_beta_and_antisymmetric(rng):
    args = tuple(rng.normal(size=4))
    assert cretta_logit(*args, beta=2.0) == pytest.approx(
        2.0 * cretta_logit(*args, beta=1.0), abs=1e-12)
    swapped = (args[1], args[0], args[3], args[2])
    assert cretta_logit(*swapped, beta=1.3) == pytest.approx(
        -cretta_logit(*args, beta=1.3), abs=1e-12)
    with pytest.raises(ValueError):
        cretta_logit(0, 0, 0, 0, beta=0.0)


def test_gradient_weight_identities(rng):
    assert gradient_weight(0.0) == 0.5
    l = rng.normal(0, 4, size=100)
    np.testing.assert_allclose(gradient_weight(l) + kernels.sigmoid(l), 1.0,
                               atol=1e-15)


def test_loss_hand_values():
    batch = _pair_batch_from_logits([2.0, 0.0, -1.0])
    expected = np.mean([-np.log(kernels.sigmoid(2.0)), LN2,
                        -np.log(kernels.sigmoid(-1.0))])
    assert cretta_loss(batch).item() == pytest.approx(expected, abs=1e-12)
    assert cretta_loss(_pair_batch_from_logits([50.0])).item() < 1e-20
    np.testing.assert_array_equal(batch.weights(),
                                  kernels.sigmoid(-batch.logit.data))


def test_fresh_clone_fixpoint(world):
    """With theta = phi the logit is identically zero: loss ln 2, weights
    exactly one half."""
    source = world["model"]
    target = clone_as_target(source)
    x_t = world["target"].inputs[:40]
    x_s = world["source"].inputs[:40]

    e_phi_t = energy(forward(source, x_t, bn_mode="batch")).data
    e_phi_s = energy(forward(source, x_s, bn_mode="running")).data
    target.set_requires_grad(build_param_mask(target, "bn_affine"))
    e_theta_t = energy(forward(target, x_t, bn_mode="batch"))
    e_theta_s = energy(forward(target, x_s, bn_mode="running"))

    batch = build_pair_batch(x_s, x_t, e_phi_s, e_phi_t, e_theta_s,
                             e_theta_t, make_pairs(x_t, x_s), beta=1.0)
    np.testing.assert_allclose(batch.logit.data, 0.0, atol=1e-12)
    assert cretta_loss(batch).item() == pytest.approx(LN2, abs=1e-12)
    np.testing.assert_allclose(batch.weights(), 0.5, atol=1e-12)


def test_head_bias_shift_cancels_in_loss(world):
    """Adding a constant to every head bias shifts every target energy by
    its negative and leaves the pairwise loss unchanged: the normalization
    constant never matters."""
    source = world["model"]
    x_t = world["target"].inputs[:30]
    x_s = world["source"].inputs[:30]
    e_phi_t = energy(forward(source, x_t, bn_mode="batch")).data
    e_phi_s = energy(forward(source, x_s, bn_mode="running")).data

    def build(shift):
        target = clone_as_target(source)
        target.params["head.bias"].data += shift
        target.set_requires_grad(build_param_mask(target, "bn_affine"))
        e_t = energy(forward(target, x_t, bn_mode="batch"))
        e_s = energy(forward(target, x_s, bn_mode="running"))
        batch = build_pair_batch(x_s, x_t, e_phi_s, e_phi_t, e_s, e_t,
                                 make_pairs(x_t, x_s), beta=1.0)
        return e_t.data, e_s.data, batch

    base_t, base_s, base_batch = build(0.0)
    base_loss = cretta_loss(base_batch).item()
    base_pnr = pairwise_non_residual_loss(base_batch.e_theta_s,
                                          base_batch.e_theta_t).item()
    for c in (-10.0, -0.1, 0.1, 10.0):
        e_t, e_s, batch = build(c)
        np.testing.assert_allclose(e_t, base_t - c, atol=1e-12)
        np.testing.assert_allclose(e_s, base_s - c, atol=1e-12)
        assert abs(cretta_loss(batch).item() - base_loss) < 1e-9
        pnr = pairwise_non_residual_loss(batch.e_theta_s,
                                         batch.e_theta_t).item()
        assert abs(pnr - base_pnr) < 1e-9


def test_weight_is_negative_loss_slope(rng):
    # d(-log sigmoid(l))/dl = -sigmoid(-l) = -w, per pair
    for l in rng.normal(0, 3, size=50):
        h = 1e-6
        up = -kernels.log_sigmoid(l + h)
        down = -kernels.log_sigmoid(l - h)
        slope = (up - down) / (2 * h)
        assert slope == pytest.approx(-gradient_weight(l), abs=1e-7)


def _random_pair_setup(i):
    rng = np.random.default_rng(1000 + i)
    c = int(rng.integers(2, 5))
    model = Classifier([3, 6, c], seed=int(rng.integers(0, 2**31)))
    mask = "all" if i % 3 == 0 else "bn_affine"
    model.set_requires_grad(build_param_mask(model, mask))
    n, k = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x_t = rng.normal(size=(n, 3))
    x_s = rng.normal(size=(k, 3))
    mode = "cartesian" if i % 2 else "aligned"
    if mode == "aligned":
        k = n
        x_s = x_s[:1].repeat(n, 0) + rng.normal(0, 0.5, size=(n, 3))
    bn = "batch" if i % 4 < 2 else "running"
    e_theta_t = energy(forward(model, x_t, bn_mode=bn))
    e_theta_s = energy(forward(model, x_s, bn_mode="running"))
    batch = build_pair_batch(
        x_s, x_t, rng.normal(size=k), rng.normal(size=n),
        e_theta_s, e_theta_t, make_pairs(x_t, x_s, mode),
        beta=float(rng.uniform(0.3, 3.0)))
    params = {name: t for name, t in model.params.items() if t.requires_grad}
    return model, batch, params


def test_assembled_gradient_matches_tape():
    """The weighted per-pair combination reproduces autodiff of the loss on
    50 random models and pairings."""
    worst = 0.0
    for i in range(50):
        model, batch, params = _random_pair_setup(i)
        grads_s = per_pair_energy_gradients(batch.e_theta_s, params)
        grads_t = per_pair_energy_gradients(batch.e_theta_t, params)
        assembled = assemble_cretta_gradient(batch, grads_s, grads_t)
        for t in params.values():
            t.grad = None
        cretta_loss(batch).backward()
        for name, t in params.items():
            tape = t.grad if t.grad is not None else np.zeros_like(t.data)
            denom = max(1e-8, float(np.max(np.abs(tape))))
            worst = max(worst,
                        float(np.max(np.abs(assembled[name] - tape))) / denom)
    assert worst < 1e-6


def test_tape_gradient_matches_finite_differences_on_loss(world):
    source = world["model"]
    x_t = world["target"].inputs[:8]
    x_s = world["source"].inputs[:8]
    e_phi_t = energy(forward(source, x_t, bn_mode="batch")).data
    e_phi_s = energy(forward(source, x_s, bn_mode="running")).data

    def build(gamma0):
        target = clone_as_target(source)
        target.set_requires_grad(build_param_mask(target, "bn_affine"))
        target.params["layers.0.bn_gamma"].data[:] = gamma0
        e_t = energy(forward(target, x_t, bn_mode="batch"))
        e_s = energy(forward(target, x_s, bn_mode="running"))
        batch = build_pair_batch(x_s, x_t, e_phi_s, e_phi_t, e_s, e_t,
                                 make_pairs(x_t, x_s), beta=1.0)
        return target, cretta_loss(batch)

    base = world["model"].params["layers.0.bn_gamma"].data
    # nudge away from the fixpoint so the gradient is nonzero
    gamma = base + np.linspace(-0.2, 0.3, base.size)
    target, loss = build(gamma)
    loss.backward()
    tape = target.params["layers.0.bn_gamma"].grad
    fd = finite_difference(lambda v: build(v)[1].item(), gamma, step=1e-5)
    denom = np.maximum(1.0, np.abs(fd))
    assert np.max(np.abs(tape - fd) / denom) < 1e-5


def test_surrogate_applies_arbitrary_weights(rng):
    _, batch, params = _random_pair_setup(7)
    weights = rng.uniform(size=batch.num_pairs)
    grads_s = per_pair_energy_gradients(batch.e_theta_s, params)
    grads_t = per_pair_energy_gradients(batch.e_theta_t, params)
    weighted_energy_surrogate(batch, weights).backward()
    p = batch.num_pairs
    for name, t in params.items():
        manual = np.tensordot(weights, grads_t[name] - grads_s[name],
                              axes=(0, 0)) * batch.beta / p
        tape = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(tape, manual, atol=1e-10)
    with pytest.raises(ValueError):
        weighted_energy_surrogate(batch, weights[:-1])


def test_zero_weights_assemble_to_zero():
    _, batch, params = _random_pair_setup(3)
    grads_s = per_pair_energy_gradients(batch.e_theta_s, params)
    grads_t = per_pair_energy_gradients(batch.e_theta_t, params)
    saturated = _pair_batch_from_logits(np.full(batch.num_pairs, 1e6),
                                        beta=batch.beta)
    out = assemble_cretta_gradient(saturated, grads_s, grads_t)
    for name in params:
        np.testing.assert_allclose(out[name], 0.0, atol=1e-12)


def test_pair_batch_validation(rng):
    zeros = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        build_pair_batch(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3),
                         np.zeros(3), zeros, zeros,
                         (np.arange(3), np.arange(2)), beta=1.0)
    with pytest.raises(ValueError):
        build_pair_batch(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3),
                         np.zeros(3), zeros, zeros,
                         (np.arange(3), np.arange(3)), beta=0.0)
    with pytest.raises(ValueError):
        build_pair_batch(np.zeros((3, 1)), np.zeros((3, 1)),
                         np.array([np.nan, 0, 0]), np.zeros(3), zeros, zeros,
                         (np.arange(3), np.arange(3)), beta=1.0)


def test_no_contrastive_loss_is_mean_energy(rng):
    e = Tensor(np.full(6, -2.5), requires_grad=True)
    loss = no_contrastive_loss(e)
    assert loss.item() == pytest.approx(-2.5, abs=1e-15)
    loss.backward()
    np.testing.assert_allclose(e.grad, 1.0 / 6.0, atol=1e-15)
    with pytest.raises(ValueError):
        no_contrastive_loss(Tensor(np.empty(0)))


def test_no_contrastive_sigma_oracle(rng):
    e_phi = rng.normal(size=5)
    e_theta = Tensor(rng.normal(size=5))
    beta = 1.4
    expected = float(np.mean(-kernels.log_sigmoid(beta * (e_phi
                                                          - e_theta.data))))
    got = no_contrastive_sigma_loss(e_phi, e_theta, beta).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_pairwise_non_residual_identities(rng):
    e = rng.normal(size=7)
    same = pairwise_non_residual_loss(Tensor(e), Tensor(e.copy()))
    assert same.item() == pytest.approx(LN2, abs=1e-12)
    a, b = Tensor(rng.normal(size=7)), Tensor(rng.normal(size=7))
    base = pairwise_non_residual_loss(a, b).item()
    shifted = pairwise_non_residual_loss(a + 3.7, b + 3.7).item()
    assert shifted == pytest.approx(base, abs=1e-12)
    # equals the residual loss when the phi energies agree pairwise, beta 1
    batch = build_pair_batch(np.zeros((7, 1)), np.zeros((7, 1)),
                             np.full(7, 0.9), np.full(7, 0.9), a, b,
                             (np.arange(7), np.arange(7)), beta=1.0)
    assert cretta_loss(batch).item() == pytest.approx(base, abs=1e-12)


def test_nce_loss_oracle(rng):
    e = Tensor(rng.normal(size=6))
    zero_reward = nce_loss(e, e.data, e, e.data)
    assert zero_reward.item() == pytest.approx(2 * LN2, abs=1e-12)

    sep = nce_loss(Tensor(np.full(4, 50.0)), np.zeros(4),
                   Tensor(np.full(4, -50.0)), np.zeros(4))
    assert sep.item() < 1e-20

    e_theta_s, e_phi_s = rng.normal(size=5), rng.normal(size=5)
    e_theta_t, e_phi_t = rng.normal(size=8), rng.normal(size=8)
    r_t = e_phi_t - e_theta_t
    r_s = e_phi_s - e_theta_s
    oracle = float(np.mean(-kernels.log_sigmoid(r_t))
                   + np.mean(-kernels.log_sigmoid(-r_s)))
    for variant, beta in (("non_residual", 1.0), ("residual", 2.3)):
        got = nce_loss(Tensor(e_theta_s), e_phi_s, Tensor(e_theta_t),
                       e_phi_t, variant=variant, beta=beta).item()
        assert got == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValueError):
        nce_loss(e, e.data, e, e.data, variant="contrastive")


def test_entropy_loss_oracle(rng):
    c = 6
    assert entropy_loss(Tensor(np.zeros((4, c)))).item() == pytest.approx(
        np.log(c), abs=1e-12)
    hot = np.zeros((3, 4))
    hot[:, 0] = 50.0
    assert entropy_loss(Tensor(hot)).item() < 1e-18
    p = kernels.sigmoid(1.0 - 2.0)  # softmax of [1, 2] = (sigma(-1), sigma(1))
    direct = -(p * np.log(p) + (1 - p) * np.log(1 - p))
    assert entropy_loss(Tensor(np.array([[1.0, 2.0]]))).item() == \
        pytest.approx(direct, abs=1e-12)
    logits = rng.normal(size=(9, 3))
    assert entropy_loss(Tensor(logits + 11.0)).item() == pytest.approx(
        entropy_loss(Tensor(logits)).item(), abs=1e-12)


def test_entropy_loss_gradient_sign(world):
    # minimizing entropy should sharpen: gradient pushes the max logit up
    logits = Tensor(np.array([[1.0, 0.5, 0.0]]), requires_grad=True)
    entropy_loss(logits).backward()
    assert logits.grad[0, 0] < 0


def test_pseudo_label_threshold_filtering(rng):
    logits = Tensor(np.array([[4.0, 0.0], [0.2, 0.0], [0.0, 3.0]]))
    probs = kernels.softmax_rows(logits.data)
    loss, kept = pseudo_label_loss(logits, 0.9)
    assert kept == 2  # the middle row is too uncertain
    expected = -(np.log(probs[0, 0]) + np.log(probs[2, 1])) / 2
    assert loss.item() == pytest.approx(expected, abs=1e-12)

    loss, kept = pseudo_label_loss(Tensor(np.zeros((5, 4))), 0.5)
    assert kept == 0 and loss.item() == 0.0

    hot = np.zeros((3, 2))
    hot[:, 1] = 50.0
    loss, kept = pseudo_label_loss(Tensor(hot), 0.0)
    assert kept == 3 and loss.item() < 1e-18

    loss, _ = pseudo_label_loss(Tensor(np.array([[1.0, 2.0]])), 0.0)
    assert loss.item() == pytest.approx(
        -np.log(kernels.softmax_rows(np.array([[1.0, 2.0]]))[0, 1]),
        abs=1e-12)
    with pytest.raises(ValueError):
        pseudo_label_loss(logits, 1.0)
