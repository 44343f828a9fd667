#!/usr/bin/env python3
"""
Smoothing Regime Tests
======================

Degeneration identities between regimes, perturbation norms, the power
method against an eigendecomposed Hessian, text perturbation and SWEM
order invariance.

Usage:
    pytest test_smoothing.py
"""

import logging

import numpy as np
import pytest

from regtext import gradcore as gc
from regtext.corpus import DocumentBatch, pad_batch
from regtext.encoders import EncoderKind, MaskBank, ModelSpec, ModelState, embed, init_model, logits_from_embedded
from regtext.errors import ProbabilityError, RegimeError
from regtext.gradcore import Tensor
from regtext.smoothing import (
    Regime,
    RegimeConfig,
    adversarial_loss,
    adversarial_perturbation,
    gen_vadv,
    pi_loss,
    power_iteration_perturbation,
    regime_loss,
    supervised_loss,
    text_perturb,
    vat_loss,
)

VOCAB_SIZE = 30
NUM_CLASSES = 3


def make_state(kind: EncoderKind = EncoderKind.SWEM_CONCAT, dropout: float = 0.3, dtype: str = "float64", seed: int = 0) -> ModelState:
    extra = {"hidden_state": 3} if kind.is_lstm else {}
    if kind == EncoderKind.CNN:
        extra = {"num_kernel": 5, "context_size": 3, "stride": 1}
    spec = ModelSpec(
        encoder_kind=kind, embedding_dim=4, classifier_dim=6, num_classes=NUM_CLASSES, dropout_rate=dropout, dtype=dtype, **extra
    )
    rng = np.random.default_rng(seed)
    return init_model(spec, rng.standard_normal((VOCAB_SIZE, 4)) * 0.5, rng)


def random_batch(rng: np.random.Generator, size: int = 5, t_max: int = 6, labeled: bool = True) -> DocumentBatch:
    lengths = rng.integers(1, t_max + 1, size=size)
    lengths[0] = t_max
    ids = [rng.integers(2, VOCAB_SIZE, size=n) for n in lengths]
    labels = rng.integers(0, NUM_CLASSES, size=size) if labeled else None
    return pad_batch(ids, labels)


def per_example_norms(array: np.ndarray) -> np.ndarray:
    return np.sqrt((array.astype(np.float64) ** 2).sum(axis=tuple(range(1, array.ndim))))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# =============================================================================
# DEGENERATION IDENTITIES
# =============================================================================

def test_adversarial_with_zero_radius_is_supervised(rng):
    state = make_state()
    batch = random_batch(rng)
    sup = supervised_loss(batch, state, RegimeConfig(regime=Regime.SUP), MaskBank(np.random.default_rng(5)))
    at = adversarial_loss(batch, state, RegimeConfig(regime=Regime.AT, epsilon=0.0), MaskBank(np.random.default_rng(5)))
    assert abs(float(at.data) - float(sup.data)) <= 1e-12


def test_adversarial_with_alpha_one_is_supervised(rng):
    state = make_state()
    batch = random_batch(rng)
    sup = supervised_loss(batch, state, RegimeConfig(regime=Regime.SUP), MaskBank(np.random.default_rng(5)))
    cfg = RegimeConfig(regime=Regime.AT, epsilon=5.0, alpha=1.0)
    at = adversarial_loss(batch, state, cfg, MaskBank(np.random.default_rng(5)))
    assert abs(float(at.data) - float(sup.data)) <= 1e-12


@pytest.mark.parametrize("regime", [Regime.PI, Regime.VAT])
def test_zero_weights_reduce_to_supervised(rng, regime):
    state = make_state()
    batch_l = random_batch(rng)
    batch_ul = random_batch(rng, size=8, labeled=False)
    sup = regime_loss(batch_l, None, state, RegimeConfig(regime=Regime.SUP), np.random.default_rng(7))
    cfg = RegimeConfig(regime=regime, lambda_entropy=0.0, lambda_consistency=0.0)
    semi = regime_loss(batch_l, batch_ul, state, cfg, np.random.default_rng(7))
    assert abs(float(semi.data) - float(sup.data)) <= 1e-12


def test_pi_without_noise_has_zero_consistency(rng):
    state = make_state(dropout=0.0)
    terms = {}
    pi_loss(random_batch(rng), random_batch(rng, 8, labeled=False), state, RegimeConfig(regime=Regime.PI, unk_rate=0.0, swap_rate=0.0), rng, terms)
    assert terms["consistency"] == 0.0


def test_pi_swap_only_is_invisible_to_swem(rng):
    state = make_state(dropout=0.0)
    terms = {}
    cfg = RegimeConfig(regime=Regime.PI, unk_rate=0.0, swap_rate=0.5)
    pi_loss(random_batch(rng), random_batch(rng, 8, t_max=10, labeled=False), state, cfg, rng, terms)
    assert terms["consistency"] == 0.0


def test_vat_with_zero_radius_has_zero_divergence(rng):
    state = make_state()
    terms = {}
    cfg = RegimeConfig(regime=Regime.VAT, epsilon=0.0)
    loss = vat_loss(random_batch(rng), random_batch(rng, 8, labeled=False), state, cfg, rng, terms)
    assert terms["consistency"] == 0.0
    assert float(loss.data) == pytest.approx(terms["supervised"] + terms["entropy"], rel=1e-12)


def test_vat_terms_are_nonnegative(rng):
    state = make_state()
    for regime in (Regime.VAT, Regime.AT_VAT):
        terms = {}
        loss = vat_loss(random_batch(rng), random_batch(rng, 8, labeled=False), state, RegimeConfig(regime=regime), rng, terms)
        assert np.isfinite(float(loss.data))
        assert all(value >= 0.0 for value in terms.values())
        assert set(terms) >= {"supervised", "entropy", "consistency"}
    assert "adversarial" in terms


def test_empty_unlabeled_batch_degrades_with_warning(rng, caplog):
    state = make_state()
    batch_l = random_batch(rng)
    sup = regime_loss(batch_l, None, state, RegimeConfig(regime=Regime.SUP), np.random.default_rng(1))
    with caplog.at_level(logging.WARNING):
        vat = vat_loss(batch_l, None, state, RegimeConfig(regime=Regime.VAT), np.random.default_rng(1))
    assert float(vat.data) == float(sup.data)
    assert "Empty unlabeled batch" in caplog.text


def test_regime_mismatch_is_an_error(rng):
    state = make_state()
    batch = random_batch(rng)
    with pytest.raises(RegimeError):
        adversarial_loss(batch, state, RegimeConfig(regime=Regime.SUP), MaskBank(rng))
    with pytest.raises(RegimeError):
        gen_vadv(batch, state, RegimeConfig(regime=Regime.PI), rng)
    with pytest.raises(RegimeError):
        pi_loss(batch, batch, state, RegimeConfig(regime=Regime.VAT), rng)
    with pytest.raises(RegimeError) as info:
        vat_loss(batch, batch, state, RegimeConfig(regime=Regime.AT), rng)
    assert info.value.regime == "AT"


# =============================================================================
# PERTURBATIONS
# =============================================================================

def test_adversarial_norm_equals_radius(rng):
    state = make_state(dropout=0.0)
    for _ in range(100):
        batch = random_batch(rng, size=4)
        x = embed(state, batch.token_ids)
        loss = gc.softmax_cross_entropy(logits_from_embedded(state, x, batch.lengths, False, None), batch.labels)
        eta = adversarial_perturbation(loss, x, batch.mask[:, :, None], 2.0)
        np.testing.assert_allclose(per_example_norms(eta), 2.0, atol=1e-6)
        assert np.all(eta[~batch.mask] == 0.0)


def test_virtual_adversarial_norm_equals_radius(rng):
    state = make_state()
    cfg = RegimeConfig(regime=Regime.VAT, epsilon=1.5)
    for _ in range(100):
        batch = random_batch(rng, size=4, labeled=False)
        r_vadv = gen_vadv(batch, state, cfg, rng)
        assert r_vadv.shape == batch.token_ids.shape + (4,)
        np.testing.assert_allclose(per_example_norms(r_vadv), 1.5, atol=1e-6)
        assert np.all(r_vadv[~batch.mask] == 0.0)


def test_virtual_adversarial_is_seeded(rng):
    state = make_state(kind=EncoderKind.CNN)
    batch = random_batch(rng, labeled=False)
    cfg = RegimeConfig(regime=Regime.AT_VAT, power_iterations=2)
    first = gen_vadv(batch, state, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(first, gen_vadv(batch, state, cfg, np.random.default_rng(3)))


def test_adversarial_direction_on_linear_softmax(rng):
    w = rng.standard_normal((3, 5))
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = np.array([0, 4, 2, 2])
    eta = adversarial_perturbation(gc.softmax_cross_entropy(x @ w, labels), x, np.ones((4, 3)), 1.0)

    logits = x.data @ w
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    analytic = (p - np.eye(5)[labels]) @ w.T
    cosine = (eta * analytic).sum(axis=1) / (np.linalg.norm(eta, axis=1) * np.linalg.norm(analytic, axis=1))
    assert np.all(cosine > 0.999)


def test_power_iteration_finds_dominant_curvature_direction():
    rng = np.random.default_rng(0)
    # orthogonal centered rows: under a uniform p the Hessian is W W^T / 4, eigenvalues 9, 1, 0.25 over 4
    rows = np.array(
        [
            3.0 * np.array([1.0, -1.0, 0.0, 0.0]) / np.sqrt(2.0),
            1.0 * np.array([0.0, 0.0, 1.0, -1.0]) / np.sqrt(2.0),
            0.5 * np.array([1.0, 1.0, -1.0, -1.0]) / 2.0,
        ]
    )
    rotation, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    w = rotation @ rows
    x = np.zeros((1, 3))
    p_clean = np.full((1, 4), 0.25)

    hessian = w @ (np.diag(p_clean[0]) - np.outer(p_clean[0], p_clean[0])) @ w.T
    eigenvalues, eigenvectors = np.linalg.eigh(hessian)
    dominant = eigenvectors[:, np.argmax(eigenvalues)]

    r = power_iteration_perturbation(
        lambda inputs: gc.softmax(inputs @ w), x, p_clean, np.ones((1, 3)), 1.0, 1e-3, 5, np.random.default_rng(1)
    )
    cosine = abs(float(r[0] @ dominant)) / np.linalg.norm(r[0])
    assert cosine >= 0.99


def test_vanishing_gradient_keeps_initial_direction():
    x = np.zeros((2, 3))
    p_clean = np.full((2, 4), 0.25)
    r = power_iteration_perturbation(
        lambda inputs: gc.softmax(inputs @ np.zeros((3, 4))), x, p_clean, np.ones((2, 3)), 2.0, 0.1, 3, np.random.default_rng(9)
    )
    expected = 2.0 * gc.l2_normalize(np.random.default_rng(9).standard_normal((2, 3))).data
    np.testing.assert_allclose(r, expected)
    np.testing.assert_allclose(per_example_norms(r), 2.0)


def test_perturbation_is_constant_inside_the_step(rng):
    state = make_state(dropout=0.0)
    batch = random_batch(rng)
    cfg = RegimeConfig(regime=Regime.AT, epsilon=1.0, alpha=0.3)

    gc.backward(adversarial_loss(batch, state, cfg, MaskBank(rng)))
    inline = {name: t.grad.copy() for name, t in state.trainable()}
    state.zero_grad()

    x = embed(state, batch.token_ids)
    clean = gc.softmax_cross_entropy(logits_from_embedded(state, x, batch.lengths, True, None), batch.labels)
    eta = adversarial_perturbation(clean, x, batch.mask[:, :, None], 1.0)
    perturbed = gc.softmax_cross_entropy(logits_from_embedded(state, x + eta, batch.lengths, True, None), batch.labels)
    gc.backward(0.3 * clean + 0.7 * perturbed)
    for name, tensor in state.trainable():
        np.testing.assert_allclose(tensor.grad, inline[name], rtol=1e-10, atol=1e-14)


# =============================================================================
# TEXT PERTURBATION
# =============================================================================

def test_text_perturb_zero_rates_is_identity(rng):
    batch = random_batch(rng, size=6)
    out = text_perturb(batch, 0.0, 0.0, rng)
    np.testing.assert_array_equal(out.token_ids, batch.token_ids)
    np.testing.assert_array_equal(out.labels, batch.labels)


def test_text_perturb_full_unknown_rate(rng):
    batch = random_batch(rng, size=6)
    out = text_perturb(batch, 1.0 - 1e-12, 0.0, rng)
    np.testing.assert_array_equal(out.token_ids[batch.mask], 1)
    np.testing.assert_array_equal(out.token_ids[~batch.mask], 0)


def test_text_perturb_swaps_preserve_tokens(rng):
    batch = random_batch(rng, size=20, t_max=9)
    out = text_perturb(batch, 0.0, 0.7, rng)
    np.testing.assert_array_equal(out.lengths, batch.lengths)
    np.testing.assert_array_equal(np.sort(out.token_ids, axis=1), np.sort(batch.token_ids, axis=1))
    np.testing.assert_array_equal(out.token_ids[~batch.mask], 0)
    assert not np.array_equal(out.token_ids, batch.token_ids)


def test_text_perturb_rate_out_of_range(rng):
    with pytest.raises(ProbabilityError):
        text_perturb(random_batch(rng), 1.0, 0.0, rng)


def test_swem_logits_ignore_word_order(rng):
    state = make_state(dropout=0.0, dtype="float32")
    batch = random_batch(rng, size=16, t_max=12)
    swapped = text_perturb(batch, 0.0, 0.9, rng)
    with gc.no_grad():
        a = logits_from_embedded(state, embed(state, batch.token_ids), batch.lengths, False, None).data
        b = logits_from_embedded(state, embed(state, swapped.token_ids), swapped.lengths, False, None).data
    np.testing.assert_array_equal(a, b)


def test_rampup_weight_schedule():
    assert RegimeConfig().rampup_weight(0) == 1.0
    cfg = RegimeConfig(rampup_epochs=10)
    weights = [cfg.rampup_weight(epoch) for epoch in range(0, 13)]
    assert weights[0] == pytest.approx(np.exp(-5.0))
    assert weights[5] == pytest.approx(np.exp(-1.25))
    assert weights[10:] == [1.0, 1.0, 1.0]
    assert all(a < b for a, b in zip(weights[:10], weights[1:11]))


def test_at_epoch_scales_only_unsupervised_weights():
    cfg = RegimeConfig(regime=Regime.VAT, epsilon=0.3, lambda_entropy=0.2, lambda_consistency=4.0, rampup_epochs=4)
    early = cfg.at_epoch(2)
    weight = np.exp(-5.0 * 0.25)
    assert early.lambda_entropy == pytest.approx(0.2 * weight)
    assert early.lambda_consistency == pytest.approx(4.0 * weight)
    assert early.model_dump(exclude={"lambda_entropy", "lambda_consistency"}) == cfg.model_dump(
        exclude={"lambda_entropy", "lambda_consistency"}
    )
    assert cfg.at_epoch(4) is cfg
    assert cfg.lambda_entropy == 0.2


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
