"""
Distribution smoothing regimes
==============================

Loss construction for the five training regimes:

- SUP: cross-entropy on labeled data.
- AT: cross-entropy mixed with the cross-entropy at an adversarially
  perturbed embedding input.
- PI: supervised term plus entropy of, and MSE consistency between, two
  stochastic passes over unlabeled data (dropout and text perturbation).
- VAT: supervised term plus entropy and the KL divergence between the clean
  and a virtually adversarial unlabeled pass.
- AT_VAT: VAT with the supervised term replaced by the AT loss.

All perturbations live in embedding space (PI's text perturbation acts on
token ids), are restricted to real tokens and carry no gradient.
"""

import logging
from enum import Enum
from typing import Callable, Dict, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from regtext import gradcore as gc
from regtext.corpus import UNK_INDEX, DocumentBatch
from regtext.encoders import MaskBank, ModelState, embed, logits_from_embedded
from regtext.errors import ProbabilityError, RegimeError
from regtext.gradcore import Tensor

logger = logging.getLogger(__name__)

LossTerms = Dict[str, float]


class Regime(str, Enum):
    SUP = "SUP"
    AT = "AT"
    PI = "PI"
    VAT = "VAT"
    AT_VAT = "AT_VAT"

    @property
    def uses_unlabeled(self) -> bool:
        return self in (Regime.PI, Regime.VAT, Regime.AT_VAT)


class RegimeConfig(BaseModel):
    regime: Regime = Regime.SUP
    epsilon: float = Field(default=2.0, ge=0.0, description="L2 radius of embedding perturbations")
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    xi: float = Field(default=0.1, gt=0.0)
    power_iterations: int = Field(default=1, ge=1)
    lambda_consistency: float = Field(default=1.0, ge=0.0)
    lambda_entropy: float = Field(default=1.0, ge=0.0)
    unk_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    swap_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    normalize_embeddings: bool = False
    rampup_epochs: int = Field(default=0, ge=0, description="Epochs over which lambda_H and lambda_c grow to full weight")

    @model_validator(mode="after")
    def _note_zero_radius(self) -> "RegimeConfig":
        if self.epsilon == 0.0 and self.regime in (Regime.AT, Regime.VAT, Regime.AT_VAT):
            logger.warning(f"epsilon=0 makes {self.regime.value} equivalent to its unperturbed loss")
        return self

    def rampup_weight(self, epoch: int) -> float:
        """Sigmoid-shaped ``exp(-5 (1 - t)^2)`` ramp over the first ``rampup_epochs`` epochs (1-based)."""
        if self.rampup_epochs == 0 or epoch >= self.rampup_epochs:
            return 1.0
        t = max(epoch, 0) / self.rampup_epochs
        return float(np.exp(-5.0 * (1.0 - t) ** 2))

    def at_epoch(self, epoch: int) -> "RegimeConfig":
        weight = self.rampup_weight(epoch)
        if weight == 1.0:
            return self
        return self.model_copy(
            update={
                "lambda_entropy": self.lambda_entropy * weight,
                "lambda_consistency": self.lambda_consistency * weight,
            }
        )


def _require(operation: str, cfg: RegimeConfig, *allowed: Regime) -> None:
    if cfg.regime not in allowed:
        raise RegimeError(operation, cfg.regime.value, [r.value for r in allowed])


def _empty(batch: Optional[DocumentBatch]) -> bool:
    return batch is None or batch.size == 0


def _labels(batch: DocumentBatch) -> np.ndarray:
    if batch.labels is None:
        raise ValueError("labeled loss needs a batch with labels")
    return batch.labels


def _real_token_mask(batch: DocumentBatch, dtype) -> np.ndarray:
    return batch.mask[:, :, None].astype(dtype)


# =============================================================================
# SUPERVISED AND ADVERSARIAL
# =============================================================================

def supervised_loss(
    batch_l: DocumentBatch, state: ModelState, cfg: RegimeConfig, bank: Optional[MaskBank], training: bool = True
) -> Tensor:
    x = embed(state, batch_l.token_ids, cfg.normalize_embeddings)
    logits = logits_from_embedded(state, x, batch_l.lengths, training, bank)
    return gc.softmax_cross_entropy(logits, _labels(batch_l))


def adversarial_perturbation(loss: Tensor, x: Tensor, mask: np.ndarray, epsilon: float) -> np.ndarray:
    """``epsilon * normalize(dJ/dX)`` on real tokens, as a constant array."""
    (direction,) = gc.grad(loss, [x])
    return epsilon * gc.l2_normalize(direction * mask).data


def adversarial_loss(
    batch_l: DocumentBatch,
    state: ModelState,
    cfg: RegimeConfig,
    bank: MaskBank,
    terms: Optional[LossTerms] = None,
    training: bool = True,
) -> Tensor:
    """``alpha * J(X) + (1 - alpha) * J(X + eta)``; both passes share ``bank``'s dropout masks."""
    _require("adversarial_loss", cfg, Regime.AT, Regime.AT_VAT)
    labels = _labels(batch_l)
    x = embed(state, batch_l.token_ids, cfg.normalize_embeddings)
    clean = gc.softmax_cross_entropy(logits_from_embedded(state, x, batch_l.lengths, training, bank), labels)
    eta = adversarial_perturbation(clean, x, _real_token_mask(batch_l, x.dtype), cfg.epsilon)
    perturbed = gc.softmax_cross_entropy(logits_from_embedded(state, x + eta, batch_l.lengths, training, bank), labels)
    if terms is not None:
        terms["supervised"] = float(clean.data)
        terms["adversarial"] = float(perturbed.data)
    return cfg.alpha * clean + (1.0 - cfg.alpha) * perturbed


# =============================================================================
# PI MODEL
# =============================================================================

def text_perturb(batch: DocumentBatch, unk_rate: float, swap_rate: float, rng: np.random.Generator) -> DocumentBatch:
    """Unknown-token replacement, then left-to-right adjacent swaps, on real tokens only.

    Padding and lengths are untouched; labels are carried over.
    """
    for name, rate in (("unk_rate", unk_rate), ("swap_rate", swap_rate)):
        if not 0.0 <= rate < 1.0:
            raise ProbabilityError(name, rate)
    ids = batch.token_ids.copy()
    real = batch.mask
    ids[(rng.random(ids.shape) < unk_rate) & real] = UNK_INDEX
    t_max = ids.shape[1]
    if t_max > 1:
        draws = rng.random((ids.shape[0], t_max - 1))
        for t in range(t_max - 1):
            swap = (draws[:, t] < swap_rate) & (t + 1 < batch.lengths)
            ids[swap, t], ids[swap, t + 1] = ids[swap, t + 1], ids[swap, t].copy()
    return DocumentBatch(token_ids=ids, lengths=batch.lengths.copy(), labels=batch.labels)


def pi_loss(
    batch_l: DocumentBatch,
    batch_ul: Optional[DocumentBatch],
    state: ModelState,
    cfg: RegimeConfig,
    rng: np.random.Generator,
    terms: Optional[LossTerms] = None,
) -> Tensor:
    """``J + lambda_H * H(p1) + lambda_c * MSE(p1, p2)``.

    ``p1`` is the clean unlabeled pass, ``p2`` a pass over text-perturbed ids;
    each draws its own dropout masks.
    """
    _require("pi_loss", cfg, Regime.PI)
    supervised = supervised_loss(batch_l, state, cfg, MaskBank(rng))
    if terms is not None:
        terms["supervised"] = float(supervised.data)
    if _empty(batch_ul):
        logger.warning("Empty unlabeled batch; PI step uses the supervised loss only")
        return supervised

    x1 = embed(state, batch_ul.token_ids, cfg.normalize_embeddings)
    p1 = gc.softmax(logits_from_embedded(state, x1, batch_ul.lengths, True, MaskBank(rng)))
    perturbed = text_perturb(batch_ul, cfg.unk_rate, cfg.swap_rate, rng)
    x2 = embed(state, perturbed.token_ids, cfg.normalize_embeddings)
    p2 = gc.softmax(logits_from_embedded(state, x2, perturbed.lengths, True, MaskBank(rng)))

    entropy = gc.entropy(p1)
    consistency = gc.mse(p1, p2)
    if terms is not None:
        terms["entropy"] = float(entropy.data)
        terms["consistency"] = float(consistency.data)
    return supervised + cfg.lambda_entropy * entropy + cfg.lambda_consistency * consistency


# =============================================================================
# VIRTUAL ADVERSARIAL
# =============================================================================

def power_iteration_perturbation(
    predict: Callable[[Tensor], Tensor],
    x: np.ndarray,
    p_clean: np.ndarray,
    mask: np.ndarray,
    epsilon: float,
    xi: float,
    iterations: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Finite-difference power iteration on the curvature of ``KL(p_clean || predict(x + xi r))``.

    ``mask`` (broadcastable to ``x``) restricts the probe to real tokens.
    An example whose gradient vanishes keeps its previous direction.
    """
    mask = np.broadcast_to(mask, x.shape).astype(x.dtype)
    r = gc.l2_normalize(rng.standard_normal(x.shape).astype(x.dtype) * mask).data
    for _ in range(iterations):
        probe = Tensor(r, requires_grad=True, name="probe")
        divergence = gc.kld(p_clean, predict(x + xi * probe))
        (g,) = gc.grad(divergence, [probe])
        g = g * mask
        axes = tuple(range(1, g.ndim))
        vanished = ~np.any(g != 0, axis=axes, keepdims=True)
        if vanished.any():
            logger.debug(f"{int(vanished.sum())} examples with zero power-iteration gradient keep their probe")
        r = np.where(vanished, r, gc.l2_normalize(g).data)
    return epsilon * r


def gen_vadv(
    batch_ul: DocumentBatch,
    state: ModelState,
    cfg: RegimeConfig,
    rng: np.random.Generator,
    bank: Optional[MaskBank] = None,
    training: bool = True,
) -> np.ndarray:
    """Virtual adversarial perturbation ``r_vadv`` of the embedded unlabeled batch.

    Never reads labels. Every pass inside one call uses ``bank``'s masks.
    """
    _require("gen_vadv", cfg, Regime.VAT, Regime.AT_VAT)
    bank = bank if bank is not None else MaskBank(rng)
    with gc.no_grad():
        x = embed(state, batch_ul.token_ids, cfg.normalize_embeddings).data

    def predict(inputs: Tensor) -> Tensor:
        return gc.softmax(logits_from_embedded(state, inputs, batch_ul.lengths, training, bank))

    with gc.no_grad():
        p_clean = predict(Tensor(x)).data
    return power_iteration_perturbation(
        predict, x, p_clean, _real_token_mask(batch_ul, x.dtype), cfg.epsilon, cfg.xi, cfg.power_iterations, rng
    )


def vat_loss(
    batch_l: DocumentBatch,
    batch_ul: Optional[DocumentBatch],
    state: ModelState,
    cfg: RegimeConfig,
    rng: np.random.Generator,
    terms: Optional[LossTerms] = None,
) -> Tensor:
    """``J + lambda_H * H(p) + lambda_c * KL(p || p(X + r_vadv))``; AT_VAT swaps J for the AT loss.

    ``p`` is a constant target inside the divergence; its gradient flows only
    through the entropy term.
    """
    _require("vat_loss", cfg, Regime.VAT, Regime.AT_VAT)
    if cfg.regime == Regime.AT_VAT:
        labeled = adversarial_loss(batch_l, state, cfg, MaskBank(rng), terms)
    else:
        labeled = supervised_loss(batch_l, state, cfg, MaskBank(rng))
        if terms is not None:
            terms["supervised"] = float(labeled.data)
    if _empty(batch_ul):
        logger.warning(f"Empty unlabeled batch; {cfg.regime.value} step uses the labeled loss only")
        return labeled

    bank = MaskBank(rng)
    r_vadv = gen_vadv(batch_ul, state, cfg, rng, bank)
    x = embed(state, batch_ul.token_ids, cfg.normalize_embeddings)
    p = gc.softmax(logits_from_embedded(state, x, batch_ul.lengths, True, bank))
    q = gc.softmax(logits_from_embedded(state, x + r_vadv, batch_ul.lengths, True, bank))

    entropy = gc.entropy(p)
    divergence = gc.kld(p.data, q)
    if terms is not None:
        terms["entropy"] = float(entropy.data)
        terms["consistency"] = float(divergence.data)
    return labeled + cfg.lambda_entropy * entropy + cfg.lambda_consistency * divergence


def regime_loss(
    batch_l: DocumentBatch,
    batch_ul: Optional[DocumentBatch],
    state: ModelState,
    cfg: RegimeConfig,
    rng: np.random.Generator,
    terms: Optional[LossTerms] = None,
) -> Tensor:
    """The training loss of ``cfg.regime`` for one labeled (and unlabeled) batch."""
    if cfg.regime == Regime.SUP:
        loss = supervised_loss(batch_l, state, cfg, MaskBank(rng))
        if terms is not None:
            terms["supervised"] = float(loss.data)
        return loss
    if cfg.regime == Regime.AT:
        return adversarial_loss(batch_l, state, cfg, MaskBank(rng), terms)
    if cfg.regime == Regime.PI:
        return pi_loss(batch_l, batch_ul, state, cfg, rng, terms)
    return vat_loss(batch_l, batch_ul, state, cfg, rng, terms)
