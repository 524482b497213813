"""Per-sample objectives for congruent model updates.

All functions accept logits of shape ``(c,)`` with an integer label, or a
batch ``(n, c)`` with an ``(n,)`` label array, and return one loss value per
sample. Reference logits (old and source models) are always treated as
constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

METHODS = ("pct", "pcat", "rcat")


@dataclass(frozen=True)
class UpdateHyperparams:
    method: str
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "rcat":
            if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
                raise ValueError(f"rcat needs alpha, beta in [0, 1], got ({self.alpha}, {self.beta})")
            if self.gamma < -1e-12:
                raise ValueError(f"rcat needs alpha + beta <= 1, got {self.alpha + self.beta}")
        elif min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("pct/pcat hyperparameters must be non-negative")

    @property
    def gamma(self) -> float:
        return 1.0 - self.alpha - self.beta

    @property
    def mu(self) -> float:
        """Weight of the old-model-correct penalty term in the penalized form."""
        return self.beta if self.method == "rcat" else self.lam * self.beta

    def to_dict(self) -> dict:
        return {"method": self.method, "lam": self.lam, "alpha": self.alpha, "beta": self.beta}


def _const(x) -> T.Tensor:
    return T.Tensor(x.data if isinstance(x, T.Tensor) else x)


def _labels(logits: T.Tensor, y):
    y = np.asarray(y, dtype=np.int64)
    c = logits.shape[-1]
    if np.any((y < 0) | (y >= c)):
        raise ValueError(f"label out of range for {c} classes")
    return y


def cross_entropy(logits, y) -> T.Tensor:
    """``-log softmax(logits)[y]`` via logsumexp."""
    logits = T.tensor(logits)
    y = _labels(logits, y)
    return T.sub(T.logsumexp(logits, axis=-1), T.gather(logits, y))


def logit_distill(f_logits, ref_logits) -> T.Tensor:
    f_logits = T.tensor(f_logits)
    ref = _const(ref_logits)
    if f_logits.shape != ref.shape:
        raise T.ShapeError(f"logit_distill: incompatible shapes {f_logits.shape} and {ref.shape}")
    return T.scale(T.sqnorm(T.sub(f_logits, ref), axis=-1), 0.5)


def old_correct(old_logits, y) -> np.ndarray | bool:
    """Indicator that the reference model predicts ``y`` (lowest index wins ties)."""
    data = old_logits.data if isinstance(old_logits, T.Tensor) else np.asarray(old_logits)
    hit = np.argmax(data, axis=-1) == np.asarray(y)
    return bool(hit) if np.ndim(hit) == 0 else hit


def _weights(alpha: float, beta: float, indicator) -> np.ndarray:
    return alpha + beta * np.asarray(indicator, dtype=np.float64)


def focal_distill(f_logits, old_logits, old_correct_mask, alpha: float, beta: float) -> T.Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    ld = logit_distill(f_logits, old_logits)
    return T.mul(ld, _weights(alpha, beta, old_correct_mask).reshape(ld.shape))


def pct_sample_loss(f_logits, old_logits, y, hp: UpdateHyperparams, old_correct_mask=None) -> T.Tensor:
    """Cross-entropy plus ``lam`` times focal distillation toward the old model.

    ``old_correct_mask`` defaults to the old model's clean-sample correctness,
    read from ``old_logits``.
    """
    if hp.method != "pct":
        raise ValueError(f"expected pct hyperparameters, got {hp.method}")
    return _congruent(f_logits, old_logits, y, hp, old_correct_mask)


def pcat_sample_loss(f_logits_adv, old_logits_adv, y, old_correct_adv, hp: UpdateHyperparams) -> T.Tensor:
    if hp.method != "pcat":
        raise ValueError(f"expected pcat hyperparameters, got {hp.method}")
    return _congruent(f_logits_adv, old_logits_adv, y, hp, old_correct_adv)


def _congruent(f_logits, old_logits, y, hp, mask) -> T.Tensor:
    if mask is None:
        mask = old_correct(old_logits, y)
    ce = cross_entropy(f_logits, y)
    if hp.lam == 0:
        return ce
    return T.add(ce, T.scale(focal_distill(f_logits, old_logits, mask, hp.alpha, hp.beta), hp.lam))


def rcat_sample_loss(f_logits_adv, src_logits_adv, old_logits_adv, y, old_correct_adv, hp: UpdateHyperparams) -> T.Tensor:
    """``gamma*CE + alpha*L_D(f, f_src) + beta*[old correct]*L_D(f, f_old)``."""
    if hp.method != "rcat":
        raise ValueError(f"expected rcat hyperparameters, got {hp.method}")
    if old_correct_adv is None:
        old_correct_adv = old_correct(old_logits_adv, y)
    loss = T.scale(cross_entropy(f_logits_adv, y), hp.gamma)
    if hp.alpha:
        loss = T.add(loss, T.scale(logit_distill(f_logits_adv, src_logits_adv), hp.alpha))
    if hp.beta:
        ld_old = logit_distill(f_logits_adv, old_logits_adv)
        loss = T.add(loss, T.mul(ld_old, _weights(0.0, hp.beta, old_correct_adv).reshape(ld_old.shape)))
    return loss


def sample_loss(hp: UpdateHyperparams | None, f_logits, y, old_logits=None, src_logits=None, old_correct_mask=None) -> T.Tensor:
    """Dispatch on ``hp.method``; ``hp=None`` means plain cross-entropy."""
    if hp is None:
        return cross_entropy(f_logits, y)
    if hp.method == "pct":
        return pct_sample_loss(f_logits, old_logits, y, hp, old_correct_mask)
    if hp.method == "pcat":
        return pcat_sample_loss(f_logits, old_logits, y, old_correct_mask, hp)
    return rcat_sample_loss(f_logits, src_logits, old_logits, y, old_correct_mask, hp)


def penalty_form(hp: UpdateHyperparams, f_logits, y, old_logits, src_logits=None, old_correct_mask=None) -> tuple[float, float, float]:
    """Regroup a batch objective as ``risk + mu * constraint``.

    ``risk`` sums the terms applied to every sample, ``constraint`` sums the
    distillation toward the old model over the old-correct subset only.
    Returns ``(risk, constraint, mu)``.
    """
    f = T.tensor(f_logits)
    if old_correct_mask is None:
        old_correct_mask = old_correct(old_logits, y)
    mask = np.asarray(old_correct_mask, dtype=bool)
    ld_old = logit_distill(f, old_logits).data
    ce = cross_entropy(f, y).data
    if hp.method == "rcat":
        risk = hp.gamma * ce + hp.alpha * logit_distill(f, src_logits).data
    else:
        risk = ce + hp.lam * hp.alpha * ld_old
    constraint = np.where(mask, ld_old, 0.0)
    return float(np.sum(risk)), float(np.sum(constraint)), hp.mu
