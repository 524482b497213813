"""L-infinity evasion attacks.

Every attack works on a single sample ``x`` of shape ``(d,)`` or a batch
``(n, d)``. Batched calls are exactly equivalent to per-sample calls: the
objective is a sum of independent per-sample terms and every random start
is drawn from a stream keyed by ``(seed, sample_id, restart)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .models import Model
from .rng import uniform_rows

log = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "fat", "pgd")
ATTACK_LOSSES = ("cross_entropy", "dlr")

# objective(x_tensor, rows) -> per-sample loss tensor; rows index the batch
Objective = Callable[[T.Tensor, np.ndarray], T.Tensor]


@dataclass(frozen=True)
class PerturbationDomain:
    epsilon: float
    box_lo: float = 0.0
    box_hi: float = 1.0
    norm: str = "inf"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.box_lo < self.box_hi:
            raise ValueError("box_lo must be below box_hi")
        if self.norm != "inf":
            raise ValueError("only the L-infinity threat model is supported")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    iterations: int = 50
    step_size: float | None = None  # None: epsilon / 4
    restarts: int = 2
    loss: str = "dlr"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.loss not in ATTACK_LOSSES:
            raise ValueError(f"unknown attack loss {self.loss!r}")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if self.kind == "fgsm" and self.iterations != 1:
            raise ValueError("fgsm is single-step: iterations must be 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    def step_for(self, domain: PerturbationDomain) -> float:
        return self.step_size if self.step_size is not None else domain.epsilon / 4.0


def evaluation_config(num_classes: int, iterations: int = 50, restarts: int = 2, seed: int = 0) -> AttackConfig:
    """PGD with DLR when there are at least four classes, cross-entropy otherwise."""
    return AttackConfig("pgd", iterations, None, restarts, "dlr" if num_classes >= 4 else "cross_entropy", seed)


@dataclass
class AttackOutcome:
    adv_point: np.ndarray
    success: np.ndarray | bool
    achieved_loss: np.ndarray | float


def project(x_adv, x_center, domain: PerturbationDomain) -> np.ndarray:
    """Clamp into the epsilon box around ``x_center`` intersected with the feature box."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_center = np.asarray(x_center, dtype=np.float64)
    lo = np.maximum(x_center - domain.epsilon, domain.box_lo)
    hi = np.minimum(x_center + domain.epsilon, domain.box_hi)
    return np.minimum(np.maximum(x_adv, lo), hi)


def dlr_loss(logits, y) -> T.Tensor:
    """Difference-of-logit-ratio loss, ``-(z_y - max_{i!=y} z_i) / (z_(1) - z_(3))``.

    Samples whose ``z_(1) - z_(3)`` is below 1e-12 fall back to cross-entropy.
    """
    logits = T.tensor(logits)
    c = logits.shape[-1]
    if c < 4:
        raise ValueError(f"dlr loss needs at least 4 classes, got {c}")
    z = logits.data
    y_arr = np.asarray(y, dtype=np.int64)
    order = np.argsort(-z, axis=-1, kind="stable")
    top1 = order[..., 0]
    top3 = order[..., 2]
    other = np.where(top1 == y_arr, order[..., 1], top1)
    z_sorted = np.take_along_axis(z, order, axis=-1)
    denom = z_sorted[..., 0] - z_sorted[..., 2]
    degenerate = np.abs(denom) < 1e-12
    margin = T.sub(T.gather(logits, y_arr), T.gather(logits, other))
    spread = T.sub(T.gather(logits, top1), T.gather(logits, top3))
    if np.any(degenerate):
        log.debug("dlr: %d degenerate sample(s), using cross-entropy", int(np.sum(degenerate)))
        spread = T.add(spread, np.where(degenerate, 1.0, 0.0).reshape(spread.shape))
        dlr = T.neg(T.div(margin, spread))
        ce = L.cross_entropy(logits, y_arr)
        keep = np.where(degenerate, 0.0, 1.0).reshape(dlr.shape)
        return T.add(T.mul(dlr, keep), T.mul(ce, 1.0 - keep))
    return T.neg(T.div(margin, spread))


def loss_fn(name: str):
    if name == "cross_entropy":
        return L.cross_entropy
    if name == "dlr":
        return dlr_loss
    raise ValueError(f"unknown attack loss {name!r}")


def model_objective(model: Model, y, loss: str = "cross_entropy") -> Objective:
    fn = loss_fn(loss)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))

    def objective(x: T.Tensor, rows: np.ndarray) -> T.Tensor:
        return fn(model.forward(x), y[rows])

    return objective


def objective_and_grad(objective: Objective, x: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample objective values and their gradients w.r.t. ``x`` (2-D batch)."""
    xt = T.Tensor(x, requires_grad=True)
    vals = objective(xt, rows)
    (g,) = T.grad(T.sum(vals), [xt])
    return vals.data.reshape(-1), g


def _batched(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yb.shape[0] != xb.shape[0]:
        raise ValueError(f"{xb.shape[0]} samples but {yb.shape[0]} labels")
    return xb, yb, single


def _outcome(adv, success, loss, single) -> AttackOutcome:
    if single:
        return AttackOutcome(adv[0], bool(success[0]), float(loss[0]))
    return AttackOutcome(adv, success, loss)


def _ids(sample_ids, n):
    return np.arange(n) if sample_ids is None else np.atleast_1d(np.asarray(sample_ids, dtype=np.int64))


def fgsm(model: Model, x, y, domain: PerturbationDomain, loss: str = "cross_entropy", objective: Objective | None = None) -> AttackOutcome:
    """One full-budget signed-gradient step, projected back onto the domain."""
    xb, yb, single = _batched(x, y)
    obj = objective or model_objective(model, yb, loss)
    rows = np.arange(len(xb))
    _, g = objective_and_grad(obj, xb, rows)
    adv = project(xb + domain.epsilon * np.sign(g), xb, domain)
    val = obj(T.Tensor(adv), rows).data.reshape(-1)
    return _outcome(adv, model.predict(adv) != yb, val, single)


def fat_step(
    model: Model,
    x,
    y,
    domain: PerturbationDomain,
    seed: int,
    loss: str = "cross_entropy",
    objective: Objective | None = None,
    sample_ids=None,
) -> AttackOutcome:
    """Uniform random start in the epsilon box, then one FGSM step of size epsilon."""
    xb, yb, single = _batched(x, y)
    ids = _ids(sample_ids, len(xb))
    obj = objective or model_objective(model, yb, loss)
    rows = np.arange(len(xb))
    eps = domain.epsilon
    if eps == 0:
        adv = xb.copy()
    else:
        u = uniform_rows((seed,), ids, xb.shape[1], -eps, eps)
        x0 = project(xb + u, xb, domain)
        _, g = objective_and_grad(obj, x0, rows)
        adv = project(x0 + eps * np.sign(g), xb, domain)
    val = obj(T.Tensor(adv), rows).data.reshape(-1)
    return _outcome(adv, model.predict(adv) != yb, val, single)


def pgd(
    model: Model,
    x,
    y,
    domain: PerturbationDomain,
    cfg: AttackConfig,
    sample_ids=None,
    init=None,
    objective: Objective | None = None,
) -> AttackOutcome:
    """Projected sign-gradient ascent with random restarts and best-point tracking.

    Each restart starts from a uniform point in the domain (restart 0 starts
    from ``init`` instead, when given) and re-randomizes once if the gradient
    vanishes. A sample that becomes misclassified finishes its current
    restart and skips the remaining ones. The returned point is the
    highest-loss successful iterate when any iterate succeeded, else the
    highest-loss iterate seen. Clean misclassifications return ``x`` itself.
    """
    xb, yb, single = _batched(x, y)
    n, d = xb.shape
    ids = _ids(sample_ids, n)
    obj = objective or model_objective(model, yb, cfg.loss)
    eps = domain.epsilon
    step = cfg.step_for(domain)

    all_rows = np.arange(n)
    best = xb.copy()
    best_loss = obj(T.Tensor(xb), all_rows).data.reshape(-1).copy()
    success = model.predict(xb) != yb
    if eps == 0:
        return _outcome(best, success, best_loss, single)

    init_b = None if init is None else project(np.asarray(init, dtype=np.float64).reshape(xb.shape), xb, domain)
    for r in range(cfg.restarts):
        active = np.flatnonzero(~success)
        if active.size == 0:
            break
        if r == 0 and init_b is not None:
            cur = init_b[active].copy()
        else:
            u = uniform_rows((cfg.seed, r), ids[active], d, -eps, eps)
            cur = project(xb[active] + u, xb[active], domain)
        rerandomized = np.zeros(active.size, dtype=bool)
        for it in range(cfg.iterations + 1):
            vals, g = objective_and_grad(obj, cur, active)
            hit = model.predict(cur) != yb[active]
            better = vals > best_loss[active]
            done = success[active]
            # once a sample has succeeded only successful iterates may replace its best point
            take = (hit & (~done | better)) | (~done & better)
            best[active[take]] = cur[take]
            best_loss[active[take]] = vals[take]
            success[active[hit]] = True
            if it == cfg.iterations:
                break
            stalled = ~np.any(g != 0, axis=1) & ~rerandomized
            nxt = project(cur + step * np.sign(g), xb[active], domain)
            if np.any(stalled):
                rows = np.flatnonzero(stalled)
                u = uniform_rows((cfg.seed, r, 1), ids[active[rows]], d, -eps, eps)
                nxt[rows] = project(xb[active[rows]] + u, xb[active[rows]], domain)
                rerandomized[rows] = True
            cur = nxt
    return _outcome(best, success, best_loss, single)


def attack(model: Model, x, y, domain: PerturbationDomain, cfg: AttackConfig, sample_ids=None) -> AttackOutcome:
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, domain, cfg.loss)
    if cfg.kind == "fat":
        return fat_step(model, x, y, domain, cfg.seed, cfg.loss, sample_ids=sample_ids)
    return pgd(model, x, y, domain, cfg, sample_ids)


def is_robust(model: Model, x, y, domain: PerturbationDomain, cfg: AttackConfig, sample_ids=None) -> np.ndarray | bool:
    """Clean-correct and the evaluation attack fails to find an adversarial point."""
    out = pgd(model, x, y, domain, cfg, sample_ids)
    _, yb, single = _batched(x, y)
    xb = np.asarray(x, dtype=np.float64).reshape(len(yb), -1)
    robust = (model.predict(xb) == yb) & ~np.asarray(out.success)
    return bool(robust[0]) if single else robust


def robust_bits_over_budgets(model: Model, x, y, epsilons, cfg: AttackConfig, box=(0.0, 1.0), sample_ids=None) -> np.ndarray:
    """Robustness bits for increasing budgets, shape ``(len(epsilons), n)``.

    Each budget's search is seeded with the previous budget's best point,
    which stays feasible for the larger ball; an adversarial point found at a
    small budget is therefore never lost at a larger one.
    """
    xb, yb, _ = _batched(x, y)
    order = np.argsort(np.asarray(epsilons, dtype=np.float64), kind="stable")
    bits = np.zeros((len(order), len(xb)), dtype=bool)
    seed_point = None
    for k in order:
        dom = PerturbationDomain(float(epsilons[k]), *box)
        out = pgd(model, xb, yb, dom, cfg, sample_ids, init=seed_point)
        bits[k] = (model.predict(xb) == yb) & ~out.success
        seed_point = out.adv_point
    return bits
