"""Model-update training: standard, adversarial, PCT, PCAT and RCAT.

All trainers share one loop. Per mini-batch it optionally crafts a FAT
adversarial point against the current weights, evaluates the per-sample
objective there, and takes one plain gradient-descent step on the batch
mean. Batch order and attack starts come from keyed streams, so a run is a
pure function of (data, spec); the degenerate settings of the congruent
objectives therefore reproduce the simpler trainers bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .attacks import AttackConfig, PerturbationDomain, fat_step
from .data import Dataset
from .evaluation import RobustnessCache, evaluate_pair
from .losses import UpdateHyperparams
from .metrics import FlipReport, flip_report, nf_rate
from .models import Model, ModelSpec, init_model, param_name
from .rng import stream

log = logging.getLogger(__name__)

UPDATE_METHODS = ("naive", "standard", "at", "pct", "pcat", "rcat")
DEFAULT_BATCH = 500
PCT_GRID = tuple(UpdateHyperparams("pct", 1.0, 1.0, b) for b in (1.0, 2.0, 5.0, 10.0))
PCAT_GRID = tuple(UpdateHyperparams("pcat", 1.0, 1.0, b) for b in (1.0, 2.0, 5.0, 10.0))
RCAT_GRID = tuple(UpdateHyperparams("rcat", 1.0, a, b) for a, b in ((0.75, 0.2), (0.7, 0.2), (0.5, 0.4), (0.3, 0.6)))
DEFAULT_GRIDS = {"pct": PCT_GRID, "pcat": PCAT_GRID, "rcat": RCAT_GRID}


class ConfigError(ValueError):
    pass


class NumericalAbort(FloatingPointError):
    pass


@dataclass(frozen=True)
class UpdateSpec:
    """One training run.

    ``model_spec``/``init_seed`` define a fresh initialization, used when no
    ``src_model`` is given. ``attack_objective`` chooses what the training
    attack ascends: the full composite loss or cross-entropy only.
    ``indicator`` chooses where the old-model-correct indicator of PCAT/RCAT
    is read: at the adversarial point, or frozen on the clean sample.
    """

    method: str
    old_model: Model | None = None
    src_model: Model | None = None
    hyperparams: UpdateHyperparams | None = None
    epochs: int = 12
    batch_size: int | None = None
    learning_rate: float = 1e-3
    epsilon: float = 0.0
    train_attack: AttackConfig = AttackConfig(kind="fat", iterations=1, restarts=1, loss="cross_entropy")
    seed: int = 0
    model_spec: ModelSpec | None = None
    init_seed: int = 0
    attack_objective: str = "composite"
    indicator: str = "adversarial"

    def __post_init__(self):
        if self.method not in UPDATE_METHODS:
            raise ConfigError(f"unknown update method {self.method!r}")
        if self.method in ("rcat", "naive") and self.src_model is None:
            raise ConfigError(f"{self.method} update needs a src_model")
        if self.method in ("pct", "pcat", "rcat"):
            if self.old_model is None:
                raise ConfigError(f"{self.method} update needs an old_model")
            if self.hyperparams is None or self.hyperparams.method != self.method:
                raise ConfigError(f"{self.method} update needs {self.method} hyperparameters")
        if self.src_model is None and self.model_spec is None and self.method != "naive":
            raise ConfigError("fresh initialization needs a model_spec")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.attack_objective not in ("composite", "ce"):
            raise ConfigError(f"attack_objective must be 'composite' or 'ce', got {self.attack_objective!r}")
        if self.indicator not in ("adversarial", "clean"):
            raise ConfigError(f"indicator must be 'adversarial' or 'clean', got {self.indicator!r}")

    @property
    def domain(self) -> PerturbationDomain:
        return PerturbationDomain(self.epsilon)


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    val_nf: list[float | None] = field(default_factory=list)
    val_rnf: list[float | None] = field(default_factory=list)
    model: Model | None = None
    history: list[list[np.ndarray]] | None = None


def resolve_batch_size(n: int, requested: int | None = None) -> int:
    """Default 500; datasets under ten batches use ``n // 10`` (at least 16)."""
    if requested is not None:
        return int(requested)
    return DEFAULT_BATCH if n >= 10 * DEFAULT_BATCH else max(16, n // 10)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], eta: float) -> list[np.ndarray]:
    """``w <- w - eta * grad`` for every tensor; aborts on a non-finite gradient."""
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in parameter {param_name(i)}")
        out.append(w - eta * g)
    return out


def _initial(spec: UpdateSpec) -> Model:
    if spec.src_model is not None:
        return spec.src_model.copy(role_tag="new")
    return init_model(spec.model_spec, spec.init_seed, role_tag="new")


def _loss_hp(spec: UpdateSpec) -> UpdateHyperparams | None:
    return spec.hyperparams if spec.method in ("pct", "pcat", "rcat") else None


def _adversarial(spec: UpdateSpec) -> bool:
    return spec.method in ("at", "pcat", "rcat")


def _mask(spec, old: Model | None, x_clean, x_adv, y):
    if old is None:
        return None
    if spec.method == "pct" or spec.indicator == "clean":
        return old.predict(x_clean) == y
    return old.predict(x_adv) == y


def _composite_objective(spec: UpdateSpec, model: Model, y, x_clean):
    """Objective for the training attack: the sample loss as a function of x'."""
    hp = _loss_hp(spec) if spec.attack_objective == "composite" else None
    old, src = spec.old_model, spec.src_model

    def objective(x: T.Tensor, rows: np.ndarray) -> T.Tensor:
        f = model.forward(x)
        if hp is None:
            return L.cross_entropy(f, y[rows])
        old_logits = old.logits(x.data) if old is not None else None
        src_logits = src.logits(x.data) if hp.method == "rcat" else None
        mask = _mask(spec, old, x_clean[rows], x.data, y[rows])
        return L.sample_loss(hp, f, y[rows], old_logits, src_logits, mask)

    return objective


def batch_loss(spec: UpdateSpec, params: Sequence[T.Tensor], model: Model, x_adv, x_clean, y) -> T.Tensor:
    hp = _loss_hp(spec)
    f = model.forward(x_adv, params)
    if hp is None:
        return T.mean(L.cross_entropy(f, y))
    old = spec.old_model
    old_logits = old.logits(x_adv)
    src_logits = spec.src_model.logits(x_adv) if hp.method == "rcat" else None
    mask = _mask(spec, old, x_clean, x_adv, y)
    return T.mean(L.sample_loss(hp, f, y, old_logits, src_logits, mask))


def train(data: Dataset, spec: UpdateSpec, val: Dataset | None = None, val_attack: tuple[PerturbationDomain, AttackConfig] | None = None, keep_history: bool = False) -> TrainTrace:
    """Run ``spec``; ``val`` adds per-epoch validation NF (and RNF with ``val_attack``)."""
    if spec.method == "naive":
        return TrainTrace(model=spec.src_model.copy(role_tag="new"))
    if len(data) == 0:
        raise ConfigError("empty training set")
    model = _initial(spec)
    params = [p.copy() for p in model.params]
    n = len(data)
    bs = resolve_batch_size(n, spec.batch_size)
    adversarial = _adversarial(spec) and spec.epsilon > 0
    trace = TrainTrace(history=[params] if keep_history else None)
    cache = RobustnessCache()
    for epoch in range(spec.epochs):
        order = stream(spec.seed, 1, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            x, y = data.x[idx], data.y[idx]
            current = model.with_params(params)
            if adversarial:
                obj = _composite_objective(spec, current, y, x)
                x_adv = fat_step(current, x, y, spec.domain, seed=_fat_seed(spec, epoch), objective=obj, sample_ids=idx).adv_point
            else:
                x_adv = x
            leaves = [T.Tensor(p, requires_grad=True) for p in params]
            loss = batch_loss(spec, leaves, current, x_adv, x, y)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalAbort(f"non-finite training loss in epoch {epoch}")
            grads = T.grad(loss, leaves)
            params = sgd_step(params, grads, spec.learning_rate)
            if keep_history:
                trace.history.append(params)
            total += value * len(idx)
        trace.losses.append(total / n)
        if val is not None and spec.old_model is not None:
            snapshot = model.with_params(params)
            if val_attack is not None:
                rec = evaluate_pair(spec.old_model, snapshot, val, *val_attack, cache=cache)
                trace.val_nf.append(nf_rate(rec))
                trace.val_rnf.append(flip_report(rec).rnf)
            else:
                trace.val_nf.append(100.0 * float(np.mean((spec.old_model.predict(val.x) == val.y) & (snapshot.predict(val.x) != val.y))))
                trace.val_rnf.append(None)
    trace.model = model.with_params(params, role_tag="new")
    return trace


def _fat_seed(spec: UpdateSpec, epoch: int) -> int:
    return (int(spec.seed) * 1_000_003 + 7919 * (epoch + 1) + int(spec.train_attack.seed)) & ((1 << 63) - 1)


def _require(spec: UpdateSpec, method: str) -> None:
    if spec.method != method:
        raise ConfigError(f"expected a {method} spec, got {spec.method}")


def train_standard(data: Dataset, spec: UpdateSpec, **kw) -> TrainTrace:
    _require(spec, "standard")
    return train(data, spec, **kw)


def train_at(data: Dataset, spec: UpdateSpec, **kw) -> TrainTrace:
    _require(spec, "at")
    return train(data, spec, **kw)


def train_pct(data: Dataset, spec: UpdateSpec, **kw) -> TrainTrace:
    _require(spec, "pct")
    return train(data, spec, **kw)


def train_pcat(data: Dataset, spec: UpdateSpec, **kw) -> TrainTrace:
    _require(spec, "pcat")
    return train(data, spec, **kw)


def train_rcat(data: Dataset, spec: UpdateSpec, **kw) -> TrainTrace:
    _require(spec, "rcat")
    return train(data, spec, **kw)


@dataclass
class GridResult:
    best: UpdateHyperparams
    best_index: int
    reports: list[FlipReport]
    models: list[Model]


def grid_search(
    data_train: Dataset,
    data_val: Dataset,
    base_spec: UpdateSpec,
    grid: Sequence[UpdateHyperparams],
    domain: PerturbationDomain,
    eval_cfg: AttackConfig,
    cache: RobustnessCache | None = None,
) -> GridResult:
    """Train one model per grid point; pick the lowest validation NF + RNF.

    Ties go to the lower RNF, then to the earlier grid point. Every point is
    trained from the same initialization.
    """
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    if data_train.row_hashes() & data_val.row_hashes():
        raise ConfigError("validation set overlaps the training set")
    cache = cache if cache is not None else RobustnessCache()
    reports, models = [], []
    for hp in grid:
        trace = train(data_train, replace(base_spec, hyperparams=hp))
        rec = evaluate_pair(base_spec.old_model, trace.model, data_val, domain, eval_cfg, cache)
        reports.append(flip_report(rec, method=base_spec.method, hyperparams=hp.to_dict()))
        models.append(trace.model)
    keys = [(r.nf + r.rnf, r.rnf, i) for i, r in enumerate(reports)]
    best_index = min(keys)[2]
    return GridResult(grid[best_index], best_index, reports, models)
