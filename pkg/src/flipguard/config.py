"""Experiment configuration: a YAML document mapped onto frozen dataclasses.

Every field has a default, so an empty document describes the default desk
benchmark. Unknown keys are rejected so that a typo cannot silently fall
back to a default. ``to_dict`` echoes the resolved configuration into each
report, which is enough to replay a run exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .attacks import AttackConfig, PerturbationDomain, evaluation_config
from .losses import UpdateHyperparams
from .models import ModelSpec
from .updates import DEFAULT_GRIDS, ConfigError

ZOO_TRAINING = ("standard", "at")
SINGLE_METHODS = ("naive", "pct", "pcat", "rcat")


def _check_keys(section: str, data: dict, cls) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")


def _build(section: str, cls, data: dict | None, **convert):
    data = {} if data is None else data
    _check_keys(section, data, cls)
    kwargs = {k: (convert[k](v) if k in convert else v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic generator settings, or a file source when ``path`` is set."""

    kind: str = "rings+gaussians"
    n: int = 3000
    d: int = 2
    classes: int = 4
    margin: float = 6.0
    noise: float = 0.1
    nonrobust_dims: int = 8
    nonrobust_shift: float = 0.02
    nonrobust_noise: float = 0.05
    path: str | None = None
    format: str | None = None
    labels_path: str | None = None
    split_path: str | None = None


@dataclass(frozen=True)
class ZooEntry:
    name: str
    hidden: tuple[int, ...] = (32, 32)
    training: str = "standard"
    epochs: int = 300
    learning_rate: float = 0.2
    batch_size: int | None = 64
    init_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.training not in ZOO_TRAINING:
            raise ConfigError(f"zoo entry {self.name!r}: training must be one of {ZOO_TRAINING}")
        if not self.name or "/" in self.name:
            raise ConfigError(f"zoo entry name {self.name!r} is not a valid file stem")


DEFAULT_ZOO = (
    ZooEntry("std-32", (32, 32), "standard"),
    ZooEntry("std-64", (64, 64), "standard"),
    ZooEntry("at-32", (32, 32), "at"),
    ZooEntry("at-64", (64, 64), "at"),
)


@dataclass(frozen=True)
class EvaluationConfig:
    iterations: int = 50
    restarts: int = 2
    loss: str | None = None  # None: dlr with >= 4 classes, else cross_entropy


@dataclass(frozen=True)
class UpdateConfig:
    """Fine-tuning settings shared by every PCT/PCAT/RCAT run.

    ``pair`` names the (old, new) zoo models, either by entry name or by rank
    in the zoo sorted from least to most robust.
    """

    methods: tuple[str, ...] = SINGLE_METHODS
    pair: tuple = (1, 2)
    epochs: int = 12
    learning_rate: float = 1e-3
    batch_size: int | None = 32
    attack_objective: str = "composite"
    indicator: str = "adversarial"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "pair", tuple(self.pair))
        bad = [m for m in self.methods if m not in SINGLE_METHODS]
        if bad:
            raise ConfigError(f"update.methods: unknown method(s) {bad}; choose from {SINGLE_METHODS}")
        if len(self.pair) != 2:
            raise ConfigError("update.pair must name exactly two models")


def _hp_list(method: str, items) -> tuple[UpdateHyperparams, ...]:
    if not items:
        raise ConfigError(f"grids.{method}: grid must be non-empty")
    out = []
    for i, item in enumerate(items):
        try:
            item = dict(item)
            # a config echo repeats the method inside each point
            if item.pop("method", method) != method:
                raise ValueError("point belongs to another method")
            out.append(UpdateHyperparams(method, **{k: float(v) for k, v in item.items()}))
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"grids.{method}[{i}]: {exc}") from None
    return tuple(out)


@dataclass(frozen=True)
class SequentialConfig:
    """A chain of zoo models plus ``extra`` sorted by robust error; one update per link.

    ``zoo_models`` picks which zoo entries join the chain: ``"all"`` or one
    training kind. The default chain is adversarially trained throughout.
    """

    extra: tuple[ZooEntry, ...] = (
        ZooEntry("at-16", (16, 16), "at"),
        ZooEntry("at-48", (48, 48), "at"),
        ZooEntry("at-64b", (64, 64), "at"),
    )
    zoo_models: str = "at"
    methods: tuple[str, ...] = ("pct", "pcat", "rcat")
    hyperparams: dict = field(
        default_factory=lambda: {
            "pct": UpdateHyperparams("pct", 1.0, 1.0, 2.0),
            "pcat": UpdateHyperparams("pcat", 1.0, 1.0, 2.0),
            "rcat": UpdateHyperparams("rcat", 1.0, 0.5, 0.4),
        }
    )

    def __post_init__(self):
        if self.zoo_models not in ("all", *ZOO_TRAINING):
            raise ConfigError(f"sequential.zoo_models must be 'all' or one of {ZOO_TRAINING}, got {self.zoo_models!r}")

    def takes(self, entry: ZooEntry) -> bool:
        return self.zoo_models in ("all", entry.training)


@dataclass(frozen=True)
class ConsistencyConfig:
    """Rate experiment on the two-Gaussian problem.

    ``constraint_scales`` lists the active-constraint variants: each sets the
    bound to that multiple of the constraint value of the unconstrained
    population optimum. The unconstrained variant always runs.
    """

    n_list: tuple[int, ...] = (128, 256, 512, 1024, 2048, 4096, 8192)
    trials: int = 20
    epsilon: float = 0.1
    losses: tuple[str, ...] = ("zero_one", "robust_zero_one")
    constraint_scales: tuple[float, ...] = (0.8,)
    frontier_n: int = 2000
    frontier_mus: tuple[float, ...] = (0, 0.1, 1, 10, 10**6)

    def __post_init__(self):
        for name in ("n_list", "losses", "constraint_scales", "frontier_mus"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    seed: int = 0
    output: str = "runs/desk"
    epsilon: float = 0.03
    bootstrap: int = 1000
    dataset: DatasetConfig = DatasetConfig()
    zoo: tuple[ZooEntry, ...] = DEFAULT_ZOO
    evaluation: EvaluationConfig = EvaluationConfig()
    update: UpdateConfig = UpdateConfig()
    grids: dict = field(default_factory=lambda: dict(DEFAULT_GRIDS))
    sequential: SequentialConfig = SequentialConfig()
    consistency: ConsistencyConfig = ConsistencyConfig()

    def __post_init__(self):
        if len(self.zoo) < 2:
            raise ConfigError("zoo needs at least 2 entries")
        names = [e.name for e in self.zoo] + [e.name for e in self.sequential.extra]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ConfigError(f"duplicate zoo entry name(s): {dup}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be a finite non-negative number, got {self.epsilon}")
        if self.bootstrap < 0:
            raise ConfigError("bootstrap must be >= 0")

    @property
    def domain(self) -> PerturbationDomain:
        return PerturbationDomain(self.epsilon)

    def attack_config(self, num_classes: int) -> AttackConfig:
        ev = self.evaluation
        cfg = evaluation_config(num_classes, ev.iterations, ev.restarts, seed=self.seed)
        return replace(cfg, loss=ev.loss) if ev.loss else cfg

    def model_spec(self, entry: ZooEntry, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, entry.hidden, num_classes)

    def init_seed(self, entry: ZooEntry, index: int) -> int:
        return entry.init_seed if entry.init_seed is not None else 1000 * int(self.seed) + index

    def with_overrides(self, seed=None, output=None, eval_iters=None, epsilon=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if output is not None:
            cfg = replace(cfg, output=str(output))
        if eval_iters is not None:
            cfg = replace(cfg, evaluation=_build("evaluation", EvaluationConfig, {**asdict(cfg.evaluation), "iterations": int(eval_iters)}))
        if epsilon is not None:
            cfg = replace(cfg, epsilon=float(epsilon))
        return cfg

    def to_dict(self) -> dict:
        """Plain-data echo of every resolved setting."""
        d = {
            "name": self.name,
            "seed": self.seed,
            "output": self.output,
            "epsilon": self.epsilon,
            "bootstrap": self.bootstrap,
            "dataset": asdict(self.dataset),
            "zoo": [_entry_dict(e) for e in self.zoo],
            "evaluation": asdict(self.evaluation),
            "update": {**asdict(self.update), "methods": list(self.update.methods), "pair": list(self.update.pair)},
            "grids": {m: [_hp_dict(hp) for hp in g] for m, g in sorted(self.grids.items())},
            "sequential": {
                "extra": [_entry_dict(e) for e in self.sequential.extra],
                "zoo_models": self.sequential.zoo_models,
                "methods": list(self.sequential.methods),
                "hyperparams": {m: _hp_dict(hp) for m, hp in sorted(self.sequential.hyperparams.items())},
            },
            "consistency": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.consistency).items()},
        }
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = {} if data is None else dict(data)
        _check_keys("config", data, cls)
        kw = {k: data[k] for k in ("name", "output") if k in data}
        for k, conv in (("seed", int), ("epsilon", float), ("bootstrap", int)):
            if k in data:
                try:
                    kw[k] = conv(data[k])
                except (TypeError, ValueError):
                    raise ConfigError(f"{k}: expected a number, got {data[k]!r}") from None
        if "dataset" in data:
            kw["dataset"] = _build("dataset", DatasetConfig, data["dataset"])
        if "zoo" in data:
            kw["zoo"] = _entries("zoo", data["zoo"])
        if "evaluation" in data:
            kw["evaluation"] = _build("evaluation", EvaluationConfig, data["evaluation"])
        if "update" in data:
            kw["update"] = _build("update", UpdateConfig, data["update"])
        if "grids" in data:
            grids = data["grids"] or {}
            unknown = sorted(set(grids) - set(DEFAULT_GRIDS))
            if unknown:
                raise ConfigError(f"grids: unknown method(s) {unknown}")
            kw["grids"] = {**DEFAULT_GRIDS, **{m: _hp_list(m, items) for m, items in grids.items()}}
        if "sequential" in data:
            seq = data["sequential"] or {}
            _check_keys("sequential", seq, SequentialConfig)
            skw = {}
            if "extra" in seq:
                skw["extra"] = _entries("sequential.extra", seq["extra"])
            if "methods" in seq:
                skw["methods"] = tuple(seq["methods"])
            if "zoo_models" in seq:
                skw["zoo_models"] = str(seq["zoo_models"])
            if "hyperparams" in seq:
                base = SequentialConfig().hyperparams
                skw["hyperparams"] = {**base, **{m: _hp_list(m, [v])[0] for m, v in seq["hyperparams"].items()}}
            kw["sequential"] = SequentialConfig(**skw)
        if "consistency" in data:
            kw["consistency"] = _build("consistency", ConsistencyConfig, data["consistency"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
        try:
            return cls.from_dict(data)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def _entries(section: str, items) -> tuple[ZooEntry, ...]:
    if not isinstance(items, list):
        raise ConfigError(f"{section}: expected a list of model entries")
    out = []
    for i, item in enumerate(items):
        out.append(_build(f"{section}[{i}]", ZooEntry, item))
    return tuple(out)


def _entry_dict(e: ZooEntry) -> dict:
    d = asdict(e)
    d["hidden"] = list(e.hidden)
    return d


def _hp_dict(hp: UpdateHyperparams) -> dict:
    return hp.to_dict()
