"""Per-model robustness bits and old/new evaluation records.

Robustness bits depend only on (model, sample), so they are computed once
per model and dataset and reused for every pairwise comparison. The attack
streams are keyed by the model digest and the sample index.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .attacks import AttackConfig, PerturbationDomain, is_robust
from .data import Dataset
from .metrics import EvalRecord
from .models import Model


def attack_seed(cfg: AttackConfig, model: Model) -> int:
    return (int(cfg.seed) * 1_000_003 + int(model.digest(), 16)) & ((1 << 63) - 1)


class RobustnessCache:
    def __init__(self):
        self._bits: dict[tuple, np.ndarray] = {}
        self.misses = 0

    def bits(self, model: Model, data: Dataset, domain: PerturbationDomain, cfg: AttackConfig) -> np.ndarray:
        key = (model.digest(), data.digest(), domain, cfg)
        if key not in self._bits:
            self.misses += 1
            keyed = replace(cfg, seed=attack_seed(cfg, model))
            bits = np.asarray(is_robust(model, data.x, data.y, domain, keyed, sample_ids=np.arange(len(data))))
            bits.setflags(write=False)
            self._bits[key] = bits
        return self._bits[key]


def evaluate_pair(old: Model, new: Model, data: Dataset, domain: PerturbationDomain, cfg: AttackConfig, cache: RobustnessCache | None = None) -> EvalRecord:
    cache = cache if cache is not None else RobustnessCache()
    return EvalRecord(
        y=data.y,
        old_pred=old.predict(data.x),
        new_pred=new.predict(data.x),
        old_robust=cache.bits(old, data, domain, cfg),
        new_robust=cache.bits(new, data, domain, cfg),
        test_hash=data.digest(),
    )
