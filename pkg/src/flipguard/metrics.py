"""Flip rates, error rates, deltas against a baseline, and bootstrap spreads.

All rates are percentages over the ``m`` evaluated samples.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import stream

RATE_NAMES = (
    "test_error_old",
    "test_error_new",
    "robust_error_old",
    "robust_error_new",
    "nf",
    "pf",
    "rnf",
    "rpf",
    "joint_nf_rnf",
)
DELTA_NAMES = ("delta_test_error", "delta_nfs", "delta_robust_error", "delta_rnfs")


class MetricsError(ValueError):
    pass


def dataset_hash(x, y) -> str:
    h = hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalRecord:
    """Per-sample outcomes of an old and a new model on one test set."""

    y: np.ndarray
    old_pred: np.ndarray
    new_pred: np.ndarray
    old_robust: np.ndarray | None = None
    new_robust: np.ndarray | None = None
    test_hash: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.old_pred = np.asarray(self.old_pred, dtype=np.int64)
        self.new_pred = np.asarray(self.new_pred, dtype=np.int64)
        m = len(self.y)
        if len(self.old_pred) != m or len(self.new_pred) != m:
            raise MetricsError("record sequences must have equal length")
        for name in ("old_robust", "new_robust"):
            bits = getattr(self, name)
            if bits is not None:
                bits = np.asarray(bits, dtype=bool)
                if len(bits) != m:
                    raise MetricsError(f"{name} has length {len(bits)}, expected {m}")
                setattr(self, name, bits)
        if self.old_robust is not None and np.any(self.old_robust & (self.old_pred != self.y)):
            raise MetricsError("old_robust marks a clean-misclassified sample as robust")
        if self.new_robust is not None and np.any(self.new_robust & (self.new_pred != self.y)):
            raise MetricsError("new_robust marks a clean-misclassified sample as robust")

    def __len__(self) -> int:
        return len(self.y)

    def swapped(self) -> "EvalRecord":
        return EvalRecord(self.y, self.new_pred, self.old_pred, self.new_robust, self.old_robust, self.test_hash)

    def subset(self, idx) -> "EvalRecord":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return EvalRecord(self.y[idx], self.old_pred[idx], self.new_pred[idx], pick(self.old_robust), pick(self.new_robust), self.test_hash)


def _check(records: EvalRecord, robust: bool = False) -> None:
    if len(records) == 0:
        raise MetricsError("no records (m = 0)")
    if robust and (records.old_robust is None or records.new_robust is None):
        raise MetricsError("robustness bits missing; run the evaluation attack on both models first")


def indicator(records: EvalRecord, metric: str) -> np.ndarray:
    """Per-sample 0/1 vector whose mean times 100 is ``metric``."""
    r = records
    old_ok, new_ok = r.old_pred == r.y, r.new_pred == r.y
    if metric == "test_error_old":
        return ~old_ok
    if metric == "test_error_new":
        return ~new_ok
    if metric == "nf":
        return old_ok & ~new_ok
    if metric == "pf":
        return ~old_ok & new_ok
    _check(r, robust=True)
    if metric == "robust_error_old":
        return ~r.old_robust
    if metric == "robust_error_new":
        return ~r.new_robust
    if metric == "rnf":
        return r.old_robust & ~r.new_robust
    if metric == "rpf":
        return ~r.old_robust & r.new_robust
    if metric == "joint_nf_rnf":
        return old_ok & ~new_ok & r.old_robust & ~r.new_robust
    raise MetricsError(f"unknown metric {metric!r}")


def _count(records: EvalRecord, metric: str) -> int:
    return int(np.count_nonzero(indicator(records, metric)))


def _rate(records: EvalRecord, metric: str) -> float:
    _check(records)
    return 100.0 * _count(records, metric) / len(records)


def flip_counts(records: EvalRecord) -> dict[str, int]:
    """Sample counts behind every rate; the accounting identities hold exactly here."""
    _check(records, robust=True)
    return {name: _count(records, name) for name in RATE_NAMES}


def nf_rate(records: EvalRecord) -> float:
    return _rate(records, "nf")


def pf_rate(records: EvalRecord) -> float:
    return _rate(records, "pf")


def rnf_rate(records: EvalRecord) -> float:
    _check(records, robust=True)
    return _rate(records, "rnf")


def rpf_rate(records: EvalRecord) -> float:
    _check(records, robust=True)
    return _rate(records, "rpf")


def joint_flip_rate(records: EvalRecord) -> float:
    _check(records, robust=True)
    return _rate(records, "joint_nf_rnf")


def error_rates(records: EvalRecord) -> dict[str, float]:
    """Clean and robust error of both models."""
    _check(records, robust=True)
    return {name: _rate(records, name) for name in RATE_NAMES[:4]}


def bootstrap_std(records: EvalRecord, metric: str, B: int = 1000, seed: int = 0) -> float:
    """Standard deviation of ``metric`` over ``B`` with-replacement resamples."""
    m = len(records)
    if m < 2:
        raise MetricsError("bootstrap needs at least 2 records")
    ind = indicator(records, metric).astype(np.float64)
    idx = stream(seed, m).integers(0, m, size=(B, m))
    return float(np.std(100.0 * ind[idx].mean(axis=1), ddof=1))


@dataclass
class FlipReport:
    test_error_old: float
    test_error_new: float
    robust_error_old: float
    robust_error_new: float
    nf: float
    pf: float
    rnf: float
    rpf: float
    joint_nf_rnf: float
    delta_test_error: float | None = None
    delta_nfs: float | None = None
    delta_robust_error: float | None = None
    delta_rnfs: float | None = None
    bootstrap_std: dict[str, float] = field(default_factory=dict)
    test_hash: str = ""
    method: str = "naive"
    old_id: str = ""
    new_id: str = ""
    info: dict = field(default_factory=dict)

    @property
    def nf_plus_rnf(self) -> float:
        return self.nf + self.rnf

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlipReport":
        return cls(**d)


def flip_report(records: EvalRecord, method: str = "naive", bootstrap: int = 0, seed: int = 0, **info) -> FlipReport:
    """Every rate for one update; ``bootstrap > 0`` adds that many resamples per metric."""
    _check(records, robust=True)
    rates = {name: _rate(records, name) for name in RATE_NAMES}
    stds = {name: bootstrap_std(records, name, bootstrap, seed) for name in RATE_NAMES} if bootstrap else {}
    old_id = info.pop("old_id", "")
    new_id = info.pop("new_id", "")
    return FlipReport(**rates, bootstrap_std=stds, test_hash=records.test_hash, method=method, old_id=old_id, new_id=new_id, info=info)


def delta_metrics(report: FlipReport, naive: FlipReport) -> dict[str, float]:
    """Baseline minus method for the four headline metrics; positive means better."""
    if report.test_hash != naive.test_hash:
        raise MetricsError(f"reports use different test sets ({report.test_hash} vs {naive.test_hash})")
    return {
        "delta_test_error": naive.test_error_new - report.test_error_new,
        "delta_nfs": naive.nf - report.nf,
        "delta_robust_error": naive.robust_error_new - report.robust_error_new,
        "delta_rnfs": naive.rnf - report.rnf,
    }


def with_deltas(report: FlipReport, naive: FlipReport) -> FlipReport:
    for k, v in delta_metrics(report, naive).items():
        setattr(report, k, v)
    return report
