"""Experiment orchestration: model zoo, update matrix, single and sequential updates, reports.

An :class:`Experiment` owns one dataset split, one robustness-bit cache and
the trained zoo. All randomness flows from the configuration's master seed,
so the same configuration and seed give byte-identical reports.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import consistency as C
from .config import ExperimentConfig, ZooEntry
from .data import DatasetSplit, load_dataset, make_synthetic
from .evaluation import RobustnessCache, evaluate_pair
from .losses import UpdateHyperparams
from .metrics import FlipReport, flip_report, with_deltas
from .models import CheckpointError, Model, load_checkpoint, save_checkpoint
from .updates import ConfigError, UpdateSpec, grid_search, train

log = logging.getLogger(__name__)

REPORT_SCHEMA = "report_v1"
TABLE_COLUMNS = (
    ("Test Error", "test_error_new", "delta_test_error"),
    ("NFs", "nf", "delta_nfs"),
    ("Robust Error", "robust_error_new", "delta_robust_error"),
    ("RNFs", "rnf", "delta_rnfs"),
)


@dataclass
class ZooModel:
    entry: ZooEntry
    model: Model
    test_error: float
    robust_error: float

    @property
    def name(self) -> str:
        return self.entry.name

    def summary(self) -> dict:
        return {
            "name": self.name,
            "training": self.entry.training,
            "hidden": list(self.entry.hidden),
            "digest": self.model.digest(),
            "test_error": self.test_error,
            "robust_error": self.robust_error,
        }


@dataclass
class UpdateMatrix:
    names: list[str]
    nf: np.ndarray
    rnf: np.ndarray
    reports: list[list[FlipReport]]

    def to_dict(self) -> dict:
        return {"models": self.names, "nf": self.nf.tolist(), "rnf": self.rnf.tolist()}


def load_data(config: ExperimentConfig) -> DatasetSplit:
    ds = config.dataset
    if ds.path:
        data = load_dataset(ds.path, ds.format, labels_path=ds.labels_path, split_path=ds.split_path, seed=config.seed)
    else:
        data = make_synthetic(
            ds.kind,
            ds.n,
            ds.d,
            ds.classes,
            ds.margin,
            ds.noise,
            seed=config.seed,
            nonrobust_dims=ds.nonrobust_dims,
            nonrobust_shift=ds.nonrobust_shift,
            nonrobust_noise=ds.nonrobust_noise,
        )
    data.validate()
    return data


def _measure(model: Model, entry: ZooEntry, data: DatasetSplit, config: ExperimentConfig, cache: RobustnessCache) -> ZooModel:
    test = data.test
    bits = cache.bits(model, test, config.domain, config.attack_config(data.num_classes))
    test_error = 100.0 * int(np.count_nonzero(model.predict(test.x) != test.y)) / len(test)
    robust_error = 100.0 * int(np.count_nonzero(~bits)) / len(test)
    return ZooModel(entry, model, test_error, robust_error)


def _entry_plain(entry: ZooEntry) -> dict:
    return {**entry.__dict__, "hidden": list(entry.hidden)}


def train_zoo_entry(entry: ZooEntry, index: int, data: DatasetSplit, config: ExperimentConfig) -> Model:
    spec = UpdateSpec(
        entry.training,
        model_spec=config.model_spec(entry, data.train.dim, data.num_classes),
        init_seed=config.init_seed(entry, index),
        epochs=entry.epochs,
        learning_rate=entry.learning_rate,
        batch_size=entry.batch_size,
        epsilon=config.epsilon,
        seed=config.seed,
    )
    model = train(data.train, spec).model
    return Model(model.spec, model.params, "plain", spec.init_seed, {"name": entry.name})


def build_model_zoo(
    config: ExperimentConfig,
    data: DatasetSplit | None = None,
    cache: RobustnessCache | None = None,
    out_dir=None,
    entries: Sequence[ZooEntry] | None = None,
    start_index: int = 0,
) -> list[ZooModel]:
    """Train every zoo entry, measure test and robust error, sort by robust error descending.

    With ``out_dir`` each model is written to ``out_dir/zoo/<name>.ckpt``; a
    checkpoint whose recorded provenance matches the current run is reused
    instead of retrained. ``start_index`` offsets the default init seeds.
    """
    full_zoo = entries is None
    entries = tuple(config.zoo if full_zoo else entries)
    if full_zoo and len(entries) < 2:
        raise ConfigError("model zoo needs at least 2 entries")
    data = data if data is not None else load_data(config)
    cache = cache if cache is not None else RobustnessCache()
    zoo_dir = Path(out_dir) / "zoo" if out_dir is not None else None
    if zoo_dir is not None:
        zoo_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for index, entry in enumerate(entries, start=start_index):
        meta = _provenance(entry, index, data, config)
        path = zoo_dir / f"{entry.name}.ckpt" if zoo_dir is not None else None
        model = _reuse(path, meta)
        if model is None:
            log.info("training zoo entry %s (%s)", entry.name, entry.training)
            model = train_zoo_entry(entry, index, data, config)
            model = Model(model.spec, model.params, "plain", model.seed, meta)
            if path is not None:
                save_checkpoint(model, path)
        out.append(_measure(model, entry, data, config, cache))
    return sort_zoo(out)


def sort_zoo(models: Sequence[ZooModel]) -> list[ZooModel]:
    """Least robust first; ties by higher test error, then name."""
    return sorted(models, key=lambda z: (-z.robust_error, -z.test_error, z.name))


def _provenance(entry: ZooEntry, index: int, data: DatasetSplit, config: ExperimentConfig) -> dict:
    return {
        "name": entry.name,
        "entry": _entry_plain(entry),
        "train_digest": data.train.digest(),
        "seed": int(config.seed),
        "init_seed": int(config.init_seed(entry, index)),
        "epsilon": float(config.epsilon),
    }


def _reuse(path: Path | None, meta: dict) -> Model | None:
    if path is None or not path.exists():
        return None
    try:
        model = load_checkpoint(path)
    except CheckpointError as exc:
        log.warning("ignoring unreadable checkpoint %s: %s", path, exc)
        return None
    # round-trip through JSON so tuples and lists compare alike
    return model if json.loads(json.dumps(model.meta)) == json.loads(json.dumps(meta)) else None


def run_update_matrix(zoo: Sequence[ZooModel], data: DatasetSplit, config: ExperimentConfig, cache: RobustnessCache | None = None) -> UpdateMatrix:
    """Naive-update NF and RNF for every ordered (old row, new column) pair."""
    if len(zoo) < 2:
        raise ConfigError("update matrix needs at least 2 models")
    cache = cache if cache is not None else RobustnessCache()
    cfg = config.attack_config(data.num_classes)
    k = len(zoo)
    nf, rnf = np.zeros((k, k)), np.zeros((k, k))
    reports = []
    for i, old in enumerate(zoo):
        row = []
        for j, new in enumerate(zoo):
            rec = evaluate_pair(old.model, new.model, data.test, config.domain, cfg, cache)
            rep = flip_report(rec, "naive", old_id=old.name, new_id=new.name)
            nf[i, j], rnf[i, j] = rep.nf, rep.rnf
            row.append(rep)
        reports.append(row)
    return UpdateMatrix([z.name for z in zoo], nf, rnf, reports)


def resolve_pair(zoo: Sequence[ZooModel], pair) -> tuple[ZooModel, ZooModel]:
    by_name = {z.name: z for z in zoo}
    out = []
    for ref in pair:
        if isinstance(ref, int) and not isinstance(ref, bool):
            if not -len(zoo) <= ref < len(zoo):
                raise ConfigError(f"zoo rank {ref} out of range for {len(zoo)} models")
            out.append(zoo[ref])
        elif ref in by_name:
            out.append(by_name[ref])
        else:
            raise ConfigError(f"unknown zoo model {ref!r}; have {sorted(by_name)}")
    return out[0], out[1]


def _as_model(m) -> tuple[Model, str]:
    return (m.model, m.name) if isinstance(m, ZooModel) else (m, m.meta.get("name", m.digest()))


def _base_spec(method: str, old: Model, new: Model, hp: UpdateHyperparams, config: ExperimentConfig) -> UpdateSpec:
    u = config.update
    return UpdateSpec(
        method,
        old_model=old,
        src_model=new,
        hyperparams=hp,
        epochs=u.epochs,
        learning_rate=u.learning_rate,
        batch_size=u.batch_size,
        epsilon=config.epsilon,
        seed=config.seed,
        attack_objective=u.attack_objective,
        indicator=u.indicator,
    )


def run_single_update(
    old,
    new,
    method: str,
    config: ExperimentConfig,
    data: DatasetSplit,
    cache: RobustnessCache | None = None,
    hyperparams: UpdateHyperparams | None = None,
) -> tuple[FlipReport, Model]:
    """Replace ``old`` by a model derived from ``new`` and report regressions.

    ``naive`` deploys ``new`` as is. Other methods fine-tune from ``new``
    (which also serves as the source model for RCAT); the hyperparameters are
    chosen by grid search on the validation split unless given. Deltas are
    taken against the naive report for the same pair.
    """
    if method not in ("naive", "pct", "pcat", "rcat"):
        raise ConfigError(f"unknown update method {method!r}")
    cache = cache if cache is not None else RobustnessCache()
    old_model, old_name = _as_model(old)
    new_model, new_name = _as_model(new)
    cfg = config.attack_config(data.num_classes)
    naive = flip_report(evaluate_pair(old_model, new_model, data.test, config.domain, cfg, cache), "naive")
    info: dict = {}
    if method == "naive":
        updated = new_model
    elif hyperparams is not None:
        updated = train(data.train, _base_spec(method, old_model, new_model, hyperparams, config)).model
        info["hyperparams"] = hyperparams.to_dict()
    else:
        grid = config.grids[method]
        result = grid_search(data.train, data.val, _base_spec(method, old_model, new_model, grid[0], config), grid, config.domain, cfg, cache)
        updated = result.models[result.best_index]
        info["hyperparams"] = result.best.to_dict()
        info["grid"] = [{**hp.to_dict(), "val_nf": r.nf, "val_rnf": r.rnf} for hp, r in zip(grid, result.reports)]
    rec = evaluate_pair(old_model, updated, data.test, config.domain, cfg, cache)
    report = flip_report(
        rec,
        method,
        bootstrap=config.bootstrap,
        seed=config.seed,
        old_id=old_name,
        new_id=new_name,
        old_digest=old_model.digest(),
        src_digest=new_model.digest(),
        new_digest=updated.digest(),
        **info,
    )
    return with_deltas(report, naive), updated


def run_sequential(
    chain: Sequence,
    method: str,
    config: ExperimentConfig,
    data: DatasetSplit,
    cache: RobustnessCache | None = None,
    hyperparams: UpdateHyperparams | None = None,
) -> list[FlipReport]:
    """Update along ``chain``: step k replaces the step k-1 output using ``chain[k]`` as source.

    Hyperparameters stay fixed across steps. Each report carries its step
    index and the digests of the models involved.
    """
    if len(chain) < 2:
        raise ConfigError("a sequential chain needs at least 2 models")
    cache = cache if cache is not None else RobustnessCache()
    if method != "naive" and hyperparams is None:
        hyperparams = config.sequential.hyperparams[method]
    current, current_name = _as_model(chain[0])
    lineage = [current.digest()]
    reports = []
    for step, link in enumerate(chain[1:], start=1):
        report, updated = run_single_update(_named(current, current_name), link, method, config, data, cache, hyperparams=hyperparams)
        lineage.append(updated.digest())
        report.info["step"] = step
        report.info["lineage"] = list(lineage)
        reports.append(report)
        current, current_name = updated, f"{method}-step{step}"
    return reports


def _named(model: Model, name: str) -> Model:
    m = model.copy()
    m.meta = {**m.meta, "name": name}
    return m


# -- consistency ---------------------------------------------------------------


def run_consistency(config: ExperimentConfig) -> dict:
    """Convergence-rate fits for each loss and constraint variant, plus the penalty frontier check."""
    cc = config.consistency
    variants, frontier = [], []
    for loss in cc.losses:
        problem = C.ConsistencyProblem(loss=loss, epsilon=cc.epsilon)
        _, _, c_star = C.optimum(problem)
        for scale in (None, *cc.constraint_scales):
            eps_hat = math.inf if scale is None else scale * c_star
            fit = C.measure_rate(replace(problem, epsilon_hat=eps_hat), cc.n_list, cc.trials, seed=config.seed)
            variants.append({"loss": loss, "constraint_scale": scale, "epsilon_hat": None if scale is None else eps_hat, **fit.to_dict()})
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 0xF0, len(frontier)))))
        x, y = problem.sample(cc.frontier_n, rng)
        rows = C.frontier_equivalence(x, y, problem, cc.frontier_mus)
        frontier.append({"loss": loss, "n": cc.frontier_n, "rows": [{**r, "penalized": list(r["penalized"]), "constrained": list(r["constrained"])} for r in rows]})
    return {"variants": variants, "frontier": frontier}


# -- reports -------------------------------------------------------------------


def make_report(kind: str, config: ExperimentConfig, records: Sequence[FlipReport] = (), **extra) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "experiment": config.name,
        "kind": kind,
        "seed": config.seed,
        "config": config.to_dict(),
        "records": [r.to_dict() for r in records],
        **extra,
    }


def dumps(report: dict) -> str:
    return json.dumps(_plain(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        # JSON has no infinities; encode them as strings
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def fmt_pct(v: float) -> str:
    return f"{v:.2f}"


def fmt_delta(v: float | None) -> str:
    """Signed two-decimal delta; improvements (positive) carry a leading ``+``."""
    return "" if v is None else f"{v:+.2f}"


def render_table(report: dict) -> str:
    """Human-readable view of a report."""
    lines = [f"# {report['experiment']} / {report['kind']} (seed {report['seed']}, schema {report['schema']})"]
    if report.get("zoo"):
        lines.append("")
        lines.append(f"{'model':<10} {'training':<9} {'hidden':<12} {'Test Error':>10} {'Robust Error':>12}")
        for z in report["zoo"]:
            hidden = "x".join(str(h) for h in z["hidden"])
            lines.append(f"{z['name']:<10} {z['training']:<9} {hidden:<12} {fmt_pct(z['test_error']):>10} {fmt_pct(z['robust_error']):>12}")
    if report.get("matrix"):
        m = report["matrix"]
        for key, title in (("nf", "NF (%)"), ("rnf", "RNF (%)")):
            lines.append("")
            lines.append(f"{title}: rows = old, columns = new")
            lines.append(" " * 10 + "".join(f"{n:>10}" for n in m["models"]))
            for name, row in zip(m["models"], m[key]):
                lines.append(f"{name:<10}" + "".join(f"{fmt_pct(v):>10}" for v in row))
    if report.get("records"):
        lines.append("")
        head = f"{'method':<8} {'step':>4} {'old':<10} {'new':<10}"
        for title, _, _ in TABLE_COLUMNS:
            head += f" {title:>12} {'delta':>7}"
        lines.append(head)
        for r in report["records"]:
            step = r.get("info", {}).get("step", "")
            row = f"{r['method']:<8} {step!s:>4} {r['old_id']:<10} {r['new_id']:<10}"
            for _, key, dkey in TABLE_COLUMNS:
                row += f" {fmt_pct(r[key]):>12} {fmt_delta(r.get(dkey)):>7}"
            lines.append(row)
    if report.get("consistency"):
        cons = report["consistency"]
        lines.append("")
        lines.append(f"{'loss':<16} {'constraint':>10} {'slope':>7}  mean excess risk per n")
        for v in cons["variants"]:
            scale = "none" if v["constraint_scale"] is None else f"{v['constraint_scale']:.2f}c*"
            excess = " ".join(f"{e:.2e}" for e in v["mean_excess"])
            lines.append(f"{v['loss']:<16} {scale:>10} {v['slope']:>7.3f}  {excess}")
        for f in cons["frontier"]:
            ok = sum(r["match"] for r in f["rows"])
            lines.append(f"frontier {f['loss']}: {ok}/{len(f['rows'])} constrained solutions matched by a penalized point")
    return "\n".join(lines) + "\n"


def emit_report(report: dict, out_dir, stem: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.txt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    stem = stem or report["kind"]
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, txt_path = out_dir / f"{stem}.json", out_dir / f"{stem}.txt"
        json_path.write_text(dumps(report))
        txt_path.write_text(render_table(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return json_path, txt_path


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("schema") != REPORT_SCHEMA:
        raise ConfigError(f"{path}: not a {REPORT_SCHEMA} report")
    return report


# -- whole experiments ------------------------------------------------------------


@dataclass
class Experiment:
    """Lazily built data, cache and zoo for one configuration."""

    config: ExperimentConfig
    out_dir: Path | None = None
    cache: RobustnessCache = field(default_factory=RobustnessCache)
    _data: DatasetSplit | None = None
    _zoo: list[ZooModel] | None = None
    _chain: list[ZooModel] | None = None

    @property
    def data(self) -> DatasetSplit:
        if self._data is None:
            self._data = load_data(self.config)
        return self._data

    @property
    def zoo(self) -> list[ZooModel]:
        if self._zoo is None:
            self._zoo = build_model_zoo(self.config, self.data, self.cache, self.out_dir)
        return self._zoo

    @property
    def chain(self) -> list[ZooModel]:
        """Selected zoo models plus the sequential extras, sorted by robust error descending."""
        if self._chain is None:
            seq = self.config.sequential
            extra = build_model_zoo(self.config, self.data, self.cache, self.out_dir, seq.extra, start_index=len(self.config.zoo))
            chain = sort_zoo([z for z in self.zoo if seq.takes(z.entry)] + extra)
            if len(chain) < 2:
                raise ConfigError("the sequential chain needs at least 2 models")
            self._chain = chain
        return self._chain

    def zoo_report(self) -> dict:
        return make_report("zoo", self.config, zoo=[z.summary() for z in self.zoo], data={"provenance": self.data.provenance})

    def matrix_report(self) -> dict:
        m = run_update_matrix(self.zoo, self.data, self.config, self.cache)
        return make_report("matrix", self.config, zoo=[z.summary() for z in self.zoo], matrix=m.to_dict())

    def update_reports(self, methods: Sequence[str] | None = None) -> list[FlipReport]:
        old, new = resolve_pair(self.zoo, self.config.update.pair)
        return [run_single_update(old, new, m, self.config, self.data, self.cache)[0] for m in (methods or self.config.update.methods)]

    def update_report(self, methods: Sequence[str] | None = None) -> dict:
        return make_report("update", self.config, self.update_reports(methods), zoo=[z.summary() for z in self.zoo])

    def sequential_reports(self, method: str) -> list[FlipReport]:
        return run_sequential(self.chain, method, self.config, self.data, self.cache)

    def sequential_report(self, methods: Sequence[str] | None = None) -> dict:
        records = [r for m in (methods or self.config.sequential.methods) for r in self.sequential_reports(m)]
        return make_report("sequential", self.config, records, zoo=[z.summary() for z in self.chain])

    def consistency_report(self) -> dict:
        return make_report("consistency", self.config, consistency=run_consistency(self.config))
