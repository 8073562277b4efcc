"""Nested cross-validation over training regimes.

Outer loop: k stratified subject-level folds of the within-distribution set
(the OOD set is folded in parallel so the combined baseline can train on OOD
data without leaking into its OOD evaluation).  Inner loop: a single 80/20
stratified split of the training portion supplies the early-stopping and
LR-plateau validation set.  Each (regime, fold, repeat) job trains a fresh
model and evaluates three condition families: benign WD, PGD-attacked WD per
test epsilon, and benign OOD.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, pgd
from .data import Dataset, stratified_split
from .errors import ConfigError
from .metrics import EvalRecord, average_precision, confusion_metrics, mann_whitney_u, roc_auc
from .model import Model, ModelConfig, init, predict_proba
from .trainer import RegimeConfig, cross_entropy_objective, fit

METRIC_NAMES = ("acc", "tpr", "tnr", "auc", "aps")
CONDITION_WD = "wd_benign"
CONDITION_OOD = "ood"


def condition_adv(eps: float) -> str:
    return f"wd_adv_eps{eps:g}"


@dataclass
class RegimeSpec:
    """A named point on the regime grid (the name keys all outputs)."""
    name: str
    config: RegimeConfig


@dataclass
class FoldResult:
    regime: str
    fold: int
    repeat: int
    condition: str
    metrics: dict[str, float | None]


@dataclass
class MetricsReport:
    records: list[FoldResult] = field(default_factory=list)

    def regimes(self) -> list[str]:
        return sorted({r.regime for r in self.records})

    def conditions(self) -> list[str]:
        return sorted({r.condition for r in self.records})

    def values(self, regime: str, condition: str, metric: str) -> list[float]:
        out = [r.metrics[metric] for r in self.records
               if r.regime == regime and r.condition == condition]
        return [v for v in out if v is not None]

    def summary(self) -> dict:
        """mean +/- std (population) per regime x condition x metric."""
        out: dict = {}
        for regime in self.regimes():
            out[regime] = {}
            for cond in self.conditions():
                cell = {}
                for m in METRIC_NAMES:
                    vals = self.values(regime, cond, m)
                    if vals:
                        cell[m] = {"mean": float(np.mean(vals)),
                                   "std": float(np.std(vals)),
                                   "n": len(vals)}
                    else:
                        cell[m] = None
                out[regime][cond] = cell
        return out

    def significance_vs(self, baseline: str) -> dict:
        """Two-sided Mann-Whitney p-values of every regime against the
        baseline, per condition and metric, over per-(fold, repeat) values."""
        out: dict = {}
        for regime in self.regimes():
            if regime == baseline:
                continue
            out[regime] = {}
            for cond in self.conditions():
                cell = {}
                for m in METRIC_NAMES:
                    a = self.values(regime, cond, m)
                    b = self.values(baseline, cond, m)
                    if a and b:
                        _, p = mann_whitney_u(a, b, two_sided=True)
                        cell[m] = p
                    else:
                        cell[m] = None
                out[regime][cond] = cell
        return out

    def sorted_records(self) -> list[FoldResult]:
        return sorted(self.records, key=lambda r: (r.regime, r.condition, r.fold, r.repeat))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["regime", "fold", "repeat", "condition", *METRIC_NAMES])
            for r in self.sorted_records():
                w.writerow([r.regime, r.fold, r.repeat, r.condition] +
                           [("" if r.metrics[m] is None else repr(r.metrics[m]))
                            for m in METRIC_NAMES])

    def write_json(self, path, baseline: str | None = None, extra: dict | None = None) -> None:
        doc = {"summary": self.summary()}
        if baseline is not None and baseline in self.regimes():
            doc["significance_vs_" + baseline] = self.significance_vs(baseline)
            doc["significance_note"] = ("two-sided Mann-Whitney U over the "
                                        "per-(fold, repeat) metric values")
        if extra:
            doc.update(extra)
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# single-model evaluation
# ---------------------------------------------------------------------------

def score_batch(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Positive-class probabilities, batched to bound memory."""
    parts = [predict_proba(model, x[i:i + batch_size]).data[:, 1]
             for i in range(0, len(x), batch_size)]
    return np.concatenate(parts).astype(np.float64)


def metrics_from_scores(scores: np.ndarray, labels: np.ndarray) -> dict[str, float | None]:
    rec = EvalRecord(scores, labels)
    acc, tpr, tnr = confusion_metrics(rec)
    return {"acc": acc, "tpr": tpr, "tnr": tnr,
            "auc": roc_auc(scores, labels), "aps": average_precision(scores, labels)}


def evaluate_conditions(model: Model, wd_test: Dataset, ood_test: Dataset | None,
                        eps_test: tuple[float, ...], attack: AttackConfig,
                        seed: int) -> dict[str, dict[str, float | None]]:
    """The three condition families: benign WD, adversarial WD per epsilon,
    benign OOD."""
    out: dict[str, dict[str, float | None]] = {}
    x_wd = wd_test.stacked_voxels()
    y_wd = wd_test.labels()
    out[CONDITION_WD] = metrics_from_scores(score_batch(model, x_wd), y_wd)
    for i, eps in enumerate(eps_test):
        cfg = replace(attack, epsilon=float(eps))
        rng = np.random.default_rng((seed, 0xA77AC, i))
        x_adv = pgd(model, x_wd, y_wd, cfg, loss=cross_entropy_objective, rng=rng)
        out[condition_adv(eps)] = metrics_from_scores(score_batch(model, x_adv.data), y_wd)
    if ood_test is not None and len(ood_test) > 0:
        out[CONDITION_OOD] = metrics_from_scores(
            score_batch(model, ood_test.stacked_voxels()), ood_test.labels())
    return out


# ---------------------------------------------------------------------------
# nested cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CrossvalPlan:
    model: ModelConfig
    regimes: list[RegimeSpec]
    k: int = 5
    repeats: int = 3
    eps_test: tuple[float, ...] = (0.001, 0.005)
    eval_attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.0))
    inner_val_fraction: float = 0.2
    master_seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError(f"need at least 2 folds, got {self.k}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if not 0.0 < self.inner_val_fraction < 1.0:
            raise ConfigError("inner_val_fraction must lie in (0, 1)")
        names = [r.name for r in self.regimes]
        if len(set(names)) != len(names) or not names:
            raise ConfigError("regime names must be nonempty and unique")


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


def _job(args) -> list[FoldResult]:
    (spec, model_cfg, fold, repeat, train, val, wd_test, ood_test,
     eps_test, eval_attack, eval_seed, train_seed) = args
    cfg = replace(spec.config, seed=train_seed)
    model = init(model_cfg, seed=_derive_seed(train_seed, 1))
    model, _ = fit(model, (train[0], train[1]), (val[0], val[1]), cfg)
    conds = evaluate_conditions(model, wd_test, ood_test, eps_test, eval_attack, eval_seed)
    return [FoldResult(spec.name, fold, repeat, cond, m) for cond, m in conds.items()]


def _limit_worker_threads() -> None:
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except Exception:
        pass


def nested_cv(wd: Dataset, ood: Dataset, plan: CrossvalPlan) -> MetricsReport:
    """Run the full grid; deterministic for a fixed master seed regardless of
    job scheduling."""
    plan.validate()
    k = plan.k
    folds_wd = stratified_split(wd, [1.0 / k] * k, seed=_derive_seed(plan.master_seed, 0xF01D))
    folds_ood = (stratified_split(ood, [1.0 / k] * k, seed=_derive_seed(plan.master_seed, 0xF02D))
                 if len(ood) > 0 else [Dataset([], wd.extents)] * k)

    def merge_excluding(folds: list[Dataset], skip: int) -> Dataset:
        merged = None
        for i, f in enumerate(folds):
            if i == skip:
                continue
            merged = f if merged is None else merged.merged_with(f)
        return merged

    jobs = []
    for ri, spec in enumerate(plan.regimes):
        for fold in range(k):
            wd_test = folds_wd[fold]
            ood_test = folds_ood[fold]
            pool = merge_excluding(folds_wd, fold)
            if spec.config.regime == "combined" and len(ood) > 0:
                pool = pool.merged_with(merge_excluding(folds_ood, fold))
            inner_seed = _derive_seed(plan.master_seed, 0x133E4, ri, fold)
            tr, va = stratified_split(pool, [1.0 - plan.inner_val_fraction,
                                             plan.inner_val_fraction], seed=inner_seed)
            train_xy = (tr.stacked_voxels(), tr.labels())
            val_xy = (va.stacked_voxels(), va.labels())
            for repeat in range(plan.repeats):
                train_seed = _derive_seed(plan.master_seed, 0x7EA1, ri, fold, repeat)
                eval_seed = _derive_seed(plan.master_seed, 0xE7A1, ri, fold, repeat)
                jobs.append((spec, plan.model, fold, repeat, train_xy, val_xy,
                             wd_test, ood_test, plan.eps_test, plan.eval_attack,
                             eval_seed, train_seed))

    report = MetricsReport()
    if plan.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs,
                                 initializer=_limit_worker_threads) as pool_exec:
            for result in pool_exec.map(_job, jobs):
                report.records.extend(result)
    else:
        for job in jobs:
            report.records.extend(_job(job))
    report.records = sorted(report.records,
                            key=lambda r: (r.regime, r.condition, r.fold, r.repeat))
    return report
