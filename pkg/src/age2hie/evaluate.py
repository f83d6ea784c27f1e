"""Evaluation protocols: k-fold CV, cross-site transfer, and report tables.

Metrics are percentages; a rate whose denominator is zero is carried as None
and rendered as NA, never as 0 or NaN.  Aggregate rows use the mean and the
population standard deviation over the per-row values that are defined.
Every protocol asserts train/test id disjointness before predicting.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from age2hie.data import Dataset
from age2hie.models import ModelConfig
from age2hie.optim import (
    FINETUNE_EPOCHS,
    REFINE_EPOCHS,
    finetune_schedule,
    refine_schedule,
    scratch_schedule,
)
from age2hie.pipeline import (
    DEFAULT_BATCH,
    Checkpoint,
    finetune,
    predict,
    refine,
    train_scratch,
)

FOLD_STREAM = 401
FOLD_SEED_STREAM = 501

TABLE_COLUMNS = ("fold", "acc", "sens", "spec", "TP", "TN", "FP", "FN")


class EvalError(ValueError):
    """Bad protocol arguments or a leakage-check failure."""


# ---------------------------------------------------------------------------
# Fold splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict  # sample id -> fold index
    seed: int

    def fold_ids(self, fold: int) -> list:
        return [sid for sid, f in self.assignments.items() if f == fold]

    def sizes(self) -> list:
        counts = [0] * self.k
        for f in self.assignments.values():
            counts[f] += 1
        return counts


def kfold_split(ids, k: int, seed: int) -> FoldSplit:
    """Seeded shuffle, then round-robin assignment to k folds."""
    ids = list(ids)
    if k < 2:
        raise EvalError(f"need at least 2 folds, got k={k}")
    if k > len(ids):
        raise EvalError(f"k={k} exceeds the {len(ids)} available ids")
    if len(set(ids)) != len(ids):
        raise EvalError("ids must be unique")
    rng = np.random.default_rng([int(seed), FOLD_STREAM])
    order = rng.permutation(len(ids))
    assignments = {ids[j]: int(pos % k) for pos, j in enumerate(order)}
    return FoldSplit(k, assignments, int(seed))


# ---------------------------------------------------------------------------
# Confusion metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: Optional[float]     # percent, None when undefined
    sensitivity: Optional[float]
    specificity: Optional[float]


def confusion_metrics(preds, labels) -> MetricsRow:
    """Counts and rates with label 1 as the positive (abnormal) class."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise EvalError(f"preds shape {p.shape} and labels shape {y.shape} must "
                        "be equal 1-d")
    if p.size == 0:
        raise EvalError("empty prediction list")
    for arr, what in ((p, "preds"), (y, "labels")):
        if not np.isin(arr, (0, 1)).all():
            raise EvalError(f"{what} must be 0/1")
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())

    def rate(num, den):
        return 100.0 * num / den if den else None

    return MetricsRow(tp, tn, fp, fn,
                      rate(tp + tn, tp + tn + fp + fn),
                      rate(tp, tp + fn),
                      rate(tn, tn + fp))


@dataclass
class MetricsReport:
    arm: str        # transfer | scratch
    protocol: str   # same-site | cross-site
    sites: str      # e.g. "SITE_A+SITE_B" or "SITE_A->SITE_B"
    rows: list = field(default_factory=list)  # (label, MetricsRow)

    def aggregate(self) -> dict:
        """(mean, population std) per metric over rows where it is defined."""
        out = {}
        for metric in ("accuracy", "sensitivity", "specificity"):
            vals = [getattr(r, metric) for _, r in self.rows
                    if getattr(r, metric) is not None]
            out[metric] = (float(np.mean(vals)), float(np.std(vals))) if vals \
                else None
        for count in ("tp", "tn", "fp", "fn"):
            out[count] = int(sum(getattr(r, count) for _, r in self.rows))
        return out

    def mean_accuracy(self) -> float:
        agg = self.aggregate()["accuracy"]
        if agg is None:
            raise EvalError("no defined accuracy values to aggregate")
        return agg[0]


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.2f}"


def format_table(report: MetricsReport) -> str:
    """Machine-readable key=value rows: fold, acc, sens, spec, TP, TN, FP, FN."""
    lines = []
    for label, r in report.rows:
        lines.append(
            f"fold={label} acc={_fmt(r.accuracy)} sens={_fmt(r.sensitivity)} "
            f"spec={_fmt(r.specificity)} TP={r.tp} TN={r.tn} FP={r.fp} FN={r.fn}"
        )
    agg = report.aggregate()

    def fmt_agg(metric):
        pair = agg[metric]
        return "NA" if pair is None else f"{pair[0]:.2f}+-{pair[1]:.2f}"

    lines.append(
        f"fold=aggregate acc={fmt_agg('accuracy')} sens={fmt_agg('sensitivity')} "
        f"spec={fmt_agg('specificity')} TP={agg['tp']} TN={agg['tn']} "
        f"FP={agg['fp']} FN={agg['fn']}"
    )
    return "\n".join(lines) + "\n"


def format_text(report: MetricsReport) -> str:
    """Human-readable companion to format_table."""
    lines = [
        f"arm: {report.arm}",
        f"protocol: {report.protocol}",
        f"sites: {report.sites}",
        "",
        f"{'fold':>12}  {'acc':>8}  {'sens':>8}  {'spec':>8}  "
        f"{'TP':>4} {'TN':>4} {'FP':>4} {'FN':>4}",
    ]
    for label, r in report.rows:
        lines.append(
            f"{label:>12}  {_fmt(r.accuracy):>8}  {_fmt(r.sensitivity):>8}  "
            f"{_fmt(r.specificity):>8}  {r.tp:>4} {r.tn:>4} {r.fp:>4} {r.fn:>4}"
        )
    agg = report.aggregate()
    parts = []
    for metric, short in (("accuracy", "acc"), ("sensitivity", "sens"),
                          ("specificity", "spec")):
        pair = agg[metric]
        parts.append(f"{short} NA" if pair is None
                     else f"{short} {pair[0]:.2f} +- {pair[1]:.2f}")
    lines.append("")
    lines.append("aggregate: " + ", ".join(parts))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Training arms
# ---------------------------------------------------------------------------

@dataclass
class ArmSpec:
    """How to produce an outcome classifier from a training subset."""

    arm: str  # "transfer" | "scratch"
    pretrained: Optional[Checkpoint] = None
    config: Optional[ModelConfig] = None
    refine_epochs: int = REFINE_EPOCHS
    finetune_epochs: int = FINETUNE_EPOCHS
    batch: int = DEFAULT_BATCH

    def validate(self) -> None:
        if self.arm == "transfer":
            if self.pretrained is None:
                raise EvalError("transfer arm needs a pretrained checkpoint")
            if self.pretrained.stage != "pretrained":
                raise EvalError(
                    f"transfer arm needs stage=pretrained, got "
                    f"{self.pretrained.stage!r}"
                )
        elif self.arm == "scratch":
            if self.config is None:
                raise EvalError("scratch arm needs a model config")
        else:
            raise EvalError(f"unknown arm {self.arm!r}")


def fit_arm(spec: ArmSpec, train_data: Dataset, seed: int) -> Checkpoint:
    spec.validate()
    if spec.arm == "transfer":
        ck = refine(spec.pretrained, train_data,
                    refine_schedule(spec.refine_epochs), seed, batch=spec.batch)
        return finetune(ck, train_data, finetune_schedule(spec.finetune_epochs),
                        seed, batch=spec.batch)
    config = replace(spec.config, out_dim=2)
    schedule = scratch_schedule(spec.refine_epochs, spec.finetune_epochs)
    return train_scratch(train_data, config, schedule, seed, batch=spec.batch)


def _default_fit_predict(spec: ArmSpec):
    def run(train_data: Dataset, test_data: Dataset, seed: int) -> np.ndarray:
        ck = fit_arm(spec, train_data, seed)
        rows = predict(ck, test_data, batch=spec.batch)
        return np.array([cls for _, cls, _ in rows], dtype=np.int64)

    return run


def _assert_disjoint(train_data: Dataset, test_data: Dataset) -> None:
    overlap = set(train_data.ids()) & set(test_data.ids())
    if overlap:
        raise EvalError(f"train/test leakage: shared ids {sorted(overlap)[:5]}")


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), FOLD_SEED_STREAM,
                                       int(fold)]).generate_state(1)[0])


def _run_jobs(jobs_list, jobs: int):
    """Evaluate (key, thunk) pairs, optionally on a thread pool; ordered dict."""
    if jobs <= 1:
        return {key: thunk() for key, thunk in jobs_list}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [(key, pool.submit(thunk)) for key, thunk in jobs_list]
        return {key: fut.result() for key, fut in futures}


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def _as_seed_list(seeds) -> list:
    if isinstance(seeds, (int, np.integer)):
        return [int(seeds)]
    out = [int(s) for s in seeds]
    if not out:
        raise EvalError("need at least one seed")
    if len(set(out)) != len(out):
        raise EvalError(f"duplicate seeds in {out}")
    return out


def cross_validate(hie_data: Dataset, spec: ArmSpec, k: int, seeds,
                   jobs: int = 1, fit_predict=None) -> MetricsReport:
    """k-fold CV per seed; one row per (seed, fold) plus the aggregate.

    fit_predict(train, test, seed) -> predictions can be injected for harness
    tests; the default trains the requested arm.
    """
    if hie_data.task != "outcome":
        raise EvalError(f"cross-validation needs an outcome dataset, got "
                        f"{hie_data.task!r}")
    seed_list = _as_seed_list(seeds)
    runner = fit_predict or _default_fit_predict(spec)
    id_to_index = {sid: i for i, sid in enumerate(hie_data.ids())}

    def fold_job(seed, fold, split):
        test_ids = set(split.fold_ids(fold))
        train_idx = [id_to_index[s] for s in hie_data.ids() if s not in test_ids]
        test_idx = [id_to_index[s] for s in hie_data.ids() if s in test_ids]
        train_data = hie_data.subset(train_idx)
        test_data = hie_data.subset(test_idx)
        _assert_disjoint(train_data, test_data)
        preds = runner(train_data, test_data, _fold_seed(seed, fold))
        return confusion_metrics(preds, test_data.labels())

    jobs_list = []
    for seed in seed_list:
        split = kfold_split(hie_data.ids(), k, seed)
        for fold in range(k):
            label = (f"{fold}" if len(seed_list) == 1 else f"s{seed}f{fold}")
            jobs_list.append(
                (label, (lambda s=seed, f=fold, sp=split: fold_job(s, f, sp))))
    results = _run_jobs(jobs_list, jobs)
    report = MetricsReport(arm=spec.arm if spec else "stub",
                           protocol="same-site", sites="all")
    report.rows = [(label, results[label]) for label, _ in jobs_list]
    return report


def cross_site(hie_data: Dataset, train_site: str, test_site: str,
               spec: ArmSpec, seeds, jobs: int = 1,
               fit_predict=None) -> MetricsReport:
    """Train once on one site, evaluate on the other; one row per seed."""
    if train_site == test_site:
        raise EvalError("train and test sites must differ")
    train_data = hie_data.by_site(train_site)
    test_data = hie_data.by_site(test_site)
    _assert_disjoint(train_data, test_data)
    seed_list = _as_seed_list(seeds)
    runner = fit_predict or _default_fit_predict(spec)

    def site_job(seed):
        preds = runner(train_data, test_data, seed)
        return confusion_metrics(preds, test_data.labels())

    jobs_list = [(f"s{seed}", (lambda s=seed: site_job(s))) for seed in seed_list]
    results = _run_jobs(jobs_list, jobs)
    report = MetricsReport(arm=spec.arm if spec else "stub",
                           protocol="cross-site",
                           sites=f"{train_site}->{test_site}")
    report.rows = [(label, results[label]) for label, _ in jobs_list]
    return report


def ablation(hie_data: Dataset, variants, k: int, seed: int, width: int = 8,
             refine_epochs: int = REFINE_EPOCHS,
             finetune_epochs: int = FINETUNE_EPOCHS,
             batch: int = DEFAULT_BATCH, jobs: int = 1) -> list:
    """Scratch CV per architecture variant; list of (variant, MetricsReport)."""
    out = []
    for variant in variants:
        spec = ArmSpec(arm="scratch",
                       config=ModelConfig(variant=variant, in_channels=2,
                                          out_dim=2, width=width),
                       refine_epochs=refine_epochs,
                       finetune_epochs=finetune_epochs, batch=batch)
        out.append((variant, cross_validate(hie_data, spec, k, seed, jobs=jobs)))
    return out


def format_ablation(results: list) -> str:
    """One line per variant: mean +- std for each metric."""
    lines = [f"{'variant':>12}  {'acc':>16}  {'sens':>16}  {'spec':>16}"]
    for variant, report in results:
        agg = report.aggregate()
        cells = []
        for metric in ("accuracy", "sensitivity", "specificity"):
            pair = agg[metric]
            cells.append("NA" if pair is None
                         else f"{pair[0]:.2f} +- {pair[1]:.2f}")
        lines.append(f"{variant:>12}  {cells[0]:>16}  {cells[1]:>16}  "
                     f"{cells[2]:>16}")
    return "\n".join(lines) + "\n"
