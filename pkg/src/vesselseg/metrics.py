"""FOV-masked confusion counts, ratio metrics, AUC, MCC and evaluation harnesses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import torch
from scipy.stats import rankdata

from .data import FundusSample, ValidationError
from .invariant import InvariantConfig, make_invariant_input

log = logging.getLogger(__name__)


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    acc: float = 0.0
    recall: float = 0.0
    specificity: float = 0.0
    precision: float = 0.0
    iou: float = 0.0
    dsc: float = 0.0
    auc: float = float("nan")
    mcc: float = 0.0
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    threshold: float = 0.5
    sample_ids: list[str] = field(default_factory=list)
    degenerate: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"acc": self.acc, "recall": self.recall, "specificity": self.specificity,
                "precision": self.precision, "iou": self.iou, "dsc": self.dsc,
                "auc": self.auc, "mcc": self.mcc, "threshold": self.threshold,
                "tp": self.counts.tp, "tn": self.counts.tn,
                "fp": self.counts.fp, "fn": self.counts.fn,
                "degenerate": list(self.degenerate)}


def confusion(prob: np.ndarray, gt: np.ndarray, fov: np.ndarray,
              threshold: float = 0.5) -> ConfusionCounts:
    """Threshold the probability map and count only FOV-interior pixels."""
    if prob.shape != gt.shape or prob.shape != fov.shape:
        raise ValidationError(
            f"shape mismatch: prob {prob.shape}, gt {gt.shape}, fov {fov.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    inside = fov.astype(bool)
    if not inside.any():
        raise ValidationError("FOV mask is empty")
    pred = prob[inside] >= threshold
    truth = gt[inside].astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)), tn=int(np.sum(~pred & ~truth)),
        fp=int(np.sum(pred & ~truth)), fn=int(np.sum(~pred & truth)))


def _ratio(num: float, den: float, name: str, degenerate: list[str]) -> float:
    if den == 0:
        degenerate.append(name)
        return 1.0
    return num / den


def segmentation_metrics(counts: ConfusionCounts, threshold: float = 0.5) -> MetricsReport:
    """Ratio metrics and MCC; 0/0 ratios report 1 with a degeneracy flag."""
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    deg: list[str] = []
    mcc_den = np.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = 0.0 if mcc_den == 0 else float(tp * tn - fp * fn) / float(mcc_den)
    return MetricsReport(
        acc=_ratio(tp + tn, tp + fn + fp + tn, "acc", deg),
        recall=_ratio(tp, tp + fn, "recall", deg),
        specificity=_ratio(tn, tn + fp, "specificity", deg),
        precision=_ratio(tp, tp + fp, "precision", deg),
        iou=_ratio(tp, tp + fn + fp, "iou", deg),
        dsc=_ratio(2 * tp, 2 * tp + fp + fn, "dsc", deg),
        mcc=mcc, counts=counts, threshold=threshold, degenerate=deg)


def roc_auc(prob: np.ndarray, gt: np.ndarray, fov: np.ndarray) -> float:
    """Rank-statistic AUC over FOV-interior pixels with midrank tie handling."""
    inside = fov.astype(bool)
    scores = prob[inside].ravel()
    truth = gt[inside].ravel().astype(bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC undefined: ground truth inside the FOV is single-class")
    ranks = rankdata(scores)
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def predict_sample(model, sample: FundusSample, icfg: InvariantConfig) -> np.ndarray:
    """Eval-mode forward for one sample; returns the (H, W) probability map."""
    raw = torch.from_numpy(sample.image.transpose(2, 0, 1).copy()).float()[None]
    inv = torch.from_numpy(make_invariant_input(sample, icfg).copy()).float()[None, None]
    model.eval()
    with torch.no_grad():
        return model(raw, inv)[0, 0].numpy()


@dataclass
class EvaluationResult:
    aggregate: MetricsReport
    per_sample: list[MetricsReport]
    failed_ids: list[str] = field(default_factory=list)


def evaluate_dataset(model, samples: list[FundusSample], threshold: float = 0.5,
                     icfg: InvariantConfig | None = None,
                     auc_per_image: bool = False) -> EvaluationResult:
    """Micro-averaged (pooled-count) metrics over a sample list.

    AUC is pooled over all FOV pixels unless auc_per_image is set. Samples
    whose inference fails are excluded and reported in failed_ids.
    """
    icfg = icfg or InvariantConfig()
    total = ConfusionCounts()
    pooled_scores, pooled_truth = [], []
    per_sample, per_aucs, failed = [], [], []
    for sample in samples:
        try:
            prob = predict_sample(model, sample, icfg)
            counts = confusion(prob, sample.vessel_mask, sample.fov_mask, threshold)
        except (ValidationError, RuntimeError) as exc:
            log.error("evaluation failed for %s: %s", sample.id, exc)
            failed.append(sample.id)
            continue
        report = segmentation_metrics(counts, threshold)
        report.sample_ids = [sample.id]
        try:
            report.auc = roc_auc(prob, sample.vessel_mask, sample.fov_mask)
            per_aucs.append(report.auc)
        except ValidationError:
            report.degenerate.append("auc")
        per_sample.append(report)
        total = total + counts
        inside = sample.fov_mask.astype(bool)
        pooled_scores.append(prob[inside].ravel())
        pooled_truth.append(sample.vessel_mask[inside].ravel())

    aggregate = segmentation_metrics(total, threshold)
    aggregate.sample_ids = [r.sample_ids[0] for r in per_sample]
    if auc_per_image:
        aggregate.auc = float(np.mean(per_aucs)) if per_aucs else float("nan")
    elif pooled_scores:
        scores = np.concatenate(pooled_scores)
        truth = np.concatenate(pooled_truth)
        try:
            aggregate.auc = roc_auc(scores, truth, np.ones_like(truth))
        except ValidationError:
            aggregate.degenerate.append("auc")
    return EvaluationResult(aggregate=aggregate, per_sample=per_sample, failed_ids=failed)


def cross_domain_eval(model, source_name: str,
                      target_datasets: list[tuple[str, list[FundusSample]]],
                      threshold: float = 0.5,
                      icfg: InvariantConfig | None = None) -> list[dict]:
    """Evaluate one trained model on full target datasets.

    Returns rows keyed (trained_on, tested_on) with DSC/AUC/MCC columns.
    """
    rows = []
    for name, samples in target_datasets:
        result = evaluate_dataset(model, samples, threshold, icfg)
        rows.append({"trained_on": source_name, "tested_on": name,
                     "dsc": result.aggregate.dsc, "auc": result.aggregate.auc,
                     "mcc": result.aggregate.mcc,
                     "n_samples": len(result.per_sample),
                     "failed": list(result.failed_ids)})
    return rows


ABLATION_VARIANTS = ("baseline", "+resincept", "+fff", "+frf", "no_csa", "no_jesb")


def ablation_run(train_samples: list[FundusSample], test_samples: list[FundusSample],
                 variants: list[str], tcfg, lcfg,
                 icfg: InvariantConfig | None = None, stats=None,
                 threshold: float = 0.5) -> list[dict]:
    """Train each requested variant with a shared seed and report Pr/DSC/AUC/MCC.

    Architecture variants toggle the decoder/fusion modules cumulatively;
    no_csa and no_jesb run the full model with one data stage disabled.
    """
    from .augment import AugmentConfig, augment_sample
    from .balance import balance_dataset
    from .model import DualEncoderNet, ModelConfig
    from .training import train

    icfg = icfg or InvariantConfig()
    arch_flags = {
        "baseline": dict(use_resincept=False, use_fff=False, use_frf=False),
        "+resincept": dict(use_resincept=True, use_fff=False, use_frf=False),
        "+fff": dict(use_resincept=True, use_fff=True, use_frf=False),
        "+frf": dict(use_resincept=True, use_fff=True, use_frf=True),
        "no_csa": dict(use_resincept=True, use_fff=True, use_frf=True),
        "no_jesb": dict(use_resincept=True, use_fff=True, use_frf=True),
    }
    for v in variants:
        if v not in arch_flags:
            raise ValidationError(f"unknown ablation variant {v!r}; expected one of {ABLATION_VARIANTS}")

    rows = []
    for variant in variants:
        data = list(train_samples)
        if variant != "no_jesb":
            data, _ = balance_dataset(data, seed=tcfg.seed)
        if variant != "no_csa" and stats is not None:
            augmented = [augment_sample(s, stats, AugmentConfig(seed=tcfg.seed + i))
                         for i, s in enumerate(data)]
            data = data + augmented
        torch.manual_seed(tcfg.seed)  # weight init must not depend on ambient RNG state
        model = DualEncoderNet(ModelConfig(**arch_flags[variant]))
        train(model, data, None, tcfg, lcfg, icfg)
        result = evaluate_dataset(model, test_samples, threshold, icfg)
        rows.append({"variant": variant, "precision": result.aggregate.precision,
                     "dsc": result.aggregate.dsc, "auc": result.aggregate.auc,
                     "mcc": result.aggregate.mcc})
    return rows


def overlay(prob: np.ndarray, gt: np.ndarray, fov: np.ndarray,
            threshold: float = 0.5) -> np.ndarray:
    """RGB composite: TP white, FP red, FN blue, everything else black."""
    if prob.shape != gt.shape or prob.shape != fov.shape:
        raise ValidationError("overlay inputs must share one shape")
    inside = fov.astype(bool)
    pred = (prob >= threshold) & inside
    truth = gt.astype(bool) & inside
    out = np.zeros(prob.shape + (3,), dtype=np.float32)
    out[pred & truth] = (1.0, 1.0, 1.0)
    out[pred & ~truth] = (1.0, 0.0, 0.0)
    out[~pred & truth] = (0.0, 0.0, 1.0)
    return out
