"""F1 metrics, the LOSO and cross-domain protocols, and report files.

Predictors plug into the protocol runners through two methods::

    info = predictor.fit(source, train_idx)     # dict of scalars for fold_details
    preds = predictor.predict(source, test_idx)  # (len(test_idx), N) array of 0/1

``source`` is anything with ``au_names``, ``clip_frames(idx)`` and
``clip_labels(idx)``, normally a :class:`~aullm.data.ClipDataset`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .data import ClipDataset, loso_folds
from .errors import AullmError, ShapeError
from .trainer import build_model, fit, inference

log = logging.getLogger(__name__)

REPORT_VERSION = 1
PROTOCOLS = ("loso", "crossdomain")


class FoldFailedError(AullmError):
    """A LOSO fold could not be trained; ``report`` holds the partial fold log."""

    def __init__(self, fold, cause, report):
        self.fold = fold
        self.cause = cause
        self.report = report
        super().__init__(f"fold {fold} failed: {cause}")


class AUOrderError(AullmError, ValueError):
    pass


# ---------------------------------------------------------------- metrics


def confusion_counts(pred, truth):
    """Per-AU (TP, FP, FN) for binary M x N matrices."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = (p & t).sum(0)
    fp = (p & ~t).sum(0)
    fn = (~p & t).sum(0)
    return tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64)


def f1_per_au(pred, truth):
    """(f1, mask): mask is False for AUs with TP = FP = FN = 0 (excluded from the macro)."""
    tp, fp, fn = confusion_counts(pred, truth)
    denom = 2 * tp + fp + fn
    mask = denom > 0
    # 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN) whenever it is defined
    f1 = np.where(mask, 2 * tp / np.maximum(denom, 1), 0.0).astype(np.float64)
    return f1, mask


def macro_f1(f1, mask=None):
    f1 = np.asarray(f1, dtype=np.float64)
    mask = np.ones(f1.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("every AU is masked; Macro-F1 is undefined")
    return float(f1[mask].mean())


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    protocol: str
    au_names: List[str]
    per_au_f1: Dict[str, Optional[float]]
    macro_f1: float
    counts: Dict[str, Dict[str, int]]
    fold_details: List[dict]
    config_fingerprint: str
    seed: int
    aggregation: str = "pooled"
    num_predictions: int = 0
    label: str = ""
    domains: Dict[str, str] = field(default_factory=dict)
    version: int = REPORT_VERSION

    def included(self) -> List[str]:
        return [au for au in self.au_names if self.per_au_f1[au] is not None]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "protocol": self.protocol,
            "label": self.label,
            "aggregation": self.aggregation,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "au_names": list(self.au_names),
            "per_au_f1": dict(self.per_au_f1),
            "macro_f1": self.macro_f1,
            "counts": self.counts,
            "num_predictions": self.num_predictions,
            "domains": dict(self.domains),
            "fold_details": list(self.fold_details),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "EvalReport":
        return cls(
            protocol=blob["protocol"], au_names=list(blob["au_names"]), per_au_f1=dict(blob["per_au_f1"]),
            macro_f1=blob["macro_f1"], counts=blob["counts"], fold_details=list(blob["fold_details"]),
            config_fingerprint=blob["config_fingerprint"], seed=blob["seed"],
            aggregation=blob.get("aggregation", "pooled"), num_predictions=blob.get("num_predictions", 0),
            label=blob.get("label", ""), domains=dict(blob.get("domains", {})),
            version=blob.get("version", REPORT_VERSION),
        )


def build_report(protocol, au_names, pred, truth, cfg: ExperimentConfig, fold_details,
                 aggregation="pooled", fold_slices=None, label="", domains=None) -> EvalReport:
    """Score pooled predictions (or average per fold) into an :class:`EvalReport`."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    tp, fp, fn = confusion_counts(pred, truth)
    if aggregation == "pooled":
        f1, mask = f1_per_au(pred, truth)
    elif aggregation == "per_fold":
        # per-AU mean over the folds where that AU is defined
        scores = [f1_per_au(pred[s], truth[s]) for s in fold_slices]
        stacked = np.stack([f for f, _ in scores])
        masks = np.stack([m for _, m in scores])
        mask = masks.any(0)
        f1 = np.where(mask, (stacked * masks).sum(0) / np.maximum(masks.sum(0), 1), 0.0)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    per_au = {au: (float(f1[i]) if mask[i] else None) for i, au in enumerate(au_names)}
    counts = {au: {"tp": int(tp[i]), "fp": int(fp[i]), "fn": int(fn[i])} for i, au in enumerate(au_names)}
    return EvalReport(
        protocol=protocol, au_names=list(au_names), per_au_f1=per_au, macro_f1=macro_f1(f1, mask),
        counts=counts, fold_details=fold_details, config_fingerprint=cfg.fingerprint(), seed=cfg.seed,
        aggregation=aggregation, num_predictions=int(len(pred)), label=label, domains=dict(domains or {}),
    )


def report_json_text(report: EvalReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"


def report_csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["au", "f1", "tp", "fp", "fn", "included"])
    for au in report.au_names:
        f1 = report.per_au_f1[au]
        c = report.counts[au]
        writer.writerow([au, "" if f1 is None else repr(f1), c["tp"], c["fp"], c["fn"], int(f1 is not None)])
    writer.writerow(["macro", repr(report.macro_f1), "", "", "", ""])
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir, stem="report"):
    """Write ``<stem>.json`` and ``<stem>.csv`` under ``out_dir``; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    json_path.write_text(report_json_text(report), encoding="utf-8")
    csv_path.write_text(report_csv_text(report), encoding="utf-8")
    return json_path, csv_path


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_json(json.load(fh))


# ---------------------------------------------------------------- predictors


class ModelPredictor:
    """Fresh seeded model per ``fit`` call; CCR is stripped before predicting."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = None

    def fit(self, source, idx):
        frames = source.clip_frames(idx)
        self.model = build_model(source.au_names, self.cfg, in_channels=frames.shape[2])
        history = fit(self.model, frames, source.clip_labels(idx), self.cfg)
        self.model.eval()
        self.model.strip_ccr()
        last = history[-1] if history else {}
        return {"final_loss": last.get("l_total"), "steps": len(history)}

    def predict(self, source, idx):
        _, preds = inference(self.model, source.clip_frames(idx), threshold=self.cfg.eval.threshold)
        return preds.numpy()


class OraclePredictor:
    """Returns the ground truth; for checking protocol plumbing."""

    def fit(self, source, idx):
        return {}

    def predict(self, source, idx):
        return np.asarray(source.clip_labels(idx)).astype(np.int64)


class ConstantPredictor:
    def __init__(self, value=0):
        self.value = int(value)

    def fit(self, source, idx):
        return {}

    def predict(self, source, idx):
        return np.full((len(idx), len(source.au_names)), self.value, dtype=np.int64)


def model_predictor(cfg: ExperimentConfig):
    return ModelPredictor(cfg)


def oracle_predictor(cfg: ExperimentConfig):
    return OraclePredictor()


def negative_predictor(cfg: ExperimentConfig):
    return ConstantPredictor(0)


# ---------------------------------------------------------------- protocols


def _run_fold(task):
    factory, cfg, source, fold, subject, train_idx, test_idx, threads = task
    if threads:
        torch.set_num_threads(threads)
    predictor = factory(cfg)
    info = predictor.fit(source, train_idx)
    preds = np.asarray(predictor.predict(source, test_idx), dtype=np.int64)
    return fold, subject, info, preds


def run_loso(source: ClipDataset, cfg: ExperimentConfig,
             predictor_factory: Callable[[ExperimentConfig], object] = model_predictor,
             jobs=1, fold_order: Optional[Sequence[int]] = None, label="") -> EvalReport:
    """Leave-one-subject-out: a fresh predictor per fold, predictions pooled over folds.

    ``fold_order`` permutes the order folds are executed in; results do not
    depend on it. With ``jobs > 1`` folds run in separate single-threaded
    processes (the factory must then be picklable).
    """
    manifest = source.manifest
    folds = loso_folds(manifest)
    subjects = [manifest.record(test[0]).subject_id for _, test in folds]
    order = list(range(len(folds))) if fold_order is None else list(fold_order)
    if sorted(order) != list(range(len(folds))):
        raise ValueError("fold_order must be a permutation of the fold indices")
    tasks = [(predictor_factory, cfg, source, i, subjects[i], source.indices(folds[i][0]),
              source.indices(folds[i][1]), 1 if jobs > 1 else 0) for i in order]

    n = len(source.au_names)
    pooled = np.full((manifest.M, n), -1, dtype=np.int64)
    details: Dict[int, dict] = {}

    def record(fold, subject, info, preds):
        test_idx = source.indices(folds[fold][1])
        if preds.shape != (len(test_idx), n):
            raise ShapeError(f"fold {fold} predictor returned shape {preds.shape}")
        pooled[test_idx] = preds
        details[fold] = {"fold": fold, "subject": subject, "n_train": len(folds[fold][0]),
                         "n_test": len(test_idx), "status": "ok", **info}

    def fail(fold, exc):
        details[fold] = {"fold": fold, "subject": subjects[fold], "n_train": len(folds[fold][0]),
                         "n_test": len(folds[fold][1]), "status": "failed", "error": str(exc)}
        partial = {"protocol": "loso", "label": label, "seed": cfg.seed,
                   "config_fingerprint": cfg.fingerprint(),
                   "fold_details": [details[k] for k in sorted(details)]}
        raise FoldFailedError(fold, exc, partial) from exc

    if jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = {t[3]: pool.submit(_run_fold, t) for t in tasks}
            for fold in order:
                try:
                    record(*futures[fold].result())
                except Exception as exc:  # noqa: BLE001 - any worker failure aborts the run
                    for f in futures.values():
                        f.cancel()
                    fail(fold, exc)
    else:
        for task in tasks:
            try:
                record(*_run_fold(task))
            except Exception as exc:  # noqa: BLE001
                fail(task[3], exc)
            log.info("fold %d (%s) done", task[3], task[4])

    truth = source.labels.astype(np.int64)
    slices = [source.indices(test) for _, test in folds]
    return build_report("loso", source.au_names, pooled, truth, cfg,
                        [details[k] for k in sorted(details)], aggregation=cfg.eval.aggregation,
                        fold_slices=slices, label=label)


def _domain_of(source) -> str:
    domains = sorted({s.domain_id for s in source.manifest.samples})
    return "+".join(domains)


def run_crossdomain(source: ClipDataset, target: ClipDataset, cfg: ExperimentConfig,
                    predictor_factory: Callable[[ExperimentConfig], object] = model_predictor,
                    label="") -> EvalReport:
    """Train once on every source sample, score every target sample (no fine-tuning)."""
    if tuple(source.au_names) != tuple(target.au_names):
        raise AUOrderError(f"AU ordering differs: source {list(source.au_names)} vs target {list(target.au_names)}")
    predictor = predictor_factory(cfg)
    info = predictor.fit(source, np.arange(len(source)))
    target_idx = np.arange(len(target))
    preds = np.asarray(predictor.predict(target, target_idx), dtype=np.int64)
    truth = np.asarray(target.clip_labels(target_idx)).astype(np.int64)
    details = [{"fold": 0, "n_train": len(source), "n_test": len(target), "status": "ok", **info}]
    domains = {"source": _domain_of(source), "target": _domain_of(target)}
    return build_report("crossdomain", source.au_names, preds, truth, cfg, details,
                        aggregation="pooled", label=label, domains=domains)
