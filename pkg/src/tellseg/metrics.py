"""Pixel- and site-level evaluation: IoU, bIoU, MCC, detection accuracy/recall.

Conventions, fixed here and recorded in every report: per-image IoU averages
foreground IoU with the empty-vs-empty case scored 1.0; bIoU pools tp/fp/fn
over the whole batch; MCC uses the pooled pixel confusion with any zero
factor giving 0; a tile counts as a detected site when an 8-connected
component of the binarized map covers at least min_area_m2 of ground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .geoingest import GeoRef
from .sitemap import label_components

DEFAULT_THRESHOLD = 0.5
DEFAULT_MIN_AREA_M2 = 2500.0


@dataclass(frozen=True)
class PixelConfusion:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ConfigError("pixel confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "PixelConfusion") -> "PixelConfusion":
        return PixelConfusion(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


@dataclass(frozen=True)
class SiteConfusion:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


def binarize(grid: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where value >= threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ConfigError(f"binarize: threshold {threshold} outside [0,1]")
    return (np.asarray(grid) >= threshold).astype(np.uint8)


def pixel_confusion(pred: np.ndarray, truth: np.ndarray) -> PixelConfusion:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pixel_confusion: pred {pred.shape} != truth {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if not np.all(np.isin(arr, (0, 1))):
            raise ShapeError(f"pixel_confusion: {name} must be binary")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return PixelConfusion(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def iou(confusions) -> float:
    """Mean per-image foreground IoU; an image empty in both pred and truth scores 1."""
    confusions = list(confusions)
    if not confusions:
        raise DataError("iou: need at least one image")
    vals = []
    for c in confusions:
        denom = c.tp + c.fp + c.fn
        vals.append(1.0 if denom == 0 else c.tp / denom)
    return float(np.mean(vals))


def biou(confusions) -> float:
    """Dataset-pooled foreground IoU; 1.0 when the pooled denominator is empty."""
    confusions = list(confusions)
    if not confusions:
        raise DataError("biou: need at least one image")
    tp = sum(c.tp for c in confusions)
    fp = sum(c.fp for c in confusions)
    fn = sum(c.fn for c in confusions)
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def mcc(confusion: PixelConfusion) -> float:
    """Matthews correlation; any zero factor in the denominator gives 0."""
    tp, tn, fp, fn = confusion.tp, confusion.tn, confusion.fp, confusion.fn
    factors = [tp + fp, tp + fn, tn + fp, tn + fn]
    if any(f == 0 for f in factors):
        return 0.0
    num = tp * tn - fp * fn
    return float(num / math.sqrt(math.prod(float(f) for f in factors)))


def detect_site(
    prob: np.ndarray,
    georef: GeoRef,
    threshold: float = DEFAULT_THRESHOLD,
    min_area_m2: float = DEFAULT_MIN_AREA_M2,
) -> bool:
    """True when an 8-connected component covers at least min_area_m2 of ground."""
    labels, count = label_components(binarize(prob, threshold), connectivity=8)
    if count == 0:
        return False
    sizes = np.bincount(labels.ravel())[1:]
    return bool(sizes.max() * georef.pixel_area >= min_area_m2)


def site_scores(confusion: SiteConfusion):
    """(accuracy, recall); recall is None when there are no positive samples."""
    if confusion.total <= 0:
        raise DataError("site_scores: empty confusion")
    accuracy = (confusion.TP + confusion.TN) / confusion.total
    pos = confusion.TP + confusion.FN
    recall = None if pos == 0 else confusion.TP / pos
    return accuracy, recall


@dataclass
class MetricsReport:
    iou: float
    biou: float
    mcc: float
    site_confusion: SiteConfusion | None = None
    site_accuracy: float | None = None
    site_recall: float | None = None
    per_image: list = field(default_factory=list)
    threshold: float = DEFAULT_THRESHOLD
    min_area_m2: float = DEFAULT_MIN_AREA_M2

    def __post_init__(self):
        for name in ("iou", "biou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"report: {name} {v} outside [0,1]")
        if not (-1.0 <= self.mcc <= 1.0):
            raise ConfigError(f"report: mcc {self.mcc} outside [-1,1]")

    def metric_values(self) -> dict:
        out = {"IoU": self.iou, "MCC": self.mcc, "bIoU": self.biou}
        if self.site_accuracy is not None:
            out["Accuracy"] = self.site_accuracy
        if self.site_recall is not None:
            out["Recall"] = self.site_recall
        return out


def evaluate_predictions(
    items,
    threshold: float = DEFAULT_THRESHOLD,
    min_area_m2: float = DEFAULT_MIN_AREA_M2,
) -> MetricsReport:
    """Score (id, prob_grid, truth_mask, georef, label) items at pixel and site level."""
    items = list(items)
    if not items:
        raise DataError("evaluate_predictions: no items")
    confusions = []
    per_image = []
    tp = tn = fp = fn = 0
    for sample_id, prob, truth, georef, label in items:
        conf = pixel_confusion(binarize(prob, threshold), truth)
        confusions.append(conf)
        per_image.append({"id": sample_id, "iou": iou([conf]), "mcc": mcc(conf)})
        detected = detect_site(prob, georef, threshold, min_area_m2)
        if label and detected:
            tp += 1
        elif label and not detected:
            fn += 1
        elif not label and detected:
            fp += 1
        else:
            tn += 1
    pooled = PixelConfusion(
        tp=sum(c.tp for c in confusions),
        tn=sum(c.tn for c in confusions),
        fp=sum(c.fp for c in confusions),
        fn=sum(c.fn for c in confusions),
    )
    site = SiteConfusion(TP=tp, TN=tn, FP=fp, FN=fn)
    accuracy, recall = site_scores(site)
    return MetricsReport(
        iou=iou(confusions),
        biou=biou(confusions),
        mcc=mcc(pooled),
        site_confusion=site,
        site_accuracy=accuracy,
        site_recall=recall,
        per_image=per_image,
        threshold=threshold,
        min_area_m2=min_area_m2,
    )


def aggregate_runs(reports, n: int | None = None) -> dict:
    """Mean and sample standard deviation per metric over repeated evaluations."""
    reports = list(reports)
    if n is not None and len(reports) != n:
        raise ConfigError(f"aggregate_runs: expected {n} reports, got {len(reports)}")
    if len(reports) < 2:
        raise ConfigError("aggregate_runs: need at least 2 repetitions")
    keys = reports[0].metric_values().keys() if isinstance(reports[0], MetricsReport) else reports[0].keys()
    out = {}
    for key in keys:
        vals = np.array(
            [r.metric_values()[key] if isinstance(r, MetricsReport) else r[key] for r in reports],
            dtype=float,
        )
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out


# ---------------------------------------------------------------------------
# table formatting (validation / test / site tables)


def format_validation_table(rows) -> str:
    """Rows of (model, iou, mcc, biou, epoch); percents to two decimals."""
    lines = ["Model\tIoU\tMCC\tbIoU\tEpoch"]
    for model, iou_v, mcc_v, biou_v, epoch in rows:
        lines.append(f"{model}\t{iou_v:.2f}\t{mcc_v:.2f}\t{biou_v:.2f}\t{epoch}")
    return "\n".join(lines) + "\n"


def format_test_table(rows, with_std: bool = True) -> str:
    """Rows of (model, {metric: (mean, std)}) on the 0-100 scale."""
    if with_std:
        lines = ["Model\tIoU\tSt.d.\tMCC\tSt.d.\tbIoU\tSt.d."]
    else:
        lines = ["Model\tIoU\tMCC\tbIoU"]
    for model, stats in rows:
        cells = [model]
        for key in ("IoU", "MCC", "bIoU"):
            mean, std = stats[key]
            cells.append(f"{100 * mean:.2f}")
            if with_std:
                cells.append(f"{100 * std:.2f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def format_site_table(rows) -> str:
    """Rows of (model, SiteConfusion); accuracy/recall to two decimals."""
    lines = ["Model\tAccuracy\tRecall\tTP\tTN\tFP\tFN"]
    for model, conf in rows:
        accuracy, recall = site_scores(conf)
        rec = "-" if recall is None else f"{recall:.2f}"
        lines.append(
            f"{model}\t{accuracy:.2f}\t{rec}\t{conf.TP}\t{conf.TN}\t{conf.FP}\t{conf.FN}"
        )
    return "\n".join(lines) + "\n"


def report_to_kv(model: str, report: MetricsReport) -> str:
    """Machine-readable key=value variant with the same vocabulary as the tables."""
    lines = [f"Model={model}"]
    for key, val in report.metric_values().items():
        lines.append(f"{key}={val!r}")
    if report.site_confusion is not None:
        c = report.site_confusion
        lines += [f"TP={c.TP}", f"TN={c.TN}", f"FP={c.FP}", f"FN={c.FN}"]
    lines.append(f"threshold={report.threshold!r}")
    lines.append(f"min_area_m2={report.min_area_m2!r}")
    return "\n".join(lines) + "\n"
