"""Segmentation quality indicators computed from probability maps.

Overlap metrics binarize at 0.5 and follow the usual conventions for
empty masks (100 when prediction and truth agree on emptiness, else 0);
MAE stays on the soft map; AUC uses the rank form of the Mann-Whitney
statistic with tie correction. All rates are percentages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .network import HAANet, count_macs, count_params

logger = logging.getLogger(__name__)

WF_BETA_SQ = 0.3

METRIC_COLUMNS = [
    "auc",
    "mae",
    "wf",
    "or_score",
    "dice",
    "jaccard",
    "sensitivity",
    "specificity",
    "params_m",
    "macs_g",
]


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricReport:
    """The nine-indicator record: eight rate metrics plus model cost."""

    auc: float
    mae: float
    wf: float
    or_score: float
    dice: float
    jaccard: float
    sensitivity: float
    specificity: float
    params_m: float
    macs_g: float

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def _as_array(x) -> np.ndarray:
    data = x.data if hasattr(x, "data") else x
    return np.asarray(data, dtype=np.float64)


def confusion(pred_prob, gt, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize the prediction at threshold (>= is positive) and count cells."""
    p = _as_array(pred_prob)
    g = _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    pb = p >= threshold
    gb = g >= 0.5
    return ConfusionCounts(
        tp=int(np.sum(pb & gb)),
        fp=int(np.sum(pb & ~gb)),
        tn=int(np.sum(~pb & ~gb)),
        fn=int(np.sum(~pb & gb)),
    )


def _guarded(numerator: float, denominator: float, complement: float) -> float:
    # Empty-denominator convention: perfect (100) when the complementary
    # error count is also zero, otherwise 0.
    if denominator == 0:
        return 100.0 if complement == 0 else 0.0
    return 100.0 * numerator / denominator


def dice(c: ConfusionCounts) -> float:
    return _guarded(2 * c.tp, 2 * c.tp + c.fp + c.fn, 0)


def jaccard(c: ConfusionCounts) -> float:
    return _guarded(c.tp, c.tp + c.fp + c.fn, 0)


def sensitivity(c: ConfusionCounts) -> float:
    return _guarded(c.tp, c.tp + c.fn, c.fp)


def specificity(c: ConfusionCounts) -> float:
    return _guarded(c.tn, c.tn + c.fp, c.fn)


def mae(pred_prob, gt) -> float:
    """Mean absolute error of the soft map, scaled to a percentage."""
    p = _as_array(pred_prob)
    g = _as_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return 100.0 * float(np.mean(np.abs(p - g)))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group average."""
    n = x.size
    sorter = np.argsort(x, kind="mergesort")
    inv = np.empty(n, dtype=np.intp)
    inv[sorter] = np.arange(n)
    sx = x[sorter]
    boundary = np.r_[True, sx[1:] != sx[:-1]]
    dense = np.cumsum(boundary)[inv]
    ends = np.r_[np.nonzero(boundary)[0][1:], n]
    starts = np.nonzero(boundary)[0]
    avg = 0.5 * (starts + 1 + ends)
    return avg[dense - 1]


def auc(pred_prob, gt) -> float:
    """Pixelwise ROC-AUC via the rank (Mann-Whitney) statistic; ties count half."""
    p = _as_array(pred_prob).reshape(-1)
    g = _as_array(gt).reshape(-1) >= 0.5
    n_pos = int(np.sum(g))
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative pixel")
    ranks = _average_ranks(p)
    u = np.sum(ranks[g]) - n_pos * (n_pos + 1) / 2.0
    return 100.0 * float(u / (n_pos * n_neg))


def wf(pred_prob, gt) -> float:
    """Weighted F-measure: F_beta with beta^2 = 0.3 on the binarized masks."""
    c = confusion(pred_prob, gt)
    if c.tp + c.fp + c.fn == 0:
        return 100.0
    precision_d = c.tp + c.fp
    recall_d = c.tp + c.fn
    if precision_d == 0 or recall_d == 0:
        return 0.0
    p = c.tp / precision_d
    r = c.tp / recall_d
    if p == 0 and r == 0:
        return 0.0
    return 100.0 * (1.0 + WF_BETA_SQ) * p * r / (WF_BETA_SQ * p + r)


def or_score(pred_prob, gt) -> float:
    """Overlapping ratio: intersection over union of the binarized masks."""
    return jaccard(confusion(pred_prob, gt))


def evaluate_predictions(pairs: Sequence) -> Dict[str, float]:
    """Macro-average the eight rate metrics over (prediction, truth) pairs."""
    if not pairs:
        raise ValueError("evaluation needs a non-empty sample list")
    rows: Dict[str, List[float]] = {name: [] for name in METRIC_COLUMNS[:8]}
    auc_excluded = 0
    for pred, gt in pairs:
        c = confusion(pred, gt)
        rows["mae"].append(mae(pred, gt))
        rows["wf"].append(wf(pred, gt))
        rows["or_score"].append(or_score(pred, gt))
        rows["dice"].append(dice(c))
        rows["jaccard"].append(jaccard(c))
        rows["sensitivity"].append(sensitivity(c))
        rows["specificity"].append(specificity(c))
        try:
            rows["auc"].append(auc(pred, gt))
        except ValueError:
            auc_excluded += 1
    if auc_excluded:
        logger.warning("AUC skipped %d image(s) with single-class ground truth", auc_excluded)
    return {
        name: float(np.mean(vals)) if vals else float("nan")
        for name, vals in rows.items()
    }


def evaluate_dataset(net: HAANet, samples: Sequence) -> MetricReport:
    """Run the network over samples and report macro metrics plus model cost."""
    if not samples:
        raise ValueError("evaluation needs a non-empty sample list")
    pairs = [(net.forward(s.image).data, s.mask.data) for s in samples]
    averages = evaluate_predictions(pairs)
    report = count_params(net)
    return MetricReport(
        params_m=report.total_params / 1e6,
        macs_g=count_macs(net) / 1e9,
        **averages,
    )
