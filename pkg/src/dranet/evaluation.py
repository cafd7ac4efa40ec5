"""Fused open-world scoring and the calibrated-bias evaluation protocol.

Scores span the full attribute-object product, including pairs absent
from the dataset. A scalar bias added to every seen pair's score is swept
from -inf to +inf; each bias yields a (seen accuracy, unseen accuracy)
point, and the curve summarizes to best-seen (S), best-unseen (U), best
harmonic mean (HM), and the area under the unseen-vs-seen curve (AUC).
Bias candidates are quantiles of the per-sample margin between the best
non-seen and best seen score over unseen-truth samples, bracketed by the
two infinite sentinels.

The infinite sentinels are evaluated as restricted argmaxes (the exact
limit of score + bias * is_seen), so the +inf point reports the best
achievable seen accuracy and the -inf point the best unseen accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor
from .core import CompositionLabel, labels_to_arrays
from .faults import ConfigError, DataError
from .model import ModelConfig, ModelOutputs, ModelParams, forward

DEFAULT_NUM_BIASES = 50


@dataclass(frozen=True)
class FusionWeights:
    eta1: float = 0.1  # reversal share for the attribute route
    eta2: float = 0.3  # reversal share for the object route

    def __post_init__(self):
        for name, value in (("eta1", self.eta1), ("eta2", self.eta2)):
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1], got {value}")


@dataclass
class ScoreMatrix:
    """Per-sample scores over all pairs, plus the seen mask and ground truth."""

    scores: np.ndarray  # (num_samples, num_attributes * num_objects)
    seen_mask: np.ndarray  # bool, (num_pairs,)
    truth: list[CompositionLabel]
    num_attributes: int
    num_objects: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.seen_mask = np.asarray(self.seen_mask, dtype=bool)
        if self.scores.shape[1] != self.num_attributes * self.num_objects:
            raise ValueError("score width does not match the pair space")
        if self.seen_mask.shape != (self.scores.shape[1],):
            raise ValueError("seen mask width does not match the pair space")
        if len(self.truth) != self.scores.shape[0]:
            raise ValueError("one truth label required per score row")


@dataclass(frozen=True)
class CurvePoint:
    bias: float
    seen_acc: float
    unseen_acc: float


@dataclass
class EvaluationCurve:
    points: list[CurvePoint]


@dataclass
class MetricsReport:
    S: float
    U: float
    HM: float
    AUC: float
    attr_top1: float
    obj_top1: float

    def to_dict(self) -> dict:
        return {"S": self.S, "U": self.U, "HM": self.HM, "AUC": self.AUC,
                "attr_top1": self.attr_top1, "obj_top1": self.obj_top1}


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def fuse_predictions(outputs: ModelOutputs, w: FusionWeights, mode: str) -> np.ndarray:
    """Combine the four classifiers into score rows over all pairs.

    weighted_sum_product blends each route's forward and reversal
    probabilities before the outer product (rows sum to 1); product_sum
    adds the forward and reversal outer products (rows sum to 2).
    """
    p_attr = _softmax_rows(outputs.attr_logits.data)
    p_obj = _softmax_rows(outputs.obj_logits.data)
    p_rev_attr = _softmax_rows(outputs.rev_attr_logits.data)
    p_rev_obj = _softmax_rows(outputs.rev_obj_logits.data)
    if mode == "weighted_sum_product":
        fused_attr = (1.0 - w.eta1) * p_attr + w.eta1 * p_rev_attr
        fused_obj = (1.0 - w.eta2) * p_obj + w.eta2 * p_rev_obj
        rows = np.einsum("ba,bo->bao", fused_attr, fused_obj)
    elif mode == "product_sum":
        rows = (np.einsum("ba,bo->bao", p_attr, p_obj)
                + np.einsum("ba,bo->bao", p_rev_attr, p_rev_obj))
    else:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    return rows.reshape(rows.shape[0], -1)


@dataclass
class _SampleStats:
    """Per-sample sufficient statistics for the bias sweep."""

    best_seen_id: np.ndarray
    best_seen_score: np.ndarray
    best_open_id: np.ndarray  # best pair outside the seen set
    best_open_score: np.ndarray
    truth_pair: np.ndarray
    truth_is_seen: np.ndarray
    attr_pred: np.ndarray
    obj_pred: np.ndarray
    truth_attr: np.ndarray
    truth_obj: np.ndarray


def _reduce_rows(rows: np.ndarray, seen_mask: np.ndarray,
                 truth: Sequence[CompositionLabel],
                 num_attributes: int, num_objects: int) -> _SampleStats:
    seen_idx = np.flatnonzero(seen_mask)
    open_idx = np.flatnonzero(~seen_mask)
    if seen_idx.size == 0 or open_idx.size == 0:
        raise DataError("bias sweep needs both seen and non-seen pairs in the space")
    seen_rows = rows[:, seen_idx]
    open_rows = rows[:, open_idx]
    best_seen = seen_idx[np.argmax(seen_rows, axis=1)]
    best_open = open_idx[np.argmax(open_rows, axis=1)]
    grid = rows.reshape(rows.shape[0], num_attributes, num_objects)
    attrs, objs = labels_to_arrays(truth)
    pair = attrs * num_objects + objs
    return _SampleStats(
        best_seen_id=best_seen,
        best_seen_score=rows[np.arange(rows.shape[0]), best_seen],
        best_open_id=best_open,
        best_open_score=rows[np.arange(rows.shape[0]), best_open],
        truth_pair=pair,
        truth_is_seen=seen_mask[pair],
        attr_pred=np.argmax(grid.sum(axis=2), axis=1),
        obj_pred=np.argmax(grid.sum(axis=1), axis=1),
        truth_attr=attrs,
        truth_obj=objs,
    )


def _concat_stats(parts: list[_SampleStats]) -> _SampleStats:
    return _SampleStats(*[np.concatenate([getattr(p, f) for p in parts])
                          for f in _SampleStats.__dataclass_fields__])


def _bias_candidates(stats: _SampleStats, num_biases: int) -> np.ndarray:
    unseen = ~stats.truth_is_seen
    if not unseen.any() or unseen.all():
        raise DataError("bias calibration needs both seen-truth and unseen-truth samples")
    margins = stats.best_open_score[unseen] - stats.best_seen_score[unseen]
    quantiles = np.quantile(margins, np.linspace(0.0, 1.0, num_biases))
    return np.concatenate([[-np.inf], np.sort(quantiles), [np.inf]])


def _point_at_bias(stats: _SampleStats, bias: float) -> CurvePoint:
    if np.isposinf(bias):
        choose_seen = np.ones_like(stats.truth_is_seen)
    elif np.isneginf(bias):
        choose_seen = np.zeros_like(stats.truth_is_seen)
    else:
        biased_seen = stats.best_seen_score + bias
        choose_seen = biased_seen > stats.best_open_score
        tie = biased_seen == stats.best_open_score
        # argmax over the full row breaks exact ties by smaller pair_id
        choose_seen |= tie & (stats.best_seen_id < stats.best_open_id)
    pred = np.where(choose_seen, stats.best_seen_id, stats.best_open_id)
    correct = pred == stats.truth_pair
    seen_truth = stats.truth_is_seen
    seen_acc = float(correct[seen_truth].mean()) if seen_truth.any() else 0.0
    unseen_acc = float(correct[~seen_truth].mean()) if (~seen_truth).any() else 0.0
    return CurvePoint(bias=float(bias), seen_acc=seen_acc, unseen_acc=unseen_acc)


def calibration_sweep(scores: ScoreMatrix, num_biases: int = DEFAULT_NUM_BIASES) -> EvaluationCurve:
    """Sweep the seen-pair bias and collect accuracy points in bias order."""
    stats = _reduce_rows(scores.scores, scores.seen_mask, scores.truth,
                         scores.num_attributes, scores.num_objects)
    candidates = _bias_candidates(stats, num_biases)
    return EvaluationCurve(points=[_point_at_bias(stats, b) for b in candidates])


def _curve_metrics(curve: EvaluationCurve) -> tuple[float, float, float, float]:
    seen = np.array([p.seen_acc for p in curve.points])
    unseen = np.array([p.unseen_acc for p in curve.points])
    best_s = float(seen.max())
    best_u = float(unseen.max())
    with np.errstate(invalid="ignore"):
        hm = np.where(seen + unseen > 0, 2 * seen * unseen / (seen + unseen), 0.0)
    best_hm = float(hm.max())
    auc = float(np.trapezoid(unseen, seen))
    return best_s, best_u, best_hm, auc


def compute_metrics(curve: EvaluationCurve, scores: ScoreMatrix) -> MetricsReport:
    """Summarize a sweep curve; primitive accuracies come from score marginals.

    AUC is the trapezoid integral of unseen vs seen accuracy along the
    sweep order (ascending bias, under which seen accuracy ascends).
    """
    if not curve.points:
        raise DataError("cannot summarize an empty evaluation curve")
    best_s, best_u, best_hm, auc = _curve_metrics(curve)
    stats = _reduce_rows(scores.scores, scores.seen_mask, scores.truth,
                         scores.num_attributes, scores.num_objects)
    return MetricsReport(
        S=best_s, U=best_u, HM=best_hm, AUC=auc,
        attr_top1=float((stats.attr_pred == stats.truth_attr).mean()),
        obj_top1=float((stats.obj_pred == stats.truth_obj).mean()),
    )


def collect_outputs(params: ModelParams, config: ModelConfig, images: np.ndarray,
                    batch_size: int = 64) -> dict[str, np.ndarray]:
    """Run the model over images in batches, returning the four logit arrays."""
    chunks = {"attr": [], "obj": [], "rev_attr": [], "rev_obj": []}
    for start in range(0, images.shape[0], batch_size):
        out = forward(Tensor(images[start:start + batch_size]), params, config)
        chunks["attr"].append(out.attr_logits.data)
        chunks["obj"].append(out.obj_logits.data)
        chunks["rev_attr"].append(out.rev_attr_logits.data)
        chunks["rev_obj"].append(out.rev_obj_logits.data)
    return {k: np.concatenate(v) for k, v in chunks.items()}


@dataclass
class _LogitsOutputs:
    """Adapter letting fuse_predictions run on plain logit arrays."""

    attr_logits: Tensor
    obj_logits: Tensor
    rev_attr_logits: Tensor
    rev_obj_logits: Tensor

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], sl: slice = slice(None)):
        return cls(
            attr_logits=Tensor(arrays["attr"][sl]),
            obj_logits=Tensor(arrays["obj"][sl]),
            rev_attr_logits=Tensor(arrays["rev_attr"][sl]),
            rev_obj_logits=Tensor(arrays["rev_obj"][sl]),
        )


def outputs_from_arrays(arrays: dict[str, np.ndarray]):
    return _LogitsOutputs.from_arrays(arrays)


def evaluate_outputs(arrays: dict[str, np.ndarray], truth: Sequence[CompositionLabel],
                     seen_mask: np.ndarray, fusion: FusionWeights, mode: str,
                     num_attributes: int, num_objects: int,
                     num_biases: int = DEFAULT_NUM_BIASES,
                     batch_size: int = 256) -> tuple[MetricsReport, EvaluationCurve]:
    """Sweep and summarize from precollected logits, streaming score rows.

    Score rows are reduced batch by batch to O(1) statistics per sample,
    so peak memory stays at O(batch_size * num_pairs).
    """
    n = arrays["attr"].shape[0]
    parts = []
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        rows = fuse_predictions(_LogitsOutputs.from_arrays(arrays, sl), fusion, mode)
        parts.append(_reduce_rows(rows, seen_mask, truth[sl], num_attributes, num_objects))
    stats = _concat_stats(parts)
    candidates = _bias_candidates(stats, num_biases)
    curve = EvaluationCurve(points=[_point_at_bias(stats, b) for b in candidates])
    best_s, best_u, best_hm, auc = _curve_metrics(curve)
    report = MetricsReport(
        S=best_s, U=best_u, HM=best_hm, AUC=auc,
        attr_top1=float((stats.attr_pred == stats.truth_attr).mean()),
        obj_top1=float((stats.obj_pred == stats.truth_obj).mean()),
    )
    return report, curve


def evaluate_model(params: ModelParams, config: ModelConfig, images: np.ndarray,
                   truth: Sequence[CompositionLabel], seen_pairs: frozenset[int],
                   fusion: FusionWeights, num_biases: int = DEFAULT_NUM_BIASES,
                   batch_size: int = 64) -> tuple[MetricsReport, EvaluationCurve]:
    """End-to-end deterministic evaluation of a model on a test set."""
    num_pairs = config.num_attributes * config.num_objects
    seen_mask = np.zeros(num_pairs, dtype=bool)
    seen_mask[sorted(seen_pairs)] = True
    arrays = collect_outputs(params, config, images, batch_size=batch_size)
    return evaluate_outputs(arrays, list(truth), seen_mask, fusion, config.fusion_mode,
                            config.num_attributes, config.num_objects, num_biases)
