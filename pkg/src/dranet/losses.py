"""Training objectives and the optimization step.

Four terms: attribute and object cross-entropies on the forward
classifiers, a reverse cross-entropy on the swapped reversal classifiers,
and a distillation KL between forward (student) and reversal (teacher)
predictions with the teacher gradient-detached. Batch reduction is the
mean throughout, so the loss weights are batch-size independent. All
terms use log-sum-exp stabilized softmax and stay finite for any finite
logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .faults import ConfigError, NumericError
from .model import ModelConfig, ModelOutputs, ModelParams

DEFAULT_LEARNING_RATE = 5e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # reverse loss weight
    lambda2: float = 1.0  # distillation weight

    def __post_init__(self):
        for name, value in (("lambda1", self.lambda1), ("lambda2", self.lambda2)):
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")


@dataclass
class LossBreakdown:
    attr: float
    obj: float
    reverse: float
    distill: float
    total: float


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    log_probs = ag.log_softmax(logits, axis=1)
    return -ag.mean(ag.pick(log_probs, targets))


def attr_loss(outputs: ModelOutputs, labels) -> Tensor:
    """Mean negative log-probability of the true attribute."""
    attrs = np.asarray([lab.attribute_id for lab in labels])
    return _cross_entropy(outputs.attr_logits, attrs)


def obj_loss(outputs: ModelOutputs, labels) -> Tensor:
    """Mean negative log-probability of the true object."""
    objs = np.asarray([lab.object_id for lab in labels])
    return _cross_entropy(outputs.obj_logits, objs)


def reverse_loss(outputs: ModelOutputs, labels) -> Tensor:
    """Cross-entropy of the swapped reversal classifiers.

    The reversal-based object classifier (fed by the attribute branch's
    reversal) is scored against the true object, and the reversal-based
    attribute classifier against the true attribute.
    """
    attrs = np.asarray([lab.attribute_id for lab in labels])
    objs = np.asarray([lab.object_id for lab in labels])
    return (_cross_entropy(outputs.rev_obj_logits, objs)
            + _cross_entropy(outputs.rev_attr_logits, attrs))


def distill_pairs(outputs: ModelOutputs, mode: str) -> list[tuple[Tensor, Tensor]]:
    """(student, teacher) logit pairs for each distillation orientation.

    Default mode: both reversal classifiers teach. n_oriented: the two
    classifiers fed by the non-local branch teach (attribute and
    reversal-based object). l_oriented: the local-branch classifiers
    teach (object and reversal-based attribute).
    """
    if mode == "reversal_teacher":
        return [(outputs.attr_logits, outputs.rev_attr_logits),
                (outputs.obj_logits, outputs.rev_obj_logits)]
    if mode == "n_oriented":
        return [(outputs.rev_attr_logits, outputs.attr_logits),
                (outputs.obj_logits, outputs.rev_obj_logits)]
    if mode == "l_oriented":
        return [(outputs.attr_logits, outputs.rev_attr_logits),
                (outputs.rev_obj_logits, outputs.obj_logits)]
    raise ConfigError(f"unknown distill mode {mode!r}")


def _kl_term(student_logits: Tensor, teacher_logits: Tensor, detach_teacher: bool) -> Tensor:
    """Mean over the batch of KL(student || teacher)."""
    if detach_teacher:
        teacher_logits = teacher_logits.detach()
    student_log = ag.log_softmax(student_logits, axis=1)
    teacher_log = ag.log_softmax(teacher_logits, axis=1)
    student_prob = ag.softmax(student_logits, axis=1)
    per_sample = ag.tsum(student_prob * (student_log - teacher_log), axis=1)
    return ag.mean(per_sample)


def distill_loss(outputs: ModelOutputs, mode: str, detach_teacher: bool = True,
                 frozen_teacher_logits: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """KL(student || teacher) summed over the two orientation pairs.

    ``frozen_teacher_logits`` substitutes constant teacher logits (in pair
    order); finite-difference oracles use it to hold teachers fixed while
    parameters are perturbed.
    """
    pairs = distill_pairs(outputs, mode)
    if frozen_teacher_logits is not None:
        pairs = [(student, Tensor(np.asarray(frozen)))
                 for (student, _), frozen in zip(pairs, frozen_teacher_logits)]
    total = None
    for student, teacher in pairs:
        term = _kl_term(student, teacher, detach_teacher)
        total = term if total is None else total + term
    return total


def teacher_logits(outputs: ModelOutputs, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Current teacher logits in pair order, for freezing in oracles."""
    pairs = distill_pairs(outputs, mode)
    return tuple(teacher.data.copy() for _, teacher in pairs)


def total_loss(outputs: ModelOutputs, labels, weights: LossWeights,
               config: ModelConfig, detach_teacher: bool = True,
               frozen_teacher_logits=None) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective; omitted terms are recorded as 0 in the breakdown."""
    la = attr_loss(outputs, labels)
    lo = obj_loss(outputs, labels)
    total = la + lo
    lr_value = 0.0
    ld_value = 0.0
    if config.use_reverse:
        lr = reverse_loss(outputs, labels)
        total = total + weights.lambda1 * lr
        lr_value = float(lr.data)
    if config.distill_mode != "off":
        ld = distill_loss(outputs, config.distill_mode, detach_teacher,
                          frozen_teacher_logits)
        total = total + weights.lambda2 * ld
        ld_value = float(ld.data)
    breakdown = LossBreakdown(
        attr=float(la.data),
        obj=float(lo.data),
        reverse=lr_value,
        distill=ld_value,
        total=float(total.data),
    )
    return total, breakdown


# -- optimization -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    first_moment: dict | None = None
    second_moment: dict | None = None

    def __post_init__(self):
        if self.first_moment is None:
            self.first_moment = {}
        if self.second_moment is None:
            self.second_moment = {}


def train_step(params: ModelParams, batch, weights: LossWeights, state: AdamState,
               config: ModelConfig, learning_rate: float = DEFAULT_LEARNING_RATE,
               forward_fn=None) -> tuple[ModelParams, AdamState, LossBreakdown]:
    """One Adam update of all trainable parameters against the total loss.

    ``batch`` is (images Tensor, labels). Parameters are updated in
    place; the same objects are returned for call-site symmetry.
    Non-finite losses or gradients raise NumericError naming the first
    offending parameter.
    """
    from .model import forward as model_forward

    images, labels = batch
    fwd = forward_fn if forward_fn is not None else model_forward
    outputs = fwd(images, params, config)
    loss, breakdown = total_loss(outputs, labels, weights, config)
    if not np.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss: {breakdown}")

    for _, tensor in params.named_parameters():
        tensor.grad = None
    loss.backward()

    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in params.trainable_parameters(config):
        grad = tensor.grad
        if grad is None:
            continue
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (grad * grad)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        tensor.data = tensor.data - update.astype(tensor.data.dtype, copy=False)
    return params, state, breakdown
