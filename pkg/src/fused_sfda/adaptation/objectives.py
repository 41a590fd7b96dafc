"""
Losses for both phases. Every log uses log(x + 1e-8). Dataset-level sums are
estimated on whatever rows are passed in, normally one minibatch.
"""

import logging
from dataclasses import dataclass, field
from typing import TypeVar

import torch

from fused_sfda.classes.exceptions import LabelRangeError, ShapeMismatchError
from fused_sfda.classes.helper_classes import LossWeights
from fused_sfda.classes.itemtypes import View
from fused_sfda.model.branch import ProbBatch

LOG_FLOOR = 1e-8

Scalar = TypeVar("Scalar", float, torch.Tensor)


def safe_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x + LOG_FLOOR)


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy of a distribution (any shape; summed over all entries)."""
    return -(p * safe_log(p)).sum()


@dataclass
class JointDistribution:
    """K x K joint of FM (rows) and SM (columns) predictions with its marginals."""

    P: torch.Tensor
    marginal_fm: torch.Tensor = field(init=False)
    marginal_sm: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        self.marginal_fm = self.P.sum(dim=1)
        self.marginal_sm = self.P.sum(dim=0)


def _check_pair(p_a: ProbBatch, p_b: ProbBatch) -> None:
    if p_a.values.shape != p_b.values.shape:
        raise ShapeMismatchError(
            "paired probability batches",
            tuple(p_a.values.shape),
            tuple(p_b.values.shape),
        )


def joint_distribution(p_fm: ProbBatch, p_sm: ProbBatch) -> JointDistribution:
    """
    P_jk = mean over rows of p_fm[i, j] * p_sm[i, k].

    Raises:
        ValueError: On an empty batch or a prototype-view input.
        ShapeMismatchError: If the two batches differ in N or K.
    """
    _check_pair(p_fm, p_sm)
    if p_fm.view != View.Linear or p_sm.view != View.Linear:
        raise ValueError("The joint distribution is built from linear views only")
    if p_fm.num_rows == 0:
        raise ValueError("Cannot build a joint distribution from zero samples")
    joint = p_fm.values.T @ p_sm.values / p_fm.num_rows
    return JointDistribution(joint)


def mi_loss(J: JointDistribution) -> torch.Tensor:
    """Negative mutual information between the FM and SM predictions."""
    pmi = (
        safe_log(J.P)
        - safe_log(J.marginal_fm).unsqueeze(1)
        - safe_log(J.marginal_sm).unsqueeze(0)
    )
    return -(J.P * pmi).sum()


def masked_ce(
    p_sm: ProbBatch, labels: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """
    Cross-entropy of the pseudo-labels averaged over masked rows only. An empty
    mask gives exactly zero.
    """
    if not (len(labels) == len(mask) == p_sm.num_rows):
        raise ShapeMismatchError(
            "masked ce inputs", (p_sm.num_rows,), (len(labels), len(mask))
        )
    weights = mask.to(p_sm.values.dtype)
    total = weights.sum()
    if total == 0:
        logging.debug("Consensus mask empty for this batch; CE term is zero")
        return p_sm.values.sum() * 0
    rows = torch.arange(p_sm.num_rows, device=p_sm.values.device)
    picked = safe_log(p_sm.values[rows, labels])
    return -(weights * picked).sum() / total


def kd_loss(
    p_fm: ProbBatch, p_sm: ProbBatch, detach_teacher: bool = True
) -> torch.Tensor:
    """
    Mean row KL(p_fm || p_sm). With ``detach_teacher`` the FM side is a
    constant, so only the SM receives gradient.
    """
    _check_pair(p_fm, p_sm)
    teacher = p_fm.values.detach() if detach_teacher else p_fm.values
    per_row = (teacher * (safe_log(teacher) - safe_log(p_sm.values))).sum(dim=1)
    return per_row.mean()


def div_loss(p_sm: ProbBatch) -> torch.Tensor:
    """Negative entropy of the mean prediction; -log K at a uniform mean."""
    if p_sm.num_rows == 0:
        raise ValueError("Diversity loss needs at least one row")
    mean_prediction = p_sm.values.mean(dim=0)
    return (mean_prediction * safe_log(mean_prediction)).sum()


def source_ce(p: ProbBatch, labels: torch.Tensor) -> torch.Tensor:
    """
    Plain supervised cross-entropy.

    Raises:
        LabelRangeError: If any label falls outside [0, K).
    """
    out_of_range = (labels < 0) | (labels >= p.num_classes)
    if out_of_range.any():
        raise LabelRangeError(int(labels[out_of_range][0]), p.num_classes)
    rows = torch.arange(p.num_rows, device=p.values.device)
    return -safe_log(p.values[rows, labels]).mean()


def total_fm_loss(J: JointDistribution) -> torch.Tensor:
    return mi_loss(J)


def total_sm_loss(ce: Scalar, kd: Scalar, div: Scalar, w: LossWeights) -> Scalar:
    return ce + w.lambda_kd * kd + w.lambda_div * div
