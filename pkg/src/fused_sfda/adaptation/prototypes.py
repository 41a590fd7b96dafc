"""
Per-branch class prototypes: initialisation from the classifier, prediction
margins, margin-gated EMA refinement and the prototype (cosine) view.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import torch

from fused_sfda.classes.exceptions import (
    DegenerateClassifierError,
    ShapeMismatchError,
    ZeroNormError,
)
from fused_sfda.classes.itemtypes import BranchRole, View
from fused_sfda.model.branch import Branch, ProbBatch, check_finite_rows


@dataclass
class PrototypeBank:
    """
    Unit-norm class centroids (K x D) for one branch with the settings that
    govern their refinement and the prototype view.
    """

    centroids: torch.Tensor
    momentum: float = 0.9
    margin_threshold: float = 0.6
    temperature: float = 10.0
    owner_role: BranchRole = BranchRole.SM

    def __post_init__(self) -> None:
        if not 0 <= self.momentum < 1:
            raise ValueError(f"Momentum {self.momentum} outside [0, 1)")
        if not 0 <= self.margin_threshold < 1:
            raise ValueError(f"Margin threshold {self.margin_threshold} outside [0, 1)")
        if self.temperature < 0:
            raise ValueError("Temperature must be non-negative")
        self.centroids = self.centroids.detach().clone()

    @property
    def num_classes(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.centroids.shape[1])

    def settings(self) -> dict[str, float]:
        return {
            "momentum": self.momentum,
            "margin_threshold": self.margin_threshold,
            "temperature": self.temperature,
        }

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            self.centroids.clone(),
            self.momentum,
            self.margin_threshold,
            self.temperature,
            self.owner_role,
        )


def init_from_classifier(
    branch: Branch,
    momentum: float = 0.9,
    margin_threshold: float = 0.6,
    temperature: float = 10.0,
) -> PrototypeBank:
    """
    Sets each centroid to the L2-normalised classifier weight row; the bias is
    ignored.

    Raises:
        DegenerateClassifierError: If a weight row has zero norm.
    """
    weight = branch.classifier.weight.detach().clone()
    norms = weight.norm(dim=1)
    zero_rows = torch.nonzero(norms == 0)
    if len(zero_rows):
        raise DegenerateClassifierError(int(zero_rows[0, 0]))
    return PrototypeBank(
        weight / norms.unsqueeze(1),
        momentum,
        margin_threshold,
        temperature,
        branch.role,
    )


def margin(p_linear: ProbBatch) -> torch.Tensor:
    """Top-1 minus top-2 probability per row."""
    if p_linear.num_classes < 2:
        raise ValueError("Margin needs at least two classes")
    top2 = torch.topk(p_linear.values.detach(), k=2, dim=1).values
    return top2[:, 0] - top2[:, 1]


def confident(margins: torch.Tensor, threshold: float) -> torch.Tensor:
    """Rows whose margin strictly exceeds the threshold."""
    return margins.detach() > threshold


def normalise_rows(features: torch.Tensor, what: str) -> torch.Tensor:
    norms = features.norm(dim=1, keepdim=True)
    zero = (norms.squeeze(1) == 0).nonzero()
    if len(zero):
        raise ZeroNormError(what, int(zero[0, 0]))
    return features / norms


def _check_dim(bank: PrototypeBank, features: torch.Tensor) -> None:
    if features.ndim != 2 or features.shape[1] != bank.feature_dim:
        raise ShapeMismatchError(
            f"{bank.owner_role.value} prototype features",
            (-1, bank.feature_dim),
            tuple(features.shape),
        )


def ema_update(
    bank: PrototypeBank,
    features: torch.Tensor,
    labels: torch.Tensor,
    margins: torch.Tensor,
) -> PrototypeBank:
    """
    Moves each centroid towards the mean normalised feature of the samples
    predicted as that class with margin above the threshold, then renormalises.
    Classes without qualifying samples keep their row bit for bit.

    Args:
        bank (PrototypeBank): The bank to refine. Not modified.
        features (torch.Tensor): Raw N x D features of the owning branch.
        labels (torch.Tensor): The owning branch's linear-view predictions.
        margins (torch.Tensor): The owning branch's linear-view margins.

    Returns:
        PrototypeBank: A new bank with the refined centroids.
    """
    _check_dim(bank, features)
    updated = bank.copy()
    if features.shape[0] == 0:
        return updated
    z_bar = normalise_rows(features.detach().to(bank.centroids.dtype), "ema features")
    gate = confident(margins, bank.margin_threshold)
    for k in range(bank.num_classes):
        selected = gate & (labels == k)
        if not selected.any():
            continue
        mean_feature = z_bar[selected].mean(dim=0)
        row = bank.momentum * bank.centroids[k] + (1 - bank.momentum) * mean_feature
        norm = row.norm()
        if norm == 0:
            continue
        updated.centroids[k] = row / norm
    return updated


def similarities(bank: PrototypeBank, features: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity of every feature row to every centroid (N x K).

    Raises:
        ZeroNormError: If a feature row has zero norm.
    """
    _check_dim(bank, features)
    check_finite_rows(features, f"{bank.owner_role.value} prototype features")
    z_bar = normalise_rows(features, f"{bank.owner_role.value} prototype features")
    centroids = bank.centroids.to(features.dtype)
    centroids = centroids / centroids.norm(dim=1, keepdim=True)
    return z_bar @ centroids.T


def prototype_view(bank: PrototypeBank, features: torch.Tensor) -> ProbBatch:
    """Softmax over classes of temperature-scaled cosine similarity."""
    probs = torch.softmax(bank.temperature * similarities(bank, features), dim=1)
    return ProbBatch(probs, View.Prototype, bank.owner_role)


def export_centroids(bank: PrototypeBank, path: Path) -> None:
    """Writes the centroids as CSV, one row per class."""
    frame = pd.DataFrame(
        bank.centroids.cpu().numpy(),
        columns=[f"d{i}" for i in range(bank.feature_dim)],
    )
    frame.insert(0, "class", range(bank.num_classes))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    logging.info(f"Exported {bank.owner_role.value} centroids to {path}")


@dataclass
class DualBanks:
    fm: PrototypeBank
    sm: PrototypeBank

    def copy(self) -> "DualBanks":
        return DualBanks(self.fm.copy(), self.sm.copy())
