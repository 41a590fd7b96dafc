"""
The encoder/classifier arm shared by both roles, the linear view, and the
parameter-freezing contract.
"""

import logging
from dataclasses import dataclass
from typing import Union

import torch
from torch import nn

from fused_sfda.classes.exceptions import NonFiniteError, ShapeMismatchError
from fused_sfda.classes.helper_classes import (
    FMEncoderConfig,
    ModelSpec,
    SMEncoderConfig,
)
from fused_sfda.classes.itemtypes import BranchRole, DType, Phase, View
from fused_sfda.model.encoders import FoundationEncoder, SpecialistEncoder

EncoderConfig = Union[FMEncoderConfig, SMEncoderConfig]


def torch_dtype(dtype: DType) -> torch.dtype:
    return torch.float64 if dtype == DType.FLOAT64 else torch.float32


def _row_tolerance(values: torch.Tensor) -> float:
    return 1e-6 if values.dtype == torch.float64 else 1e-5


@dataclass
class ProbBatch:
    """
    Row-stochastic N x K matrix for one view of one branch. Validated on
    construction; the tensor may carry autograd history.
    """

    values: torch.Tensor
    view: View
    branch_role: BranchRole

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ShapeMismatchError(
                "probability batch", (-1, -1), tuple(self.values.shape)
            )
        detached = self.values.detach()
        sums = detached.sum(dim=1)
        bad_rows = (
            ~torch.isfinite(detached).all(dim=1)
            | (detached < 0).any(dim=1)
            | ((sums - 1).abs() > _row_tolerance(detached))
        )
        if bad_rows.any():
            row = int(torch.nonzero(bad_rows)[0, 0])
            raise NonFiniteError("probability batch", row)

    @property
    def num_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.values.shape[1])

    def detach(self) -> "ProbBatch":
        return ProbBatch(self.values.detach(), self.view, self.branch_role)


class Branch(nn.Module):
    """
    One model arm: encoder F producing D-dim features and a single linear
    classifier G mapping them to K logits.
    """

    def __init__(
        self,
        role: BranchRole,
        encoder: nn.Module,
        encoder_config: EncoderConfig,
        channels: int,
        samples: int,
        num_classes: int,
    ) -> None:
        super().__init__()
        if num_classes < 2:
            raise ValueError("A branch needs at least two classes")
        self.role = role
        self.encoder = encoder
        self.encoder_config = encoder_config
        self.channels = channels
        self.samples = samples
        self.feature_dim = encoder_config.feature_dim
        self.num_classes = num_classes
        self.classifier = nn.Linear(self.feature_dim, num_classes)

    @property
    def encoder_trainable(self) -> bool:
        return all(p.requires_grad for p in self.encoder.parameters())

    @encoder_trainable.setter
    def encoder_trainable(self, flag: bool) -> None:
        self.encoder.requires_grad_(flag)

    @property
    def classifier_trainable(self) -> bool:
        return all(p.requires_grad for p in self.classifier.parameters())

    @classifier_trainable.setter
    def classifier_trainable(self, flag: bool) -> None:
        self.classifier.requires_grad_(flag)

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(encode(self, x))


def build_branch(
    role: BranchRole,
    channels: int,
    samples: int,
    num_classes: int,
    model: ModelSpec,
    dtype: DType = DType.FLOAT32,
) -> Branch:
    """
    Creates a freshly initialised branch for the given role. Weight init uses
    the global torch RNG, so seed it first for reproducible branches.

    Args:
        role (BranchRole): FM gets the wide encoder, SM the compact one.
        channels (int): C of the input windows.
        samples (int): T of the input windows.
        num_classes (int): K.
        model (ModelSpec): Encoder sizes for both roles.
        dtype (DType, optional): Parameter precision. Defaults to float32.

    Returns:
        Branch: The new branch with every parameter group trainable.
    """
    encoder: nn.Module
    config: EncoderConfig
    if role == BranchRole.FM:
        config = model.fm
        encoder = FoundationEncoder(channels, samples, model.fm)
    else:
        config = model.sm
        encoder = SpecialistEncoder(channels, samples, model.sm)
    branch = Branch(role, encoder, config, channels, samples, num_classes)
    return branch.to(torch_dtype(dtype))


def encode(branch: Branch, batch: torch.Tensor) -> torch.Tensor:
    """
    Runs the branch encoder on an N x C x T batch.

    Raises:
        ShapeMismatchError: If the batch is not 3-D or C, T differ from the branch's.
    """
    expected = (branch.channels, branch.samples)
    if batch.ndim != 3 or tuple(batch.shape[1:]) != expected:
        raise ShapeMismatchError(
            f"{branch.role.value} encoder input",
            (-1, *expected),
            tuple(batch.shape),
        )
    return branch.encoder(batch)


def check_finite_rows(features: torch.Tensor, what: str) -> None:
    finite = torch.isfinite(features.detach()).all(dim=1)
    if not finite.all():
        raise NonFiniteError(what, int(torch.nonzero(~finite)[0, 0]))


def linear_view(branch: Branch, features: torch.Tensor) -> ProbBatch:
    """
    Applies the classifier and a row softmax.

    Raises:
        ShapeMismatchError: If the feature dimension differs from the branch's D.
        NonFiniteError: If any feature row holds NaN/inf; names the row.
    """
    if features.ndim != 2 or features.shape[1] != branch.feature_dim:
        raise ShapeMismatchError(
            f"{branch.role.value} features", (-1, branch.feature_dim), features.shape
        )
    check_finite_rows(features, f"{branch.role.value} features")
    probs = torch.softmax(branch.classifier(features), dim=1)
    return ProbBatch(probs, View.Linear, branch.role)


def lowest_argmax(values: torch.Tensor) -> torch.Tensor:
    """Row argmax that resolves ties to the lowest class index."""
    num_classes = values.shape[1]
    best = values.max(dim=1, keepdim=True).values
    index = torch.arange(num_classes, device=values.device).expand_as(values)
    return torch.where(values == best, index, num_classes).min(dim=1).values


def predicted_label(p: ProbBatch) -> torch.Tensor:
    return lowest_argmax(p.values.detach())


def set_phase_freezing(fm: Branch, sm: Branch, phase: Phase) -> None:
    """
    Pretrain: everything trainable. Adapt: only the FM classifier and the SM
    encoder receive updates.
    """
    if phase == Phase.Pretrain:
        for branch in (fm, sm):
            branch.encoder_trainable = True
            branch.classifier_trainable = True
    else:
        fm.encoder_trainable = False
        fm.classifier_trainable = True
        sm.encoder_trainable = True
        sm.classifier_trainable = False
    logging.debug(f"Freezing set for phase {phase.value}")
