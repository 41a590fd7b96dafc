"""
Consensus filtering and two-stage pseudo-label refinement across both
branches' dual views.
"""

from dataclasses import dataclass

import torch

from fused_sfda.adaptation.prototypes import DualBanks, prototype_view, similarities
from fused_sfda.classes.exceptions import ShapeMismatchError
from fused_sfda.classes.itemtypes import PseudoLabelVariant, Stage
from fused_sfda.model.branch import Branch, encode, linear_view, lowest_argmax, predicted_label


@dataclass
class RefinementBundle:
    labels_fm_linear: torch.Tensor
    labels_fm_proto: torch.Tensor
    labels_sm_linear: torch.Tensor
    labels_sm_proto: torch.Tensor
    sims_fm: torch.Tensor
    sims_sm: torch.Tensor
    mask: torch.Tensor
    refined: torch.Tensor
    stage_used: torch.Tensor

    @property
    def mask_rate(self) -> float:
        if len(self.mask) == 0:
            return 0.0
        return float(self.mask.float().mean())

    @property
    def agreement_rate(self) -> float:
        if len(self.stage_used) == 0:
            return 0.0
        return float((self.stage_used == Stage.Agreement).float().mean())

    def labels_for(self, variant: PseudoLabelVariant) -> torch.Tensor:
        """The pseudo-labels a run uses, by variant."""
        return {
            PseudoLabelVariant.FUSED: self.refined,
            PseudoLabelVariant.FM_PROTO: self.labels_fm_proto,
            PseudoLabelVariant.FM_LINEAR: self.labels_fm_linear,
            PseudoLabelVariant.SM_PROTO: self.labels_sm_proto,
            PseudoLabelVariant.SM_LINEAR: self.labels_sm_linear,
        }[variant]


def consensus_mask(
    fm_linear_labels: torch.Tensor, fm_proto_labels: torch.Tensor
) -> torch.Tensor:
    """1 where the FM's linear and prototype views pick the same class."""
    if fm_linear_labels.shape != fm_proto_labels.shape:
        raise ShapeMismatchError(
            "consensus labels",
            tuple(fm_linear_labels.shape),
            tuple(fm_proto_labels.shape),
        )
    return fm_linear_labels == fm_proto_labels


def refine_labels(
    fm_linear: torch.Tensor,
    sm_linear: torch.Tensor,
    sims_fm: torch.Tensor,
    sims_sm: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Stage 1 keeps the shared label when both linear views agree. Stage 2 picks
    the class with the highest cosine similarity in either branch, ties going
    to the lowest class index.

    Returns:
        tuple[torch.Tensor, torch.Tensor]: Refined labels and the stage used
            per sample (``Stage`` values).

    Raises:
        ShapeMismatchError: If lengths or similarity shapes disagree.
    """
    n = len(fm_linear)
    if len(sm_linear) != n:
        raise ShapeMismatchError("linear labels", (n,), (len(sm_linear),))
    if sims_fm.shape != sims_sm.shape or sims_fm.ndim != 2 or sims_fm.shape[0] != n:
        raise ShapeMismatchError(
            "similarity matrices", tuple(sims_fm.shape), tuple(sims_sm.shape)
        )
    agree = fm_linear == sm_linear
    arbitrated = lowest_argmax(torch.maximum(sims_fm, sims_sm))
    refined = torch.where(agree, fm_linear, arbitrated)
    stage_used = torch.where(
        agree,
        torch.full_like(refined, int(Stage.Agreement)),
        torch.full_like(refined, int(Stage.Arbitration)),
    )
    return refined, stage_used


def bundle_from_outputs(
    probs_fm: torch.Tensor,
    probs_sm: torch.Tensor,
    features_fm: torch.Tensor,
    features_sm: torch.Tensor,
    banks: DualBanks,
) -> RefinementBundle:
    """
    Fills a bundle from already computed (detached) linear-view
    probabilities and features of both branches.
    """
    sims_fm = similarities(banks.fm, features_fm)
    sims_sm = similarities(banks.sm, features_sm)
    labels_fm_linear = lowest_argmax(probs_fm)
    labels_sm_linear = lowest_argmax(probs_sm)
    # argmax of softmax(tau * sims) is argmax of sims for tau > 0
    labels_fm_proto = predicted_label(prototype_view(banks.fm, features_fm))
    labels_sm_proto = predicted_label(prototype_view(banks.sm, features_sm))
    mask = consensus_mask(labels_fm_linear, labels_fm_proto)
    refined, stage_used = refine_labels(
        labels_fm_linear, labels_sm_linear, sims_fm, sims_sm
    )
    return RefinementBundle(
        labels_fm_linear=labels_fm_linear,
        labels_fm_proto=labels_fm_proto,
        labels_sm_linear=labels_sm_linear,
        labels_sm_proto=labels_sm_proto,
        sims_fm=sims_fm,
        sims_sm=sims_sm,
        mask=mask,
        refined=refined,
        stage_used=stage_used,
    )


def build_bundle(
    fm: Branch, sm: Branch, banks: DualBanks, batch: torch.Tensor
) -> RefinementBundle:
    """
    Runs both encoders and all four views on a batch and derives the mask and
    refined labels. Uses whatever train/eval mode the branches are in.
    """
    with torch.no_grad():
        z_fm = encode(fm, batch)
        z_sm = encode(sm, batch)
        p_fm = linear_view(fm, z_fm)
        p_sm = linear_view(sm, z_sm)
        return bundle_from_outputs(
            p_fm.values, p_sm.values, z_fm, z_sm, banks
        )
