"""
Central finite-difference verification of autograd gradients.
"""

import logging
from typing import Callable

import torch

from fused_sfda.classes.exceptions import GradientCheckError
from fused_sfda.model.branch import Branch

LossSelector = Callable[[Branch, torch.Tensor], torch.Tensor]

# denominators below this are clamped, so near-zero gradients are judged absolutely
RELATIVE_FLOOR = 1e-3


def gradient_error(exact: float, numeric: float) -> float:
    """Relative error, or absolute error once both sides fall below RELATIVE_FLOOR."""
    return abs(exact - numeric) / max(abs(exact), abs(numeric), RELATIVE_FLOOR)


def check_gradients(
    branch: Branch,
    loss_selector: LossSelector,
    probe_batch: torch.Tensor,
    step: float = 1e-5,
) -> float:
    """
    Compares the analytic gradient of ``loss_selector(branch, probe_batch)``
    with central differences on every trainable scalar of the branch. The
    branch runs in eval mode so dropout and batch statistics stay fixed.

    Args:
        branch (Branch): A float64 branch. Its trainability flags decide which
            parameters are probed.
        loss_selector (LossSelector): Builds the scalar loss from the branch
            and the probe batch. Must be deterministic.
        probe_batch (torch.Tensor): N x C x T float64 inputs.
        step (float, optional): Finite-difference step. Defaults to 1e-5.

    Returns:
        float: Max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
            over all probed scalars; 0.0 when nothing is trainable. This is a
            relative error for gradients above 1e-3 and an absolute one below,
            so a 1e-4 threshold bounds both.

    Raises:
        ValueError: If a trainable parameter is not float64.
        GradientCheckError: If an analytic gradient is NaN or inf.
    """
    named = branch.trainable_parameters()
    if not named:
        return 0.0
    for name, param in named:
        if param.dtype != torch.float64:
            raise ValueError(f"Gradient checks need float64; {name} is {param.dtype}")

    was_training = branch.training
    branch.eval()
    worst = 0.0
    try:
        params = [param for _, param in named]
        loss = loss_selector(branch, probe_batch)
        analytic = torch.autograd.grad(loss, params, allow_unused=True)
        with torch.no_grad():
            for (name, param), grad in zip(named, analytic):
                if grad is None:
                    grad = torch.zeros_like(param)
                if not torch.isfinite(grad).all():
                    raise GradientCheckError(name)
                flat = param.view(-1)
                grad_flat = grad.reshape(-1)
                for i in range(flat.numel()):
                    original = float(flat[i])
                    flat[i] = original + step
                    up = float(loss_selector(branch, probe_batch))
                    flat[i] = original - step
                    down = float(loss_selector(branch, probe_batch))
                    flat[i] = original
                    numeric = (up - down) / (2 * step)
                    exact = float(grad_flat[i])
                    worst = max(worst, gradient_error(exact, numeric))
    finally:
        branch.train(was_training)

    logging.debug(
        f"Gradient check on {branch.role.value}: {len(named)} tensors, "
        f"max error {worst:.3e} (relative, absolute below {RELATIVE_FLOOR:g})"
    )
    return worst
