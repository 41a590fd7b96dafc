"""
Self-checks run by ``fused verify``: loss oracles, finite-difference gradient
checks, brute-force refinement equivalence and data-kit invariants.
"""

import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from fused_sfda.adaptation.gradcheck import RELATIVE_FLOOR, check_gradients
from fused_sfda.adaptation.objectives import (
    div_loss,
    entropy,
    joint_distribution,
    kd_loss,
    masked_ce,
    mi_loss,
    source_ce,
    total_fm_loss,
    total_sm_loss,
)
from fused_sfda.adaptation.pseudo_label import consensus_mask, refine_labels
from fused_sfda.classes.helper_classes import (
    FMEncoderConfig,
    LossWeights,
    ModelSpec,
    SMEncoderConfig,
)
from fused_sfda.classes.itemtypes import BranchRole, DType, Phase, Stage, View
from fused_sfda.data.cohort import CohortDataset
from fused_sfda.data.dataset_io import decode_dataset, encode_dataset
from fused_sfda.data.preprocess import channel_select, resample, window
from fused_sfda.model.branch import (
    Branch,
    ProbBatch,
    build_branch,
    encode,
    linear_view,
    set_phase_freezing,
)

FLOOR = 1e-8

TINY_MODEL = ModelSpec(
    fm=FMEncoderConfig(hidden=4, layers=2, kernel_length=3, pooled_length=2, dropout=0.0, feature_dim=5),
    sm=SMEncoderConfig(
        temporal_filters=2,
        depth_multiplier=1,
        separable_filters=2,
        kernel_length=5,
        separable_kernel=3,
        pooled_length=2,
        dropout=0.0,
        feature_dim=6,
    ),
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _random_probs(rng: np.random.Generator, n: int, k: int) -> torch.Tensor:
    logits = rng.normal(scale=2.0, size=(n, k))
    return torch.softmax(torch.from_numpy(logits), dim=1)


def loss_oracles(seed: int = 0) -> tuple[bool, str]:
    """MI entropy identity, KL, diversity and masked CE against scalar loops."""
    rng = np.random.default_rng(seed)
    worst = {"mi": 0.0, "kd": 0.0, "div": 0.0, "ce": 0.0}
    for _ in range(100):
        n, k = int(rng.integers(1, 24)), int(rng.integers(2, 7))
        p_fm = ProbBatch(_random_probs(rng, n, k), View.Linear, BranchRole.FM)
        p_sm = ProbBatch(_random_probs(rng, n, k), View.Linear, BranchRole.SM)

        joint = joint_distribution(p_fm, p_sm)
        identity = -(entropy(joint.marginal_fm) + entropy(joint.marginal_sm) - entropy(joint.P))
        worst["mi"] = max(worst["mi"], abs(float(mi_loss(joint) - identity)))

        a, b = p_fm.values.tolist(), p_sm.values.tolist()
        kd = sum(
            sum(t * (math.log(t + FLOOR) - math.log(s + FLOOR)) for t, s in zip(ra, rb))
            for ra, rb in zip(a, b)
        ) / n
        worst["kd"] = max(worst["kd"], abs(float(kd_loss(p_fm, p_sm)) - kd))

        mean = [sum(row[j] for row in b) / n for j in range(k)]
        div = sum(m * math.log(m + FLOOR) for m in mean)
        worst["div"] = max(worst["div"], abs(float(div_loss(p_sm)) - div))

        labels = rng.integers(0, k, size=n)
        mask = rng.random(n) < 0.5
        picked = [-math.log(b[i][labels[i]] + FLOOR) for i in range(n) if mask[i]]
        ce = sum(picked) / len(picked) if picked else 0.0
        ours = masked_ce(p_sm, torch.from_numpy(labels), torch.from_numpy(mask))
        worst["ce"] = max(worst["ce"], abs(float(ours) - ce))

    limits = {"mi": 1e-9, "kd": 1e-10, "div": 1e-10, "ce": 1e-12}
    passed = all(worst[key] < limits[key] for key in limits)
    return passed, ", ".join(f"{key} {worst[key]:.1e}" for key in worst)


def _tiny_branches(seed: int) -> tuple[Branch, Branch, torch.Tensor]:
    torch.manual_seed(seed)
    fm = build_branch(BranchRole.FM, 3, 16, 3, TINY_MODEL, DType.FLOAT64)
    sm = build_branch(BranchRole.SM, 3, 16, 3, TINY_MODEL, DType.FLOAT64)
    probe = torch.randn(6, 3, 16, dtype=torch.float64)
    return fm, sm, probe


def gradient_checks(seed: int = 0) -> tuple[bool, str]:
    """source_ce, L^FM and the composite L^SM on both tiny branches."""
    fm, sm, probe = _tiny_branches(seed)
    labels = torch.tensor([0, 1, 2, 0, 1, 2])
    errors: dict[str, float] = {}

    def ce_selector(branch: Branch, batch: torch.Tensor) -> torch.Tensor:
        return source_ce(linear_view(branch, encode(branch, batch)), labels)

    set_phase_freezing(fm, sm, Phase.Pretrain)
    errors["source_ce.fm"] = check_gradients(fm, ce_selector, probe)
    errors["source_ce.sm"] = check_gradients(sm, ce_selector, probe)

    set_phase_freezing(fm, sm, Phase.Adapt)
    with torch.no_grad():
        sm.eval()
        p_sm_fixed = linear_view(sm, encode(sm, probe)).detach()
        fm.eval()
        teacher = linear_view(fm, encode(fm, probe)).detach()

    def fm_selector(branch: Branch, batch: torch.Tensor) -> torch.Tensor:
        p = linear_view(branch, encode(branch, batch))
        return total_fm_loss(joint_distribution(p, p_sm_fixed))

    mask = torch.tensor([True, False, True, True, False, True])

    def sm_selector(branch: Branch, batch: torch.Tensor) -> torch.Tensor:
        p = linear_view(branch, encode(branch, batch))
        return total_sm_loss(
            masked_ce(p, labels, mask), kd_loss(teacher, p), div_loss(p), LossWeights()
        )

    errors["L_FM"] = check_gradients(fm, fm_selector, probe)
    errors["L_SM"] = check_gradients(sm, sm_selector, probe)
    passed = all(value < 1e-4 for value in errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    return passed, f"{detail} (relative error, absolute below {RELATIVE_FLOOR:g})"


def brute_force_refine(
    fm_label: int, sm_label: int, sims_fm: list[float], sims_sm: list[float]
) -> tuple[int, Stage]:
    if fm_label == sm_label:
        return fm_label, Stage.Agreement
    best_k, best = 0, -math.inf
    for k in range(len(sims_fm)):
        for value in (sims_fm[k], sims_sm[k]):
            if value > best:
                best_k, best = k, value
    return best_k, Stage.Arbitration


def refinement_oracle(seed: int = 0, cases: int = 10_000) -> tuple[bool, str]:
    """Refinement and consensus against a scan over branches x classes, ties included."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    done = 0
    while done < cases:
        n, k = min(500, cases - done), int(rng.integers(2, 6))
        # coarse grid so that ties are common
        sims_fm = rng.integers(-4, 5, size=(n, k)) / 4
        sims_sm = rng.integers(-4, 5, size=(n, k)) / 4
        fm_lin = rng.integers(0, k, size=n)
        sm_lin = rng.integers(0, k, size=n)
        fm_proto = rng.integers(0, k, size=n)
        refined, stage_used = refine_labels(
            torch.from_numpy(fm_lin),
            torch.from_numpy(sm_lin),
            torch.from_numpy(sims_fm),
            torch.from_numpy(sims_sm),
        )
        mask = consensus_mask(torch.from_numpy(fm_lin), torch.from_numpy(fm_proto))
        for i in range(n):
            label, stage = brute_force_refine(
                int(fm_lin[i]), int(sm_lin[i]), list(sims_fm[i]), list(sims_sm[i])
            )
            if (
                int(refined[i]) != label
                or int(stage_used[i]) != stage
                or bool(mask[i]) != (fm_lin[i] == fm_proto[i])
            ):
                mismatches += 1
        done += n
    return mismatches == 0, f"{cases} cases, {mismatches} mismatches"


def data_kit_checks() -> tuple[bool, str]:
    """Bitwise save/load, windows per trial, FFT peak after resampling, channel selection."""
    failures = []
    rng = np.random.default_rng(0)
    cohort = CohortDataset(
        rng.standard_normal((6, 4, 32)).astype(np.float32),
        np.array([0, 1, 0, 1, 0, 1]),
        np.array([0, 0, 1, 1, 2, 2]),
        128.0,
        2,
    )
    raw = encode_dataset(cohort)
    if encode_dataset(decode_dataset(raw)) != raw:
        failures.append("round-trip")
    with tempfile.TemporaryDirectory() as tmp:
        truncated = Path(tmp) / "cut.fusd"
        truncated.write_bytes(raw[:-3])
        try:
            decode_dataset(truncated.read_bytes())
            failures.append("truncation accepted")
        except ValueError:
            pass

    trials = CohortDataset(np.zeros((3, 2, 4 * 250)), np.arange(3) % 2, np.zeros(3), 250.0, 2)
    if len(window(trials, 2.0, 2.0)) != 6:
        failures.append("window count")

    t = np.arange(4 * 250) / 250.0
    sine = CohortDataset(
        np.sin(2 * np.pi * 10 * t)[None, None, :], np.array([0]), np.array([0]), 250.0, 2
    )
    resampled = resample(sine, 200.0)
    spectrum = np.abs(np.fft.rfft(resampled.samples[0, 0]))
    freqs = np.fft.rfftfreq(resampled.length, d=1 / resampled.sampling_rate)
    if abs(freqs[int(np.argmax(spectrum))] - 10.0) > freqs[1]:
        failures.append("resample peak")

    wide = CohortDataset(np.zeros((2, 64, 8)), np.array([0, 1]), np.array([0, 0]), 128.0, 2)
    if channel_select(wide, list(range(9))).channels != 9:
        failures.append("channel select")

    return not failures, "ok" if not failures else ", ".join(failures)


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "loss oracles": loss_oracles,
    "gradients": gradient_checks,
    "refinement oracle": refinement_oracle,
    "data kit": data_kit_checks,
}


def run_self_checks() -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        started = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        result = CheckResult(name, passed, detail, time.perf_counter() - started)
        level = logging.INFO if passed else logging.ERROR
        logging.log(level, f"Self-check {name}: {'pass' if passed else 'FAIL'} ({detail})")
        results.append(result)
    return results
