import copy

import pytest
import torch

from fused_sfda.adaptation.engine import (
    STAGES,
    adapt_target,
    evaluate_accuracy,
    index_batches,
    lr_at,
    pretrain_source,
)
from fused_sfda.adaptation.gradcheck import RELATIVE_FLOOR, check_gradients, gradient_error
from fused_sfda.adaptation.objectives import masked_ce
from fused_sfda.classes.helper_classes import AdaptationConfig, ModelSpec, ShiftSpec
from fused_sfda.classes.itemtypes import BranchMode, BranchRole, LRSchedule, Phase
from fused_sfda.data.cohort import generate_cohort
from fused_sfda.experiment.results import report_text
from fused_sfda.model.branch import build_branch, encode, linear_view, set_phase_freezing
from fused_sfda.model.checkpoint import state_hash
from fused_sfda.verification.self_checks import TINY_MODEL, gradient_checks

CFG = AdaptationConfig(epochs=2, batch_size=8, pretrain_epochs=3, lr0=1e-3)


def pretrained(cfg=CFG):
    cohort = generate_cohort(3, 4, 3, 16, 3, ShiftSpec(noise_sigma=0.3, seed=5))
    torch.manual_seed(0)
    fm = build_branch(BranchRole.FM, 3, 16, 3, TINY_MODEL, cfg.dtype)
    sm = build_branch(BranchRole.SM, 3, 16, 3, TINY_MODEL, cfg.dtype)
    banks = pretrain_source(fm, sm, cohort.subset([1, 2]), cfg)
    return fm, sm, banks, cohort.subset([0])


def test_lr_inverse_power():
    assert lr_at(0, 100, CFG) == pytest.approx(1e-3)
    assert lr_at(100, 100, CFG) == pytest.approx(1e-3 * 11**-0.75)
    assert lr_at(50, 100, CFG, lr0=2e-3) == pytest.approx(2e-3 * 6**-0.75)


def test_lr_exponential():
    cfg = CFG.with_overrides({"lr_schedule": LRSchedule.EXPONENTIAL.value})
    assert lr_at(100, 100, cfg) == pytest.approx(1e-3 * 0.75**10)


def test_lr_step_out_of_range():
    with pytest.raises(ValueError):
        lr_at(101, 100, CFG)


def test_index_batches_merge_single_tail():
    batches = index_batches(9, 4, torch.Generator().manual_seed(0))
    assert [len(b) for b in batches] == [4, 5]
    assert sorted(torch.cat(batches).tolist()) == list(range(9))


def test_pretrain_banks_are_unit_norm():
    _, _, banks, _ = pretrained()
    for bank in (banks.fm, banks.sm):
        assert torch.allclose(bank.centroids.norm(dim=1), torch.ones(3), atol=1e-5)


def test_stage_order_per_batch():
    fm, sm, banks, target = pretrained()
    seen: list[str] = []
    adapt_target(fm, sm, banks, target, CFG.with_overrides({"epochs": 1}), on_stage=seen.append)
    assert len(seen) % len(STAGES) == 0
    for start in range(0, len(seen), len(STAGES)):
        assert tuple(seen[start : start + len(STAGES)]) == STAGES


def test_frozen_groups_unchanged():
    fm, sm, banks, target = pretrained()
    fm_encoder, sm_classifier = state_hash(fm.encoder), state_hash(sm.classifier)
    fm_classifier = state_hash(fm.classifier)
    report = adapt_target(fm, sm, banks, target, CFG)

    assert state_hash(fm.encoder) == fm_encoder == report.frozen_hashes["fm.encoder"]
    assert state_hash(sm.classifier) == sm_classifier == report.frozen_hashes["sm.classifier"]
    assert state_hash(fm.classifier) != fm_classifier
    assert len(report.epochs) == CFG.epochs


def test_identical_seeds_give_identical_reports():
    fm, sm, banks, target = pretrained()
    first = adapt_target(copy.deepcopy(fm), copy.deepcopy(sm), banks.copy(), target, CFG)
    second = adapt_target(copy.deepcopy(fm), copy.deepcopy(sm), banks.copy(), target, CFG)
    assert report_text(first) == report_text(second)
    assert first.model_dump(exclude={"epoch_times_s"}) == second.model_dump(
        exclude={"epoch_times_s"}
    )


def test_report_diagnostics_in_range():
    fm, sm, banks, target = pretrained()
    report = adapt_target(fm, sm, banks, target, CFG)
    record = report.epochs[-1]
    assert 0 <= record.mask_rate <= 1
    assert record.agreement_rate + record.arbitration_rate == pytest.approx(1.0)
    assert record.l_mi is not None and record.l_sm is not None
    assert report.source_only_accuracy == evaluate_accuracy(
        pretrained()[1], target
    )


def test_everything_off_leaves_sm_unchanged():
    fm, sm, banks, target = pretrained()
    cfg = CFG.with_overrides(
        {"use_mi": False, "use_ce": False, "use_kd": False, "use_div": False}
    )
    before = state_hash(sm)
    report = adapt_target(fm, sm, banks, target, cfg)
    assert state_hash(sm) == before
    assert report.final_accuracy == report.source_only_accuracy


def test_sm_only_leaves_fm_untouched():
    fm, sm, banks, target = pretrained()
    fm_before = state_hash(fm)
    sm_classifier = state_hash(sm.classifier)
    cfg = CFG.with_overrides({"branch_mode": BranchMode.SM_ONLY.value})
    seen: list[str] = []
    report = adapt_target(fm, sm, banks, target, cfg, "sm_only", on_stage=seen.append)
    assert state_hash(fm) == fm_before
    assert state_hash(sm.classifier) == sm_classifier
    assert report.branch_mode == BranchMode.SM_ONLY
    assert "sm_step" in seen and "fm_step" not in seen


def test_fm_only_adapts_fm_encoder():
    fm, sm, banks, target = pretrained()
    fm_encoder, sm_before = state_hash(fm.encoder), state_hash(sm)
    cfg = CFG.with_overrides({"branch_mode": BranchMode.FM_ONLY.value})
    adapt_target(fm, sm, banks, target, cfg, "fm_only")
    assert state_hash(fm.encoder) != fm_encoder
    assert state_hash(sm) == sm_before


def test_empty_target_raises():
    fm, sm, banks, target = pretrained()
    with pytest.raises(ValueError):
        adapt_target(fm, sm, banks, target.subset([]), CFG)


def test_epoch_cadence_and_dataset_mi_run():
    fm, sm, banks, target = pretrained()
    cfg = CFG.with_overrides({"prototype_cadence": "epoch", "mi_estimator": "dataset"})
    report = adapt_target(fm, sm, banks, target, cfg)
    assert len(report.epochs) == 2


def test_gradcheck_needs_float64():
    torch.manual_seed(0)
    branch = build_branch(BranchRole.SM, 3, 16, 3, TINY_MODEL)
    with pytest.raises(ValueError):
        check_gradients(branch, lambda b, x: b(x).sum(), torch.randn(2, 3, 16))


def test_gradients_match_finite_differences():
    passed, detail = gradient_checks(seed=0)
    assert passed, detail


def test_gradient_error_is_relative_above_floor_and_absolute_below():
    assert gradient_error(2.0, 2.0 + 2e-5) == pytest.approx(1e-5, rel=1e-6)
    assert gradient_error(-1.0, -1.0) == 0.0
    assert RELATIVE_FLOOR == 1e-3
    assert gradient_error(1e-7, 3e-7) == pytest.approx(2e-7 / RELATIVE_FLOOR)


def test_zero_pretrain_epochs_leave_branches_untouched():
    torch.manual_seed(0)
    fm = build_branch(BranchRole.FM, 3, 16, 3, TINY_MODEL)
    sm = build_branch(BranchRole.SM, 3, 16, 3, TINY_MODEL)
    before = state_hash(fm), state_hash(sm)
    source = generate_cohort(2, 4, 3, 16, 3, ShiftSpec(seed=5))
    banks = pretrain_source(fm, sm, source, CFG.with_overrides({"pretrain_epochs": 0}))
    assert (state_hash(fm), state_hash(sm)) == before
    assert torch.allclose(
        banks.sm.centroids,
        torch.nn.functional.normalize(sm.classifier.weight.detach(), dim=1),
    )


def test_pretraining_is_reproducible():
    fm_a, sm_a, _, _ = pretrained()
    fm_b, sm_b, _, _ = pretrained()
    assert state_hash(fm_a) == state_hash(fm_b)
    assert state_hash(sm_a) == state_hash(sm_b)


def test_pretraining_fits_a_separable_source():
    quiet = ShiftSpec(
        mixing_severity=0.0,
        spectral_shift=0.0,
        frequency_jitter=0.0,
        phase_jitter=0.0,
        amplitude_jitter=0.0,
        noise_sigma=0.3,
        seed=1,
    )
    source = generate_cohort(2, 20, 4, 128, 2, quiet)
    cfg = AdaptationConfig(pretrain_epochs=30, batch_size=16)
    torch.manual_seed(0)
    fm = build_branch(BranchRole.FM, 4, 128, 2, ModelSpec())
    sm = build_branch(BranchRole.SM, 4, 128, 2, ModelSpec())
    pretrain_source(fm, sm, source, cfg)
    assert evaluate_accuracy(fm, source) > 0.95
    assert evaluate_accuracy(sm, source) > 0.95


def supervised_finetune(fm, sm, target, cfg):
    """Plain SM-encoder fine-tuning on true target labels, batched like adaptation."""
    x, y = target.tensors(torch.float32)
    set_phase_freezing(fm, sm, Phase.Adapt)
    sm.train()
    optimizer = torch.optim.Adam(sm.encoder.parameters(), lr=cfg.lr0)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        generator = torch.Generator().manual_seed(cfg.seed)
        total = cfg.epochs * len(index_batches(len(target), cfg.batch_size, generator))
        generator.manual_seed(cfg.seed)
        step = 0
        for _ in range(cfg.epochs):
            for idx in index_batches(len(target), cfg.batch_size, generator):
                for group in optimizer.param_groups:
                    group["lr"] = lr_at(step, total, cfg)
                p = linear_view(sm, encode(sm, x[idx]))
                loss = masked_ce(p, y[idx], torch.ones(len(idx), dtype=torch.bool))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
    return evaluate_accuracy(sm, target)


def test_oracle_labels_match_supervised_finetuning():
    cfg = CFG.with_overrides(
        {
            "epochs": 6,
            "oracle_pseudo_labels": True,
            "use_consensus_mask": False,
            "use_mi": False,
            "use_kd": False,
            "use_div": False,
        }
    )
    fm, sm, banks, target = pretrained()
    baseline = supervised_finetune(copy.deepcopy(fm), copy.deepcopy(sm), target, cfg)
    report = adapt_target(fm, sm, banks, target, cfg, "oracle")

    assert all(record.pseudo_label_accuracy == 1.0 for record in report.epochs)
    assert all(record.mask_rate == 1.0 for record in report.epochs)
    assert report.final_accuracy >= baseline - 0.02
