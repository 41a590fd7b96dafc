"""
Phase 1 source pretraining and Phase 2 calibrate-then-distill adaptation.

Within every target batch the order is fixed: forward both branches, EMA
update of both prototype banks, pseudo-label refinement, FM classifier step on
the MI loss, SM encoder step on the distillation objective.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from fused_sfda.adaptation.objectives import (
    div_loss,
    entropy,
    joint_distribution,
    kd_loss,
    masked_ce,
    source_ce,
    total_fm_loss,
    total_sm_loss,
)
from fused_sfda.adaptation.prototypes import (
    DualBanks,
    PrototypeBank,
    ema_update,
    init_from_classifier,
    margin,
    prototype_view,
)
from fused_sfda.adaptation.pseudo_label import bundle_from_outputs, consensus_mask
from fused_sfda.classes.exceptions import FreezeViolationError, NonFiniteLossError
from fused_sfda.classes.helper_classes import AdaptationConfig, EpochRecord, RunReport
from fused_sfda.classes.itemtypes import (
    BranchMode,
    LRSchedule,
    MIEstimator,
    Phase,
    PrototypeCadence,
    Stage,
    View,
)
from fused_sfda.data.cohort import CohortDataset
from fused_sfda.model.branch import (
    Branch,
    ProbBatch,
    encode,
    linear_view,
    predicted_label,
    set_phase_freezing,
    torch_dtype,
)
from fused_sfda.model.checkpoint import state_hash

STAGES = ("forward", "ema", "refine", "fm_step", "sm_step")

StageHook = Callable[[str], None]


def lr_at(
    step: int, total_steps: int, cfg: AdaptationConfig, lr0: Optional[float] = None
) -> float:
    """
    Learning rate at ``step`` of ``total_steps``.

    inverse_power: lr0 * (1 + gamma * p) ** -power
    exponential:   lr0 * power ** (gamma * p)

    Args:
        step (int): Steps taken so far, 0 <= step <= total_steps.
        total_steps (int): Steps in the whole run.
        cfg (AdaptationConfig): Supplies the schedule, gamma and power.
        lr0 (Optional[float], optional): Base rate; ``cfg.lr0`` when absent.

    Returns:
        float: The rate for this step.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"Step {step} outside [0, {total_steps}]")
    base = cfg.lr0 if lr0 is None else lr0
    progress = step / total_steps if total_steps > 0 else 0.0
    if cfg.lr_schedule == LRSchedule.INVERSE_POWER:
        return base * (1 + cfg.lr_gamma * progress) ** (-cfg.decay_power)
    return base * cfg.decay_power ** (cfg.lr_gamma * progress)


def index_batches(
    n: int, batch_size: int, generator: torch.Generator
) -> list[torch.Tensor]:
    """
    Shuffled index batches. A trailing single-sample batch is merged into the
    previous one, since BatchNorm cannot train on one row.
    """
    order = torch.randperm(n, generator=generator)
    batches = list(order.split(batch_size))
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = torch.cat([batches[-1], tail])
    return batches


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _step(
    optimizer: torch.optim.Optimizer,
    loss: torch.Tensor,
    name: str,
    epoch: int,
    batch: int,
) -> None:
    if not torch.isfinite(loss.detach()):
        raise NonFiniteLossError(name, epoch, batch)
    if not loss.requires_grad:
        return
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()


def predict(branch: Branch, samples: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Linear-view probabilities for every row, in eval mode. Mode is restored."""
    was_training = branch.training
    branch.eval()
    with torch.no_grad():
        parts = [
            linear_view(branch, encode(branch, part)).values
            for part in samples.split(chunk)
        ]
    branch.train(was_training)
    if not parts:
        return torch.zeros(0, branch.num_classes, dtype=samples.dtype)
    return torch.cat(parts)


def evaluate_accuracy(branch: Branch, dataset: CohortDataset) -> float:
    """
    Fraction of rows whose linear-view label matches the stored label.

    Raises:
        ValueError: On an empty dataset.
    """
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    x, y = dataset.tensors(branch.classifier.weight.dtype)
    probs = predict(branch, x)
    labels = predicted_label(ProbBatch(probs, View.Linear, branch.role))
    return float((labels == y).double().mean())


def mean_prediction_entropy(branch: Branch, samples: torch.Tensor) -> float:
    """Entropy of the dataset-mean linear-view prediction (eval mode)."""
    probs = predict(branch, samples)
    if len(probs) == 0:
        return 0.0
    return float(entropy(probs.mean(dim=0)))


# =====================
# Phase 1
# =====================


def pretrain_source(
    fm: Branch, sm: Branch, source: CohortDataset, cfg: AdaptationConfig
) -> DualBanks:
    """
    Trains each branch end to end on the labelled source cohort with plain
    cross-entropy, then seeds both prototype banks from the final classifiers.

    Args:
        fm (Branch): The FM branch, trained in place.
        sm (Branch): The SM branch, trained in place.
        source (CohortDataset): Labelled source subjects.
        cfg (AdaptationConfig): ``pretrain_epochs``, ``pretrain_lr0``,
            ``batch_size`` and the bank settings are used.

    Returns:
        DualBanks: Banks initialised from the trained classifiers.

    Raises:
        ValueError: If the source set is empty.
    """
    if len(source) == 0:
        raise ValueError("Source set is empty")
    set_phase_freezing(fm, sm, Phase.Pretrain)
    x, y = source.tensors(torch_dtype(cfg.dtype))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for branch in (fm, sm):
            generator = torch.Generator().manual_seed(cfg.seed)
            optimizer = torch.optim.Adam(branch.parameters(), lr=cfg.pretrain_lr0)
            branch.train()
            steps_per_epoch = len(index_batches(len(source), cfg.batch_size, generator))
            generator.manual_seed(cfg.seed)
            total = cfg.pretrain_epochs * steps_per_epoch
            step = 0
            for epoch in range(cfg.pretrain_epochs):
                epoch_loss = 0.0
                batches = index_batches(len(source), cfg.batch_size, generator)
                for b, idx in enumerate(batches):
                    _set_lr(optimizer, lr_at(step, total, cfg, cfg.pretrain_lr0))
                    p = linear_view(branch, encode(branch, x[idx]))
                    loss = source_ce(p, y[idx])
                    _step(optimizer, loss, "L_src", epoch, b)
                    epoch_loss += float(loss.detach())
                    step += 1
                logging.debug(
                    f"Pretrain {branch.role.value} epoch {epoch}: "
                    f"L_src={epoch_loss / len(batches):.4f}"
                )
            branch.eval()
            logging.info(
                f"Pretrained {branch.role.value} for {cfg.pretrain_epochs} epochs "
                f"on {len(source)} source trials"
            )

    return DualBanks(
        init_from_classifier(fm, cfg.momentum, cfg.margin_threshold, cfg.temperature),
        init_from_classifier(sm, cfg.momentum, cfg.margin_threshold, cfg.temperature),
    )


# =====================
# Phase 2
# =====================


@dataclass
class _PendingEMA:
    """Per-epoch buffer of (features, labels, margins) for one bank."""

    features: list[torch.Tensor] = field(default_factory=list)
    labels: list[torch.Tensor] = field(default_factory=list)
    margins: list[torch.Tensor] = field(default_factory=list)

    def add(self, features: torch.Tensor, p: ProbBatch) -> None:
        self.features.append(features.detach())
        self.labels.append(predicted_label(p))
        self.margins.append(margin(p))

    def flush(self, bank: PrototypeBank) -> PrototypeBank:
        if not self.features:
            return bank
        updated = ema_update(
            bank,
            torch.cat(self.features),
            torch.cat(self.labels),
            torch.cat(self.margins),
        )
        self.features.clear()
        self.labels.clear()
        self.margins.clear()
        return updated


def _refresh_bank(
    bank: PrototypeBank,
    pending: _PendingEMA,
    features: torch.Tensor,
    p: ProbBatch,
    cadence: PrototypeCadence,
) -> PrototypeBank:
    if cadence == PrototypeCadence.EPOCH:
        pending.add(features, p)
        return bank
    return ema_update(bank, features.detach(), predicted_label(p), margin(p))


@dataclass
class _EpochStats:
    """Running sums for one epoch's diagnostics."""

    losses: dict[str, list[float]] = field(default_factory=dict)
    rows: int = 0
    masked: int = 0
    agreed: int = 0
    correct_labels: int = 0
    empty_mask_batches: int = 0
    fm_max_sims: list[torch.Tensor] = field(default_factory=list)
    sm_max_sims: list[torch.Tensor] = field(default_factory=list)

    def add_loss(self, name: str, value: Optional[torch.Tensor]) -> None:
        if value is not None:
            self.losses.setdefault(name, []).append(float(value.detach()))

    def mean_loss(self, name: str) -> Optional[float]:
        values = self.losses.get(name)
        return sum(values) / len(values) if values else None

    @staticmethod
    def _summary(parts: list[torch.Tensor]) -> tuple[Optional[float], Optional[float]]:
        if not parts:
            return None, None
        values = torch.cat(parts).double()
        std = float(values.std(unbiased=False)) if len(values) > 1 else 0.0
        return float(values.mean()), std

    def record(self, epoch: int, lr: float, prediction_entropy: float) -> EpochRecord:
        rows = max(self.rows, 1)
        fm_mean, fm_std = self._summary(self.fm_max_sims)
        sm_mean, sm_std = self._summary(self.sm_max_sims)
        return EpochRecord(
            epoch=epoch,
            lr=lr,
            l_mi=self.mean_loss("l_mi"),
            l_ce=self.mean_loss("l_ce"),
            l_kd=self.mean_loss("l_kd"),
            l_div=self.mean_loss("l_div"),
            l_fm=self.mean_loss("l_fm"),
            l_sm=self.mean_loss("l_sm"),
            mask_rate=self.masked / rows,
            agreement_rate=self.agreed / rows,
            arbitration_rate=(self.rows - self.agreed) / rows,
            pseudo_label_accuracy=self.correct_labels / rows if self.rows else None,
            empty_mask_batches=self.empty_mask_batches,
            fm_max_sim_mean=fm_mean,
            fm_max_sim_std=fm_std,
            sm_max_sim_mean=sm_mean,
            sm_max_sim_std=sm_std,
            prediction_entropy=prediction_entropy,
        )


def _encode_all(branch: Branch, samples: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    with torch.no_grad():
        parts = [encode(branch, part) for part in samples.split(chunk)]
    return torch.cat(parts)


def _check_frozen(before: dict[str, str], groups: dict[str, torch.nn.Module]) -> None:
    for name, digest in before.items():
        if state_hash(groups[name]) != digest:
            raise FreezeViolationError(name)


def _log_epoch(config_name: str, record: EpochRecord) -> None:
    parts = [f"[{config_name}] epoch {record.epoch}"]
    for name in ("l_fm", "l_mi", "l_ce", "l_kd", "l_div"):
        value = getattr(record, name)
        if value is not None:
            parts.append(f"{name}={value:.4f}")
    parts.append(f"mask={record.mask_rate:.3f}")
    parts.append(f"agree={record.agreement_rate:.3f}")
    logging.info(" ".join(parts))
    if record.fm_max_sim_mean is not None and record.sm_max_sim_mean is not None:
        logging.debug(
            f"[{config_name}] max cosine fm={record.fm_max_sim_mean:.3f}"
            f"+-{record.fm_max_sim_std:.3f} sm={record.sm_max_sim_mean:.3f}"
            f"+-{record.sm_max_sim_std:.3f}"
        )


def adapt_target(
    fm: Branch,
    sm: Branch,
    banks: DualBanks,
    target: CohortDataset,
    cfg: AdaptationConfig,
    config_name: str = "full",
    on_stage: Optional[StageHook] = None,
) -> RunReport:
    """
    Adapts both branches to the unlabelled target pool. ``banks`` is updated
    in place with the refined prototypes. Stored target labels only feed the
    reported accuracies and pseudo-label diagnostics, unless
    ``oracle_pseudo_labels`` is set.

    Args:
        fm (Branch): Pretrained FM branch.
        sm (Branch): Pretrained SM branch.
        banks (DualBanks): Banks from :func:`pretrain_source`.
        target (CohortDataset): The target pool (adaptation and evaluation).
        cfg (AdaptationConfig): Hyperparameters and toggles.
        config_name (str, optional): Label for logs and the report.
        on_stage (Optional[StageHook], optional): Called with each stage name
            of :data:`STAGES` as the batch reaches it.

    Returns:
        RunReport: Per-epoch diagnostics, accuracies and parameter hashes.

    Raises:
        ValueError: If the target set is empty.
        NonFiniteLossError: If a loss turns NaN or inf.
        FreezeViolationError: If a frozen group changed during the run.
    """
    if len(target) == 0:
        raise ValueError("Target set is empty")
    if cfg.branch_mode != BranchMode.DUAL:
        return adapt_single_branch(fm, sm, banks, target, cfg, config_name, on_stage)

    def stage(name: str) -> None:
        if on_stage is not None:
            on_stage(name)

    x, y = target.tensors(torch_dtype(cfg.dtype))
    if cfg.sm_bias_offset:
        with torch.no_grad():
            sm.classifier.bias[0] += cfg.sm_bias_offset
    source_only = evaluate_accuracy(sm, target)
    source_only_fm = evaluate_accuracy(fm, target)

    set_phase_freezing(fm, sm, Phase.Adapt)
    fm.eval()
    sm.train(cfg.any_sm_loss)
    frozen_groups: dict[str, torch.nn.Module] = {
        "fm.encoder": fm.encoder,
        "sm.classifier": sm.classifier,
    }
    frozen = {name: state_hash(module) for name, module in frozen_groups.items()}

    fm_lr0 = cfg.fm_lr0 or cfg.lr0
    sm_lr0 = cfg.sm_lr0 or cfg.lr0
    fm_opt = torch.optim.Adam(fm.classifier.parameters(), lr=fm_lr0)
    sm_opt = torch.optim.Adam(sm.encoder.parameters(), lr=sm_lr0)
    weights = cfg.loss_weights
    features_fm = _encode_all(fm, x)

    epochs: list[EpochRecord] = []
    epoch_times: list[float] = []
    pending_fm, pending_sm = _PendingEMA(), _PendingEMA()
    sm_reference: Optional[ProbBatch] = None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        generator = torch.Generator().manual_seed(cfg.seed)
        steps_per_epoch = len(index_batches(len(target), cfg.batch_size, generator))
        generator.manual_seed(cfg.seed)
        total_steps = cfg.epochs * steps_per_epoch
        step = 0
        lr = lr_at(0, total_steps, cfg, sm_lr0)

        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            stats = _EpochStats()
            if (
                cfg.use_mi
                and cfg.mi_estimator == MIEstimator.DATASET
                and epoch % cfg.mi_reestimate_every == 0
            ):
                sm_reference = ProbBatch(predict(sm, x), View.Linear, sm.role)

            for b, idx in enumerate(index_batches(len(target), cfg.batch_size, generator)):
                lr = lr_at(step, total_steps, cfg, sm_lr0)
                _set_lr(fm_opt, lr_at(step, total_steps, cfg, fm_lr0))
                _set_lr(sm_opt, lr)

                stage("forward")
                z_fm = features_fm[idx]
                p_fm = linear_view(fm, z_fm)
                z_sm = encode(sm, x[idx])
                p_sm = linear_view(sm, z_sm)

                stage("ema")
                banks.sm = _refresh_bank(
                    banks.sm, pending_sm, z_sm, p_sm, cfg.prototype_cadence
                )
                if not cfg.freeze_fm_prototypes:
                    banks.fm = _refresh_bank(
                        banks.fm, pending_fm, z_fm, p_fm, cfg.prototype_cadence
                    )

                stage("refine")
                bundle = bundle_from_outputs(
                    p_fm.values.detach(),
                    p_sm.values.detach(),
                    z_fm,
                    z_sm.detach(),
                    banks,
                )
                mask = (
                    bundle.mask
                    if cfg.use_consensus_mask
                    else torch.ones_like(bundle.mask)
                )
                labels = (
                    y[idx]
                    if cfg.oracle_pseudo_labels
                    else bundle.labels_for(cfg.pseudo_label_variant)
                )

                stage("fm_step")
                l_fm: Optional[torch.Tensor] = None
                if cfg.use_mi:
                    if cfg.mi_estimator == MIEstimator.DATASET and sm_reference is not None:
                        joint = joint_distribution(linear_view(fm, features_fm), sm_reference)
                    else:
                        joint = joint_distribution(p_fm, p_sm.detach())
                    l_fm = total_fm_loss(joint)
                    _step(fm_opt, l_fm, "L_FM", epoch, b)

                stage("sm_step")
                l_ce = l_kd = l_div = l_sm = None
                if cfg.any_sm_loss:
                    teacher = linear_view(fm, z_fm)
                    zero = p_sm.values.sum() * 0
                    l_ce = masked_ce(p_sm, labels, mask) if cfg.use_ce else None
                    l_kd = (
                        kd_loss(teacher, p_sm, cfg.kd_detach_teacher)
                        if cfg.use_kd
                        else None
                    )
                    l_div = div_loss(p_sm) if cfg.use_div else None
                    l_sm = total_sm_loss(
                        l_ce if l_ce is not None else zero,
                        l_kd if l_kd is not None else zero,
                        l_div if l_div is not None else zero,
                        weights,
                    )
                    if cfg.use_kd and not cfg.kd_detach_teacher:
                        fm_opt.zero_grad(set_to_none=True)
                        _step(sm_opt, l_sm, "L_SM", epoch, b)
                        fm_opt.step()
                    else:
                        _step(sm_opt, l_sm, "L_SM", epoch, b)

                rows = len(idx)
                stats.rows += rows
                stats.masked += int(mask.sum())
                stats.agreed += int((bundle.stage_used == Stage.Agreement).sum())
                stats.correct_labels += int((labels == y[idx]).sum())
                if cfg.use_consensus_mask and not bool(bundle.mask.any()):
                    stats.empty_mask_batches += 1
                stats.fm_max_sims.append(bundle.sims_fm.max(dim=1).values)
                stats.sm_max_sims.append(bundle.sims_sm.max(dim=1).values)
                for name, value in (
                    ("l_mi", l_fm),
                    ("l_fm", l_fm),
                    ("l_ce", l_ce),
                    ("l_kd", l_kd),
                    ("l_div", l_div),
                    ("l_sm", l_sm),
                ):
                    stats.add_loss(name, value)
                step += 1

            if cfg.prototype_cadence == PrototypeCadence.EPOCH:
                banks.sm = pending_sm.flush(banks.sm)
                if not cfg.freeze_fm_prototypes:
                    banks.fm = pending_fm.flush(banks.fm)

            record = stats.record(epoch, lr, mean_prediction_entropy(sm, x))
            epochs.append(record)
            epoch_times.append(time.perf_counter() - started)
            _log_epoch(config_name, record)

    _check_frozen(frozen, frozen_groups)
    sm.eval()
    return RunReport(
        config_name=config_name,
        config_hash=cfg.config_hash(),
        branch_mode=cfg.branch_mode,
        epochs=epochs,
        source_only_accuracy=source_only,
        source_only_fm_accuracy=source_only_fm,
        final_accuracy=evaluate_accuracy(sm, target),
        final_fm_accuracy=evaluate_accuracy(fm, target),
        final_prediction_entropy=epochs[-1].prediction_entropy,
        checkpoint_hashes={"fm": state_hash(fm), "sm": state_hash(sm)},
        frozen_hashes=frozen,
        epoch_times_s=epoch_times,
    )


def adapt_single_branch(
    fm: Branch,
    sm: Branch,
    banks: DualBanks,
    target: CohortDataset,
    cfg: AdaptationConfig,
    config_name: str = "single",
    on_stage: Optional[StageHook] = None,
) -> RunReport:
    """
    Self-training of one branch without its partner: the branch's own dual
    views give the consensus mask, its own linear predictions the
    pseudo-labels. Only masked CE and diversity apply; the encoder trains and
    the classifier stays frozen. The other branch is left untouched.
    """
    if cfg.branch_mode == BranchMode.DUAL:
        raise ValueError("adapt_single_branch needs branch_mode fm_only or sm_only")
    if len(target) == 0:
        raise ValueError("Target set is empty")

    def stage(name: str) -> None:
        if on_stage is not None:
            on_stage(name)

    adapted = fm if cfg.branch_mode == BranchMode.FM_ONLY else sm
    idle = sm if adapted is fm else fm
    x, y = target.tensors(torch_dtype(cfg.dtype))
    if cfg.sm_bias_offset and adapted is sm:
        with torch.no_grad():
            sm.classifier.bias[0] += cfg.sm_bias_offset
    source_only = evaluate_accuracy(adapted, target)
    source_only_fm = evaluate_accuracy(fm, target)

    idle.encoder_trainable = False
    idle.classifier_trainable = False
    idle.eval()
    adapted.encoder_trainable = True
    adapted.classifier_trainable = False
    trains = cfg.use_ce or cfg.use_div
    adapted.train(trains)
    prefix = adapted.role.value
    frozen_groups: dict[str, torch.nn.Module] = {
        f"{idle.role.value}.encoder": idle.encoder,
        f"{idle.role.value}.classifier": idle.classifier,
        f"{prefix}.classifier": adapted.classifier,
    }
    frozen = {name: state_hash(module) for name, module in frozen_groups.items()}

    lr0 = (cfg.fm_lr0 if adapted is fm else cfg.sm_lr0) or cfg.lr0
    optimizer = torch.optim.Adam(adapted.encoder.parameters(), lr=lr0)
    epochs: list[EpochRecord] = []
    epoch_times: list[float] = []
    pending = _PendingEMA()

    def own_bank() -> PrototypeBank:
        return banks.fm if adapted is fm else banks.sm

    def set_own_bank(bank: PrototypeBank) -> None:
        if adapted is fm:
            banks.fm = bank
        else:
            banks.sm = bank

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        generator = torch.Generator().manual_seed(cfg.seed)
        steps_per_epoch = len(index_batches(len(target), cfg.batch_size, generator))
        generator.manual_seed(cfg.seed)
        total_steps = cfg.epochs * steps_per_epoch
        step = 0
        lr = lr_at(0, total_steps, cfg, lr0)

        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            stats = _EpochStats()
            for b, idx in enumerate(index_batches(len(target), cfg.batch_size, generator)):
                lr = lr_at(step, total_steps, cfg, lr0)
                _set_lr(optimizer, lr)

                stage("forward")
                z = encode(adapted, x[idx])
                p = linear_view(adapted, z)

                stage("ema")
                frozen_bank = adapted is fm and cfg.freeze_fm_prototypes
                if not frozen_bank:
                    set_own_bank(
                        _refresh_bank(own_bank(), pending, z, p, cfg.prototype_cadence)
                    )

                stage("refine")
                linear_labels = predicted_label(p)
                proto_labels = predicted_label(prototype_view(own_bank(), z.detach()))
                own_mask = consensus_mask(linear_labels, proto_labels)
                mask = own_mask if cfg.use_consensus_mask else torch.ones_like(own_mask)
                labels = y[idx] if cfg.oracle_pseudo_labels else linear_labels

                stage(f"{prefix}_step")
                l_ce = masked_ce(p, labels, mask) if cfg.use_ce else None
                l_div = div_loss(p) if cfg.use_div else None
                loss: Optional[torch.Tensor] = None
                if trains:
                    zero = p.values.sum() * 0
                    loss = (l_ce if l_ce is not None else zero) + cfg.lambda_div * (
                        l_div if l_div is not None else zero
                    )
                    _step(optimizer, loss, f"L_{prefix.upper()}", epoch, b)

                stats.rows += len(idx)
                stats.masked += int(mask.sum())
                stats.agreed += len(idx)  # no partner branch to disagree with
                stats.correct_labels += int((labels == y[idx]).sum())
                if cfg.use_consensus_mask and not bool(own_mask.any()):
                    stats.empty_mask_batches += 1
                stats.add_loss("l_ce", l_ce)
                stats.add_loss("l_div", l_div)
                stats.add_loss(f"l_{prefix}", loss)
                step += 1

            if cfg.prototype_cadence == PrototypeCadence.EPOCH and not (
                adapted is fm and cfg.freeze_fm_prototypes
            ):
                set_own_bank(pending.flush(own_bank()))

            record = stats.record(epoch, lr, mean_prediction_entropy(adapted, x))
            epochs.append(record)
            epoch_times.append(time.perf_counter() - started)
            _log_epoch(config_name, record)

    _check_frozen(frozen, frozen_groups)
    adapted.eval()
    return RunReport(
        config_name=config_name,
        config_hash=cfg.config_hash(),
        branch_mode=cfg.branch_mode,
        epochs=epochs,
        source_only_accuracy=source_only,
        source_only_fm_accuracy=source_only_fm,
        final_accuracy=evaluate_accuracy(adapted, target),
        final_fm_accuracy=evaluate_accuracy(fm, target),
        final_prediction_entropy=epochs[-1].prediction_entropy,
        checkpoint_hashes={"fm": state_hash(fm), "sm": state_hash(sm)},
        frozen_hashes=frozen,
        epoch_times_s=epoch_times,
    )
