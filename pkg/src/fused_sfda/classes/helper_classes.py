import hashlib
import json
import math
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fused_sfda.classes.itemtypes import (
    BranchMode,
    DType,
    GridPreset,
    LRSchedule,
    MIEstimator,
    PrototypeCadence,
    PseudoLabelVariant,
    SplitScheme,
)


def _none_string(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("none", ""):
        return None
    return value


def _comma_list(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def _optional_list(value: Any) -> Any:
    return _comma_list(_none_string(value))


def stable_hash(payload: dict[str, Any], length: int = 16) -> str:
    """
    Hashes a JSON-compatible dict independent of key order.

    Args:
        payload (dict[str, Any]): Any JSON-serialisable mapping.
        length (int, optional): Number of hex characters to keep. Defaults to 16.

    Returns:
        str: The truncated sha256 hex digest.
    """
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:length]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# =====================
# Data kit
# =====================


class ShiftSpec(StrictModel):
    """
    Inter-subject shift and trial variability of the synthetic cohort.
    Frequency quantities are in units of the log-spacing between
    neighbouring class frequencies.
    """

    mixing_severity: float = Field(default=0.5, ge=0)
    spectral_shift: float = Field(default=1.6, ge=0)
    frequency_jitter: float = Field(default=0.12, ge=0)
    phase_jitter: float = Field(default=math.pi, ge=0, le=math.pi)
    amplitude_jitter: float = Field(default=0.1, ge=0)
    noise_sigma: float = Field(default=1.0, ge=0)
    seed: int = 0


class DataSpec(StrictModel):
    """
    Where the cohort comes from: either a dataset file or the synthetic
    generator settings, plus an optional preprocessing pipeline.
    """

    dataset_path: Optional[str] = None
    n_subjects: int = Field(default=8, ge=2)
    trials_per_class: int = Field(default=24, ge=1)
    channels: int = Field(default=8, ge=1)
    samples: int = Field(default=256, ge=1)
    num_classes: int = Field(default=4, ge=2)
    sampling_rate: float = Field(default=128.0, gt=0)
    mixing_severity: float = Field(default=0.5, ge=0)
    spectral_shift: float = Field(default=1.6, ge=0)
    frequency_jitter: float = Field(default=0.12, ge=0)
    phase_jitter: float = Field(default=math.pi, ge=0, le=math.pi)
    amplitude_jitter: float = Field(default=0.1, ge=0)
    noise_sigma: float = Field(default=1.0, ge=0)
    seed: int = 0
    preprocess: list[str] = Field(default_factory=list)

    none_to_absent = field_validator("dataset_path", mode="before")(_none_string)
    split_lists = field_validator("preprocess", mode="before")(_comma_list)

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(
            mixing_severity=self.mixing_severity,
            spectral_shift=self.spectral_shift,
            frequency_jitter=self.frequency_jitter,
            phase_jitter=self.phase_jitter,
            amplitude_jitter=self.amplitude_jitter,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )


class SplitSpec(StrictModel):
    scheme: SplitScheme = SplitScheme.LOSO
    group_size: int = Field(default=10, ge=1)


class Fold(StrictModel):
    index: int
    target_subjects: list[int]
    source_subjects: list[int]


class SplitPlan(StrictModel):
    scheme: SplitScheme
    folds: list[Fold]

    @model_validator(mode="after")
    def check_partition(self) -> "SplitPlan":
        """Every fold must split the same subject set into disjoint halves."""
        cohort: Optional[set[int]] = None
        for fold in self.folds:
            target, source = set(fold.target_subjects), set(fold.source_subjects)
            if target & source:
                raise ValueError(f"Fold {fold.index} has subjects on both sides")
            union = target | source
            if cohort is None:
                cohort = union
            elif union != cohort:
                raise ValueError(f"Fold {fold.index} does not cover the cohort")
        return self


# =====================
# Branches
# =====================


class SMEncoderConfig(StrictModel):
    """Compact temporal-then-spatial convolution stack (specialist)."""

    temporal_filters: int = Field(default=8, ge=1)
    depth_multiplier: int = Field(default=2, ge=1)
    separable_filters: int = Field(default=16, ge=1)
    kernel_length: int = Field(default=33, ge=1)
    separable_kernel: int = Field(default=15, ge=1)
    pooled_length: int = Field(default=8, ge=1)
    dropout: float = Field(default=0.25, ge=0, lt=1)
    feature_dim: int = Field(default=128, ge=1)


class FMEncoderConfig(StrictModel):
    """Wider multi-layer temporal encoder with a Linear-ELU-BatchNorm head."""

    hidden: int = Field(default=64, ge=1)
    layers: int = Field(default=3, ge=1)
    kernel_length: int = Field(default=7, ge=1)
    pooled_length: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.1, ge=0, lt=1)
    feature_dim: int = Field(default=200, ge=1)


class ModelSpec(StrictModel):
    fm: FMEncoderConfig = Field(default_factory=FMEncoderConfig)
    sm: SMEncoderConfig = Field(default_factory=SMEncoderConfig)


# =====================
# Adaptation
# =====================


class LossWeights(StrictModel):
    lambda_kd: float = Field(default=1.0, ge=0, allow_inf_nan=False)
    lambda_div: float = Field(default=1.0, ge=0, allow_inf_nan=False)


class AdaptationConfig(StrictModel):
    """
    Every hyperparameter, toggle and seed of one run. Defaults follow the
    published setup: 50 epochs, batch 32, Adam at 1e-4 with power 0.75 decay,
    mu=0.9, eta=0.6, tau=10, both loss weights 1.0.
    """

    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr0: float = Field(default=1e-4, gt=0)
    decay_power: float = Field(default=0.75, ge=0)
    lr_gamma: float = Field(default=10.0, ge=0)
    lr_schedule: LRSchedule = LRSchedule.INVERSE_POWER
    fm_lr0: Optional[float] = Field(default=None, gt=0)
    sm_lr0: Optional[float] = Field(default=None, gt=0)

    momentum: float = Field(default=0.9, gt=0, lt=1)
    margin_threshold: float = Field(default=0.6, ge=0, lt=1)
    temperature: float = Field(default=10.0, gt=0)

    lambda_kd: float = Field(default=1.0, ge=0, allow_inf_nan=False)
    lambda_div: float = Field(default=1.0, ge=0, allow_inf_nan=False)

    seed: int = 0

    use_consensus_mask: bool = True
    use_mi: bool = True
    use_kd: bool = True
    use_ce: bool = True
    use_div: bool = True
    pseudo_label_variant: PseudoLabelVariant = PseudoLabelVariant.FUSED

    kd_detach_teacher: bool = True
    mi_estimator: MIEstimator = MIEstimator.BATCH
    mi_reestimate_every: int = Field(default=1, ge=1)
    prototype_cadence: PrototypeCadence = PrototypeCadence.BATCH
    freeze_fm_prototypes: bool = False
    branch_mode: BranchMode = BranchMode.DUAL
    oracle_pseudo_labels: bool = False
    sm_bias_offset: float = 0.0

    pretrain_epochs: int = Field(default=50, ge=0)
    pretrain_lr0: float = Field(default=1e-3, gt=0)

    dtype: DType = DType.FLOAT32
    threads: int = Field(default=1, ge=1)

    none_to_absent = field_validator("fm_lr0", "sm_lr0", mode="before")(_none_string)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_kd=self.lambda_kd, lambda_div=self.lambda_div)

    @property
    def any_sm_loss(self) -> bool:
        return self.use_ce or self.use_kd or self.use_div

    def config_hash(self) -> str:
        return stable_hash(self.model_dump(mode="json"))

    def with_overrides(self, overrides: dict[str, Any]) -> "AdaptationConfig":
        """Returns a validated copy with some keys replaced."""
        return AdaptationConfig.model_validate(
            {**self.model_dump(mode="json"), **overrides}
        )


class EpochRecord(StrictModel):
    epoch: int
    lr: float
    l_mi: Optional[float] = None
    l_ce: Optional[float] = None
    l_kd: Optional[float] = None
    l_div: Optional[float] = None
    l_fm: Optional[float] = None
    l_sm: Optional[float] = None
    mask_rate: float = Field(ge=0, le=1)
    agreement_rate: float = Field(ge=0, le=1)
    arbitration_rate: float = Field(ge=0, le=1)
    pseudo_label_accuracy: Optional[float] = None
    empty_mask_batches: int = 0
    fm_max_sim_mean: Optional[float] = None
    fm_max_sim_std: Optional[float] = None
    sm_max_sim_mean: Optional[float] = None
    sm_max_sim_std: Optional[float] = None
    prediction_entropy: float


class RunReport(StrictModel):
    config_name: str
    config_hash: str
    branch_mode: BranchMode
    epochs: list[EpochRecord] = Field(default_factory=list)
    source_only_accuracy: float = Field(ge=0, le=1)
    source_only_fm_accuracy: Optional[float] = Field(default=None, ge=0, le=1)
    final_accuracy: float = Field(ge=0, le=1)
    final_fm_accuracy: Optional[float] = Field(default=None, ge=0, le=1)
    final_prediction_entropy: float
    checkpoint_hashes: dict[str, str] = Field(default_factory=dict)
    frozen_hashes: dict[str, str] = Field(default_factory=dict)
    epoch_times_s: list[float] = Field(default_factory=list)

    @property
    def mask_rate_final(self) -> float:
        return self.epochs[-1].mask_rate if self.epochs else 0.0

    @property
    def mean_epoch_time(self) -> float:
        if not self.epoch_times_s:
            return 0.0
        return sum(self.epoch_times_s) / len(self.epoch_times_s)


# =====================
# Experiments
# =====================


class ExperimentSection(StrictModel):
    name: str = "experiment"
    seeds: list[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    jobs: int = Field(default=1, ge=1)
    grid_preset: GridPreset = GridPreset.NONE
    folds: Optional[list[int]] = None

    split_fold_list = field_validator("folds", mode="before")(_optional_list)
    split_lists = field_validator("seeds", mode="before")(_comma_list)


class ExperimentSpec(StrictModel):
    data: DataSpec = Field(default_factory=DataSpec)
    split: SplitSpec = Field(default_factory=SplitSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    adaptation: AdaptationConfig = Field(default_factory=AdaptationConfig)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    grid: dict[str, dict[str, Any]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_grid(self) -> "ExperimentSpec":
        """Every grid entry has to resolve to a valid AdaptationConfig."""
        for name, overrides in self.grid.items():
            self.adaptation.with_overrides(overrides)
            if not name.isidentifier():
                raise ValueError(f"Grid entry name '{name}' is not an identifier")
        return self


class ResultRow(StrictModel):
    fold: int
    seed: int
    config_name: str
    config_hash: str
    accuracy: float = Field(ge=0, le=1)
    mask_rate_final: Optional[float] = None
    epoch_time_s: float = 0.0


class FoldFailure(StrictModel):
    fold: int
    seed: int
    error: str
