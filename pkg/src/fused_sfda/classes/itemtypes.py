from enum import Enum, IntEnum


class BranchRole(Enum):
    FM = "fm"
    SM = "sm"


class View(Enum):
    Linear = "linear"
    Prototype = "prototype"


class Phase(Enum):
    Pretrain = "pretrain"
    Adapt = "adapt"


class Stage(IntEnum):
    Agreement = 0
    Arbitration = 1


class PseudoLabelVariant(Enum):
    FUSED = "fused"
    FM_PROTO = "fm_proto"
    FM_LINEAR = "fm_linear"
    SM_PROTO = "sm_proto"
    SM_LINEAR = "sm_linear"


class SplitScheme(Enum):
    LOSO = "loso"
    LOGO = "logo"


class Provenance(Enum):
    SYNTHETIC = "synthetic"
    IMPORTED = "imported"


class LRSchedule(Enum):
    INVERSE_POWER = "inverse_power"
    EXPONENTIAL = "exponential"


class MIEstimator(Enum):
    BATCH = "batch"
    DATASET = "dataset"


class PrototypeCadence(Enum):
    BATCH = "batch"
    EPOCH = "epoch"


class BranchMode(Enum):
    DUAL = "dual"
    FM_ONLY = "fm_only"
    SM_ONLY = "sm_only"


class DType(Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"


class GridPreset(Enum):
    NONE = "none"
    COMPONENTS = "components"
    PSEUDO_LABELS = "pseudo_labels"
    BRANCHES = "branches"
    ALL = "all"
    SENSITIVITY = "sensitivity"
