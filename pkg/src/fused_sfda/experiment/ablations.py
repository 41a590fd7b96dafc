"""
Named override sets for the component, pseudo-label and branch ablations
and the hyperparameter sensitivity sweeps, and resolution of an experiment's grid into concrete configs.
"""

from typing import Any

from fused_sfda.classes.helper_classes import AdaptationConfig, ExperimentSpec
from fused_sfda.classes.itemtypes import GridPreset

Overrides = dict[str, Any]

FULL: dict[str, Overrides] = {"full": {}}

COMPONENT_GRID: dict[str, Overrides] = {
    **FULL,
    "no_mask": {"use_consensus_mask": False},
    "no_ce": {"use_ce": False},
    "no_mi": {"use_mi": False},
    "no_kd": {"use_kd": False},
    "no_div": {"use_div": False},
}

PSEUDO_LABEL_GRID: dict[str, Overrides] = {
    **FULL,
    "fm_proto": {"pseudo_label_variant": "fm_proto"},
    "fm_linear": {"pseudo_label_variant": "fm_linear"},
    "sm_proto": {"pseudo_label_variant": "sm_proto"},
    "sm_linear": {"pseudo_label_variant": "sm_linear"},
}

BRANCH_GRID: dict[str, Overrides] = {
    **FULL,
    "fm_only": {"branch_mode": "fm_only"},
    "sm_only": {"branch_mode": "sm_only"},
}

# one hyperparameter at a time, the others at their defaults
SENSITIVITY_SWEEPS: dict[str, tuple[str, list[float]]] = {
    "eta": ("margin_threshold", [0.2, 0.4, 0.6, 0.8]),
    "tau": ("temperature", [1.0, 5.0, 10.0, 20.0, 50.0]),
    "lambda_kd": ("lambda_kd", [0.1, 0.5, 1.0, 2.0]),
    "lambda_div": ("lambda_div", [0.1, 0.5, 1.0, 2.0]),
}


def sensitivity_grid() -> dict[str, Overrides]:
    """Entries named like ``tau_20``; the default value of each sweep is included."""
    grid: dict[str, Overrides] = dict(FULL)
    for prefix, (key, values) in SENSITIVITY_SWEEPS.items():
        for value in values:
            grid[f"{prefix}_{value:g}"] = {key: value}
    return grid


def preset_grid(preset: GridPreset) -> dict[str, Overrides]:
    if preset == GridPreset.COMPONENTS:
        return dict(COMPONENT_GRID)
    if preset == GridPreset.PSEUDO_LABELS:
        return dict(PSEUDO_LABEL_GRID)
    if preset == GridPreset.BRANCHES:
        return dict(BRANCH_GRID)
    if preset == GridPreset.ALL:
        return {**COMPONENT_GRID, **PSEUDO_LABEL_GRID, **BRANCH_GRID}
    if preset == GridPreset.SENSITIVITY:
        return sensitivity_grid()
    return {}


def resolve_grid(spec: ExperimentSpec) -> list[tuple[str, AdaptationConfig]]:
    """
    Preset entries first, then the experiment's own grid (which wins on a name
    clash). An empty grid means the single base configuration, named "full".
    """
    entries = preset_grid(spec.experiment.grid_preset)
    entries.update(spec.grid)
    if not entries:
        entries = dict(FULL)
    return [(name, spec.adaptation.with_overrides(o)) for name, o in entries.items()]
