"""
Cross-subject split plans (leave-one-subject-out and leave-one-group-out) and
their JSON manifests.
"""

import logging
from pathlib import Path

from fused_sfda.classes.exceptions import SplitError
from fused_sfda.classes.helper_classes import Fold, SplitPlan, SplitSpec
from fused_sfda.classes.itemtypes import SplitScheme
from fused_sfda.data.cohort import CohortDataset


def _plan(scheme: SplitScheme, subjects: list[int], groups: list[list[int]]) -> SplitPlan:
    folds = [
        Fold(
            index=i,
            target_subjects=group,
            source_subjects=[s for s in subjects if s not in group],
        )
        for i, group in enumerate(groups)
    ]
    return SplitPlan(scheme=scheme, folds=folds)


def loso_splits(cohort: CohortDataset) -> SplitPlan:
    """One fold per subject, in ascending subject id order."""
    subjects = cohort.subject_ids
    if len(subjects) < 2:
        raise SplitError(f"LOSO needs at least 2 subjects, cohort has {len(subjects)}")
    return _plan(SplitScheme.LOSO, subjects, [[s] for s in subjects])


def logo_splits(cohort: CohortDataset, group_size: int) -> SplitPlan:
    """
    Contiguous groups of ``group_size`` sorted subject ids; a final smaller
    group takes the remainder.

    Raises:
        SplitError: If ``group_size`` < 1 or the cohort cannot form two groups.
    """
    if group_size < 1:
        raise SplitError(f"group_size must be at least 1, got {group_size}")
    subjects = cohort.subject_ids
    if len(subjects) <= group_size:
        raise SplitError(
            f"LOGO with group_size {group_size} needs more than {group_size} "
            f"subjects, cohort has {len(subjects)}"
        )
    groups = [subjects[i : i + group_size] for i in range(0, len(subjects), group_size)]
    if len(groups[-1]) < group_size:
        logging.warning(
            f"LOGO remainder group of {len(groups[-1])} subjects "
            f"({len(subjects)} subjects, group_size {group_size})"
        )
    return _plan(SplitScheme.LOGO, subjects, groups)


def plan_splits(cohort: CohortDataset, spec: SplitSpec) -> SplitPlan:
    if spec.scheme == SplitScheme.LOSO:
        return loso_splits(cohort)
    return logo_splits(cohort, spec.group_size)


def write_manifest(plan: SplitPlan, path: Path) -> None:
    """Writes the fold memberships as JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan.model_dump_json(indent=2) + "\n")


def read_manifest(path: Path) -> SplitPlan:
    return SplitPlan.model_validate_json(Path(path).read_text())
