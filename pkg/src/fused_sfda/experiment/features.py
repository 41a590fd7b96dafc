"""
Feature export for offline inspection (e.g. embedding plots) and linear
probing.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from fused_sfda.data.cohort import CohortDataset
from fused_sfda.model.branch import Branch, encode
from fused_sfda.model.checkpoint import load_checkpoint
from fused_sfda.utils.file_utils import write_csv


def branch_features(branch: Branch, dataset: CohortDataset, chunk: int = 256) -> np.ndarray:
    """N x D encoder features in eval mode."""
    branch.eval()
    x, _ = dataset.tensors(branch.classifier.weight.dtype)
    with torch.no_grad():
        parts = [encode(branch, part) for part in x.split(chunk)]
    if not parts:
        return np.zeros((0, branch.feature_dim))
    return torch.cat(parts).double().numpy()


def feature_frame(branch: Branch, dataset: CohortDataset) -> pd.DataFrame:
    features = branch_features(branch, dataset)
    frame = pd.DataFrame(features, columns=[f"f{i}" for i in range(branch.feature_dim)])
    frame.insert(0, "label", dataset.labels)
    frame.insert(0, "subject", dataset.subjects)
    return frame


def export_features(checkpoint: Path, dataset: CohortDataset, out_path: Path) -> pd.DataFrame:
    """
    Writes one CSV row per sample: subject, label, then the D encoder
    features of the checkpointed branch (normally the SM).

    Raises:
        ShapeMismatchError: If the dataset's C or T differ from the branch's.
    """
    branch, _, _ = load_checkpoint(checkpoint)
    frame = feature_frame(branch, dataset)
    write_csv(frame, Path(out_path))
    logging.info(
        f"Exported {len(frame)} x {branch.feature_dim} {branch.role.value} features to {out_path}"
    )
    return frame
