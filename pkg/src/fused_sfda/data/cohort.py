"""
The in-memory multi-subject dataset and the synthetic cohort generator with
controllable inter-subject shift.
"""

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from fused_sfda.classes.exceptions import LabelRangeError, ShapeMismatchError
from fused_sfda.classes.helper_classes import ShiftSpec
from fused_sfda.classes.itemtypes import Provenance

# class centre frequencies span this band, as fractions of the sampling rate
LOWEST_FREQUENCY = 0.04
HIGHEST_FREQUENCY = 0.11
NYQUIST_GUARD = 0.45
# half the distance between a template's two components, in class spacings
PAIR_OFFSET = 0.08


@dataclass
class CohortDataset:
    """
    N windows of C x T samples with a class label and a subject id each.
    Arrays are validated on construction and stored as float32 / int64.
    """

    samples: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    sampling_rate: float
    num_classes: int
    provenance: Provenance = Provenance.SYNTHETIC

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.samples.ndim != 3:
            raise ShapeMismatchError("cohort samples", (-1, -1, -1), self.samples.shape)
        n = self.samples.shape[0]
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ShapeMismatchError(
                "cohort labels/subjects", (n,), (len(self.labels), len(self.subjects))
            )
        if self.num_classes < 2:
            raise ValueError("A cohort needs at least two classes")
        if self.sampling_rate <= 0:
            raise ValueError("Sampling rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("Cohort samples contain non-finite values")
        bad = (self.labels < 0) | (self.labels >= self.num_classes)
        if bad.any():
            raise LabelRangeError(int(self.labels[bad][0]), self.num_classes)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def channels(self) -> int:
        return int(self.samples.shape[1])

    @property
    def length(self) -> int:
        return int(self.samples.shape[2])

    @property
    def subject_ids(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subjects))

    def subset(self, subject_ids: Iterable[int]) -> "CohortDataset":
        """Rows whose subject is in ``subject_ids``, original order kept."""
        keep = np.isin(self.subjects, list(subject_ids))
        return CohortDataset(
            self.samples[keep],
            self.labels[keep],
            self.subjects[keep],
            self.sampling_rate,
            self.num_classes,
            self.provenance,
        )

    def tensors(self, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.samples).to(dtype), torch.from_numpy(self.labels)


@dataclass(frozen=True)
class ClassTemplates:
    """
    Clean class signals. Class k is a pair of sinusoids just below and above
    its centre frequency, each projected onto its own spatial pattern.
    Centre frequencies are geometrically spaced, so a displacement of one
    unit moves a class onto its neighbour's centre.
    """

    frequencies: np.ndarray
    patterns: np.ndarray
    phases: np.ndarray
    spacing: float
    sampling_rate: float

    def component_frequency(self, k: int, component: int, offset: float) -> float:
        """Frequency in Hz of one component of class k displaced by ``offset`` spacings."""
        shift = offset + (2 * component - 1) * PAIR_OFFSET
        frequency = self.frequencies[k] * self.spacing**shift
        return float(min(frequency, NYQUIST_GUARD * self.sampling_rate))


def class_templates(
    num_classes: int, channels: int, sampling_rate: float, seed: int
) -> ClassTemplates:
    rng = np.random.default_rng([seed, 7919])
    low = LOWEST_FREQUENCY * sampling_rate
    spacing = (HIGHEST_FREQUENCY / LOWEST_FREQUENCY) ** (1 / (num_classes - 1))
    patterns = rng.standard_normal((num_classes, 2, channels))
    norms = np.linalg.norm(patterns, axis=2, keepdims=True)
    patterns *= np.sqrt(channels) / np.maximum(norms, 1e-12)
    return ClassTemplates(
        frequencies=low * spacing ** np.arange(num_classes),
        patterns=patterns,
        phases=rng.uniform(0, 2 * np.pi, size=(num_classes, 2)),
        spacing=float(spacing),
        sampling_rate=sampling_rate,
    )


def mixing_matrix(channels: int, severity: float, rng: np.random.Generator) -> np.ndarray:
    """I + severity * R with R off-diagonal N(0, 1) / sqrt(C - 1)."""
    if channels == 1:
        return np.eye(1)
    r = rng.standard_normal((channels, channels)) / np.sqrt(channels - 1)
    np.fill_diagonal(r, 0.0)
    return np.eye(channels) + severity * r


def subject_offsets(
    n_subjects: int, severity: float, spectral_shift: float, seed: int
) -> np.ndarray:
    """
    Displacement of every class frequency per subject, in class spacings.
    The values are evenly spaced over +/- severity * spectral_shift and dealt
    to subjects in a seeded order, so a cohort's shift profile does not
    depend on the draw.
    """
    if n_subjects == 1:
        return np.zeros(1)
    grid = np.linspace(-1.0, 1.0, n_subjects)
    order = np.random.default_rng([seed, 104729]).permutation(n_subjects)
    return severity * spectral_shift * grid[order]


def generate_cohort(
    n_subjects: int,
    trials_per_class: int,
    channels: int,
    length: int,
    num_classes: int,
    spec: ShiftSpec,
    sampling_rate: float = 128.0,
) -> CohortDataset:
    """
    Builds a synthetic cohort. Every subject gets ``trials_per_class`` trials
    of every class; trial order is subject-major with classes interleaved.

    Subject s mixes channels with I + severity * R_s and displaces all class
    frequencies by the same offset, so its classes stay apart while their
    absolute frequencies no longer match other subjects'. Trials add
    frequency, phase and amplitude jitter and white noise.

    Args:
        n_subjects (int): Number of subjects, ids 0..n-1.
        trials_per_class (int): Trials per class per subject.
        channels (int): C.
        length (int): T in samples.
        num_classes (int): K, at least 2.
        spec (ShiftSpec): Shift, jitter, noise and seed.
        sampling_rate (float, optional): Hz. Defaults to 128.

    Returns:
        CohortDataset: Deterministic given ``spec.seed``.
    """
    if min(n_subjects, trials_per_class, channels, length) < 1:
        raise ValueError("Cohort dimensions must be positive")
    if num_classes < 2:
        raise ValueError("A cohort needs at least two classes")

    templates = class_templates(num_classes, channels, sampling_rate, spec.seed)
    offsets = subject_offsets(n_subjects, spec.mixing_severity, spec.spectral_shift, spec.seed)
    t = np.arange(length) / sampling_rate
    n = n_subjects * trials_per_class * num_classes
    samples = np.empty((n, channels, length), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    subjects = np.empty(n, dtype=np.int64)

    row = 0
    for s in range(n_subjects):
        rng = np.random.default_rng([spec.seed, s])
        mixing = mixing_matrix(channels, spec.mixing_severity, rng)
        patterns = np.einsum("ij,kcj->kci", mixing, templates.patterns)
        for _ in range(trials_per_class):
            for k in range(num_classes):
                gain = 1.0 + spec.amplitude_jitter * rng.standard_normal()
                offset = offsets[s] + spec.frequency_jitter * rng.standard_normal()
                phases = templates.phases[k] + spec.phase_jitter * rng.uniform(-1, 1, size=2)
                signal = np.zeros((channels, length))
                for c in range(2):
                    frequency = templates.component_frequency(k, c, offset)
                    wave = np.sin(2 * np.pi * frequency * t + phases[c])
                    signal += np.outer(patterns[k, c], wave)
                noise = spec.noise_sigma * rng.standard_normal((channels, length))
                samples[row] = gain * signal + noise
                labels[row] = k
                subjects[row] = s
                row += 1

    logging.info(
        f"Generated cohort: {n_subjects} subjects, {n} trials, "
        f"severity={spec.mixing_severity}, spectral shift={spec.spectral_shift}, "
        f"noise={spec.noise_sigma}"
    )
    return CohortDataset(samples, labels, subjects, sampling_rate, num_classes)
