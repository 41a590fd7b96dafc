"""
Ordered preprocessing pipelines for cohorts.

Stages are written as ``name:arg:arg``, e.g. ``bandpass:8:30``,
``resample:200``, ``window:2:2``, ``crop:2:6``, ``channel_select:0:3:5``
and ``zscore``. Times are in seconds, frequencies in Hz.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence, Union

import numpy as np
from scipy import signal

from fused_sfda.classes.exceptions import PreprocessError
from fused_sfda.data.cohort import CohortDataset

BUTTER_ORDER = 4


@dataclass(frozen=True)
class PreprocessStep:
    name: str
    args: tuple[float, ...] = ()

    def __str__(self) -> str:
        return ":".join([self.name, *(f"{a:g}" for a in self.args)])


def _rebuild(
    raw: CohortDataset,
    samples: np.ndarray,
    sampling_rate: float | None = None,
    repeat: int = 1,
) -> CohortDataset:
    return CohortDataset(
        samples,
        np.repeat(raw.labels, repeat),
        np.repeat(raw.subjects, repeat),
        raw.sampling_rate if sampling_rate is None else sampling_rate,
        raw.num_classes,
        raw.provenance,
    )


def bandpass(raw: CohortDataset, lo: float, hi: float) -> CohortDataset:
    """Zero-phase Butterworth band-pass (order 4, second-order sections)."""
    nyquist = raw.sampling_rate / 2
    if not 0 < lo < hi:
        raise PreprocessError("bandpass", f"need 0 < lo < hi, got {lo}, {hi}")
    if hi >= nyquist:
        raise PreprocessError("bandpass", f"hi={hi} Hz is not below Nyquist {nyquist} Hz")
    sos = signal.butter(
        BUTTER_ORDER, [lo, hi], btype="bandpass", fs=raw.sampling_rate, output="sos"
    )
    if len(raw) == 0:
        return raw
    try:
        filtered = signal.sosfiltfilt(sos, raw.samples.astype(np.float64), axis=-1)
    except ValueError as e:
        raise PreprocessError("bandpass", str(e)) from e
    return _rebuild(raw, filtered)


def resample(raw: CohortDataset, rate: float) -> CohortDataset:
    """Polyphase rational resampling to ``rate`` Hz."""
    if rate <= 0:
        raise PreprocessError("resample", f"target rate must be positive, got {rate}")
    ratio = Fraction(rate / raw.sampling_rate).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    new_rate = raw.sampling_rate * up / down
    if len(raw) == 0:
        return _rebuild(raw, raw.samples, new_rate)
    resampled = signal.resample_poly(raw.samples.astype(np.float64), up, down, axis=-1)
    logging.debug(f"Resampled {raw.sampling_rate} Hz -> {new_rate} Hz (up={up}, down={down})")
    return _rebuild(raw, resampled, new_rate)


def window(raw: CohortDataset, length_s: float, stride_s: float | None = None) -> CohortDataset:
    """
    Cuts every trial into windows of ``length_s`` seconds, ``stride_s`` apart
    (non-overlapping by default). Windows of one trial stay adjacent and
    inherit its label and subject.
    """
    length = int(round(length_s * raw.sampling_rate))
    stride = length if stride_s is None else int(round(stride_s * raw.sampling_rate))
    if length < 1 or stride < 1:
        raise PreprocessError("window", "length and stride must cover at least one sample")
    if length > raw.length:
        raise PreprocessError(
            "window", f"window of {length} samples longer than trial of {raw.length}"
        )
    starts = range(0, raw.length - length + 1, stride)
    pieces = np.stack([raw.samples[:, :, s : s + length] for s in starts], axis=1)
    n, w = pieces.shape[:2]
    return _rebuild(raw, pieces.reshape(n * w, raw.channels, length), repeat=w)


def crop(raw: CohortDataset, start_s: float, stop_s: float) -> CohortDataset:
    """Keeps the samples between ``start_s`` and ``stop_s`` of every trial."""
    start = int(round(start_s * raw.sampling_rate))
    stop = int(round(stop_s * raw.sampling_rate))
    if not 0 <= start < stop <= raw.length:
        raise PreprocessError(
            "crop", f"[{start}, {stop}) outside a trial of {raw.length} samples"
        )
    return _rebuild(raw, raw.samples[:, :, start:stop])


def channel_select(raw: CohortDataset, indices: Sequence[int]) -> CohortDataset:
    if not indices:
        raise PreprocessError("channel_select", "no channels given")
    bad = [i for i in indices if not 0 <= i < raw.channels]
    if bad:
        raise PreprocessError(
            "channel_select", f"indices {bad} outside {raw.channels} channels"
        )
    return _rebuild(raw, raw.samples[:, list(indices), :])


def zscore(raw: CohortDataset) -> CohortDataset:
    """Per trial and channel: subtract the mean, divide by the std (if non-zero)."""
    data = raw.samples.astype(np.float64)
    mean = data.mean(axis=-1, keepdims=True)
    std = data.std(axis=-1, keepdims=True)
    std[std == 0] = 1.0
    return _rebuild(raw, (data - mean) / std)


_ARITY: dict[str, tuple[int, int]] = {
    "bandpass": (2, 2),
    "resample": (1, 1),
    "window": (1, 2),
    "crop": (2, 2),
    "channel_select": (1, 10_000),
    "zscore": (0, 0),
}


def parse_step(text: str) -> PreprocessStep:
    """
    Parses one ``name:arg:arg`` stage.

    Raises:
        PreprocessError: On an unknown stage, a wrong number of arguments or a
            non-numeric argument.
    """
    name, *raw_args = [part.strip() for part in text.strip().split(":")]
    if name not in _ARITY:
        raise PreprocessError(name, f"unknown stage; expected one of {sorted(_ARITY)}")
    low, high = _ARITY[name]
    if not low <= len(raw_args) <= high:
        raise PreprocessError(name, f"takes {low}-{high} arguments, got {len(raw_args)}")
    try:
        args = tuple(float(a) for a in raw_args)
    except ValueError as e:
        raise PreprocessError(name, f"non-numeric argument in '{text}'") from e
    return PreprocessStep(name, args)


def _apply(raw: CohortDataset, step: PreprocessStep) -> CohortDataset:
    handlers: dict[str, Callable[[], CohortDataset]] = {
        "bandpass": lambda: bandpass(raw, *step.args),
        "resample": lambda: resample(raw, *step.args),
        "window": lambda: window(raw, *step.args),
        "crop": lambda: crop(raw, *step.args),
        "channel_select": lambda: channel_select(raw, [int(a) for a in step.args]),
        "zscore": lambda: zscore(raw),
    }
    return handlers[step.name]()


def preprocess(
    raw: CohortDataset, ops: Sequence[Union[str, PreprocessStep]]
) -> CohortDataset:
    """
    Applies the stages in the order given.

    Args:
        raw (CohortDataset): Input cohort. Not modified.
        ops (Sequence[Union[str, PreprocessStep]]): Stages, as parsed steps or
            ``name:arg`` strings.

    Returns:
        CohortDataset: The processed cohort. Only ``window`` changes N.
    """
    dataset = raw
    for op in ops:
        step = op if isinstance(op, PreprocessStep) else parse_step(op)
        before = (len(dataset), dataset.channels, dataset.length)
        dataset = _apply(dataset, step)
        logging.info(
            f"Preprocess {step}: {before} -> "
            f"{(len(dataset), dataset.channels, dataset.length)} at {dataset.sampling_rate:g} Hz"
        )
    return dataset
