"""
Binary dataset files. Little-endian layout:

    magic "FUSD" | u32 version | u32 N | u32 C | u32 T | u32 K | f32 rate
    N*C*T f32 samples (row-major) | N i32 labels | N i32 subject ids
"""

import logging
import struct
from pathlib import Path

import numpy as np

from fused_sfda.classes.exceptions import DatasetFormatError, LabelRangeError
from fused_sfda.classes.itemtypes import Provenance
from fused_sfda.data.cohort import CohortDataset

DATASET_MAGIC = b"FUSD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s5If")


def encode_dataset(dataset: CohortDataset) -> bytes:
    n, c, t = dataset.samples.shape
    header = _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, n, c, t, dataset.num_classes, dataset.sampling_rate
    )
    return b"".join(
        [
            header,
            dataset.samples.astype("<f4").tobytes(order="C"),
            dataset.labels.astype("<i4").tobytes(),
            dataset.subjects.astype("<i4").tobytes(),
        ]
    )


def save_dataset(dataset: CohortDataset, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(dataset))
    logging.info(f"Saved {len(dataset)} trials to {path}")


def _take(raw: bytes, offset: int, count: int, dtype: str, section: str) -> np.ndarray:
    size = np.dtype(dtype).itemsize * count
    if count == 0:
        return np.empty(0, dtype=dtype)
    if offset + size > len(raw):
        raise DatasetFormatError(
            section, f"needs {size} bytes at offset {offset}, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset)


def decode_dataset(raw: bytes) -> CohortDataset:
    """
    Parses a dataset file's bytes.

    Raises:
        DatasetFormatError: Naming the section (header, samples, labels,
            subjects, trailing) that is malformed or truncated.
    """
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("header", f"only {len(raw)} bytes")
    magic, version, n, c, t, k, rate = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError("header", f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError("header", f"unsupported version {version}")

    offset = _HEADER.size
    samples = _take(raw, offset, n * c * t, "<f4", "samples")
    offset += samples.nbytes
    labels = _take(raw, offset, n, "<i4", "labels")
    offset += labels.nbytes
    subjects = _take(raw, offset, n, "<i4", "subjects")
    offset += subjects.nbytes
    if offset != len(raw):
        raise DatasetFormatError("trailing", f"{len(raw) - offset} unexpected bytes")

    try:
        return CohortDataset(
            samples.reshape(n, c, t).astype(np.float32),
            labels.astype(np.int64),
            subjects.astype(np.int64),
            float(rate),
            int(k),
            Provenance.IMPORTED,
        )
    except LabelRangeError as e:
        raise DatasetFormatError("labels", str(e)) from e
    except ValueError as e:
        raise DatasetFormatError("samples", str(e)) from e


def load_dataset(path: Path) -> CohortDataset:
    dataset = decode_dataset(Path(path).read_bytes())
    logging.info(f"Loaded {len(dataset)} trials from {path}")
    return dataset
