"""
Branch checkpoints: one binary blob per branch with a version header, plus
parameter hashing for run reports and freeze verification.
"""

import hashlib
import io
import json
import logging
import struct
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from fused_sfda.classes.exceptions import CheckpointError
from fused_sfda.classes.helper_classes import (
    FMEncoderConfig,
    ModelSpec,
    SMEncoderConfig,
)
from fused_sfda.classes.itemtypes import BranchRole, DType
from fused_sfda.model.branch import Branch, build_branch

CHECKPOINT_MAGIC = b"FUSB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")


def state_hash(module: nn.Module) -> str:
    """
    Hashes every parameter and buffer of a module, in name order.

    Args:
        module (nn.Module): The module (or sub-module) to fingerprint.

    Returns:
        str: A sha256 hex digest stable across runs on one machine.
    """
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        array = tensor.detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(array.dtype).encode("utf-8"))
        digest.update(str(tuple(array.shape)).encode("utf-8"))
        digest.update(array.numpy().tobytes())
    return digest.hexdigest()


def group_hashes(fm: Branch, sm: Branch) -> dict[str, str]:
    return {
        "fm.encoder": state_hash(fm.encoder),
        "fm.classifier": state_hash(fm.classifier),
        "sm.encoder": state_hash(sm.encoder),
        "sm.classifier": state_hash(sm.classifier),
    }


def save_checkpoint(
    branch: Branch,
    path: Path,
    centroids: Optional[torch.Tensor] = None,
    bank_settings: Optional[dict[str, float]] = None,
) -> str:
    """
    Writes a branch (and optionally its prototype bank) to ``path``.

    Layout: magic "FUSB", u32 version, u32 header length, JSON header, then a
    torch-serialised tensor payload.

    Returns:
        str: The state hash of the saved branch.
    """
    header = {
        "role": branch.role.value,
        "channels": branch.channels,
        "samples": branch.samples,
        "num_classes": branch.num_classes,
        "dtype": "float64" if branch.classifier.weight.dtype == torch.float64 else "float32",
        "encoder_config": branch.encoder_config.model_dump(mode="json"),
        "bank": bank_settings,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload: dict[str, object] = {"branch": branch.state_dict()}
    if centroids is not None:
        payload["centroids"] = centroids.detach().cpu()
    buffer = io.BytesIO()
    torch.save(payload, buffer)

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(buffer.getvalue())

    digest = state_hash(branch)
    logging.info(f"Saved {branch.role.value} checkpoint to {path} ({digest[:12]})")
    return digest


def load_checkpoint(
    path: Path,
) -> tuple[Branch, Optional[torch.Tensor], Optional[dict[str, float]]]:
    """
    Reads a checkpoint written by :func:`save_checkpoint`.

    Returns:
        tuple: The rebuilt branch, the stored centroids (or None) and the stored
            bank settings (or None).

    Raises:
        CheckpointError: On a bad magic, unknown version or truncated payload.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(str(path), "file shorter than header")
    magic, version, header_len = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(str(path), f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(str(path), f"unsupported version {version}")
    start = _HEADER.size
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
        payload = torch.load(io.BytesIO(raw[start + header_len :]), weights_only=True)
    except (ValueError, RuntimeError, EOFError) as e:
        raise CheckpointError(str(path), f"corrupt payload ({e})") from e

    role = BranchRole(header["role"])
    model = ModelSpec()
    if role == BranchRole.FM:
        model.fm = FMEncoderConfig.model_validate(header["encoder_config"])
    else:
        model.sm = SMEncoderConfig.model_validate(header["encoder_config"])
    branch = build_branch(
        role,
        header["channels"],
        header["samples"],
        header["num_classes"],
        model,
        DType(header.get("dtype", "float32")),
    )
    branch.load_state_dict(payload["branch"])
    return branch, payload.get("centroids"), header.get("bank")
