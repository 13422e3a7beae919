"""Versioned checkpoint container for model weights + schedule hyperparameters."""

from __future__ import annotations

from typing import Dict, Optional

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    path,
    weights: Dict[str, Dict[str, torch.Tensor]],
    schedule: Dict[str, float],
    meta: Optional[dict] = None,
) -> None:
    """Write named weight groups plus (T, beta_start, beta_end) to disk.

    weights maps group name (e.g. "denoiser_backbone", "conditioner") to a
    flat tensor dict.
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "schedule": {
            "T": int(schedule["T"]),
            "beta_start": float(schedule["beta_start"]),
            "beta_end": float(schedule["beta_end"]),
        },
        "weights": weights,
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    """Load a checkpoint, rejecting unknown format versions."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r} "
            f"(expected {FORMAT_VERSION})"
        )
    return payload
