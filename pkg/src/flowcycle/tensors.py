"""Conversions between the numpy at-rest types and torch net tensors.

Nets operate on channel-first tensors: frames (B, 3, H, W), flows
(B, 2, H, W), masks (B, 1, H, W).
"""

from __future__ import annotations

import numpy as np
import torch

from . import core


def frame_to_tensor(frame: core.Frame | np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) frame -> (3, H, W) tensor."""
    data = frame.data if isinstance(frame, core.Frame) else np.asarray(frame)
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1))).to(dtype)


def tensor_to_frame(t: torch.Tensor) -> core.Frame:
    """(3, H, W) or (1, 3, H, W) tensor -> frame; clamps fp excursions."""
    if t.dim() == 4:
        t = t.squeeze(0)
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return core.Frame(np.clip(arr, -1.0, 1.0).astype(np.float32))


def flow_to_tensor(flow: core.FlowField | np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 2) flow -> (2, H, W) tensor."""
    data = flow.data if isinstance(flow, core.FlowField) else np.asarray(flow)
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1))).to(dtype)


def tensor_to_flow(t: torch.Tensor) -> core.FlowField:
    if t.dim() == 4:
        t = t.squeeze(0)
    return core.FlowField(t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32))


def tensor_to_mask(t: torch.Tensor) -> core.Mask:
    if t.dim() == 4:
        t = t.squeeze(0)
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return core.Mask(np.clip(arr, 0.0, 1.0))


def clip_to_tensor(clip: core.VideoClip, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Clip -> (L, 3, H, W) tensor."""
    return torch.stack([frame_to_tensor(f, dtype) for f in clip.frames])
