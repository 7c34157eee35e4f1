"""Flow acquisition, differentiable backward warping, and occlusion masks.

Warping follows the core convention: ``warp(x, f)(p) = x(p + f(p))`` with
bilinear sampling and border clamping for out-of-bounds coordinates.  The
warp is differentiable with respect to the warped frame's values; flow is
always treated as data (no gradient flows into it).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import core
from .errors import DataError
from .tensors import flow_to_tensor, frame_to_tensor, tensor_to_frame, tensor_to_mask


@dataclass
class EstimatorParams:
    pyramid_levels: int = 3
    window: int = 7
    iterations: int = 3

    def __post_init__(self) -> None:
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.window % 2 == 0 or self.window < 3:
            raise ValueError("window must be odd and >= 3")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class FlowSource:
    """Where recurrent generation gets its flow: stored ground truth or the
    classical estimator run on the input frames."""

    mode: str = "ground_truth"
    estimator_params: EstimatorParams = field(default_factory=EstimatorParams)

    def __post_init__(self) -> None:
        if self.mode not in ("ground_truth", "estimated"):
            raise ValueError(f"unknown flow mode {self.mode!r}")

    def flows_for_clip(self, clip: core.VideoClip) -> list[core.FlowField]:
        """One backward flow per consecutive pair, aligned with t = 1..L-1."""
        if self.mode == "ground_truth":
            if clip.flows is None:
                raise DataError("flow unavailable: clip carries no ground-truth flow")
            return list(clip.flows)
        return [
            estimate_flow(clip.frames[t - 1], clip.frames[t], self.estimator_params)
            for t in range(1, len(clip.frames))
        ]


def warp_tensor(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp a (B, C, H, W) tensor by a (B, 2, H, W) pixel flow."""
    if frame.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError("expected frame (B,C,H,W) and flow (B,2,H,W)")
    if frame.shape[0] != flow.shape[0] or frame.shape[2:] != flow.shape[2:]:
        raise ValueError(f"size mismatch: frame {tuple(frame.shape)} vs flow {tuple(flow.shape)}")
    b, _, h, w = frame.shape
    flow = flow.detach().to(frame.dtype)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=frame.dtype),
        torch.arange(w, dtype=frame.dtype),
        indexing="ij",
    )
    px = xs + flow[:, 0]
    py = ys + flow[:, 1]
    gx = 2.0 * px / (w - 1) - 1.0
    gy = 2.0 * py / (h - 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(frame, grid, mode="bilinear", padding_mode="border",
                         align_corners=True)


def warp(frame: core.Frame, flow: core.FlowField) -> core.Frame:
    """Frame-level warp; see :func:`warp_tensor`."""
    if frame.data.shape[:2] != flow.data.shape[:2]:
        raise ValueError("size mismatch between frame and flow")
    out = warp_tensor(
        frame_to_tensor(frame, torch.float64).unsqueeze(0),
        flow_to_tensor(flow, torch.float64).unsqueeze(0),
    )
    return tensor_to_frame(out)


def occlusion_mask_tensor(src_prev: torch.Tensor, src_cur: torch.Tensor,
                          flow: torch.Tensor, alpha: float = 50.0,
                          norm: str = "l2sq") -> torch.Tensor:
    """Per-pixel flow-confidence weight in (0, 1], shape (B, 1, H, W).

    Computed from the warping error between the current frame and the
    warped previous frame, with both frames rescaled to [0, 1] so that the
    default alpha matches that scale.  Always detached: the mask is a
    data-derived weight, not a model output.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if norm not in ("l2", "l2sq"):
        raise ValueError(f"unknown occlusion norm {norm!r}")
    if src_prev.shape != src_cur.shape:
        raise ValueError("size mismatch between frames")
    with torch.no_grad():
        prev01 = (src_prev + 1.0) * 0.5
        cur01 = (src_cur + 1.0) * 0.5
        warped = warp_tensor(prev01, flow)
        sq = ((cur01 - warped) ** 2).sum(dim=1, keepdim=True)
        if norm == "l2sq":
            return torch.exp(-alpha * sq)
        return torch.exp(-alpha * torch.sqrt(sq))


def occlusion_mask(src_prev: core.Frame, src_cur: core.Frame, flow: core.FlowField,
                   alpha: float = 50.0, norm: str = "l2sq") -> core.Mask:
    if src_prev.data.shape != src_cur.data.shape:
        raise ValueError("size mismatch between frames")
    if src_prev.data.shape[:2] != flow.data.shape[:2]:
        raise ValueError("size mismatch between frames and flow")
    out = occlusion_mask_tensor(
        frame_to_tensor(src_prev, torch.float64).unsqueeze(0),
        frame_to_tensor(src_cur, torch.float64).unsqueeze(0),
        flow_to_tensor(flow, torch.float64).unsqueeze(0),
        alpha=alpha,
        norm=norm,
    )
    return tensor_to_mask(out)


def _to_gray(frame: core.Frame) -> np.ndarray:
    return ((frame.data.astype(np.float64) + 1.0) * 0.5).mean(axis=2)


def _downsample(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=1.0, mode="nearest")[::2, ::2]


def _sample(img: np.ndarray, qy: np.ndarray, qx: np.ndarray) -> np.ndarray:
    # cubic sampling keeps the linearization accurate on smooth texture
    return ndimage.map_coordinates(img, [qy, qx], order=3, mode="nearest")


def estimate_flow(prev: core.Frame, cur: core.Frame,
                  params: EstimatorParams | None = None) -> core.FlowField:
    """Dense pyramidal Lucas-Kanade backward flow.

    At each pyramid level the 2x2 normal equations over a square window
    are solved per pixel and added to the upsampled coarser estimate;
    pixels with a near-singular system (det < 1e-6) keep the coarser
    estimate unchanged.
    """
    if prev.data.shape != cur.data.shape:
        raise ValueError("size mismatch between frames")
    params = params or EstimatorParams()
    h, w = prev.data.shape[:2]

    levels = params.pyramid_levels
    while levels > 1 and min(h, w) // 2 ** (levels - 1) < 2 * params.window:
        levels -= 1

    pyr_prev = [_to_gray(prev)]
    pyr_cur = [_to_gray(cur)]
    for _ in range(levels - 1):
        pyr_prev.append(_downsample(pyr_prev[-1]))
        pyr_cur.append(_downsample(pyr_cur[-1]))

    flow_u = np.zeros_like(pyr_prev[-1])
    flow_v = np.zeros_like(pyr_prev[-1])
    for level in range(levels - 1, -1, -1):
        p_img = pyr_prev[level]
        c_img = pyr_cur[level]
        lh, lw = p_img.shape
        if flow_u.shape != p_img.shape:
            flow_u = 2.0 * ndimage.zoom(flow_u, (lh / flow_u.shape[0], lw / flow_u.shape[1]), order=1)
            flow_v = 2.0 * ndimage.zoom(flow_v, (lh / flow_v.shape[0], lw / flow_v.shape[1]), order=1)
        ys, xs = np.mgrid[0:lh, 0:lw].astype(np.float64)
        for _ in range(params.iterations):
            warped = _sample(p_img, ys + flow_v, xs + flow_u)
            gy, gx = np.gradient(warped)
            resid = c_img - warped
            win = params.window
            a11 = ndimage.uniform_filter(gx * gx, win, mode="nearest")
            a12 = ndimage.uniform_filter(gx * gy, win, mode="nearest")
            a22 = ndimage.uniform_filter(gy * gy, win, mode="nearest")
            b1 = ndimage.uniform_filter(gx * resid, win, mode="nearest")
            b2 = ndimage.uniform_filter(gy * resid, win, mode="nearest")
            det = a11 * a22 - a12 * a12
            ok = det >= 1e-6
            safe = np.where(ok, det, 1.0)
            du = np.where(ok, (a22 * b1 - a12 * b2) / safe, 0.0)
            dv = np.where(ok, (a11 * b2 - a12 * b1) / safe, 0.0)
            flow_u = flow_u + du
            flow_v = flow_v + dv

    flow_u = np.clip(flow_u, -(w - 1), w - 1)
    flow_v = np.clip(flow_v, -(h - 1), h - 1)
    return core.FlowField(np.stack([flow_u, flow_v], axis=2).astype(np.float32))
