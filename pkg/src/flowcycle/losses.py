"""Training objectives as pure differentiable scalar functions.

Reduction conventions: every L1/L2 term is a mean over pixels and
channels (resolution-independent weights); the content distance is an
RMS-normalized Euclidean norm; the temporal term sums its per-step masked
means over time steps.  The discriminator objective is returned in its
"maximize" orientation (log-likelihood form, <= 0); generator-side terms
are losses to minimize.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericError
from .flow import occlusion_mask_tensor, warp_tensor
from .nets import instance_normalize, rollout

GAN_MODES = ("nonsaturating", "minimax", "least_squares")


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_cont: float = 1.0
    lambda_temp: float = 10.0
    alpha_occ: float = 50.0
    k_frames: int = 3

    def __post_init__(self) -> None:
        if min(self.lambda_cyc, self.lambda_cont, self.lambda_temp) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.alpha_occ <= 0:
            raise ValueError("alpha_occ must be positive")
        if self.k_frames < 2:
            raise ValueError("k_frames must be >= 2")


@dataclass
class LossReport:
    gan_fwd: float
    gan_bwd: float
    cyc2d: float
    cyc3d: float
    content: float
    temporal: float
    total: float
    iteration: int = 0

    def to_record(self) -> dict:
        return {
            "iter": self.iteration,
            "gan_fwd": self.gan_fwd,
            "gan_bwd": self.gan_bwd,
            "cyc2d": self.cyc2d,
            "cyc3d": self.cyc3d,
            "content": self.content,
            "temporal": self.temporal,
            "total": self.total,
        }


def _require_finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite value in {name}")
    return value


def gan_loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor,
               mode: str = "nonsaturating") -> torch.Tensor:
    """Discriminator objective, oriented so that larger is better for D
    (train by minimizing its negation)."""
    _require_finite(real_logits, "real logits")
    _require_finite(fake_logits, "fake logits")
    if mode in ("nonsaturating", "minimax"):
        # log sigma(r) + log(1 - sigma(f)) in a saturation-safe form
        return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()
    if mode == "least_squares":
        return -0.5 * (((real_logits - 1.0) ** 2).mean() + (fake_logits ** 2).mean())
    raise ValueError(f"unknown gan mode {mode!r}")


def gan_loss_g(fake_logits: torch.Tensor, mode: str = "nonsaturating") -> torch.Tensor:
    """Generator adversarial loss (minimized)."""
    _require_finite(fake_logits, "fake logits")
    if mode == "nonsaturating":
        return -F.logsigmoid(fake_logits).mean()
    if mode == "minimax":
        return F.logsigmoid(-fake_logits).mean()
    if mode == "least_squares":
        return 0.5 * ((fake_logits - 1.0) ** 2).mean()
    raise ValueError(f"unknown gan mode {mode!r}")


def cycle2d_loss(i_st, i_ts, x_s1: torch.Tensor, x_t1: torch.Tensor) -> torch.Tensor:
    """First-frame round trips through the plain image generators."""
    back_s = i_ts(i_st(x_s1))
    back_t = i_st(i_ts(x_t1))
    return (back_s - x_s1).abs().mean() + (back_t - x_t1).abs().mean()


def _cycle3d_one_side(bundle, fwd: str, bwd: str, frames, flows,
                      fusion_mode, alpha, norm, forward_out=None):
    if forward_out is None:
        forward_out, _, _ = rollout(bundle, fwd, frames, flows, fusion_mode, alpha, norm)
    # backward map reuses the forward flow; its recurrence runs on its own outputs
    recon, _, _ = rollout(bundle, bwd, forward_out, flows, fusion_mode, alpha, norm)
    k = frames.shape[0]
    if k < 2:
        raise ValueError("3d cycle needs at least 2 frames")
    return (recon[1:] - frames[1:]).abs().mean()


def cycle3d_loss(bundle, triplet_s: torch.Tensor, triplet_t: torch.Tensor,
                 flows_s: torch.Tensor, flows_t: torch.Tensor,
                 fusion_mode: str = "learned", alpha: float = 50.0,
                 norm: str = "l2sq", forward_s2t=None, forward_t2s=None) -> torch.Tensor:
    """Round trips through the full recurrent pipelines, scored on the
    frames past the first (the first frame belongs to the 2D cycle)."""
    loss_s = _cycle3d_one_side(bundle, "s2t", "t2s", triplet_s, flows_s,
                               fusion_mode, alpha, norm, forward_s2t)
    loss_t = _cycle3d_one_side(bundle, "t2s", "s2t", triplet_t, flows_t,
                               fusion_mode, alpha, norm, forward_t2s)
    return loss_s + loss_t


def content_loss(extractor, x_in: torch.Tensor, x_out: torch.Tensor,
                 eps: float = 1e-5) -> torch.Tensor:
    """Style-washed feature distance between an input and its translation.

    Instance normalization removes per-channel feature statistics before
    the comparison; the Euclidean distance is divided by sqrt(element
    count) so the scale is resolution-independent.  Batched inputs are
    scored pairwise and averaged.
    """
    f_in = instance_normalize(extractor(x_in), eps)
    f_out = instance_normalize(extractor(x_out), eps)
    diff = f_out - f_in
    if diff.dim() < 4 or diff.shape[0] == 1:
        return torch.sqrt((diff ** 2).sum()) / diff.numel() ** 0.5
    b = diff.shape[0]
    per_pair = torch.sqrt((diff ** 2).flatten(1).sum(dim=1)) / (diff.numel() / b) ** 0.5
    return per_pair.mean()


def temporal_loss(outputs: torch.Tensor, input_frames: torch.Tensor,
                  flows: torch.Tensor, alpha: float = 50.0,
                  norm: str = "l2sq") -> torch.Tensor:
    """Occlusion-weighted warping error of consecutive outputs.

    Flows and occlusion masks come from the *input* frames; the mask is a
    constant weight (no gradient).  Per step: masked mean over pixels and
    channels; steps are summed.
    """
    k = outputs.shape[0]
    if k < 2:
        raise ValueError("temporal loss needs at least 2 frames")
    if input_frames.shape[0] != k or flows.shape[0] != k - 1:
        raise ValueError("outputs, inputs and flows disagree on length")
    total = outputs.new_zeros(())
    for t in range(1, k):
        occ = occlusion_mask_tensor(input_frames[t - 1 : t], input_frames[t : t + 1],
                                    flows[t - 1 : t], alpha, norm)
        warped_prev = warp_tensor(outputs[t - 1 : t], flows[t - 1 : t])
        total = total + (occ * (outputs[t : t + 1] - warped_prev).abs()).mean()
    return total


def total_loss(gan_fwd, gan_bwd, cyc2d, cyc3d, content, temporal,
               weights: LossWeights, ablate: frozenset | set = frozenset()) -> torch.Tensor:
    """Weighted combination of all generator-side terms; ablated terms get
    weight zero."""
    terms = {
        "gan_fwd": gan_fwd, "gan_bwd": gan_bwd, "cyc2d": cyc2d,
        "cyc3d": cyc3d, "content": content, "temporal": temporal,
    }
    for name, value in terms.items():
        v = value if isinstance(value, torch.Tensor) else torch.as_tensor(float(value))
        _require_finite(v, name)
    lam_cyc3d = 0.0 if "cyc3d" in ablate else weights.lambda_cyc
    lam_cont = 0.0 if "content" in ablate else weights.lambda_cont
    lam_temp = 0.0 if "temporal" in ablate else weights.lambda_temp
    return (gan_fwd + gan_bwd
            + weights.lambda_cyc * cyc2d + lam_cyc3d * cyc3d
            + lam_cont * content + lam_temp * temporal)
