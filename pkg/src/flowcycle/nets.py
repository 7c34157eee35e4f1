"""Networks: image generators, fusion block, patch discriminators, and the
fixed content feature extractor, plus the recurrent generation loop that
composes them with flow warping.

All nets are deterministic given parameters and input (no stochastic
layers).  The two translation directions never share trainable
parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import core
from .errors import DataError
from .flow import FlowSource, occlusion_mask_tensor, warp_tensor
from .tensors import clip_to_tensor, flow_to_tensor, tensor_to_frame, tensor_to_mask

FUSION_MODES = ("learned", "average", "rule_mask")


def instance_normalize(feat: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-channel spatial standardization of a (C, ...) or (B, C, ...) map.

    Uses population variance over each channel's spatial extent; constant
    channels map to zero.
    """
    if feat.dim() < 2:
        raise ValueError("feature map needs at least a channel and a spatial dim")
    batched = feat.dim() >= 4
    x = feat if batched else feat.unsqueeze(0)
    dims = tuple(range(2, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    out = (x - mean) / torch.sqrt(var + eps)
    return out if batched else out.squeeze(0)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ImageGenerator(nn.Module):
    """Per-frame translator: 7x7 stem, two stride-2 downs, residual trunk,
    two transposed-conv ups, tanh head.  Output matches input size; input
    H and W must be divisible by 4."""

    def __init__(self, base_channels: int = 32, n_res_blocks: int = 6):
        super().__init__()
        c = base_channels
        layers = [
            nn.Conv2d(3, c, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * c) for _ in range(n_res_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 3, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by 4")
        return self.model(x)


class FusionBlock(nn.Module):
    """Regresses the soft blend mask between warped history and freshly
    synthesized pixels.  Input is the per-channel difference of the two
    frames (absolute by default); the final conv is zero-initialized so the
    initial mask is exactly 0.5."""

    def __init__(self, hidden_channels: int = 16, input_mode: str = "abs"):
        super().__init__()
        if input_mode not in ("abs", "signed"):
            raise ValueError(f"unknown fusion input mode {input_mode!r}")
        self.input_mode = input_mode
        h = hidden_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, h, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(h),
            nn.ReLU(inplace=True),
            nn.Conv2d(h, h, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(h),
            nn.ReLU(inplace=True),
            nn.Conv2d(h, 1, 3, padding=1, padding_mode="reflect"),
            nn.Sigmoid(),
        )

    def forward(self, synthesized, warped):
        if synthesized.shape != warped.shape:
            raise ValueError("size mismatch between synthesized and warped frames")
        diff = synthesized - warped
        if self.input_mode == "abs":
            diff = diff.abs()
        mask = self.net(diff)
        fused = mask * warped + (1.0 - mask) * synthesized
        return mask, fused


def blend(mask: torch.Tensor, warped: torch.Tensor, synthesized: torch.Tensor) -> torch.Tensor:
    """Mask endpoint semantics: 1 keeps the warped pixel, 0 the synthesized one."""
    return mask * warped + (1.0 - mask) * synthesized


class PatchDiscriminator(nn.Module):
    """Patch classifier emitting one pre-sigmoid logit per overlapping patch.

    The default stack (three stride-2 convs, then two stride-1 convs with
    3x3 kernels) maps HxW to (H/8)x(W/8); ``patch70=True`` switches the
    stride-1 tail to 4x4 kernels, giving the classic 70x70 receptive field.
    """

    def __init__(self, base_channels: int = 32, patch70: bool = False):
        super().__init__()
        c = base_channels
        k_tail = 4 if patch70 else 3
        p_tail = 1
        self.model = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 8 * c, k_tail, stride=1, padding=p_tail),
            nn.InstanceNorm2d(8 * c),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * c, 1, k_tail, stride=1, padding=p_tail),
        )

    def forward(self, x):
        return self.model(x)


class ContentExtractor(nn.Module):
    """Fixed seeded conv stack standing in for a pretrained perceptual net.

    Five stages of two 3x3 convs + ReLU, downsampled 2x between stages
    (four downsamples total, so the deepest tap is at 1/16 resolution).
    Weights are He-scaled normals drawn once from ``seed`` and frozen;
    inputs whose sides are not multiples of 16 are reflect-padded up.
    """

    WIDTHS = (16, 32, 64, 128, 128)

    def __init__(self, seed: int = 1234):
        super().__init__()
        self.seed = seed
        stages = []
        in_c = 3
        for i, width in enumerate(self.WIDTHS):
            layers = [] if i == 0 else [nn.AvgPool2d(2)]
            layers += [
                nn.Conv2d(in_c, width, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            stages.append(nn.Sequential(*layers))
            in_c = width
        self.stages = nn.Sequential(*stages)
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = (2.0 / fan_in) ** 0.5
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                    m.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def stride(self) -> int:
        return 2 ** (len(self.WIDTHS) - 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        s = self.stride
        pad_h = (-h) % s
        pad_w = (-w) % s
        if pad_h or pad_w:
            left = pad_w // 2
            top = pad_h // 2
            x = F.pad(x, (left, pad_w - left, top, pad_h - top), mode="reflect")
        return self.stages(x)


def init_weights(module: nn.Module, gen: torch.Generator, std: float = 0.02) -> None:
    """Normal(0, std) init for conv weights, zero biases; fusion heads are
    zeroed separately by the bundle constructor."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()


class GeneratorBundle(nn.Module):
    """Both translation directions plus their discriminators."""

    def __init__(self, gen_base: int = 32, disc_base: int = 32, n_res_blocks: int = 6,
                 fusion_hidden: int = 16, fusion_input: str = "abs", patch70: bool = False,
                 init_seed: int | None = 0):
        super().__init__()
        self.i_st = ImageGenerator(gen_base, n_res_blocks)
        self.i_ts = ImageGenerator(gen_base, n_res_blocks)
        self.f_st = FusionBlock(fusion_hidden, fusion_input)
        self.f_ts = FusionBlock(fusion_hidden, fusion_input)
        self.d_s = PatchDiscriminator(disc_base, patch70)
        self.d_t = PatchDiscriminator(disc_base, patch70)
        if init_seed is not None:
            gen = torch.Generator().manual_seed(init_seed)
            init_weights(self, gen)
            for fusion in (self.f_st, self.f_ts):
                head = fusion.net[-2]
                with torch.no_grad():
                    head.weight.zero_()
                    head.bias.zero_()

    def generator(self, direction: str) -> ImageGenerator:
        return {"s2t": self.i_st, "t2s": self.i_ts}[direction]

    def fusion(self, direction: str) -> FusionBlock:
        return {"s2t": self.f_st, "t2s": self.f_ts}[direction]

    def discriminator(self, domain: str) -> PatchDiscriminator:
        return {"S": self.d_s, "T": self.d_t}[domain]

    def generator_parameters(self):
        for m in (self.i_st, self.i_ts, self.f_st, self.f_ts):
            yield from m.parameters()

    def discriminator_parameters(self, domain: str):
        yield from self.discriminator(domain).parameters()


def rollout(bundle, direction: str, frames: torch.Tensor, flows: torch.Tensor | None,
            fusion_mode: str = "learned", occ_alpha: float = 50.0,
            occ_norm: str = "l2sq", synthesized: torch.Tensor | None = None):
    """Auto-regressive translation of a frame sequence.

    ``frames`` is (L, 3, H, W); ``flows`` is (L-1, 2, H, W) backward flow
    between consecutive *input* frames (flows[t-1] maps t onto t-1).  The
    first output is the plain per-frame translation; later outputs blend
    the warped previous output with the current translation.  Returns
    (outputs (L,3,H,W), masks (L-1,1,H,W) or None, synthesized (L,3,H,W)).
    """
    if fusion_mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    length = frames.shape[0]
    if length == 0:
        raise ValueError("empty sequence")
    if length > 1 and (flows is None or flows.shape[0] != length - 1):
        raise DataError("need one flow field per consecutive frame pair")
    if synthesized is None:
        synthesized = bundle.generator(direction)(frames)
    fuser = bundle.fusion(direction)
    outputs = [synthesized[0:1]]
    masks = []
    for t in range(1, length):
        warped = warp_tensor(outputs[-1], flows[t - 1 : t])
        cur = synthesized[t : t + 1]
        if fusion_mode == "learned":
            mask, fused = fuser(cur, warped)
        elif fusion_mode == "average":
            mask = torch.full_like(warped[:, :1], 0.5)
            fused = blend(mask, warped, cur)
        else:  # rule_mask: reuse the flow-confidence weight directly
            mask = occlusion_mask_tensor(frames[t - 1 : t], frames[t : t + 1],
                                         flows[t - 1 : t], occ_alpha, occ_norm)
            fused = blend(mask, warped, cur)
        outputs.append(fused)
        masks.append(mask)
    out = torch.cat(outputs, dim=0)
    return out, (torch.cat(masks, dim=0) if masks else None), synthesized


def recurrent_generate(bundle, direction: str, clip: core.VideoClip,
                       flow_source: FlowSource, fusion_mode: str = "learned",
                       occ_alpha: float = 50.0, occ_norm: str = "l2sq",
                       dtype: torch.dtype = torch.float32):
    """Translate a clip; returns (translated clip, fusion masks, per-frame
    intermediate translations)."""
    frames = clip_to_tensor(clip, dtype)
    if len(clip) > 1:
        flow_fields = flow_source.flows_for_clip(clip)
        flows = torch.stack([flow_to_tensor(f, dtype) for f in flow_fields])
    else:
        flows = None
    with torch.no_grad():
        out, masks, synth = rollout(bundle, direction, frames, flows, fusion_mode,
                                    occ_alpha, occ_norm)
    out_tag = "T" if direction == "s2t" else "S"
    translated = core.VideoClip(
        frames=[tensor_to_frame(out[t]) for t in range(out.shape[0])],
        domain_tag=out_tag,
    )
    mask_list = [tensor_to_mask(masks[t]) for t in range(masks.shape[0])] if masks is not None else []
    intermediates = [tensor_to_frame(synth[t]) for t in range(synth.shape[0])]
    return translated, mask_list, intermediates
