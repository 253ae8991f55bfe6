"""Two-stream video generator: one frame + motion vector -> video and flows.

A shared 2D encoder maps the input frame to a content feature. The motion
stream replicates it along time and refines it through AdaIN-modulated 3D conv
blocks (the motion vector enters only here, through per-layer styles),
emitting half-resolution flow fields. The content stream refines the shared
feature with residual blocks. The decoder fuses both volumes and upsamples to
the output video, tanh-bounded to [-1, 1].
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import FrameSequence
from .flow import FlowSequence
from .ofe import MOTION_DIM, MotionVector


@dataclass
class AdaptiveStyle:
    """Per-layer modulation: scale/shift vectors, one entry per channel."""

    scale: torch.Tensor
    shift: torch.Tensor

    def __post_init__(self):
        if self.scale.shape != self.shift.shape:
            raise ValueError(
                f"scale {tuple(self.scale.shape)} vs shift {tuple(self.shift.shape)}"
            )


@dataclass
class SharedFeature:
    """Content feature from the image encoder, [channels, H/4, W/4]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected [C,h,w] feature, got {tuple(self.data.shape)}")


@dataclass(frozen=True)
class DVGConfig:
    t_frames: int
    image_hw: tuple[int, int]
    base_channels: int = 64
    n_adain_layers: int = 6

    def __post_init__(self):
        if self.t_frames < 1:
            raise ValueError(f"t_frames must be >= 1, got {self.t_frames}")
        if self.n_adain_layers < 1:
            raise ValueError(f"n_adain_layers must be >= 1, got {self.n_adain_layers}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        h, w = self.image_hw
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ValueError(f"image_hw must be multiples of 4 and >= 4, got {self.image_hw}")

    @property
    def flow_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // 2, self.image_hw[1] // 2)


def adain(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Adaptive instance norm: standardize per channel over (T,H,W), restyle.

    output = scale * (x - mu) / sqrt(var + eps) + shift, with statistics per
    sample and channel. Accepts [C,T,H,W] with [C] styles or [B,C,T,H,W] with
    [B,C] styles.
    """
    if x.ndim == 4:
        return adain(x[None], scale[None], shift[None], eps)[0]
    if x.ndim != 5:
        raise ValueError(f"expected [B,C,T,H,W] or [C,T,H,W], got {tuple(x.shape)}")
    if scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise ValueError(
            f"style shapes {tuple(scale.shape)}/{tuple(shift.shape)} do not match "
            f"feature channels {tuple(x.shape[:2])}"
        )
    mu = x.mean(dim=(2, 3, 4), keepdim=True)
    var = x.var(dim=(2, 3, 4), unbiased=False, keepdim=True)
    normed = (x - mu) / torch.sqrt(var + eps)
    return scale[:, :, None, None, None] * normed + shift[:, :, None, None, None]


class StyleMapping(nn.Module):
    """Motion vector -> n per-layer (scale, shift) styles.

    Each layer has its own 512->512 linear, then heads to the channel count of
    the modulated block. scale = 1 + head output, so zero-initialized heads
    give identity modulation.
    """

    def __init__(self, n_layers: int, channels: int):
        super().__init__()
        self.fcs = nn.ModuleList(nn.Linear(MOTION_DIM, MOTION_DIM) for _ in range(n_layers))
        self.to_scale = nn.ModuleList(nn.Linear(MOTION_DIM, channels) for _ in range(n_layers))
        self.to_shift = nn.ModuleList(nn.Linear(MOTION_DIM, channels) for _ in range(n_layers))

    def forward(self, f: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        styles = []
        for fc, to_scale, to_shift in zip(self.fcs, self.to_scale, self.to_shift):
            fi = fc(f)
            styles.append((1.0 + to_scale(fi), to_shift(fi)))
        return styles


class _ResBlock2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=False),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels, affine=False),
        )

    def forward(self, x):
        return x + self.body(x)


class DynamicVideoGenerator(nn.Module):
    """phi: (frame [B,3,H,W], motion vector [B,512]) -> (video, flows)."""

    def __init__(self, cfg: DVGConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels

        self.encoder = nn.Sequential(
            nn.Conv2d(3, b, 7, 1, 3),
            nn.InstanceNorm2d(b, affine=False),
            nn.ReLU(),
            nn.Conv2d(b, 2 * b, 4, 2, 1),
            nn.InstanceNorm2d(2 * b, affine=False),
            nn.ReLU(),
            nn.Conv2d(2 * b, 4 * b, 4, 2, 1),
            nn.InstanceNorm2d(4 * b, affine=False),
            nn.ReLU(),
        )

        self.style = StyleMapping(cfg.n_adain_layers, 4 * b)
        self.motion_blocks = nn.ModuleList(
            nn.Conv3d(4 * b, 4 * b, 3, 1, 1) for _ in range(cfg.n_adain_layers)
        )
        # 2x spatial upsample midway through the motion stream: H/4 -> H/2.
        self.upsample_after = max(1, cfg.n_adain_layers // 2)
        self.flow_head = nn.Conv3d(4 * b, 2, 1)

        self.content = nn.Sequential(_ResBlock2d(4 * b), _ResBlock2d(4 * b))

        # Motion features are pooled back to H/4 before fusion; two
        # spatially-strided transposed convs then restore H exactly.
        self.decoder = nn.Sequential(
            nn.ConvTranspose3d(8 * b, 2 * b, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
            nn.InstanceNorm3d(2 * b, affine=False),
            nn.ReLU(),
            nn.ConvTranspose3d(2 * b, b, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
            nn.InstanceNorm3d(b, affine=False),
            nn.ReLU(),
            nn.Conv3d(b, 3, 3, 1, 1),
            nn.Tanh(),
        )

    def encode_image(self, i0: torch.Tensor) -> torch.Tensor:
        if i0.ndim != 4 or i0.shape[1] != 3 or tuple(i0.shape[2:]) != self.cfg.image_hw:
            raise ValueError(
                f"expected [B,3,{self.cfg.image_hw[0]},{self.cfg.image_hw[1]}] frame, "
                f"got {tuple(i0.shape)}"
            )
        return self.encoder(i0)

    def motion_stream(self, shared: torch.Tensor, styles) -> tuple[torch.Tensor, torch.Tensor]:
        if len(styles) != self.cfg.n_adain_layers:
            raise ValueError(
                f"got {len(styles)} styles for {self.cfg.n_adain_layers} layers"
            )
        x = shared.unsqueeze(2).expand(-1, -1, self.cfg.t_frames, -1, -1)
        for i, block in enumerate(self.motion_blocks):
            scale, shift = styles[i]
            x = F.relu(adain(block(x), scale, shift))
            if i + 1 == self.upsample_after:
                x = F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
        return self.flow_head(x), x

    def content_stream(self, shared: torch.Tensor) -> torch.Tensor:
        return self.content(shared)

    def decode(self, motion_feat: torch.Tensor, content_feat: torch.Tensor) -> torch.Tensor:
        pooled = F.avg_pool3d(motion_feat, (1, 2, 2))
        tiled = content_feat.unsqueeze(2).expand(-1, -1, self.cfg.t_frames, -1, -1)
        return self.decoder(torch.cat([pooled, tiled], dim=1))

    def forward(self, i0: torch.Tensor, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        shared = self.encode_image(i0)
        flows, motion_feat = self.motion_stream(shared, self.style(f))
        video = self.decode(motion_feat, self.content_stream(shared))
        return video, flows


def generate_video(generator: DynamicVideoGenerator, i0: torch.Tensor,
                   f: MotionVector) -> tuple[FrameSequence, FlowSequence]:
    """Single-clip convenience wrapper around the batched forward pass."""
    dtype = next(generator.parameters()).dtype
    with torch.no_grad():
        video, flows = generator(i0.unsqueeze(0).to(dtype), f.values.unsqueeze(0).to(dtype))
    return FrameSequence(video[0]), FlowSequence(flows[0])


def init_weights(module: nn.Module, seed: int, style_maps_zero: bool = True) -> None:
    """normal(0, 0.02) conv/linear weights, zero biases; deterministic per seed.

    Style-mapping heads (to_scale/to_shift) are zeroed by default so the
    generator starts at identity modulation, independent of the motion vector.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if not isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d,
                              nn.ConvTranspose3d, nn.Linear)):
            continue
        is_style_head = "to_scale" in name or "to_shift" in name
        with torch.no_grad():
            if is_style_head and style_maps_zero:
                m.weight.zero_()
            else:
                m.weight.copy_(
                    torch.randn(m.weight.shape, generator=gen, dtype=torch.float32) * 0.02
                )
            if m.bias is not None:
                m.bias.zero_()
