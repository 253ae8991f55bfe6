"""Video critic and training losses.

The critic is a stack of strided 3D conv blocks over whole video volumes. The
reconstruction losses reduce as per-frame mean over elements, summed over
time, then averaged over the batch — this keeps loss magnitudes independent
of resolution, so the weighting (100, 1, 1) of content/motion/adversarial
terms behaves the same at desk and full scale.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

DEFAULT_WEIGHTS = (100.0, 1.0, 1.0)  # content, motion, adversarial


class TrainingDivergedError(RuntimeError):
    """A loss became NaN; training state is no longer trustworthy."""


@dataclass(frozen=True)
class CriticConfig:
    input_t: int
    input_hw: tuple[int, int]
    base_channels: int = 64
    num_blocks: int = 6
    gp_lambda: float = 10.0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.gp_lambda <= 0:
            raise ValueError(f"gp_lambda must be > 0, got {self.gp_lambda}")
        if self.input_t < 1 or min(self.input_hw) < 1:
            raise ValueError(
                f"input dims must be >= 1, got t={self.input_t}, hw={self.input_hw}"
            )
        self.plan()

    def plan(self):
        """Per-block conv geometry mirroring the flow-encoder adaptive rules.

        Spatial stride 2 while the dim is > 1; temporal stride 2 on the first
        four blocks while t > 1, then 1. Normalization is skipped on blocks
        whose output is a single element per channel.
        """
        b = self.base_channels
        outs = [b * 2 ** min(i, 2) for i in range(self.num_blocks - 1)] + [8 * b]
        t, (h, w) = self.input_t, self.input_hw
        blocks = []
        in_ch = 3
        for i, out_ch in enumerate(outs):
            kernel, stride, pad, dims = [], [], [], []
            t_stride_wanted = 2 if i < 4 else 1
            for size, k_full, s_wanted in ((t, 3, t_stride_wanted), (h, 4, 2), (w, 4, 2)):
                if size > 1:
                    k, s, p = k_full, s_wanted, 1
                else:
                    k, s, p = 3, 1, 1
                out_size = (size + 2 * p - k) // s + 1
                if out_size < 1:
                    raise ValueError(
                        f"config collapses a dim below 1 (size {size}, kernel {k})"
                    )
                kernel.append(k)
                stride.append(s)
                pad.append(p)
                dims.append(out_size)
            t, h, w = dims
            blocks.append(
                (in_ch, out_ch, tuple(kernel), tuple(stride), tuple(pad), (t, h, w),
                 t * h * w > 1)
            )
            in_ch = out_ch
        return blocks


class VideoCritic(nn.Module):
    """D: [B, 3, T, H, W] video -> [B] real-valued scores (no sigmoid)."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        for in_ch, out_ch, kernel, stride, pad, _dims, use_norm in cfg.plan():
            layers.append(nn.Conv3d(in_ch, out_ch, kernel, stride, pad))
            if use_norm:
                layers.append(nn.InstanceNorm3d(out_ch, affine=False))
            layers.append(nn.LeakyReLU(0.2))
        self.blocks = nn.Sequential(*layers)
        self.head = nn.Linear(8 * cfg.base_channels, 1)

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        if video.ndim != 5 or video.shape[1] != 3:
            raise ValueError(f"expected [B,3,T,H,W] video, got {tuple(video.shape)}")
        expected = (self.cfg.input_t, *self.cfg.input_hw)
        if tuple(video.shape[2:]) != expected:
            raise ValueError(
                f"video dims {tuple(video.shape[2:])} do not match config {expected}"
            )
        feat = self.blocks(video).mean(dim=(2, 3, 4))
        return self.head(feat).squeeze(1)


def critic_score(critic: nn.Module, video: torch.Tensor) -> torch.Tensor:
    """Scores for a batch, or a scalar for a single [3,T,H,W] video."""
    if video.ndim == 4:
        return critic(video.unsqueeze(0))[0]
    return critic(video)


def _per_frame_l1(gen: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    if gen.shape != real.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(real.shape)}")
    if gen.ndim == 4:
        gen, real = gen.unsqueeze(0), real.unsqueeze(0)
    if gen.ndim != 5:
        raise ValueError(f"expected [B,C,T,H,W] or [C,T,H,W], got {tuple(gen.shape)}")
    # per-frame mean over (channel, H, W), summed over T, averaged over batch
    return (gen - real).abs().mean(dim=(1, 3, 4)).sum(dim=1).mean()


def content_loss(gen: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Sum over frames of the mean absolute error per frame."""
    return _per_frame_l1(gen, real)


def motion_loss(gen_flows: torch.Tensor, real_flows_lr: torch.Tensor) -> torch.Tensor:
    """Same reduction as content_loss, over low-resolution flow volumes."""
    return _per_frame_l1(gen_flows, real_flows_lr)


def gradient_penalty(critic: nn.Module, real: torch.Tensor, gen: torch.Tensor,
                     rng: torch.Generator) -> torch.Tensor:
    """Two-sided penalty on the critic gradient norm along real-gen chords.

    interp = eps*real + (1-eps)*gen with eps ~ U(0,1) per sample; returns
    mean((||grad D(interp)||_2 - 1)^2) with the norm over each sample's volume.
    """
    if real.shape != gen.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(gen.shape)}")
    b = real.shape[0]
    eps = torch.rand(b, 1, 1, 1, 1, generator=rng, dtype=real.dtype, device=real.device)
    interp = (eps * real + (1.0 - eps) * gen.detach()).requires_grad_(True)
    scores = critic(interp)
    grads, = torch.autograd.grad(scores.sum(), interp, create_graph=True)
    norms = grads.reshape(b, -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic: nn.Module, real: torch.Tensor, gen: torch.Tensor,
                gp_lambda: float, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Wasserstein critic objective with gradient penalty; returns (loss, gp)."""
    gp = gradient_penalty(critic, real, gen, rng)
    loss = critic(gen.detach()).mean() - critic(real).mean() + gp_lambda * gp
    return loss, gp


def generator_adv_loss(critic: nn.Module, gen: torch.Tensor) -> torch.Tensor:
    """Generator side of the Wasserstein game: make critic scores high."""
    return -critic(gen).mean()


@dataclass
class LossReport:
    """All loss components of one step, as plain floats."""

    content: float
    motion: float
    adversarial_g: float
    critic: float
    gradient_penalty: float
    total: float

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not math.isfinite(v):
                raise TrainingDivergedError(f"loss component {name!r} is {v}")

    def json_record(self, step: int) -> dict:
        return {
            "step": step,
            "content": self.content,
            "motion": self.motion,
            "adv_g": self.adversarial_g,
            "critic": self.critic,
            "gp": self.gradient_penalty,
            "total": self.total,
        }


def weighted_total(content: torch.Tensor, motion: torch.Tensor, adv_g: torch.Tensor,
                   weights: tuple[float, float, float] = DEFAULT_WEIGHTS) -> torch.Tensor:
    """Differentiable weighted generator objective; NaN aborts training."""
    for name, part in (("content", content), ("motion", motion), ("adv_g", adv_g)):
        if not torch.isfinite(part).all():
            raise TrainingDivergedError(f"loss component {name!r} is non-finite")
    lc, lm, ladv = weights
    return lc * content + lm * motion + ladv * adv_g


def total_loss(content: float, motion: float, adv_g: float, critic: float = 0.0,
               gp: float = 0.0,
               weights: tuple[float, float, float] = DEFAULT_WEIGHTS) -> LossReport:
    """Assemble a LossReport; the total is recombined in float64 so it always
    equals the weighted sum of the reported parts."""
    content, motion, adv_g = float(content), float(motion), float(adv_g)
    lc, lm, ladv = weights
    return LossReport(
        content=content,
        motion=motion,
        adversarial_g=adv_g,
        critic=float(critic),
        gradient_penalty=float(gp),
        total=lc * content + lm * motion + ladv * adv_g,
    )
