"""Optical flow encoder: flow sequence -> normalized 512-d motion vector.

The encoder is a stack of strided 3D convolutions that collapses a
[2, t, h, w] flow volume into a single 512-vector, which is then standardized
to zero mean / unit variance across its entries. Standardization makes
training-time vectors statistically compatible with vectors drawn from a
standard normal at generation time.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .flow import FlowSequence

MOTION_DIM = 512


class DegenerateVectorError(ValueError):
    """Raised when a vector is too close to constant to standardize."""


@dataclass
class MotionVector:
    """Normalized 512-d motion code; mean ~ 0, population std ~ 1."""

    values: torch.Tensor

    def __post_init__(self):
        v = self.values
        if v.ndim != 1 or v.shape[0] != MOTION_DIM:
            raise ValueError(f"expected a [{MOTION_DIM}] vector, got {tuple(v.shape)}")
        if not torch.isfinite(v).all():
            raise ValueError("motion vector contains non-finite values")


def _standardize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """(x - mean) / population std along `dim`; errors on near-constant input."""
    std = x.var(dim=dim, unbiased=False, keepdim=True).sqrt()
    if (std < 1e-8).any():
        raise DegenerateVectorError(
            f"vector is near-constant (population std {std.min().item():.3e} < 1e-8)"
        )
    return (x - x.mean(dim=dim, keepdim=True)) / std


def normalize_vector(raw: torch.Tensor) -> MotionVector:
    """Standardize a raw 512-vector to zero mean, unit population std."""
    if raw.ndim != 1 or raw.shape[0] != MOTION_DIM:
        raise ValueError(f"expected a [{MOTION_DIM}] vector, got {tuple(raw.shape)}")
    return MotionVector(_standardize(raw, dim=0))


def sample_motion_vector(rng_seed: int) -> MotionVector:
    """Draw 512 i.i.d. standard normals and standardize; deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    raw = torch.from_numpy(rng.standard_normal(MOTION_DIM).astype(np.float32))
    return normalize_vector(raw)


@dataclass(frozen=True)
class OFEConfig:
    """Architecture plan for the flow encoder.

    Strides adapt per axis: each block halves an axis (stride 2) while it is
    larger than 1, then leaves it alone (stride 1, kernel 3). Normalization is
    skipped on blocks whose output has a single element per channel, where
    instance statistics are undefined.
    """

    input_t: int
    input_hw: tuple[int, int]
    base_channels: int = 32
    num_blocks: int = 5

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_t < 1 or min(self.input_hw) < 1:
            raise ValueError(
                f"input dims must be >= 1, got t={self.input_t}, hw={self.input_hw}"
            )
        self.plan()  # validates the shape trace

    def plan(self):
        """Per-block (in_ch, out_ch, kernel, stride, padding, out_dims, use_norm)."""
        outs = [self.base_channels * 2 ** i for i in range(self.num_blocks - 1)]
        outs.append(MOTION_DIM)
        t, (h, w) = self.input_t, self.input_hw
        blocks = []
        in_ch = 2
        for out_ch in outs:
            kernel, stride, pad, dims = [], [], [], []
            for size, k_full in ((t, 3), (h, 4), (w, 4)):
                if size > 1:
                    k, s, p = k_full, 2, 1
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


class OpticalFlowEncoder(nn.Module):
    """3D-conv encoder psi: [B, 2, t, h, w] flows -> [B, 512] motion vectors."""

    def __init__(self, cfg: OFEConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        for in_ch, out_ch, kernel, stride, pad, _dims, use_norm in cfg.plan():
            layers.append(nn.Conv3d(in_ch, out_ch, kernel, stride, pad))
            if use_norm:
                layers.append(nn.InstanceNorm3d(out_ch, affine=False))
            layers.append(nn.LeakyReLU(0.2))
        self.blocks = nn.Sequential(*layers)

    def forward(self, flows: torch.Tensor) -> torch.Tensor:
        if flows.ndim != 5 or flows.shape[1] != 2:
            raise ValueError(f"expected [B,2,t,h,w] flows, got {tuple(flows.shape)}")
        expected = (self.cfg.input_t, *self.cfg.input_hw)
        if tuple(flows.shape[2:]) != expected:
            raise ValueError(
                f"flow dims {tuple(flows.shape[2:])} do not match config {expected}"
            )
        feat = self.blocks(flows)
        pooled = feat.mean(dim=(2, 3, 4))
        return _standardize(pooled, dim=1)


def encode_flows(flows: FlowSequence, encoder: OpticalFlowEncoder) -> MotionVector:
    """Encode one flow sequence to its motion vector."""
    out = encoder(flows.data.unsqueeze(0).to(next(encoder.parameters()).dtype))
    return MotionVector(out[0])
