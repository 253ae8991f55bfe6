"""Video quality metrics and test-split evaluation.

All metrics remap frames from [-1, 1] to [0, 1] and compute in float64. SSIM
follows the standard single-scale definition (11x11 Gaussian window, sigma
1.5, C1=0.01^2, C2=0.03^2, dynamic range 1); identical inputs score exactly
1.0 because numerator and denominator are built from bitwise-identical
subexpressions.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import FrameSequence, load_clip
from .flow import FlowEstimator, estimate_flows, read_flow_file

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _unwrap(x) -> torch.Tensor:
    return x.data if isinstance(x, FrameSequence) else x


def _to_unit(video: torch.Tensor) -> torch.Tensor:
    return (video.detach().to(torch.float64) + 1.0) / 2.0


def psnr(gen, real) -> float:
    """Mean over frames of 10*log10(1/MSE) in the [0,1] domain, capped 100 dB."""
    g, r = _unwrap(gen), _unwrap(real)
    if g.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(r.shape)}")
    a, b = _to_unit(g), _to_unit(r)
    mse = ((a - b) ** 2).mean(dim=(0, 2, 3))  # per frame
    vals = [PSNR_CAP_DB if m == 0.0 else min(10.0 * math.log10(1.0 / m), PSNR_CAP_DB)
            for m in mse.tolist()]
    return sum(vals) / len(vals)


def _gaussian_window(dtype) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def ssim(gen, real) -> float:
    """Single-scale SSIM per (frame, channel), averaged; valid convolution."""
    g, r = _unwrap(gen), _unwrap(real)
    if g.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(r.shape)}")
    h, w = g.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"frames {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = _to_unit(g).reshape(-1, 1, h, w)  # each (channel, frame) plane separately
    y = _to_unit(r).reshape(-1, 1, h, w)
    win = _gaussian_window(x.dtype).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    # sigma_xy reduces to sigma_x^2 bitwise when x == y, making SSIM(a,a)=1 exact
    sigma_x = F.conv2d(x * x, win) - mu_x * mu_x
    sigma_y = F.conv2d(y * y, win) - mu_y * mu_y
    sigma_xy = F.conv2d(x * y, win) - mu_x * mu_y

    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return (num / den).mean().item()


def flow_mse(gen, real, provider: FlowEstimator) -> float:
    """Mean squared difference of provider-estimated flows on both sequences."""
    g = gen if isinstance(gen, FrameSequence) else FrameSequence(gen)
    r = real if isinstance(real, FrameSequence) else FrameSequence(real)
    if g.data.shape != r.data.shape:
        raise ValueError(
            f"shape mismatch: {tuple(g.data.shape)} vs {tuple(r.data.shape)}")
    fg = estimate_flows(g, provider).data.to(torch.float64)
    fr = estimate_flows(r, provider).data.to(torch.float64)
    return ((fg - fr) ** 2).mean().item()


@dataclass
class ClipScore:
    clip_id: str
    psnr: float
    ssim: float
    flow_mse: float


@dataclass
class EvalReport:
    """Aggregate metrics (means of per-clip values) plus per-clip detail."""

    psnr: float
    ssim: float
    flow_mse: float
    per_clip: list[ClipScore]
    failures: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "aggregate": {"psnr": self.psnr, "ssim": self.ssim,
                          "flow_mse": self.flow_mse},
            "per_clip": [vars(c) for c in self.per_clip],
            "failures": self.failures,
        }, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(psnr=d["aggregate"]["psnr"], ssim=d["aggregate"]["ssim"],
                   flow_mse=d["aggregate"]["flow_mse"],
                   per_clip=[ClipScore(**c) for c in d["per_clip"]],
                   failures=d["failures"])


def score_pair(gen: FrameSequence, real: FrameSequence,
               provider: FlowEstimator) -> tuple[float, float, float]:
    return (psnr(gen, real), ssim(gen, real), flow_mse(gen, real, provider))


def evaluate(checkpoint, manifests, provider: FlowEstimator,
             split: str = "test") -> EvalReport:
    """Reconstruction-protocol evaluation over a split.

    Per clip: encode the motion vector from the clip's real flows, generate
    from frame 0, and score the generated frames 1..T against ground truth.
    Per-clip errors are recorded and skipped rather than aborting the run.
    """
    from .training import Checkpoint, TrainConfig, build_model, build_model_from_checkpoint

    if isinstance(checkpoint, (str, Path)):
        model, ckpt = build_model_from_checkpoint(checkpoint)
    elif isinstance(checkpoint, Checkpoint):
        model = build_model(TrainConfig.from_dict(checkpoint.config))
        named = model.named_tensors()
        with torch.no_grad():
            for name, p in named.items():
                p.copy_(checkpoint.tensors[name])
        ckpt = checkpoint
    else:
        raise TypeError(f"expected a checkpoint or path, got {type(checkpoint)!r}")
    cfg = TrainConfig.from_dict(ckpt.config)

    selected = [m for m in manifests if m.split == split]
    if not selected:
        raise ValueError(f"no clips in the {split!r} split")

    scores, failures = [], []
    for m in selected:
        try:
            frames = load_clip(m, target_hw=cfg.hw, t_frames=cfg.t_frames)
            if m.flow_cache_path and Path(m.flow_cache_path).exists():
                flows = read_flow_file(m.flow_cache_path)
            else:
                flows = estimate_flows(frames, provider)
            with torch.no_grad():
                f = model.flow_encoder(flows.data.unsqueeze(0))
                video, _ = model.generator(frames.data[:, 0].unsqueeze(0), f)
            gen = FrameSequence(video[0])
            real = FrameSequence(frames.data[:, 1:])
            p, s, fm = score_pair(gen, real, provider)
            scores.append(ClipScore(clip_id=m.clip_id, psnr=p, ssim=s, flow_mse=fm))
        except Exception as exc:  # keep scoring the remaining clips
            failures.append({"clip_id": m.clip_id, "error": str(exc)})
    if not scores:
        raise RuntimeError(f"every clip failed: {failures}")
    n = len(scores)
    return EvalReport(
        psnr=sum(c.psnr for c in scores) / n,
        ssim=sum(c.ssim for c in scores) / n,
        flow_mse=sum(c.flow_mse for c in scores) / n,
        per_clip=scores,
        failures=failures,
    )
