"""Optical flow sequences: estimation providers, file format, pooling, warping.

A flow sequence is a [2, time, height, width] tensor in pixels/frame; channel
0 is horizontal displacement, channel 1 vertical. Flows are forward
displacements: entry t moves frame t onto frame t+1. The flow estimator is a
frozen external component behind a small provider interface; it is never
trained here.
"""

import os
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import FrameSequence, denormalize_frames

FLOW_MAGIC = b"DTVF"
_HEADER = struct.Struct("<4sIII")  # magic, t, h, w (little-endian)


class FlowFormatError(ValueError):
    """Malformed flow file (bad magic, dims, or payload size)."""


class FlowProviderError(RuntimeError):
    """A flow provider is unavailable or failed to produce flows."""


@dataclass
class FlowSequence:
    """Dense per-step flow fields, shape [2, time, height, width], px/frame."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[0] != 2:
            raise ValueError(f"expected flows of shape [2,t,h,w], got {tuple(d.shape)}")
        if d.shape[1] < 1:
            raise ValueError("flow sequence needs at least one step")
        if not torch.isfinite(d).all():
            raise ValueError("flow sequence contains non-finite values")

    @property
    def time(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


def write_flow_file(flows: FlowSequence, path) -> None:
    """Write flows as magic 'DTVF', uint32 t/h/w, then float32 payload.

    Payload is little-endian in [channel, time, row, col] order; write followed
    by read is bit-exact.
    """
    t, h, w = flows.time, flows.height, flows.width
    for name, v in (("t", t), ("h", h), ("w", w)):
        if v > 0xFFFFFFFF:
            raise FlowFormatError(f"dimension {name}={v} overflows the uint32 header field")
    payload = flows.data.detach().cpu().numpy().astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FLOW_MAGIC, t, h, w))
        fh.write(payload.tobytes())


def read_flow_file(path) -> FlowSequence:
    """Read a flow file written by `write_flow_file`."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FlowFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, t, h, w = _HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}, expected {FLOW_MAGIC!r}")
    if t < 1:
        raise FlowFormatError(f"{path}: header field t must be >= 1, got {t}")
    expected = 2 * t * h * w * 4
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise FlowFormatError(
            f"{path}: payload is {len(body)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(body, dtype="<f4").reshape(2, t, h, w)
    return FlowSequence(torch.from_numpy(arr.copy()))


def downsample_flow(flows: FlowSequence, factor: int) -> FlowSequence:
    """Mean-pool flows spatially and rescale displacements to the new grid.

    Pooling is factor x factor; displacements are divided by `factor` since
    pixel units shrink with resolution. The time dimension is unchanged.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return FlowSequence(flows.data.clone())
    h, w = flows.height, flows.width
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide spatial dims {(h, w)}")
    d = flows.data
    pooled = d.reshape(2, flows.time, h // factor, factor, w // factor, factor).mean(dim=(3, 5))
    return FlowSequence(pooled / factor)


def warp_frame(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp a [3,H,W] frame by a [2,H,W] forward-displacement field.

    Implemented as backward bilinear sampling: output(x) = frame(x - u(x)).
    Sample coordinates outside the image clamp to the border.
    """
    if frame.ndim != 3 or flow.ndim != 3 or frame.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"shape mismatch: frame {tuple(frame.shape)} vs flow {tuple(flow.shape)}"
        )
    f = frame.detach().cpu().numpy().astype(np.float64)
    u = flow.detach().cpu().numpy().astype(np.float64)
    h, w = f.shape[-2:]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = np.clip(xs - u[0], 0.0, w - 1.0)
    sy = np.clip(ys - u[1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    out = (
        f[:, y0, x0] * (1 - fy) * (1 - fx)
        + f[:, y0, x1] * (1 - fy) * fx
        + f[:, y1, x0] * fy * (1 - fx)
        + f[:, y1, x1] * fy * fx
    )
    return torch.from_numpy(out.astype(np.float64)).to(frame.dtype)


class FlowEstimator:
    """Interface for frozen flow providers."""

    name = "base"

    def estimate(self, frames: FrameSequence) -> FlowSequence:
        raise NotImplementedError

    def fingerprint(self) -> str:
        """Stable digest of provider state; must not change across calls."""
        return self.name


def estimate_flows(frames: FrameSequence, estimator: FlowEstimator) -> FlowSequence:
    """Estimate per-step flows for a T+1-frame clip; returns T flow fields."""
    if not isinstance(estimator, FlowEstimator):
        raise FlowProviderError(f"not a flow provider: {estimator!r}")
    if frames.time < 2:
        raise ValueError("need at least two frames to estimate flow")
    flows = estimator.estimate(frames)
    expected = (2, frames.time - 1, frames.height, frames.width)
    if tuple(flows.data.shape) != expected:
        raise FlowProviderError(
            f"provider {estimator.name!r} returned shape {tuple(flows.data.shape)}, "
            f"expected {expected}"
        )
    return flows


class TranslationOracleEstimator(FlowEstimator):
    """Exact estimator for clips that translate uniformly with wraparound.

    Recovers the per-step global translation by phase correlation: an integer
    peak from the normalized cross-power spectrum, refined to subpixel by a
    weighted least-squares fit of the low-frequency phase differences. For the
    periodic band-limited patterns produced by `synth_clip` this recovers the
    true velocity to floating-point accuracy. Test/synthetic use only; real
    clips need an external estimator.
    """

    name = "oracle"

    def estimate(self, frames: FrameSequence) -> FlowSequence:
        arr = frames.data.detach().cpu().numpy().astype(np.float64)
        n, h, w = arr.shape[1], arr.shape[2], arr.shape[3]
        out = np.empty((2, n - 1, h, w), dtype=np.float32)
        for t in range(n - 1):
            dx, dy = _pair_translation(arr[:, t], arr[:, t + 1])
            out[0, t] = dx
            out[1, t] = dy
        return FlowSequence(torch.from_numpy(out))


def _pair_translation(prev: np.ndarray, nxt: np.ndarray):
    """Global translation (dx, dy) such that nxt(x) ~= prev(x - v), periodic."""
    if np.array_equal(prev, nxt):  # no change -> exactly zero motion
        return 0.0, 0.0
    h, w = prev.shape[-2:]
    fa = np.fft.fft2(prev)
    fb = np.fft.fft2(nxt)
    cross = fb * np.conj(fa)  # [c, h, w]
    mag = np.abs(cross)
    mag[:, 0, 0] = 0.0  # DC carries no displacement information
    peak = mag.max()
    if peak <= 0.0:
        return 0.0, 0.0
    mask = mag > peak * 1e-8

    # Integer part: peak of the phase-correlation surface summed over channels.
    unit = np.zeros_like(cross)
    np.divide(cross, mag, out=unit, where=mask)
    surface = np.fft.ifft2(unit).real.sum(axis=0)
    iy, ix = np.unravel_index(int(np.argmax(surface)), surface.shape)
    dx0 = float(ix if ix <= w // 2 else ix - w)
    dy0 = float(iy if iy <= h // 2 else iy - h)

    # Subpixel part: remaining phase slope over low frequencies, where the
    # residual |k . delta| stays well below the wrapping threshold.
    ky = np.fft.fftfreq(h)[None, :, None]  # cycles/px
    kx = np.fft.fftfreq(w)[None, None, :]
    low = mask & (np.abs(kx) <= 0.125) & (np.abs(ky) <= 0.125)
    if not low.any():
        return dx0, dy0
    shift_back = np.exp(2j * np.pi * (kx * dx0 + ky * dy0))
    phases = np.angle((cross * shift_back)[low])
    kxs = np.broadcast_to(kx, cross.shape)[low]
    kys = np.broadcast_to(ky, cross.shape)[low]
    weights = np.sqrt(mag[low])
    a = 2.0 * np.pi * np.stack([kxs, kys], axis=1) * weights[:, None]
    b = -phases * weights
    delta, *_ = np.linalg.lstsq(a, b, rcond=None)
    return dx0 + float(delta[0]), dy0 + float(delta[1])


class ExternalCommandEstimator(FlowEstimator):
    """Provider that shells out to a pretrained flow estimator.

    The command is invoked as `<command> <frames_dir> <output_flow_file>`;
    frames are written as frame_0000.png ... and the command must write a
    flow file in the format of `write_flow_file`. Each call runs in a fresh
    temporary directory, so concurrent use is safe.
    """

    name = "external"

    def __init__(self, command: str):
        if not command:
            raise FlowProviderError("external flow provider needs a non-empty command")
        self.command = shlex.split(command)

    def estimate(self, frames: FrameSequence) -> FlowSequence:
        arr = frames.data.detach().cpu().numpy()
        with tempfile.TemporaryDirectory(prefix="dtvnet_flow_") as tmp:
            frames_dir = Path(tmp) / "frames"
            frames_dir.mkdir()
            from PIL import Image

            for t in range(frames.time):
                img = denormalize_frames(arr[:, t].transpose(1, 2, 0))
                Image.fromarray(img).save(frames_dir / f"frame_{t:04d}.png")
            out_path = Path(tmp) / "flows.dtvf"
            proc = subprocess.run(
                self.command + [str(frames_dir), str(out_path)],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise FlowProviderError(
                    f"flow command {' '.join(self.command)!r} failed "
                    f"({proc.returncode}): {proc.stderr.strip()}"
                )
            if not out_path.exists():
                raise FlowProviderError(
                    f"flow command {' '.join(self.command)!r} wrote no output file"
                )
            return read_flow_file(out_path)

    def fingerprint(self) -> str:
        return "external:" + " ".join(self.command)


FLOW_CMD_ENV = "DTVNET_FLOW_CMD"


def build_estimator(name: str, command: str | None = None) -> FlowEstimator:
    """Create a registered flow provider by name ('oracle' or 'external')."""
    if name == "oracle":
        return TranslationOracleEstimator()
    if name == "external":
        command = command or os.environ.get(FLOW_CMD_ENV, "")
        if not command:
            raise FlowProviderError(
                f"external flow provider selected but no command given "
                f"(set {FLOW_CMD_ENV} or pass --flow-cmd)"
            )
        return ExternalCommandEstimator(command)
    raise FlowProviderError(f"unknown flow provider {name!r}; use 'oracle' or 'external'")
