"""Dataset ingestion, frame normalization, and synthetic clips with exact flow.

Clips are directories of pre-extracted 8-bit image frames indexed by a JSON
manifest. Frames are normalized to [-1, 1]. `synth_clip` builds a smoothly
textured pattern that translates by a fixed velocity per step, together with
its exact ground-truth flow, so the training and evaluation stack can be
checked without an external flow estimator.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Malformed manifest file or record."""


class ClipLoadError(RuntimeError):
    """A frame file is missing or cannot be decoded."""


class ClipLengthError(ValueError):
    """A clip has fewer frames than the requested sequence length."""


@dataclass
class FrameSequence:
    """Normalized video tensor of shape [3, time, height, width].

    Every element lies in [-1, 1]; dimensionless intensity.
    """

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[0] != 3:
            raise ValueError(f"expected frames of shape [3,t,h,w], got {tuple(d.shape)}")
        if d.shape[1] < 1:
            raise ValueError("frame sequence needs at least one frame")
        if not torch.isfinite(d).all():
            raise ValueError("frame sequence contains non-finite values")
        if d.abs().max().item() > 1.0:
            raise ValueError("frame values outside [-1, 1]")

    @property
    def time(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass
class ClipManifest:
    """Index record binding a clip's frame files, cached flow, and split."""

    clip_id: str
    frame_paths: list
    split: str
    native_hw: tuple
    flow_cache_path: Path | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.clip_id:
            raise ManifestError("clip_id must be non-empty")
        self.frame_paths = [Path(p) for p in self.frame_paths]
        if self.flow_cache_path is not None:
            self.flow_cache_path = Path(self.flow_cache_path)
        self.native_hw = (int(self.native_hw[0]), int(self.native_hw[1]))


def normalize_frames(arr: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities affinely onto [-1, 1] (0 -> -1.0, 255 -> 1.0)."""
    return ((arr.astype(np.float32) - 127.5) / np.float32(127.5)).astype(np.float32)


def denormalize_frames(arr: np.ndarray) -> np.ndarray:
    """Invert `normalize_frames`; exact round-trip on all 256 byte values."""
    x = np.asarray(arr, dtype=np.float64) * 127.5 + 127.5
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def load_clip(manifest: ClipManifest, target_hw: tuple, t_frames: int) -> FrameSequence:
    """Load the first t_frames+1 frames of a clip, resized and normalized.

    Resampling is bilinear (align_corners off). Returns a FrameSequence of
    shape [3, t_frames+1, H, W]; the first returned frame is frame_paths[0].
    """
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 8 or tw < 8:
        raise ValueError(f"target size must be at least 8x8, got {(th, tw)}")
    needed = t_frames + 1
    if len(manifest.frame_paths) < needed:
        raise ClipLengthError(
            f"clip {manifest.clip_id!r} has {len(manifest.frame_paths)} frames, "
            f"needs {needed}"
        )
    frames = []
    for path in manifest.frame_paths[:needed]:
        try:
            with Image.open(path) as img:
                frames.append(np.asarray(img.convert("RGB")))
        except (OSError, ValueError) as exc:
            raise ClipLoadError(f"cannot load frame {path}: {exc}") from exc
    stack = normalize_frames(np.stack(frames))          # [n, h, w, 3]
    tensor = torch.from_numpy(stack).permute(0, 3, 1, 2)  # [n, 3, h, w]
    if tensor.shape[-2:] != (th, tw):
        tensor = F.interpolate(tensor, size=(th, tw), mode="bilinear", align_corners=False)
        tensor = tensor.clamp(-1.0, 1.0)
    return FrameSequence(tensor.permute(1, 0, 2, 3).contiguous())


def synth_clip(seed: int, t_frames: int, hw: tuple, velocity: tuple):
    """Synthesize a translating band-limited texture and its exact flow.

    The pattern is a per-channel sum of eight low-frequency sinusoids that is
    periodic over the image, translated by exactly `velocity` (px/frame,
    (horizontal, vertical)) per step with wraparound. Returns
    (FrameSequence [3, t_frames+1, h, w], FlowSequence [2, t_frames, h, w])
    where every flow vector equals `velocity`.
    """
    from .flow import FlowSequence

    h, w = int(hw[0]), int(hw[1])
    vx, vy = float(velocity[0]), float(velocity[1])
    limit = min(h, w) / t_frames
    if abs(vx) >= limit or abs(vy) >= limit:
        raise ValueError(
            f"velocity components must stay below min(hw)/t_frames = {limit:.3f}, "
            f"got {(vx, vy)}"
        )

    rng = np.random.default_rng(seed)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    n_comp = 8
    frames = np.zeros((3, t_frames + 1, h, w), dtype=np.float64)
    for c in range(3):
        # The first two components pin one horizontal and one vertical cycle so
        # the pattern always carries motion information along both axes.
        freqs = [(1, 0), (0, 1)]
        while len(freqs) < n_comp:
            fx, fy = rng.integers(-3, 4), rng.integers(-3, 4)
            if (fx, fy) != (0, 0):
                freqs.append((int(fx), int(fy)))
        amps = rng.uniform(0.2, 1.0, size=n_comp)
        amps /= np.array([1.0 + fx * fx + fy * fy for fx, fy in freqs])
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_comp)
        scale = amps.sum()
        for (fx, fy), amp, phase in zip(freqs, amps, phases):
            base = 2.0 * np.pi * (fx * xs / w + fy * ys / h) + phase
            omega = 2.0 * np.pi * (fx * vx / w + fy * vy / h)
            for t in range(t_frames + 1):
                frames[c, t] += amp * np.sin(base - omega * t)
        frames[c] /= scale

    data = torch.from_numpy(np.clip(frames, -1.0, 1.0).astype(np.float32))
    flow = np.empty((2, t_frames, h, w), dtype=np.float32)
    flow[0] = vx
    flow[1] = vy
    return FrameSequence(data), FlowSequence(torch.from_numpy(flow))


def split_dataset(manifests: list, ratios: tuple, seed: int) -> list:
    """Assign each clip to exactly one split, deterministically for a seed.

    Counts follow the ratios via largest-remainder rounding. Returns new
    manifest records in the input order.
    """
    if not manifests:
        raise ValueError("cannot split an empty manifest list")
    r = [float(x) for x in ratios]
    if len(r) != 3 or any(x <= 0 for x in r):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(r)!r}")

    n = len(manifests)
    exact = [n * x for x in r]
    counts = [int(np.floor(e)) for e in exact]
    leftover = n - sum(counts)
    remainders = sorted(range(3), key=lambda i: (exact[i] - counts[i], -i), reverse=True)
    for i in range(leftover):
        counts[remainders[i]] += 1

    order = np.random.default_rng(seed).permutation(n)
    assigned = {}
    pos = 0
    for split, count in zip(SPLITS, counts):
        for idx in order[pos:pos + count]:
            assigned[int(idx)] = split
        pos += count
    return [dataclasses.replace(m, split=assigned[i]) for i, m in enumerate(manifests)]


def save_manifest(manifests: list, path) -> None:
    """Write a manifest JSON file; frame/flow paths are stored relative to it."""
    path = Path(path)
    base = path.resolve().parent

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return p.as_posix()

    ids = [m.clip_id for m in manifests]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise ManifestError(f"duplicate clip_id values: {sorted(dupes)}")

    records = []
    for m in manifests:
        records.append({
            "clip_id": m.clip_id,
            "frames": [rel(p) for p in m.frame_paths],
            "flow_cache": rel(m.flow_cache_path) if m.flow_cache_path else None,
            "split": m.split,
            "native_hw": [m.native_hw[0], m.native_hw[1]],
        })
    path.write_text(json.dumps(records, indent=2) + "\n")


def load_manifest(path) -> list:
    """Read a manifest JSON file, resolving paths relative to its directory."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid manifest JSON in {path}: {exc}") from exc
    if not isinstance(records, list):
        raise ManifestError(f"manifest {path} must contain a top-level list")
    base = path.resolve().parent
    manifests = []
    seen = set()
    for rec in records:
        try:
            clip_id = rec["clip_id"]
            manifests.append(ClipManifest(
                clip_id=clip_id,
                frame_paths=[base / p for p in rec["frames"]],
                split=rec["split"],
                native_hw=tuple(rec["native_hw"]),
                flow_cache_path=base / rec["flow_cache"] if rec.get("flow_cache") else None,
            ))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"bad manifest record in {path}: {exc}") from exc
        if clip_id in seen:
            raise ManifestError(f"duplicate clip_id {clip_id!r} in {path}")
        seen.add(clip_id)
    return manifests
