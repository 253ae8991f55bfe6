import numpy as np
import pytest
import torch
from PIL import Image

from dtvnet.data import (ClipLengthError, ClipLoadError, ClipManifest, FrameSequence,
                         ManifestError, denormalize_frames, load_clip, load_manifest,
                         normalize_frames, save_manifest, split_dataset, synth_clip)


def test_normalize_endpoints_exact():
    arr = np.array([[[0, 255, 127, 128]]], dtype=np.uint8)
    out = normalize_frames(arr)
    assert out.dtype == np.float32
    assert out[0, 0, 0] == -1.0
    assert out[0, 0, 1] == 1.0
    # 127/128 straddle the center symmetrically; no byte maps to exactly 0
    assert abs(out[0, 0, 2] + 1 / 255) < 1e-9
    assert abs(out[0, 0, 3] - 1 / 255) < 1e-9


def test_normalize_denormalize_roundtrip_exact():
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    back = denormalize_frames(normalize_frames(arr))
    assert back.dtype == np.uint8
    assert np.array_equal(back, arr)


def test_frame_sequence_validation():
    FrameSequence(torch.zeros(3, 2, 8, 8))
    with pytest.raises(ValueError):
        FrameSequence(torch.zeros(1, 2, 8, 8))  # wrong channel count
    with pytest.raises(ValueError):
        FrameSequence(torch.zeros(3, 0, 8, 8))  # no frames
    with pytest.raises(ValueError):
        FrameSequence(torch.full((3, 2, 8, 8), 1.5))  # out of range
    bad = torch.zeros(3, 2, 8, 8)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        FrameSequence(bad)


def _write_clip(tmp_path, n_frames, hw=(16, 16), value=None):
    paths = []
    rng = np.random.default_rng(1)
    for t in range(n_frames):
        arr = (np.full((*hw, 3), value, dtype=np.uint8) if value is not None
               else rng.integers(0, 256, size=(*hw, 3), dtype=np.uint8))
        p = tmp_path / f"frame_{t:04d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return ClipManifest(clip_id="c0", frame_paths=paths, split="train", native_hw=hw)


def test_load_clip_shapes_and_range(tmp_path):
    m = _write_clip(tmp_path, 5)
    frames = load_clip(m, target_hw=(16, 16), t_frames=4)
    assert tuple(frames.data.shape) == (3, 5, 16, 16)
    assert frames.data.dtype == torch.float32
    assert frames.data.abs().max() <= 1.0


def test_load_clip_resizes(tmp_path):
    m = _write_clip(tmp_path, 3, hw=(32, 32))
    frames = load_clip(m, target_hw=(16, 16), t_frames=2)
    assert tuple(frames.data.shape) == (3, 3, 16, 16)


def test_load_clip_too_short(tmp_path):
    m = _write_clip(tmp_path, 3)
    with pytest.raises(ClipLengthError):
        load_clip(m, target_hw=(16, 16), t_frames=8)


def test_load_clip_missing_file_names_path(tmp_path):
    m = _write_clip(tmp_path, 3)
    missing = tmp_path / "gone.png"
    m = ClipManifest(clip_id="c0", frame_paths=[*m.frame_paths[:2], missing],
                     split="train", native_hw=(16, 16))
    with pytest.raises(ClipLoadError, match="gone.png"):
        load_clip(m, target_hw=(16, 16), t_frames=2)


def test_synth_clip_shapes_and_determinism():
    a_frames, a_flows = synth_clip(seed=3, t_frames=6, hw=(16, 24), velocity=(1.0, -0.5))
    b_frames, b_flows = synth_clip(seed=3, t_frames=6, hw=(16, 24), velocity=(1.0, -0.5))
    assert tuple(a_frames.data.shape) == (3, 7, 16, 24)
    assert tuple(a_flows.data.shape) == (2, 6, 16, 24)
    assert torch.equal(a_frames.data, b_frames.data)
    assert torch.equal(a_flows.data, b_flows.data)
    c_frames, _ = synth_clip(seed=4, t_frames=6, hw=(16, 24), velocity=(1.0, -0.5))
    assert not torch.equal(a_frames.data, c_frames.data)


def test_synth_clip_static_case():
    frames, flows = synth_clip(seed=0, t_frames=4, hw=(16, 16), velocity=(0.0, 0.0))
    for t in range(1, 5):
        assert torch.equal(frames.data[:, t], frames.data[:, 0])
    assert (flows.data == 0).all()


def test_synth_clip_constant_flow_equals_velocity():
    _, flows = synth_clip(seed=2, t_frames=5, hw=(16, 16), velocity=(1.25, -0.75))
    assert (flows.data[0] == 1.25).all()
    assert (flows.data[1] == -0.75).all()


def test_synth_clip_velocity_bound():
    with pytest.raises(ValueError):
        synth_clip(seed=0, t_frames=8, hw=(16, 16), velocity=(3.0, 0.0))


def test_split_dataset_counts_and_partition():
    ms = [ClipManifest(clip_id=f"c{i}", frame_paths=[], split="train",
                       native_hw=(8, 8)) for i in range(10)]
    out = split_dataset(ms, (0.7, 0.15, 0.15), seed=0)
    counts = {s: sum(1 for m in out if m.split == s) for s in ("train", "val", "test")}
    assert counts == {"train": 7, "val": 2, "test": 1}
    assert [m.clip_id for m in out] == [m.clip_id for m in ms]  # order preserved
    again = split_dataset(ms, (0.7, 0.15, 0.15), seed=0)
    assert [m.split for m in again] == [m.split for m in out]
    other = split_dataset(ms, (0.7, 0.15, 0.15), seed=1)
    assert [m.split for m in other] != [m.split for m in out]


def test_split_dataset_validation():
    ms = [ClipManifest(clip_id="c", frame_paths=[], split="train", native_hw=(8, 8))]
    with pytest.raises(ValueError):
        split_dataset([], (0.7, 0.15, 0.15), seed=0)
    with pytest.raises(ValueError):
        split_dataset(ms, (0.5, 0.2, 0.2), seed=0)  # does not sum to 1
    with pytest.raises(ValueError):
        split_dataset(ms, (1.0, 0.0, 0.0), seed=0)  # non-positive ratio


def test_manifest_roundtrip(tmp_path):
    clip_dir = tmp_path / "clips"
    clip_dir.mkdir()
    paths = [clip_dir / f"f{t}.png" for t in range(3)]
    ms = [
        ClipManifest(clip_id="a", frame_paths=paths, split="train",
                     native_hw=(16, 16), flow_cache_path=tmp_path / "a.dtvf"),
        ClipManifest(clip_id="b", frame_paths=paths, split="test", native_hw=(8, 8)),
    ]
    path = tmp_path / "manifest.json"
    save_manifest(ms, path)
    back = load_manifest(path)
    assert len(back) == 2
    assert back[0].clip_id == "a"
    assert back[0].split == "train"
    assert back[0].native_hw == (16, 16)
    assert [p.resolve() for p in back[0].frame_paths] == [p.resolve() for p in paths]
    assert back[0].flow_cache_path.resolve() == (tmp_path / "a.dtvf").resolve()
    assert back[1].flow_cache_path is None


def test_manifest_duplicate_ids(tmp_path):
    ms = [ClipManifest(clip_id="a", frame_paths=[], split="train", native_hw=(8, 8)),
          ClipManifest(clip_id="a", frame_paths=[], split="val", native_hw=(8, 8))]
    with pytest.raises(ManifestError):
        save_manifest(ms, tmp_path / "m.json")
