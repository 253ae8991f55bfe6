import os
import struct

import pytest
import torch

from dtvnet.data import FrameSequence, synth_clip
from dtvnet.flow import (ExternalCommandEstimator, FlowFormatError, FlowProviderError,
                         FlowSequence, TranslationOracleEstimator, build_estimator,
                         downsample_flow, estimate_flows, read_flow_file, warp_frame,
                         write_flow_file)


def test_flow_sequence_validation():
    FlowSequence(torch.zeros(2, 1, 4, 4))
    with pytest.raises(ValueError):
        FlowSequence(torch.zeros(3, 1, 4, 4))
    with pytest.raises(ValueError):
        FlowSequence(torch.zeros(2, 0, 4, 4))
    bad = torch.zeros(2, 1, 4, 4)
    bad[0, 0, 0, 0] = float("inf")
    with pytest.raises(ValueError):
        FlowSequence(bad)


def test_flow_file_roundtrip_bitwise(tmp_path):
    flows = FlowSequence(torch.randn(2, 8, 32, 32))
    path = tmp_path / "f.dtvf"
    write_flow_file(flows, path)
    back = read_flow_file(path)
    assert torch.equal(back.data, flows.data)
    assert back.data.dtype == torch.float32


def test_flow_file_size_exact(tmp_path):
    # 4 (magic) + 12 (dims) + 4 bytes * 2 channels * 8*32*32
    flows = FlowSequence(torch.zeros(2, 8, 32, 32))
    path = tmp_path / "f.dtvf"
    write_flow_file(flows, path)
    assert os.path.getsize(path) == 16 + 2 * 8 * 32 * 32 * 4 == 65552


def test_flow_file_bad_magic(tmp_path):
    path = tmp_path / "x.dtvf"
    path.write_bytes(b"XXXX" + struct.pack("<III", 1, 4, 4) + b"\0" * (2 * 16 * 4))
    with pytest.raises(FlowFormatError, match="magic"):
        read_flow_file(path)


def test_flow_file_truncated_payload(tmp_path):
    flows = FlowSequence(torch.zeros(2, 2, 4, 4))
    path = tmp_path / "f.dtvf"
    write_flow_file(flows, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FlowFormatError, match="payload"):
        read_flow_file(path)


def test_flow_file_zero_t_rejected(tmp_path):
    path = tmp_path / "z.dtvf"
    path.write_bytes(b"DTVF" + struct.pack("<III", 0, 4, 4))
    with pytest.raises(FlowFormatError, match="t"):
        read_flow_file(path)


def test_downsample_uniform_exact():
    flows = FlowSequence(torch.full((2, 3, 8, 8), 4.0))
    out = downsample_flow(flows, 2)
    assert tuple(out.data.shape) == (2, 3, 4, 4)
    assert (out.data == 2.0).all()


def test_downsample_linearity():
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        u = torch.randn(2, 2, 8, 12, generator=gen)
        w = torch.randn(2, 2, 8, 12, generator=gen)
        a, b = 1.7, -0.3
        lhs = downsample_flow(FlowSequence(a * u + b * w), 2).data
        rhs = a * downsample_flow(FlowSequence(u), 2).data \
            + b * downsample_flow(FlowSequence(w), 2).data
        assert (lhs - rhs).abs().max() < 1e-6


def test_downsample_negation_commutes():
    u = torch.randn(2, 2, 8, 8)
    lhs = downsample_flow(FlowSequence(-u), 2).data
    rhs = -downsample_flow(FlowSequence(u), 2).data
    assert (lhs - rhs).abs().max() < 1e-6


def test_downsample_factor_validation():
    flows = FlowSequence(torch.zeros(2, 1, 6, 6))
    assert torch.equal(downsample_flow(flows, 1).data, flows.data)
    with pytest.raises(ValueError):
        downsample_flow(flows, 4)  # 4 does not divide 6
    with pytest.raises(ValueError):
        downsample_flow(flows, 0)


def test_warp_zero_flow_identity():
    frame = torch.randn(3, 8, 8)
    out = warp_frame(frame, torch.zeros(2, 8, 8))
    assert torch.equal(out, frame)


def test_warp_integer_shift_exact():
    frame = torch.arange(3 * 5 * 7, dtype=torch.float32).reshape(3, 5, 7)
    flow = torch.zeros(2, 5, 7)
    flow[0] = 2.0  # move content right by 2
    out = warp_frame(frame, flow)
    assert torch.equal(out[:, :, 2:], frame[:, :, :-2])
    # clamped border: leftmost columns replicate column 0
    assert torch.equal(out[:, :, 0], frame[:, :, 0])
    assert torch.equal(out[:, :, 1], frame[:, :, 0])


def test_warp_half_pixel_average():
    frame = torch.zeros(3, 4, 4)
    frame[:, :, 1] = 1.0
    flow = torch.full((2, 4, 4), 0.0)
    flow[0] = 0.5  # sample halfway between columns
    out = warp_frame(frame, flow)
    # column 1 samples at x=0.5: average of columns 0 (0.0) and 1 (1.0)
    assert torch.allclose(out[:, :, 1], torch.full((3, 4), 0.5))


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        warp_frame(torch.zeros(3, 8, 8), torch.zeros(2, 4, 4))


def test_oracle_recovers_velocity_exactly():
    est = TranslationOracleEstimator()
    for vel in [(0.0, 0.0), (1.0, 0.0), (-2.0, 3.0), (0.5, 0.25), (-1.25, 0.75)]:
        frames, flows = synth_clip(seed=11, t_frames=5, hw=(32, 48), velocity=vel)
        got = estimate_flows(frames, est)
        assert tuple(got.data.shape) == (2, 5, 32, 48)
        assert (got.data - flows.data).abs().max() < 1e-6, vel


def test_oracle_static_clip_exactly_zero():
    frames, _ = synth_clip(seed=7, t_frames=4, hw=(16, 16), velocity=(1.0, 0.0))
    static = FrameSequence(frames.data[:, :1].repeat(1, 5, 1, 1))
    got = estimate_flows(static, TranslationOracleEstimator())
    assert (got.data == 0).all()


def test_oracle_deterministic():
    frames, _ = synth_clip(seed=13, t_frames=4, hw=(16, 16), velocity=(0.5, -0.5))
    est = TranslationOracleEstimator()
    a = estimate_flows(frames, est)
    b = estimate_flows(frames, est)
    assert torch.equal(a.data, b.data)
    assert est.fingerprint() == est.fingerprint()


def test_estimate_flows_validation():
    frames, _ = synth_clip(seed=0, t_frames=2, hw=(16, 16), velocity=(0.0, 0.0))
    with pytest.raises(FlowProviderError):
        estimate_flows(frames, object())
    one = FrameSequence(frames.data[:, :1])
    with pytest.raises(ValueError):
        estimate_flows(one, TranslationOracleEstimator())


def test_estimate_flows_rejects_wrong_provider_shape():
    class Broken(TranslationOracleEstimator):
        name = "broken"

        def estimate(self, frames):
            return FlowSequence(torch.zeros(2, 1, 4, 4))

    frames, _ = synth_clip(seed=0, t_frames=3, hw=(16, 16), velocity=(0.0, 0.0))
    with pytest.raises(FlowProviderError, match="broken"):
        estimate_flows(frames, Broken())


def _fake_flow_script(tmp_path, body):
    script = tmp_path / "fake_flow.py"
    script.write_text(body)
    return f"python3 {script}"


def test_external_command_estimator(tmp_path):
    body = """import sys, glob, struct
frames = sorted(glob.glob(sys.argv[1] + "/frame_*.png"))
t = len(frames) - 1
from PIL import Image
w, h = Image.open(frames[0]).size
with open(sys.argv[2], "wb") as fh:
    fh.write(b"DTVF")
    fh.write(struct.pack("<III", t, h, w))
    fh.write(b"\\x00" * (2 * t * h * w * 4))
"""
    est = ExternalCommandEstimator(_fake_flow_script(tmp_path, body))
    frames, _ = synth_clip(seed=1, t_frames=3, hw=(8, 8), velocity=(0.0, 0.0))
    got = estimate_flows(frames, est)
    assert tuple(got.data.shape) == (2, 3, 8, 8)
    assert (got.data == 0).all()


def test_external_command_failure(tmp_path):
    est = ExternalCommandEstimator(
        _fake_flow_script(tmp_path, "import sys; sys.exit(3)"))
    frames, _ = synth_clip(seed=1, t_frames=2, hw=(8, 8), velocity=(0.0, 0.0))
    with pytest.raises(FlowProviderError, match="failed"):
        est.estimate(frames)


def test_external_command_missing_output(tmp_path):
    est = ExternalCommandEstimator(_fake_flow_script(tmp_path, "pass"))
    frames, _ = synth_clip(seed=1, t_frames=2, hw=(8, 8), velocity=(0.0, 0.0))
    with pytest.raises(FlowProviderError, match="no output"):
        est.estimate(frames)


def test_build_estimator_registry(monkeypatch):
    assert build_estimator("oracle").name == "oracle"
    monkeypatch.delenv("DTVNET_FLOW_CMD", raising=False)
    with pytest.raises(FlowProviderError):
        build_estimator("external")
    monkeypatch.setenv("DTVNET_FLOW_CMD", "mycmd --fast")
    est = build_estimator("external")
    assert est.command == ["mycmd", "--fast"]
    with pytest.raises(FlowProviderError):
        build_estimator("sift")
