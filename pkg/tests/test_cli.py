import json
import shutil
import subprocess

import pytest
import yaml

from dtvnet import __version__
from dtvnet.cli import main
from dtvnet.data import load_manifest, save_manifest

from test_training import _make_dataset


def _prepare(tmp_path, n=6, seed="0"):
    data = tmp_path / "data"
    rc = main(["prepare", "--synthetic", str(n), "--out", str(data),
               "--t", "2", "--hw", "16", "--seed", seed])
    assert rc == 0
    return data


def _train(tmp_path, data, extra=()):
    run = tmp_path / "run"
    cfg_file = tmp_path / "widths.yaml"
    cfg_file.write_text(yaml.safe_dump({
        "dvg_base_channels": 8, "critic_base_channels": 8,
        "ofe_base_channels": 8, "ofe_num_blocks": 3, "n_adain_layers": 2,
        "epochs": 7,  # overridden on the command line below
    }))
    rc = main(["train", "--manifest", str(data / "manifest.json"),
               "--out", str(run), "--config", str(cfg_file),
               "--epochs", "2", "--batch-size", "2", "--t", "2", "--hw", "16",
               "--seed", "0", *extra])
    assert rc == 0
    return run


def test_prepare_synthetic_layout_and_idempotence(tmp_path):
    data = _prepare(tmp_path)
    manifests = load_manifest(data / "manifest.json")
    assert len(manifests) == 6
    splits = [m.split for m in manifests]
    assert splits.count("train") == 4
    assert splits.count("val") == 1
    assert splits.count("test") == 1
    for m in manifests:
        assert len(m.frame_paths) == 3  # t+1 frames
        assert all(p.exists() for p in m.frame_paths)
        assert m.flow_cache_path.exists()

    record = yaml.safe_load((data / "run_config.yaml").read_text())
    assert record["tool_version"] == __version__
    assert record["command"] == "prepare"
    assert record["config"]["t_frames"] == 2

    frame = manifests[0].frame_paths[0]
    before = (frame.read_bytes(), (data / "manifest.json").read_bytes())
    assert main(["prepare", "--synthetic", "6", "--out", str(data),
                 "--t", "2", "--hw", "16", "--seed", "0"]) == 0
    after = (frame.read_bytes(), (data / "manifest.json").read_bytes())
    assert before == after


def test_prepare_real_requires_provider(tmp_path, capsys):
    manifests = _make_dataset(tmp_path / "raw", 2, cache=False)
    src = tmp_path / "raw" / "manifest.json"
    save_manifest(manifests, src)
    out = tmp_path / "prepared"

    rc = main(["prepare", "--manifest", str(src), "--out", str(out),
               "--t", "2", "--hw", "16"])
    assert rc == 2
    assert "no flow provider" in capsys.readouterr().err

    rc = main(["prepare", "--manifest", str(src), "--out", str(out),
               "--t", "2", "--hw", "16", "--flow", "oracle"])
    assert rc == 0
    prepared = load_manifest(out / "manifest.json")
    assert all(m.flow_cache_path.exists() for m in prepared)


def test_prepare_without_inputs_errors(tmp_path, capsys):
    rc = main(["prepare", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "--synthetic" in capsys.readouterr().err


def test_train_artifacts_and_config_precedence(tmp_path):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    assert (run / "checkpoint.dtvc").exists()

    lines = [json.loads(s) for s in (run / "train_log.jsonl").read_text().splitlines()]
    cfg = lines[0]["config"]
    assert cfg["epochs"] == 2              # CLI flag beats the config file
    assert cfg["dvg_base_channels"] == 8   # config file beats the profile
    assert cfg["t_frames"] == 2
    assert len(lines) == 1 + 2 * 2  # config + epochs x (4 train clips / batch 2)

    record = yaml.safe_load((run / "run_config.yaml").read_text())
    assert record["config"]["epochs"] == 2


def test_train_without_flows_exits_2(tmp_path, capsys):
    manifests = _make_dataset(tmp_path / "raw", 2, cache=False)
    src = tmp_path / "raw" / "manifest.json"
    save_manifest(manifests, src)
    rc = main(["train", "--manifest", str(src), "--out", str(tmp_path / "run"),
               "--epochs", "1", "--batch-size", "1", "--t", "2", "--hw", "16"])
    assert rc == 2
    assert "no flow provider" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path):
    data = tmp_path / "d"
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"learning_rate": 1e-3}))
    with pytest.raises(SystemExit, match="unknown config keys"):
        main(["prepare", "--synthetic", "1", "--out", str(data),
              "--config", str(bad)])


def test_generate_samples_and_reruns_identically(tmp_path):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    ckpt = run / "checkpoint.dtvc"

    outs = []
    for name in ("gen_a", "gen_b"):
        out = tmp_path / name
        rc = main(["generate", "--checkpoint", str(ckpt),
                   "--clip", "synth_0000", "--manifest", str(data / "manifest.json"),
                   "--sample", "2", "--encode-from", "synth_0000",
                   "--seed", "5", "--out", str(out)])
        assert rc == 0
        outs.append(out)

    out = outs[0]
    for sub in ("encoded", "sample_00", "sample_01"):
        frames = sorted((out / sub).glob("frame_*.png"))
        assert [p.name for p in frames] == ["frame_0001.png", "frame_0002.png"]
    assert (out / "contact_sheet.png").exists()

    for sub in ("encoded", "sample_00", "sample_01"):
        for p in sorted((outs[0] / sub).glob("*.png")):
            q = outs[1] / sub / p.name
            assert p.read_bytes() == q.read_bytes()


def test_generate_from_image_file(tmp_path):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    start = load_manifest(data / "manifest.json")[0].frame_paths[0]
    out = tmp_path / "gen_img"
    rc = main(["generate", "--checkpoint", str(run / "checkpoint.dtvc"),
               "--image", str(start), "--sample", "1", "--out", str(out)])
    assert rc == 0
    assert (out / "sample_00" / "frame_0001.png").exists()


def test_generate_needs_some_vector_source(tmp_path):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    start = load_manifest(data / "manifest.json")[0].frame_paths[0]
    with pytest.raises(SystemExit, match="--sample"):
        main(["generate", "--checkpoint", str(run / "checkpoint.dtvc"),
              "--image", str(start), "--out", str(tmp_path / "none")])


def test_sample_diverse_defaults_to_two(tmp_path):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    start = load_manifest(data / "manifest.json")[0].frame_paths[0]
    out = tmp_path / "diverse"
    rc = main(["sample-diverse", "--checkpoint", str(run / "checkpoint.dtvc"),
               "--image", str(start), "--out", str(out)])
    assert rc == 0
    assert (out / "sample_00").is_dir() and (out / "sample_01").is_dir()


def test_evaluate_writes_report(tmp_path, capsys):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    out = tmp_path / "eval"
    rc = main(["evaluate", "--checkpoint", str(run / "checkpoint.dtvc"),
               "--manifest", str(data / "manifest.json"),
               "--split", "test", "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    summary = json.loads(stdout)
    assert summary["clips"] == 1 and summary["failures"] == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert set(report) == {"aggregate", "per_clip", "failures"}
    assert report["aggregate"]["psnr"] == summary["psnr"]


def test_evaluate_requires_provider(tmp_path, capsys):
    data = _prepare(tmp_path)
    run = _train(tmp_path, data)
    rc = main(["evaluate", "--checkpoint", str(run / "checkpoint.dtvc"),
               "--manifest", str(data / "manifest.json"),
               "--flow", "none", "--out", str(tmp_path / "eval")])
    assert rc == 2
    assert "flow provider" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


@pytest.mark.skipif(shutil.which("dtvnet") is None,
                    reason="console script not on PATH")
def test_console_script_runs():
    out = subprocess.run(["dtvnet", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert __version__ in out.stdout
