"""Command-line entry points: prepare / train / generate / evaluate.

Configuration is resolved in three layers — profile defaults, then a YAML
config file, then explicit command-line flags — and the resolved record plus
the tool version is written into every output directory, so a run is
reproducible from that file and the inputs alone.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .data import (ClipManifest, denormalize_frames, load_clip, load_manifest,
                   normalize_frames, save_manifest, split_dataset, synth_clip)
from .flow import (FLOW_CMD_ENV, FlowProviderError, build_estimator, estimate_flows,
                   write_flow_file)
from .metrics import evaluate
from .ofe import sample_motion_vector
from .training import TrainConfig, build_model_from_checkpoint, fit

PROFILES = {
    # 500 epochs x (16 clips / batch 4) = 2000 steps on the default dataset
    "desk": {
        "t_frames": 8, "hw": [32, 32], "batch_size": 4, "epochs": 500,
        "lr_decay_every": 10 ** 6, "dvg_base_channels": 32,
        "critic_base_channels": 32, "ofe_base_channels": 16,
    },
    "paper": {
        "t_frames": 32, "hw": [128, 128], "batch_size": 12, "epochs": 200,
        "lr_decay_every": 150, "dvg_base_channels": 64,
        "critic_base_channels": 64, "ofe_base_channels": 32,
    },
}

_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def resolve_config(args, overrides: dict) -> dict:
    """profile defaults <- config file <- CLI overrides (later wins)."""
    cfg = dict(PROFILES[args.profile])
    if args.config:
        with open(args.config) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise SystemExit(f"config file {args.config} must be a mapping")
        unknown = set(loaded) - _TRAIN_KEYS - {"flow_provider"}
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def make_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in _TRAIN_KEYS})


def write_run_record(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"tool_version": __version__, "command": command, "config": cfg}
    with open(out_dir / "run_config.yaml", "w") as fh:
        yaml.safe_dump(record, fh, sort_keys=True)


def _provider(name: str | None, flow_cmd: str | None):
    if name in (None, "none"):
        return None
    return build_estimator(name, flow_cmd)


def save_frame_png(frame: torch.Tensor, path: Path) -> None:
    """frame [3,H,W] in [-1,1] -> 8-bit PNG."""
    arr = denormalize_frames(frame.detach().cpu().numpy().transpose(1, 2, 0))
    Image.fromarray(arr).save(path)


def _contact_sheet(rows: list[list[Path]], out_path: Path) -> None:
    """Grid image: one row per generated sample, one column per frame."""
    imgs = [[Image.open(p) for p in row] for row in rows]
    w, h = imgs[0][0].size
    pad = 2
    sheet = Image.new("RGB", (len(imgs[0]) * (w + pad) - pad,
                              len(imgs) * (h + pad) - pad), (255, 255, 255))
    for r, row in enumerate(imgs):
        for c, im in enumerate(row):
            sheet.paste(im, (c * (w + pad), r * (h + pad)))
    sheet.save(out_path)


# --- prepare -----------------------------------------------------------------


def cmd_prepare(args) -> int:
    out = Path(args.out)
    cfg = resolve_config(args, {"t_frames": args.t, "hw": [args.hw, args.hw] if args.hw else None})
    write_run_record(out, "prepare", cfg)
    t_frames = cfg["t_frames"]
    hw = tuple(cfg["hw"])
    flows_dir = out / "flows"
    flows_dir.mkdir(parents=True, exist_ok=True)

    if args.synthetic:
        rng = np.random.default_rng(cfg.get("seed", 0))
        manifests = []
        limit = min(hw) / t_frames  # keep motion recoverable by the oracle
        for i in range(args.synthetic):
            clip_id = f"synth_{i:04d}"
            clip_dir = out / "clips" / clip_id
            flow_path = flows_dir / f"{clip_id}.dtvf"
            frame_paths = [clip_dir / f"frame_{t:04d}.png" for t in range(t_frames + 1)]
            velocity = tuple(rng.uniform(-0.8 * limit, 0.8 * limit, size=2))
            if not (flow_path.exists() and all(p.exists() for p in frame_paths)):
                clip_dir.mkdir(parents=True, exist_ok=True)
                frames, flows = synth_clip(seed=int(rng.integers(2 ** 31)),
                                           t_frames=t_frames, hw=hw, velocity=velocity)
                for t, p in enumerate(frame_paths):
                    save_frame_png(frames.data[:, t], p)
                write_flow_file(flows, flow_path)
            manifests.append(ClipManifest(clip_id=clip_id, frame_paths=frame_paths,
                                          split="train", native_hw=hw,
                                          flow_cache_path=flow_path))
        manifests = split_dataset(manifests, (0.7, 0.15, 0.15), seed=cfg.get("seed", 0))
        save_manifest(manifests, out / "manifest.json")
        print(f"prepared {len(manifests)} synthetic clips in {out}", file=sys.stderr)
        return 0

    if not args.manifest:
        print("prepare needs --synthetic N or --manifest PATH", file=sys.stderr)
        return 1
    manifests = load_manifest(args.manifest)
    provider = _provider(args.flow, args.flow_cmd)
    updated = []
    failures = 0
    for m in manifests:
        flow_path = Path(m.flow_cache_path) if m.flow_cache_path else flows_dir / f"{m.clip_id}.dtvf"
        if not flow_path.exists():
            if provider is None:
                print(f"clip {m.clip_id!r}: no flow provider configured and no cache "
                      f"at {flow_path}", file=sys.stderr)
                return 2
            try:
                frames = load_clip(m, target_hw=hw, t_frames=t_frames)
                flow_path.parent.mkdir(parents=True, exist_ok=True)
                write_flow_file(estimate_flows(frames, provider), flow_path)
            except Exception as exc:
                failures += 1
                print(f"clip {m.clip_id!r}: {exc}", file=sys.stderr)
                if not args.keep_going:
                    return 1
                continue
        updated.append(ClipManifest(clip_id=m.clip_id, frame_paths=m.frame_paths,
                                    split=m.split, native_hw=m.native_hw,
                                    flow_cache_path=flow_path))
    save_manifest(updated, out / "manifest.json")
    print(f"prepared {len(updated)} clips ({failures} failures)", file=sys.stderr)
    return 0 if failures == 0 else 1


# --- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size,
                 "t_frames": args.t, "hw": [args.hw, args.hw] if args.hw else None}
    cfg_dict = resolve_config(args, overrides)
    write_run_record(out, "train", cfg_dict)
    cfg = make_train_config(cfg_dict)
    manifests = load_manifest(args.manifest)
    provider = _provider(args.flow, args.flow_cmd)
    try:
        fit(manifests, cfg, out, provider=provider, resume=not args.fresh)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    print(f"training done; checkpoint at {out / 'checkpoint.dtvc'}", file=sys.stderr)
    return 0


# --- generate ----------------------------------------------------------------


def _load_start_frame(args, cfg: TrainConfig):
    if args.image:
        img = Image.open(args.image).convert("RGB")
        if img.size != (cfg.hw[1], cfg.hw[0]):
            img = img.resize((cfg.hw[1], cfg.hw[0]), Image.BILINEAR)
        arr = normalize_frames(np.asarray(img))
        return torch.from_numpy(arr).permute(2, 0, 1), None
    if args.clip:
        manifests = {m.clip_id: m for m in load_manifest(args.manifest)}
        if args.clip not in manifests:
            raise SystemExit(f"clip {args.clip!r} not in manifest")
        m = manifests[args.clip]
        frames = load_clip(m, target_hw=cfg.hw, t_frames=cfg.t_frames)
        return frames.data[:, 0], m
    raise SystemExit("generate needs --image PATH or --clip ID (with --manifest)")


def cmd_generate(args) -> int:
    out = Path(args.out)
    cfg_dict = resolve_config(args, {})
    model, ckpt = build_model_from_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ckpt.config)
    write_run_record(out, "generate", {**cfg_dict, "checkpoint_config": ckpt.config})

    i0, manifest = _load_start_frame(args, cfg)
    vectors = []
    if args.encode_from:
        provider = _provider(args.flow or "oracle", args.flow_cmd)
        manifests = {m.clip_id: m for m in load_manifest(args.manifest)}
        if args.encode_from not in manifests:
            raise SystemExit(f"clip {args.encode_from!r} not in manifest")
        m = manifests[args.encode_from]
        frames = load_clip(m, target_hw=cfg.hw, t_frames=cfg.t_frames)
        if m.flow_cache_path and Path(m.flow_cache_path).exists():
            from .flow import read_flow_file
            flows = read_flow_file(m.flow_cache_path)
        else:
            flows = estimate_flows(frames, provider)
        with torch.no_grad():
            f = model.flow_encoder(flows.data.unsqueeze(0))[0]
        vectors.append(("encoded", f))
    seed0 = args.seed if args.seed is not None else cfg_dict.get("seed", 0)
    for k in range(args.sample):
        vectors.append((f"sample_{k:02d}", sample_motion_vector(seed0 + k).values))
    if not vectors:
        raise SystemExit("generate needs --sample K and/or --encode-from CLIP")

    rows = []
    for name, f in vectors:
        clip_dir = out / name
        clip_dir.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            video, _ = model.generator(i0.unsqueeze(0), f.unsqueeze(0))
        paths = []
        for t in range(video.shape[2]):
            p = clip_dir / f"frame_{t + 1:04d}.png"
            save_frame_png(video[0, :, t], p)
            paths.append(p)
        rows.append(paths)
        print(f"wrote {len(paths)} frames to {clip_dir}", file=sys.stderr)
    _contact_sheet(rows, out / "contact_sheet.png")
    return 0


# --- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    cfg_dict = resolve_config(args, {})
    write_run_record(out, "evaluate", cfg_dict)
    manifests = load_manifest(args.manifest)
    provider = _provider(args.flow or "oracle", args.flow_cmd)
    if provider is None:
        print("evaluate needs a flow provider (--flow oracle|external)", file=sys.stderr)
        return 2
    report = evaluate(args.checkpoint, manifests, provider, split=args.split)
    (out / "eval_report.json").write_text(report.to_json())
    print(json.dumps({"psnr": report.psnr, "ssim": report.ssim,
                      "flow_mse": report.flow_mse,
                      "clips": len(report.per_clip),
                      "failures": len(report.failures)}))
    return 0 if not report.failures else 1


# --- argument wiring ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--flow", choices=["oracle", "external", "none"], default=None,
                        help="flow provider (external reads " + FLOW_CMD_ENV + ")")
    common.add_argument("--flow-cmd", default=None,
                        help="external flow estimator command")

    p = argparse.ArgumentParser(prog="dtvnet",
                                description="Flow-conditioned time-lapse video generation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", parents=[common],
                        help="cache frames + flows, write a manifest")
    sp.add_argument("--synthetic", type=int, default=0, metavar="N")
    sp.add_argument("--manifest", help="existing manifest of real clips")
    sp.add_argument("--t", type=int, default=None, help="frames per clip (T)")
    sp.add_argument("--hw", type=int, default=None, help="square frame size")
    sp.add_argument("--keep-going", action="store_true")
    sp.set_defaults(func=cmd_prepare)

    st = sub.add_parser("train", parents=[common], help="run the training loop")
    st.add_argument("--manifest", required=True)
    st.add_argument("--epochs", type=int, default=None)
    st.add_argument("--batch-size", type=int, default=None)
    st.add_argument("--t", type=int, default=None)
    st.add_argument("--hw", type=int, default=None)
    st.add_argument("--fresh", action="store_true", help="ignore existing checkpoint")
    st.set_defaults(func=cmd_train)

    def add_generate(name, sample_default, help_text):
        sg = sub.add_parser(name, parents=[common], help=help_text)
        sg.add_argument("--checkpoint", required=True)
        sg.add_argument("--image", help="start frame image file")
        sg.add_argument("--clip", help="take the start frame from this manifest clip")
        sg.add_argument("--manifest")
        sg.add_argument("--sample", type=int, default=sample_default, metavar="K",
                        help="number of sampled motion vectors")
        sg.add_argument("--encode-from", metavar="CLIP",
                        help="also reconstruct with this clip's encoded motion vector")
        sg.set_defaults(func=cmd_generate)
        return sg

    add_generate("generate", 0, "generate videos from a start frame")
    add_generate("sample-diverse", 2, "generate with several sampled motion vectors")

    se = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--manifest", required=True)
    se.add_argument("--split", default="test")
    se.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlowProviderError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
