"""Training orchestration: alternating critic/generator updates, lr schedule,
checkpointing, JSON-lines logging.

Checkpoints use a single binary container: magic, version, a JSON header
describing every tensor (name, dtype, shape, offset), then raw little-endian
payloads. Save -> load -> save is byte-identical, which makes resume
equivalence testable at full precision.
"""

import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .adversarial import (CriticConfig, DEFAULT_WEIGHTS, LossReport, VideoCritic,
                          content_loss, critic_loss, generator_adv_loss,
                          motion_loss, total_loss, weighted_total)
from .data import ClipManifest, load_clip
from .dvg import DVGConfig, DynamicVideoGenerator, init_weights
from .flow import (FlowEstimator, FlowSequence, downsample_flow, estimate_flows,
                   read_flow_file, write_flow_file)
from .ofe import OFEConfig, OpticalFlowEncoder

CKPT_MAGIC = b"DTVC"
CKPT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "uint8": torch.uint8}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or one that does not match the current config."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings plus the model widths needed to rebuild it.

    Defaults are the full-scale profile; desk runs override t_frames/hw/batch
    and widths through the CLI profile.
    """

    t_frames: int = 32
    hw: tuple[int, int] = (128, 128)
    epochs: int = 200
    batch_size: int = 12
    lr0: float = 3e-4
    lr_decay_every: int = 150
    lr_decay_factor: float = 10.0
    betas: tuple[float, float] = (0.99, 0.999)
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    seed: int = 0
    critic_updates: int = 1
    checkpoint_every: int = 1  # epochs
    ofe_base_channels: int = 32
    ofe_num_blocks: int = 5
    dvg_base_channels: int = 64
    n_adain_layers: int = 6
    critic_base_channels: int = 64
    gp_lambda: float = 10.0

    def __post_init__(self):
        for name in ("t_frames", "epochs", "batch_size", "lr_decay_every",
                     "critic_updates", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hw"] = list(self.hw)
        d["betas"] = list(self.betas)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("hw", "betas", "weights"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def is_desk_scale(self) -> bool:
        return self.t_frames <= 8 and max(self.hw) <= 64 and self.batch_size <= 4


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()
    ).hexdigest()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 / factor^(epoch // decay_every), computed in exact arithmetic.

    Plain float division drifts (3e-4 / 10 != 3e-5 in binary64); going through
    Fraction returns the correctly rounded decimal value at every stage.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    k = epoch // cfg.lr_decay_every
    return float(Fraction(str(cfg.lr0)) / Fraction(str(cfg.lr_decay_factor)) ** k)


@dataclass
class DTVNetModel:
    """The three trainable components; the flow provider stays outside."""

    flow_encoder: OpticalFlowEncoder
    generator: DynamicVideoGenerator
    critic: VideoCritic

    def generator_parameters(self):
        """Parameters updated by the generator optimizer (encoder included)."""
        return list(self.flow_encoder.parameters()) + list(self.generator.parameters())

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, module in (("ofe", self.flow_encoder), ("dvg", self.generator),
                               ("critic", self.critic)):
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p
            for name, b in module.named_buffers():
                out[f"{prefix}.{name}"] = b
        return out


def build_model(cfg: TrainConfig) -> DTVNetModel:
    ofe = OpticalFlowEncoder(OFEConfig(
        input_t=cfg.t_frames, input_hw=cfg.hw,
        base_channels=cfg.ofe_base_channels, num_blocks=cfg.ofe_num_blocks))
    gen = DynamicVideoGenerator(DVGConfig(
        t_frames=cfg.t_frames, image_hw=cfg.hw,
        base_channels=cfg.dvg_base_channels, n_adain_layers=cfg.n_adain_layers))
    critic = VideoCritic(CriticConfig(
        input_t=cfg.t_frames, input_hw=cfg.hw,
        base_channels=cfg.critic_base_channels, gp_lambda=cfg.gp_lambda))
    init_weights(ofe, cfg.seed)
    init_weights(gen, cfg.seed + 1)
    init_weights(critic, cfg.seed + 2)
    return DTVNetModel(ofe, gen, critic)


def build_optimizers(model: DTVNetModel, cfg: TrainConfig):
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr0,
                             betas=cfg.betas, eps=1e-8)
    opt_d = torch.optim.Adam(model.critic.parameters(), lr=cfg.lr0,
                             betas=cfg.betas, eps=1e-8)
    return opt_g, opt_d


@dataclass
class TrainBatch:
    """One optimization batch; flows are the frozen provider's full-res output."""

    i0: torch.Tensor        # [B, 3, H, W]
    target: torch.Tensor    # [B, 3, T, H, W] frames 1..T
    flows: torch.Tensor     # [B, 2, T, H, W]
    flows_lr: torch.Tensor  # [B, 2, T, H/2, W/2]


def train_step(model: DTVNetModel, batch: TrainBatch, cfg: TrainConfig,
               opt_g, opt_d, rng: torch.Generator, step: int = 0) -> LossReport:
    """One critic update (or cfg.critic_updates of them), then one generator
    update. Deterministic given (parameters, batch, rng state)."""
    f = model.flow_encoder(batch.flows)
    video, flows_hat = model.generator(batch.i0, f)

    for _ in range(cfg.critic_updates):
        opt_d.zero_grad(set_to_none=True)
        loss_d, gp = critic_loss(model.critic, batch.target, video.detach(),
                                 cfg.gp_lambda, rng)
        loss_d.backward()
        opt_d.step()

    opt_g.zero_grad(set_to_none=True)
    l_content = content_loss(video, batch.target)
    l_motion = motion_loss(flows_hat, batch.flows_lr)
    l_adv = generator_adv_loss(model.critic, video)
    loss_g = weighted_total(l_content, l_motion, l_adv, cfg.weights)
    loss_g.backward()
    opt_g.step()

    return total_loss(l_content.item(), l_motion.item(), l_adv.item(),
                      critic=loss_d.item(), gp=gp.item(), weights=cfg.weights)


# --- checkpoint container ---------------------------------------------------


@dataclass
class Checkpoint:
    epoch: int      # last completed epoch
    step: int       # global steps taken
    config: dict    # resolved TrainConfig
    tensors: dict[str, torch.Tensor]
    scalars: dict[str, float] = field(default_factory=dict)


def capture_checkpoint(model: DTVNetModel, opt_g, opt_d, rng: torch.Generator,
                       epoch: int, step: int, cfg: TrainConfig) -> Checkpoint:
    tensors = {k: v.detach().clone() for k, v in model.named_tensors().items()}
    scalars = {}
    gen_named = [("ofe." + n, p) for n, p in model.flow_encoder.named_parameters()]
    gen_named += [("dvg." + n, p) for n, p in model.generator.named_parameters()]
    critic_named = [("critic." + n, p) for n, p in model.critic.named_parameters()]
    for opt, named in (("opt_g", gen_named), ("opt_d", critic_named)):
        state = (opt_g if opt == "opt_g" else opt_d).state
        for name, p in named:
            st = state.get(p)
            if not st:
                continue
            for key in ("exp_avg", "exp_avg_sq"):
                tensors[f"{opt}.{name}.{key}"] = st[key].detach().clone()
            scalars[f"{opt}.{name}.step"] = float(st["step"])
    tensors["rng.torch"] = rng.get_state().clone()
    return Checkpoint(epoch=epoch, step=step, config=cfg.to_dict(),
                      tensors=tensors, scalars=scalars)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write of the container; equal checkpoints yield equal bytes."""
    entries = []
    payload = bytearray()
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        raw = t.numpy().tobytes()
        entries.append({
            "name": name,
            "dtype": _DTYPE_NAMES[t.dtype],
            "shape": list(t.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = {
        "version": CKPT_VERSION,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "config": ckpt.config,
        "config_sha256": hashlib.sha256(
            json.dumps(ckpt.config, sort_keys=True).encode()).hexdigest(),
        "scalars": {k: ckpt.scalars[k] for k in sorted(ckpt.scalars)},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(CKPT_VERSION.to_bytes(4, "little"))
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            fh.write(bytes(payload))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header_len = int.from_bytes(raw[8:16], "little")
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16:16 + header_len])
    body = raw[16 + header_len:]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated payload for tensor {e['name']!r}")
        dtype = _DTYPES[e["dtype"]]
        t = torch.frombuffer(bytearray(body[e["offset"]:end]), dtype=dtype)
        tensors[e["name"]] = t.reshape(e["shape"]).clone()
    ckpt = Checkpoint(epoch=header["epoch"], step=header["step"],
                      config=header["config"], tensors=tensors,
                      scalars=dict(header["scalars"]))
    if expected_config is not None:
        want = expected_config.to_dict()
        diffs = [k for k in want if ckpt.config.get(k) != want[k]]
        diffs += [k for k in ckpt.config if k not in want]
        if diffs:
            details = ", ".join(
                f"{k}: checkpoint={ckpt.config.get(k)!r} vs config={want.get(k)!r}"
                for k in sorted(set(diffs)))
            raise CheckpointError(f"{path}: config mismatch ({details})")
    return ckpt


def restore_checkpoint(ckpt: Checkpoint, model: DTVNetModel, opt_g, opt_d,
                       rng: torch.Generator) -> None:
    """Load parameters, optimizer moments, and rng state in place."""
    named = model.named_tensors()
    for name, p in named.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        with torch.no_grad():
            p.copy_(ckpt.tensors[name])
    gen_named = [("ofe." + n, p) for n, p in model.flow_encoder.named_parameters()]
    gen_named += [("dvg." + n, p) for n, p in model.generator.named_parameters()]
    critic_named = [("critic." + n, p) for n, p in model.critic.named_parameters()]
    for opt_name, opt, pairs in (("opt_g", opt_g, gen_named),
                                 ("opt_d", opt_d, critic_named)):
        for name, p in pairs:
            key = f"{opt_name}.{name}"
            if f"{key}.exp_avg" not in ckpt.tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(ckpt.scalars[f"{key}.step"]),
                "exp_avg": ckpt.tensors[f"{key}.exp_avg"].clone(),
                "exp_avg_sq": ckpt.tensors[f"{key}.exp_avg_sq"].clone(),
            }
    rng.set_state(ckpt.tensors["rng.torch"].clone())


def build_model_from_checkpoint(path) -> tuple[DTVNetModel, Checkpoint]:
    """Reconstruct a model purely from a checkpoint file."""
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_model(cfg)
    named = model.named_tensors()
    for name, p in named.items():
        with torch.no_grad():
            p.copy_(ckpt.tensors[name])
    return model, ckpt


# --- data plumbing and the fit loop ----------------------------------------


def _load_training_set(manifests: list[ClipManifest], cfg: TrainConfig,
                       provider: FlowEstimator | None):
    """Materialize all train clips and their flows in memory (desk scale)."""
    train = [m for m in manifests if m.split == "train"]
    if not train:
        raise ValueError("no clips in the train split")
    clips, flows = [], []
    for m in train:
        frames = load_clip(m, target_hw=cfg.hw, t_frames=cfg.t_frames)
        if m.flow_cache_path and Path(m.flow_cache_path).exists():
            fl = read_flow_file(m.flow_cache_path)
        elif provider is not None:
            fl = estimate_flows(frames, provider)
            if m.flow_cache_path:
                Path(m.flow_cache_path).parent.mkdir(parents=True, exist_ok=True)
                write_flow_file(fl, m.flow_cache_path)
        else:
            raise FileNotFoundError(
                f"clip {m.clip_id!r}: no cached flows at {m.flow_cache_path} "
                f"and no flow provider configured")
        want = (2, cfg.t_frames, *cfg.hw)
        if tuple(fl.data.shape) != want:
            raise ValueError(
                f"clip {m.clip_id!r}: cached flows {tuple(fl.data.shape)} do not "
                f"match config {want}")
        clips.append(frames.data)
        flows.append(fl.data)
    return torch.stack(clips), torch.stack(flows)


def _make_batch(clips: torch.Tensor, flows: torch.Tensor, idx: np.ndarray) -> TrainBatch:
    sel = torch.as_tensor(idx, dtype=torch.long)
    frames = clips[sel]
    fl = flows[sel]
    lr = torch.stack([downsample_flow(FlowSequence(f), 2).data for f in fl])
    return TrainBatch(i0=frames[:, :, 0], target=frames[:, :, 1:], flows=fl, flows_lr=lr)


def fit(manifests: list[ClipManifest], cfg: TrainConfig, out_dir,
        provider: FlowEstimator | None = None, resume: bool = True) -> Checkpoint:
    """Train for cfg.epochs over the train split; resumable and deterministic.

    Writes train_log.jsonl (one config line, then one record per step) and
    checkpoint.dtvc (atomic, every cfg.checkpoint_every epochs). On a NaN loss
    the last checkpoint is left in place and the error propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.dtvc"
    log_path = out_dir / "train_log.jsonl"

    provider_state = provider.fingerprint() if provider is not None else None
    clips, flows = _load_training_set(manifests, cfg, provider)
    n = clips.shape[0]

    model = build_model(cfg)
    opt_g, opt_d = build_optimizers(model, cfg)
    rng = torch.Generator().manual_seed(cfg.seed)

    start_epoch, step = 0, 0
    mode = "w"
    if resume and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path, expected_config=cfg)
        restore_checkpoint(ckpt, model, opt_g, opt_d, rng)
        start_epoch, step = ckpt.epoch + 1, ckpt.step
        mode = "a"
        print(f"resuming from epoch {ckpt.epoch} ({ckpt.step} steps)", file=sys.stderr)

    steps_per_epoch = max(1, n // cfg.batch_size)
    with open(log_path, mode) as log:
        if mode == "w":
            log.write(json.dumps({
                "event": "config", "config": cfg.to_dict(),
                "config_sha256": config_hash(cfg),
                "desk_scale": cfg.is_desk_scale(),
                "clips": n, "steps_per_epoch": steps_per_epoch,
            }, sort_keys=True) + "\n")
        if not cfg.is_desk_scale():
            print("config is not desk-scale; expect long runtimes", file=sys.stderr)

        last = None
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
            if n < cfg.batch_size:  # overfit runs: tile the few clips we have
                order = np.tile(order, -(-cfg.batch_size // n))
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                report = train_step(model, _make_batch(clips, flows, idx), cfg,
                                    opt_g, opt_d, rng, step)
                step += 1
                log.write(json.dumps(report.json_record(step), sort_keys=True) + "\n")
                last = report
            log.flush()
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                save_checkpoint(
                    capture_checkpoint(model, opt_g, opt_d, rng, epoch, step, cfg),
                    ckpt_path)
            if last is not None:
                print(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:g} "
                      f"total={last.total:.4f} content={last.content:.4f} "
                      f"motion={last.motion:.4f}", file=sys.stderr)

    if provider is not None and provider.fingerprint() != provider_state:
        raise RuntimeError("flow provider state changed during training")
    return load_checkpoint(ckpt_path, expected_config=cfg)
