"""Two-stage training, augmentations, loss assembly, fine-tuning and sampling."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import diffusion as dfn
from .codec import DEFAULT_SEED as CODEC_SEED
from .codec import from_model_latent, to_model_latent
from .conditioning import ControlBundle, drop_controls, toy_appearance_embedding
from .denoiser import (
    AnimationModel,
    ModelConfig,
    assemble_input,
    load_checkpoint,
    partition,
    save_checkpoint,
)
from .manifest import Manifest, load_clip

log = logging.getLogger(__name__)

DEFAULT_LR = {1: 1e-4, 2: 5e-5}
DEFAULT_BATCH = {1: 12, 2: 1}


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_lo: float = 1e-4
    beta_hi: float = 0.02
    zero_terminal_snr: bool = True

    def build(self) -> dfn.NoiseSchedule:
        return dfn.make_schedule(self.T, self.beta_lo, self.beta_hi, self.zero_terminal_snr)


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    learning_rate: float | None = None
    batch_size: int | None = None
    clip_length: int = 16
    frame_rate: int = 8
    dropout_p: float = 0.01
    shuffle_p: float = 0.05
    stage2_dropout: bool = False
    seed: int = 0
    trainable: str = "auto"          # auto | spatial | temporal | all
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    gamma: float = 5.0
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1_checkpoint: str | None = None
    ma_window: int = 50
    threads: int | None = None

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.trainable not in ("auto", "spatial", "temporal", "all"):
            raise ConfigError(f"unknown trainable set {self.trainable!r}")
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[self.stage]
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        for name in ("dropout_p", "shuffle_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.stage]

    @property
    def lr(self) -> float:
        return float(self.learning_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("threads", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _configure_torch(cfg: TrainConfig):
    threads = cfg.threads or int(os.environ.get("ANIMSYN_THREADS", "0") or 0)
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# data -------------------------------------------------------------------------

@dataclass
class ClipData:
    id: str
    x0: np.ndarray        # F x 4 x h x w model latents
    z_bg: np.ndarray      # 4 x h x w
    z_fg: np.ndarray      # F x 4 x h x w
    body: np.ndarray      # F x 3 x H x W
    face: np.ndarray
    normal: np.ndarray
    appearance: np.ndarray  # F x clip_dim
    frames: np.ndarray      # F x 3 x H x W
    present: dict


def prepare_clip(raw: dict, clip_id: str = "", present: dict | None = None,
                 codec_seed: int = CODEC_SEED) -> ClipData:
    frames = raw["frames"]
    F = frames.shape[0]
    mask3 = np.repeat(raw["mask"][:, None], 3, axis=1)
    present = present or {"s": True, "h": True, "n": True}
    zeros = np.zeros_like(frames)
    return ClipData(
        id=clip_id,
        x0=to_model_latent(frames, codec_seed).astype(np.float32),
        z_bg=to_model_latent(raw["background"], codec_seed).astype(np.float32),
        z_fg=to_model_latent(mask3, codec_seed).astype(np.float32),
        body=(raw["body"] if present.get("s", True) else zeros).astype(np.float32),
        face=(raw["face"] if present.get("h", True) else zeros).astype(np.float32),
        normal=(raw["normal"] if present.get("n", True) else zeros).astype(np.float32),
        appearance=np.stack([toy_appearance_embedding(f) for f in frames]).astype(np.float32),
        frames=frames.astype(np.float32),
        present=present,
    )


class ClipStore:
    """In-memory cache of prepared clips for one manifest."""

    def __init__(self, manifest: Manifest, codec_seed: int = CODEC_SEED):
        if len(manifest) == 0:
            raise ValueError("manifest is empty")
        self.clips = [prepare_clip(load_clip(e, manifest.root), e.id, e.present, codec_seed)
                      for e in manifest]

    def __len__(self):
        return len(self.clips)


def _appearance_dim_check(model_cfg: ModelConfig, store: ClipStore):
    d = store.clips[0].appearance.shape[-1]
    if d != model_cfg.clip_dim:
        raise ConfigError(f"model clip_dim {model_cfg.clip_dim} != appearance embedding width {d}")


@dataclass
class Batch:
    x0: torch.Tensor        # B x Fr x 4 x h x w
    z_bg: torch.Tensor
    z_fg: torch.Tensor
    ref_latent: torch.Tensor  # B x 4 x h x w
    c_clip: torch.Tensor      # B x clip_dim
    body: torch.Tensor        # B x Fr x 3 x H x W
    face: torch.Tensor
    normal: torch.Tensor
    info: list = field(default_factory=list)


class BatchSampler:
    """Seeded batch construction; the draw order is part of the determinism contract."""

    def __init__(self, store: ClipStore, cfg: TrainConfig, seed: int, stage: int, hook=None):
        self.store = store
        self.cfg = cfg
        self.stage = stage
        self.rng = np.random.default_rng([seed, 17])
        self.hook = hook

    def _controls(self, clip: ClipData, idx: np.ndarray, apply_dropout: bool) -> tuple[ControlBundle, dict]:
        bundle = ControlBundle(clip.body[idx], clip.face[idx], clip.normal[idx],
                               clip.present.get("s", True), clip.present.get("h", True),
                               clip.present.get("n", True))
        info = {"clip": clip.id, "frames": idx.tolist(), "order": list(range(len(idx)))}
        if self.stage == 2 and self.rng.random() < self.cfg.shuffle_p:
            order = self.rng.permutation(len(idx))
            bundle = bundle.permuted(order)
            info["order"] = order.tolist()
        if apply_dropout:
            bundle = drop_controls(bundle, self.rng, self.cfg.dropout_p)
        info["present"] = [bundle.present_s, bundle.present_h, bundle.present_n]
        return bundle, info

    def next(self) -> Batch:
        cols = {k: [] for k in ("x0", "z_bg", "z_fg", "ref", "c", "body", "face", "normal")}
        infos = []
        apply_dropout = self.stage == 1 or self.cfg.stage2_dropout
        for _ in range(self.cfg.batch_size):
            clip = self.store.clips[int(self.rng.integers(len(self.store)))]
            F = clip.x0.shape[0]
            if self.stage == 1:
                idx = np.array([int(self.rng.integers(F))])
            else:
                L = self.cfg.clip_length
                if L > F:
                    raise ValueError(f"clip {clip.id} has {F} frames, fewer than clip_length {L}")
                start = int(self.rng.integers(F - L + 1))
                idx = np.arange(start, start + L)
            ref = int(self.rng.integers(F))
            bundle, info = self._controls(clip, idx, apply_dropout)
            info["ref"] = ref
            if self.hook is not None:
                self.hook(info)
            infos.append(info)
            cols["x0"].append(clip.x0[idx])
            cols["z_bg"].append(np.broadcast_to(clip.z_bg, clip.x0[idx].shape))
            cols["z_fg"].append(clip.z_fg[idx])
            cols["ref"].append(clip.x0[ref])
            cols["c"].append(clip.appearance[ref])
            cols["body"].append(bundle.S)
            cols["face"].append(bundle.face_map)
            cols["normal"].append(bundle.N)
        t = {k: torch.from_numpy(np.ascontiguousarray(np.stack(v))) for k, v in cols.items()}
        return Batch(t["x0"], t["z_bg"], t["z_fg"], t["ref"], t["c"], t["body"], t["face"],
                     t["normal"], infos)


# loss -------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    t: list
    weights: list
    mse: list


def noised_batch(x0: torch.Tensor, eps: torch.Tensor, t: list[int], schedule: dfn.NoiseSchedule):
    z_t = torch.stack([dfn.add_noise(x0[i], eps[i], schedule, t[i]) for i in range(len(t))])
    v = torch.stack([dfn.v_target(x0[i], eps[i], schedule, t[i]) for i in range(len(t))])
    return z_t, v


def weighted_v_loss(v_pred: torch.Tensor, v_tgt: torch.Tensor, weights: torch.Tensor):
    """Batch mean of w(t_i) * ||v_pred - v_target||^2 / n (per-sample MSE)."""
    mse = (v_pred - v_tgt).pow(2).flatten(1).mean(dim=1)
    return (weights.to(mse.dtype) * mse).mean(), mse


def training_step(batch: Batch, model: AnimationModel, schedule: dfn.NoiseSchedule,
                  wcfg: dfn.WeightConfig, gen: torch.Generator, mode: str,
                  predictor=None, backward: bool = True) -> StepResult:
    """Draw t and noise, compute the weighted v loss and populate gradients."""
    B = batch.x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=gen).tolist()
    eps = torch.randn(batch.x0.shape, generator=gen, dtype=batch.x0.dtype)
    z_t, v_tgt = noised_batch(batch.x0, eps, t, schedule)
    weights = torch.tensor([dfn.loss_weight(dfn.snr(schedule, ti), wcfg) for ti in t], dtype=torch.float64)
    composite = assemble_input(z_t, batch.z_bg, batch.z_fg)
    if predictor is not None:
        v_pred = predictor(composite, t, v_tgt)
    else:
        v_pred = model(composite, torch.tensor(t), batch.ref_latent, batch.c_clip,
                       batch.body, batch.face, batch.normal, mode=mode)
    loss, mse = weighted_v_loss(v_pred, v_tgt, weights)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss.item()} at t={t}, weights={weights.tolist()}, "
            f"mse={mse.detach().tolist()}, |v_pred|max={v_pred.detach().abs().max().item()}")
    if backward and loss.requires_grad:
        loss.backward()
    return StepResult(float(loss.detach()), t, weights.tolist(), mse.detach().tolist())


# runs -------------------------------------------------------------------------

class RunRecord:
    """Append-only per-step log, written as JSONL."""

    def __init__(self, config: TrainConfig, tag: str):
        self.config = config
        self.tag = tag
        self.steps: list[dict] = []
        self.started = time.time()
        self.wall_clock = 0.0

    def append(self, step: int, res: StepResult):
        losses = [s["loss"] for s in self.steps] + [res.loss]
        w = self.config.ma_window
        self.steps.append({"step": step, "loss": res.loss, "ma": float(np.mean(losses[-w:])),
                           "t": res.t, "w": res.weights, "mse": res.mse})

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def finish(self):
        self.wall_clock = time.time() - self.started

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "config", "tag": self.tag, "seed": self.config.seed,
                                 "config_hash": self.config.hash(),
                                 "config": self.config.to_dict()}) + "\n")
            for s in self.steps:
                fh.write(json.dumps({"type": "step", **s}) + "\n")
            fh.write(json.dumps({"type": "summary", "steps": len(self.steps),
                                 "wall_clock": self.wall_clock}) + "\n")


def read_run_record(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _resolve_trainable(cfg: TrainConfig) -> str:
    if cfg.trainable != "auto":
        return cfg.trainable
    return "spatial" if cfg.stage == 1 else "temporal"


def _apply_trainable(model: AnimationModel, which: str):
    names = partition(model)
    train = set(names["spatial"] if which == "spatial" else names["temporal"] if which == "temporal"
                else names["spatial"] + names["temporal"])
    for n, p in model.named_parameters():
        p.requires_grad_(n in train)


def run_training(model: AnimationModel, store: ClipStore, cfg: TrainConfig, tag: str,
                 hook=None, predictor=None) -> RunRecord:
    """The shared loop behind both stages and fine-tuning."""
    _configure_torch(cfg)
    _appearance_dim_check(model.cfg, store)
    schedule = cfg.schedule.build()
    wcfg = dfn.WeightConfig(cfg.gamma)
    _apply_trainable(model, _resolve_trainable(cfg))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay) if params else None
    sampler = BatchSampler(store, cfg, cfg.seed, cfg.stage, hook=hook)
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + 1)
    mode = "2D" if cfg.stage == 1 else "3D"
    record = RunRecord(cfg, tag)
    model.train()
    for step in range(cfg.steps):
        if opt is not None:
            opt.zero_grad(set_to_none=True)
        res = training_step(sampler.next(), model, schedule, wcfg, gen, mode, predictor=predictor)
        if opt is not None:
            opt.step()
        record.append(step, res)
        if step % 50 == 0:
            log.debug("%s step %d loss %.5f", tag, step, res.loss)
    record.finish()
    model.eval()
    return record


def _meta(cfg: TrainConfig, stage: int, step: int, tag: str, parent: dict | None = None) -> dict:
    return {"stage": stage, "step": step, "tag": tag, "seed": cfg.seed,
            "schedule": asdict(cfg.schedule), "gamma": cfg.gamma, "codec_seed": CODEC_SEED,
            "config_hash": cfg.hash(), "parent": parent}


def init_model(cfg: TrainConfig) -> AnimationModel:
    torch.manual_seed(cfg.seed)
    return AnimationModel(cfg.model)


def train_stage1(cfg: TrainConfig, manifest: Manifest, out_dir, hook=None):
    """Per-frame training of every spatial parameter; writes checkpoint + run record."""
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    out_dir = Path(out_dir)
    store = ClipStore(manifest)
    model = init_model(cfg)
    record = run_training(model, store, cfg, "stage1", hook=hook)
    ckpt = out_dir / "stage1.npz"
    save_checkpoint(ckpt, model, _meta(cfg, 1, cfg.steps, "stage1"))
    record.write(out_dir / "stage1.jsonl")
    return ckpt, record


def train_stage2(cfg: TrainConfig, stage1_checkpoint, manifest: Manifest, out_dir, hook=None):
    """Video training of the motion modules only; spatial weights stay bit-frozen."""
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    ckpt_in = stage1_checkpoint or cfg.stage1_checkpoint
    if ckpt_in is None:
        raise ConfigError("stage 2 requires a stage-1 checkpoint")
    model, meta = load_checkpoint(ckpt_in)
    if meta.get("model") != cfg.model.to_dict():
        raise ConfigError("checkpoint model config does not match the stage-2 config")
    out_dir = Path(out_dir)
    store = ClipStore(manifest)
    record = run_training(model, store, cfg, "stage2", hook=hook)
    ckpt = out_dir / "stage2.npz"
    save_checkpoint(ckpt, model, _meta(cfg, 2, cfg.steps, "stage2", parent={"path": str(ckpt_in)}))
    record.write(out_dir / "stage2.jsonl")
    return ckpt, record


def finetune(checkpoint, synthetic_manifest: Manifest, cfg: TrainConfig, out_dir, hook=None):
    """Continue training a checkpoint on synthetic-only data."""
    real = [e.id for e in synthetic_manifest if e.domain != "synthetic"]
    if real:
        raise ValueError(f"finetune manifest must be synthetic-only; real entries: {real[:5]}")
    model, meta = load_checkpoint(checkpoint)
    if meta.get("stage", 0) < 1:
        raise ValueError("finetune needs a checkpoint from stage 1 or later")
    cfg = replace(cfg, model=ModelConfig.from_dict(meta["model"]))
    out_dir = Path(out_dir)
    store = ClipStore(synthetic_manifest)
    record = run_training(model, store, cfg, "finetune", hook=hook)
    ckpt = out_dir / "finetune.npz"
    m = _meta(cfg, max(meta["stage"], cfg.stage), meta.get("step", 0) + cfg.steps, "finetune",
              parent={"path": str(checkpoint)})
    save_checkpoint(ckpt, model, m)
    record.write(out_dir / "finetune.jsonl")
    return ckpt, record


# sampling ---------------------------------------------------------------------

def _as_model(checkpoint) -> tuple[AnimationModel, dict]:
    if isinstance(checkpoint, tuple):
        return checkpoint
    if isinstance(checkpoint, AnimationModel):
        return checkpoint, {"stage": 2, "schedule": asdict(ScheduleConfig())}
    return load_checkpoint(checkpoint)


def sample(checkpoint, reference_image: np.ndarray, controls: ControlBundle, background: np.ndarray,
           mask: np.ndarray, steps: int = 50, seed: int = 0, predictor=None,
           schedule: dfn.NoiseSchedule | None = None, return_latent: bool = False):
    """Deterministic DDIM generation decoded through the toy codec.

    ``checkpoint`` is a path, an (model, meta) pair or a bare model. The
    output is F x 3 x H x W clipped to [0, 1]. ``predictor(z, t)`` replaces the
    network (used for oracle checks); latents are then float64.
    """
    F = controls.frames
    model, meta = (None, {"stage": 2}) if (checkpoint is None and predictor is not None) else _as_model(checkpoint)
    limit = model.cfg.pe_max_len if model is not None else 32
    if F > limit:
        raise ValueError(f"{F} control frames exceed the temporal limit {limit}")
    if schedule is None:
        schedule = ScheduleConfig(**meta.get("schedule", {})).build() if "schedule" in meta \
            else ScheduleConfig().build()
    H, W = reference_image.shape[-2:]
    h, w = H // 8, W // 8
    dtype = torch.float64 if predictor is not None else torch.float32
    gen = torch.Generator().manual_seed(seed)
    z_T = torch.randn((F, 4, h, w), generator=gen, dtype=torch.float64).to(dtype)

    if predictor is None:
        mode = "3D" if meta.get("stage", 1) >= 2 else "2D"
        z_bg = torch.from_numpy(to_model_latent(background)).to(dtype)
        z_fg = torch.from_numpy(to_model_latent(np.repeat(np.asarray(mask)[:, None], 3, 1))).to(dtype)
        ref = torch.from_numpy(to_model_latent(reference_image)[None]).to(dtype)
        c_clip = torch.from_numpy(toy_appearance_embedding(reference_image)[None]).to(dtype)
        def maps(a):
            return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
        with torch.no_grad():
            bank = model.reference_write(ref)
            c_proj = model.projector(c_clip)
            body, face, nrm = maps(controls.S)[None], maps(controls.face_map)[None], maps(controls.N)[None]
            if mode == "3D":
                signals = model.guidance(body, face, nrm)
            else:
                signals = model.guidance(body.transpose(0, 1), face.transpose(0, 1), nrm.transpose(0, 1))

        def predictor(z, t):
            zb = z_bg.expand_as(z)
            comp = assemble_input(z, zb, z_fg)
            with torch.no_grad():
                if mode == "3D":
                    v = model.denoise(comp[None], bank, c_proj, signals, t, "3D")[0]
                else:
                    v = model.denoise(comp[:, None], bank, c_proj, signals, t, "2D")[:, 0]
            return v

    z0 = dfn.ddim_sample(z_T, predictor, schedule, steps)
    video = np.clip(from_model_latent(z0), 0.0, 1.0)
    if return_latent:
        return video, z0
    return video


def moving_average_drop(losses, window: int = 50) -> tuple[float, float]:
    """(mean of first ``window`` losses, mean of last ``window`` losses)."""
    losses = np.asarray(losses, dtype=np.float64)
    return float(losses[:window].mean()), float(losses[-window:].mean())


def gradient_check(model: AnimationModel, batch: Batch, schedule: dfn.NoiseSchedule,
                   wcfg: dfn.WeightConfig, t: list[int], eps: torch.Tensor, mode: str,
                   step_scale: float = 1e-3, seed: int = 0) -> dict[str, float]:
    """Directional central-difference check of the loss gradient per parameter group.

    Each tensor p in a group is moved along a seeded Gaussian direction scaled
    by rms(p) (floored at 1e-2), so the step is ``step_scale`` relative to the
    tensor's own magnitude. The autograd derivative along the direction is
    compared with (L(p + h d) - L(p - h d)) / 2h. Returns relative errors.
    Runs in the model's dtype; parameters are restored afterwards.
    """
    from .denoiser import grouped_parameters

    z_t, v_tgt = noised_batch(batch.x0, eps, t, schedule)
    weights = torch.tensor([dfn.loss_weight(dfn.snr(schedule, ti), wcfg) for ti in t], dtype=torch.float64)
    composite = assemble_input(z_t, batch.z_bg, batch.z_fg)
    tt = torch.tensor(t)

    def loss_fn():
        v = model(composite, tt, batch.ref_latent, batch.c_clip, batch.body, batch.face,
                  batch.normal, mode=mode)
        return weighted_v_loss(v, v_tgt, weights)[0]

    for p in model.parameters():
        p.requires_grad_(True)
    model.zero_grad()
    loss_fn().backward()
    rng = torch.Generator().manual_seed(seed)
    h = step_scale
    out = {}
    for group, items in grouped_parameters(model).items():
        if not items:
            continue
        params = [p for _, p in items]
        dirs = []
        for p in params:
            rms = max(float(p.detach().double().pow(2).mean().sqrt()), 1e-2)
            dirs.append((torch.randn(p.shape, generator=rng, dtype=torch.float64) * rms).to(p.dtype))
        analytic = sum(float((p.grad.double() * d.double()).sum()) for p, d in zip(params, dirs)
                       if p.grad is not None)
        saved = [p.detach().clone() for p in params]
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            lp = float(loss_fn())
            for p, d, s0 in zip(params, dirs, saved):
                p.copy_(s0 - h * d)
            lm = float(loss_fn())
            for p, s0 in zip(params, saved):
                p.copy_(s0)
        numeric = (lp - lm) / (2 * h)
        out[group] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300)
    model.zero_grad()
    return out
