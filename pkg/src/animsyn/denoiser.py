"""Conditional denoising network in 2D (per-frame) and 3D (video) modes.

Layout at desk scale: three resolution levels, widths ``base * growth**level``
(growth 2 by default).
Attention blocks sit at down0, down1, down2, mid, up1 and up0; each carries a
spatial stack (self-attention, reference read, appearance cross-attention,
normal-descriptor injection) and a temporal motion module. Motion modules are
tagged with insertion factors 1, 2, 4 (down/up levels) and 8 (mid); at three
levels the factor-4 and factor-8 modules share the bottleneck resolution.

Input is the 12-channel composite: [0:4] noisy latent, [4:8] background
latent, [8:12] foreground-mask latent.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import (
    APPEARANCE_DIM,
    AppearanceProjector,
    MemoryBank,
    NormalGuider,
    NormalInjector,
    PoseGuider,
    attention,
    reference_read,
)

LATENT_CHANNELS = 4
COMPOSITE_CHANNELS = 12
BLOCK_IDS = ("down0", "down1", "down2", "mid", "up1", "up0")
BLOCK_LEVEL = {"down0": 0, "down1": 1, "down2": 2, "mid": 2, "up1": 1, "up0": 0}
INSERTION_FACTOR = {"down0": 1, "down1": 2, "down2": 4, "mid": 8, "up1": 2, "up0": 1}


@dataclass
class ModelConfig:
    image_size: int = 64
    base_width: int = 32
    heads: int = 8
    temporal_heads: int = 8
    pe_max_len: int = 32
    ctx_dim: int = 64
    clip_dim: int = APPEARANCE_DIM
    normal_dim: int = 512
    guider_width: int = 16
    normal_width: int = 8
    width_growth: int = 2
    norm_eps: float = 1e-5

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    def widths(self) -> tuple[int, int, int]:
        b, g = self.base_width, self.width_growth
        return (b, g * b, g * g * b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, image_size: int = 32) -> "ModelConfig":
        """Smallest instance used for gradient checks (under 5k parameters).

        Token LayerNorms over two channels are nearly sign functions at the
        default eps, so the tiny instance uses eps 0.1 to stay smooth on the
        finite-difference scale.
        """
        return cls(image_size=image_size, base_width=2, width_growth=1, heads=1, temporal_heads=1,
                   ctx_dim=2, clip_dim=6, normal_dim=4, guider_width=2, normal_width=1,
                   norm_eps=0.1)


def _groups(c: int) -> int:
    # at least two channels per group so a 1x1 map still normalizes
    for g in (8, 4, 2):
        if c % g == 0 and c // g >= 2:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None]
    angle = pos / torch.pow(10000.0, 2 * torch.div(i, 2, rounding_mode="floor") / dim)
    return torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TokenAttention(nn.Module):
    def __init__(self, dim: int, ctx_dim: int | None = None, heads: int = 1, zero_out: bool = False):
        super().__init__()
        ctx_dim = dim if ctx_dim is None else ctx_dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        return self.to_out(attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads))


class ReferenceReader(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, bank: MemoryBank, block_id: str):
        return self.to_out(reference_read(self.to_q(x), bank, block_id, heads=self.heads))


class MotionModule(nn.Module):
    """Temporal self-attention over frames with sinusoidal position encoding."""

    def __init__(self, dim: int, heads: int, pe_max_len: int, insertion_factor: int,
                 norm_eps: float = 1e-5):
        super().__init__()
        self.insertion_factor = insertion_factor
        self.pe_max_len = pe_max_len
        self.norm = nn.LayerNorm(dim, eps=norm_eps)
        self.attn = TokenAttention(dim, heads=heads, zero_out=True)
        self.register_buffer("pe", sinusoidal_positions(pe_max_len, dim).float(), persistent=False)

    def forward(self, tokens):
        """tokens: (B, L, Fr, d) -> same; attention over Fr."""
        Fr = tokens.shape[-2]
        if Fr > self.pe_max_len:
            raise ValueError(f"{Fr} frames exceed the temporal position limit {self.pe_max_len}")
        x = self.norm(tokens) + self.pe[:Fr].to(tokens.dtype)
        return tokens + self.attn(x)


class AttnBlock(nn.Module):
    def __init__(self, block_id: str, dim: int, cfg: ModelConfig):
        super().__init__()
        self.block_id = block_id
        self.norm_in = nn.GroupNorm(_groups(dim), dim)
        self.proj_in = nn.Linear(dim, dim)
        self.proj_out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim, eps=cfg.norm_eps)
        self.self_attn = TokenAttention(dim, heads=cfg.heads)
        self.norm2 = nn.LayerNorm(dim, eps=cfg.norm_eps)
        self.ref_read = ReferenceReader(dim, cfg.heads)
        self.norm3 = nn.LayerNorm(dim, eps=cfg.norm_eps)
        self.cross_attn = TokenAttention(dim, ctx_dim=cfg.ctx_dim, heads=cfg.heads)
        self.norm4 = nn.LayerNorm(dim, eps=cfg.norm_eps)
        self.normal = NormalInjector(dim, cfg.normal_dim)
        self.temporal = MotionModule(dim, cfg.temporal_heads, cfg.pe_max_len,
                                     INSERTION_FACTOR[block_id], cfg.norm_eps)

    def forward(self, x, B: int, Fr: int, bank: MemoryBank, c_proj, p_normal, temporal: bool):
        """x: (B*Fr, c, h, w)."""
        BF, c, hh, ww = x.shape
        L = hh * ww
        tok = self.norm_in(x).reshape(B, Fr, c, L).permute(0, 1, 3, 2)  # (B, Fr, L, c)
        tok = self.proj_in(tok)
        # spatial: per-frame self-attention
        per_frame = tok.reshape(B * Fr, L, c)
        per_frame = per_frame + self.self_attn(self.norm1(per_frame))
        # reference read: every frame's queries read the same bank entry
        q = self.norm2(per_frame).reshape(B, Fr * L, c)
        flat = per_frame.reshape(B, Fr * L, c) + self.ref_read(q, bank, self.block_id)
        # appearance cross-attention
        flat = flat + self.cross_attn(self.norm3(flat), c_proj[:, None, :])
        # normal descriptors, attended over the frame axis at each site
        site = flat.reshape(B, Fr, L, c).transpose(1, 2)  # (B, L, Fr, c)
        site = self.normal(site, p_normal, q_in=self.norm4(site))
        if temporal:
            site = self.temporal(site)
        out = self.proj_out(site).transpose(1, 2).reshape(B * Fr, L, c)
        return x + out.transpose(1, 2).reshape(BF, c, hh, ww)


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2 = cfg.widths()
        self.cfg = cfg
        temb = 2 * c0
        self.temb_dim = temb
        self.time_mlp = nn.Sequential(nn.Linear(c0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(COMPOSITE_CHANNELS, c0, 3, padding=1)
        self.res_down0 = ResBlock(c0, c0, temb)
        self.attn_down0 = AttnBlock("down0", c0, cfg)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.res_down1 = ResBlock(c0, c1, temb)
        self.attn_down1 = AttnBlock("down1", c1, cfg)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.res_down2 = ResBlock(c1, c2, temb)
        self.attn_down2 = AttnBlock("down2", c2, cfg)
        self.res_mid = ResBlock(c2, c2, temb)
        self.attn_mid = AttnBlock("mid", c2, cfg)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.res_up1 = ResBlock(2 * c1, c1, temb)
        self.attn_up1 = AttnBlock("up1", c1, cfg)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.res_up0 = ResBlock(2 * c0, c0, temb)
        self.attn_up0 = AttnBlock("up0", c0, cfg)
        self.norm_out = nn.GroupNorm(_groups(c0), c0)
        self.conv_out = nn.Conv2d(c0, LATENT_CHANNELS, 3, padding=1)

    def time_embed(self, t, dtype):
        return self.time_mlp(timestep_embedding(t, self.cfg.base_width).to(dtype))

    def forward(self, x, t, bank, c_proj, p_body, p_normal, temporal: bool):
        """x: (B, Fr, 12, h, w); t: (B,); p_body: (B, Fr, c0, h, w); p_normal: (B, Fr, nd)."""
        B, Fr = x.shape[:2]
        temb = self.time_embed(t, x.dtype).repeat_interleave(Fr, dim=0)
        h = self.conv_in(x.reshape(B * Fr, *x.shape[2:]))
        h = h + p_body.reshape(B * Fr, *p_body.shape[2:])
        kw = dict(B=B, Fr=Fr, bank=bank, c_proj=c_proj, p_normal=p_normal, temporal=temporal)
        s0 = self.attn_down0(self.res_down0(h, temb), **kw)
        s1 = self.attn_down1(self.res_down1(self.down0(s0), temb), **kw)
        h = self.attn_down2(self.res_down2(self.down1(s1), temb), **kw)
        h = self.attn_mid(self.res_mid(h, temb), **kw)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.attn_up1(self.res_up1(torch.cat([h, s1], 1), temb), **kw)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.attn_up0(self.res_up0(torch.cat([h, s0], 1), temb), **kw)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.reshape(B, Fr, *out.shape[1:])


class ReferenceNet(nn.Module):
    """Encodes the reference latent at timestep 0 and writes K/V per block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2 = cfg.widths()
        self.cfg = cfg
        temb = 2 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c0, 3, padding=1)
        self.res = nn.ModuleList([ResBlock(c0, c0, temb), ResBlock(c0, c1, temb), ResBlock(c1, c2, temb)])
        self.down = nn.ModuleList([nn.Conv2d(c0, c0, 3, stride=2, padding=1),
                                   nn.Conv2d(c1, c1, 3, stride=2, padding=1)])
        widths = cfg.widths()
        self.norms = nn.ModuleDict({b: nn.LayerNorm(widths[BLOCK_LEVEL[b]], eps=cfg.norm_eps) for b in BLOCK_IDS})
        self.to_k = nn.ModuleDict({b: nn.Linear(widths[BLOCK_LEVEL[b]], widths[BLOCK_LEVEL[b]], bias=False)
                                   for b in BLOCK_IDS})
        self.to_v = nn.ModuleDict({b: nn.Linear(widths[BLOCK_LEVEL[b]], widths[BLOCK_LEVEL[b]], bias=False)
                                   for b in BLOCK_IDS})

    def forward(self, ref_latent) -> MemoryBank:
        """ref_latent: (B, 4, h, w)."""
        lat = self.cfg.latent_size
        if ref_latent.ndim != 4 or tuple(ref_latent.shape[1:]) != (LATENT_CHANNELS, lat, lat):
            raise ValueError(f"reference latent must be (B, 4, {lat}, {lat}), got {tuple(ref_latent.shape)}")
        B = ref_latent.shape[0]
        t0 = torch.zeros(B, dtype=torch.long)
        temb = self.time_mlp(timestep_embedding(t0, self.cfg.base_width).to(ref_latent.dtype))
        h = self.conv_in(ref_latent)
        feats = []
        for lvl in range(3):
            if lvl > 0:
                h = self.down[lvl - 1](h)
            h = self.res[lvl](h, temb)
            feats.append(h)
        entries = {}
        for b in BLOCK_IDS:
            f = feats[BLOCK_LEVEL[b]]
            tok = self.norms[b](f.flatten(2).transpose(1, 2))
            entries[b] = (self.to_k[b](tok), self.to_v[b](tok))
        return MemoryBank(entries)


@dataclass
class GuidanceSignals:
    p_body: torch.Tensor    # (B, Fr, c0, h, w)
    p_normal: torch.Tensor  # (B, Fr, normal_dim)


class AnimationModel(nn.Module):
    """Reference net, guiders, appearance projector and the denoising UNet."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg)
        self.reference = ReferenceNet(cfg)
        self.pose_guider = PoseGuider(cfg.base_width, cfg.guider_width)
        self.normal_guider = NormalGuider(cfg.normal_dim, cfg.normal_width)
        self.projector = AppearanceProjector(cfg.clip_dim, cfg.ctx_dim)

    def reference_write(self, ref_latent) -> MemoryBank:
        return self.reference(ref_latent)

    def guidance(self, body, face, normal) -> GuidanceSignals:
        """body/face/normal: (B, Fr, 3, H, W)."""
        if body.shape[:2] != normal.shape[:2]:
            raise ValueError("frame count mismatch between control maps")
        p_body = self.pose_guider(body, face)
        p_normal = self.normal_guider(normal).squeeze(-2)
        return GuidanceSignals(p_body, p_normal)

    def denoise(self, composite, bank: MemoryBank, c_proj, signals: GuidanceSignals, t, mode: str = "3D"):
        """v prediction for a (B, Fr, 12, h, w) composite input."""
        if mode not in ("2D", "3D"):
            raise ValueError("mode must be '2D' or '3D'")
        if composite.ndim != 5 or composite.shape[2] != COMPOSITE_CHANNELS:
            raise ValueError(f"composite must be (B, Fr, 12, h, w), got {tuple(composite.shape)}")
        Fr = composite.shape[1]
        if mode == "2D" and Fr != 1:
            raise ValueError("2D mode takes single frames (Fr == 1)")
        if Fr > self.cfg.pe_max_len:
            raise ValueError(f"{Fr} frames exceed the temporal position limit {self.cfg.pe_max_len}")
        missing = [b for b in BLOCK_IDS if b not in bank]
        if missing:
            raise KeyError(f"memory bank missing blocks {missing}")
        if not torch.is_tensor(t):
            t = torch.full((composite.shape[0],), int(t), dtype=torch.long)
        return self.unet(composite, t, bank, c_proj, signals.p_body, signals.p_normal,
                         temporal=(mode == "3D"))

    def forward(self, composite, t, ref_latent, c_clip, body, face, normal, mode: str = "3D"):
        bank = self.reference_write(ref_latent)
        c_proj = self.projector(c_clip)
        return self.denoise(composite, bank, c_proj, self.guidance(body, face, normal), t, mode)


def assemble_input(z_t, z_bg, z_fg):
    """Concatenate [z_t, z_bg, z_fg] on the channel axis (-3)."""
    if not (z_t.shape == z_bg.shape == z_fg.shape):
        raise ValueError(f"shape mismatch: {tuple(z_t.shape)}, {tuple(z_bg.shape)}, {tuple(z_fg.shape)}")
    if z_t.shape[-3] != LATENT_CHANNELS:
        raise ValueError("latents must have 4 channels")
    if isinstance(z_t, torch.Tensor):
        return torch.cat([z_t, z_bg, z_fg], dim=-3)
    return np.concatenate([z_t, z_bg, z_fg], axis=-3)


# parameter partition ---------------------------------------------------------

GROUPS = ("unet", "reference", "pose_guider", "normal_guider", "projector", "temporal")


def is_temporal(name: str) -> bool:
    return ".temporal." in f".{name}"


def param_group(name: str) -> str:
    if is_temporal(name):
        return "temporal"
    return name.split(".", 1)[0]


def partition(model: nn.Module) -> dict[str, list[str]]:
    """{'spatial': names, 'temporal': names}; every parameter in exactly one."""
    out = {"spatial": [], "temporal": []}
    for name, _ in model.named_parameters():
        out["temporal" if is_temporal(name) else "spatial"].append(name)
    return out


def grouped_parameters(model: nn.Module) -> dict[str, list[tuple[str, nn.Parameter]]]:
    out = {g: [] for g in GROUPS}
    for name, p in model.named_parameters():
        out[param_group(name)].append((name, p))
    return out


def set_trainable(model: nn.Module, stage: int):
    """Stage 1 trains every spatial parameter; stage 2 only the motion modules."""
    for name, p in model.named_parameters():
        p.requires_grad_(is_temporal(name) if stage == 2 else not is_temporal(name))


def zero_temporal_outputs(model: nn.Module):
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, MotionModule):
                m.attn.to_out.weight.zero_()
                m.attn.to_out.bias.zero_()


# checkpoints ------------------------------------------------------------------

CHECKPOINT_FORMAT = "animsyn-ckpt-1"


def save_checkpoint(path, model: AnimationModel, meta: dict):
    """npz archive of {param name -> array} plus a JSON metadata record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = dict(meta)
    meta["format"] = CHECKPOINT_FORMAT
    meta["model"] = model.cfg.to_dict()
    meta["partition"] = partition(model)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[AnimationModel, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an animsyn checkpoint")
        model = AnimationModel(ModelConfig.from_dict(meta["model"]))
        if partition(model) != meta["partition"]:
            raise ValueError(f"{path}: parameter partition does not match the model definition")
        state = {k: torch.from_numpy(np.array(z[k])) for k in z.files if k != "__meta__"}
    model.load_state_dict(state)
    return model, meta
