"""Control pathways: reference memory bank, appearance projector, pose and
normal guiders, normal-descriptor injection and control dropout."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from types import MappingProxyType

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_head)) v over the last two axes, split into heads.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv).
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query width {d} != key width {k.shape[-1]}")
    if d % heads or v.shape[-1] % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if heads == 1:
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        return w @ v

    def split(x):
        return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads).transpose(-2, -3)

    out = attention(split(q), split(k), split(v), heads=1)
    out = out.transpose(-2, -3)
    return out.reshape(*out.shape[:-2], -1)


class MemoryBank:
    """Write-once map block_id -> (K_ref, V_ref); read-only after construction."""

    def __init__(self, entries: dict):
        self._entries = MappingProxyType(dict(entries))

    def __getitem__(self, block_id):
        try:
            return self._entries[block_id]
        except KeyError:
            raise KeyError(f"memory bank has no entry for block {block_id!r}") from None

    def __contains__(self, block_id):
        return block_id in self._entries

    def __len__(self):
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def items(self):
        return self._entries.items()

    def detach(self) -> "MemoryBank":
        return MemoryBank({k: (a.detach(), b.detach()) for k, (a, b) in self._entries.items()})


def reference_read(Q: torch.Tensor, bank: MemoryBank, block_id, heads: int = 1) -> torch.Tensor:
    """Cross-attention from main-network queries onto a bank entry.

    Q is (B, Lq, d); bank entries are (B, Lref, d) and broadcast over any
    extra leading axes of Q.
    """
    K, V = bank[block_id]
    if K.shape[-1] != Q.shape[-1]:
        raise ValueError(f"head dimension mismatch: queries {Q.shape[-1]} vs bank {K.shape[-1]}")
    return attention(Q, K, V, heads=heads)


class GEGLU(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.proj = nn.Linear(dim_in, 2 * dim_out)

    def forward(self, x):
        hidden, gate = self.proj(x).chunk(2, dim=-1)
        return hidden * F.gelu(gate)


class AppearanceProjector(nn.Module):
    """c_proj = FFN(c_clip) + W c_clip, with a GEGLU inner activation."""

    def __init__(self, clip_dim: int, ctx_dim: int, mult: int = 2):
        super().__init__()
        self.clip_dim = clip_dim
        self.ff_in = GEGLU(clip_dim, mult * ctx_dim)
        self.ff_out = nn.Linear(mult * ctx_dim, ctx_dim)
        self.skip = nn.Linear(clip_dim, ctx_dim, bias=False)

    def forward(self, c_clip):
        if c_clip.shape[-1] != self.clip_dim:
            raise ValueError(f"appearance embedding width {c_clip.shape[-1]} != {self.clip_dim}")
        return self.ff_out(self.ff_in(c_clip)) + self.skip(c_clip)


def project_appearance(c_clip: torch.Tensor, projector: AppearanceProjector) -> torch.Tensor:
    return projector(c_clip)


def _strided_stack(c_in: int, widths: tuple[int, int, int]) -> nn.Sequential:
    a, b, c = widths
    return nn.Sequential(
        nn.Conv2d(c_in, a, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(a, b, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(b, c, 3, stride=2, padding=1),
    )


class PoseGuider(nn.Module):
    """Gated body/face guider: p_body = sigmoid(Conv([S, H])) * Backbone([S, H]).

    Both paths downsample by 8 so the output lands on the latent grid; the gate
    is a 3x3 convolution over the 8x8-average-pooled maps.
    """

    def __init__(self, out_channels: int, width: int = 16):
        super().__init__()
        self.gate = nn.Conv2d(6, out_channels, 3, padding=1)
        self.backbone = _strided_stack(6, (width, 2 * width, out_channels))

    def forward(self, S, H):
        if S.shape[:-3] != H.shape[:-3] or S.shape[-2:] != H.shape[-2:]:
            raise ValueError(f"body map {tuple(S.shape)} and face map {tuple(H.shape)} disagree")
        lead = S.shape[:-3]
        x = torch.cat([S, H], dim=-3).reshape(-1, 6, *S.shape[-2:])
        out = self.gate_values(S, H) * self.backbone(x)
        return out.reshape(*lead, *out.shape[1:])

    def gate_values(self, S, H):
        x = torch.cat([S, H], dim=-3).reshape(-1, 6, *S.shape[-2:])
        return torch.sigmoid(self.gate(F.avg_pool2d(x, 8)))


def pose_guide(S, H, guider: PoseGuider):
    return guider(S, H)


class NormalGuider(nn.Module):
    """Per-frame descriptor Linear(Flatten(Backbone(N))), backbone ending on a 4x4 map."""

    def __init__(self, out_dim: int = 512, width: int = 8):
        super().__init__()
        self.backbone = _strided_stack(3, (width, width, width))
        self.linear = nn.Linear(width * 16, out_dim)

    def forward(self, N):
        if N.shape[-3] != 3 or N.shape[-2] <= 0 or N.shape[-1] <= 0:
            raise ValueError(f"normal map must be (..., 3, H, W) with positive H, W; got {tuple(N.shape)}")
        lead = N.shape[:-3]
        x = N.reshape(-1, *N.shape[-3:])
        feat = self.backbone(x)
        if feat.shape[-2:] != (4, 4):
            feat = F.adaptive_avg_pool2d(feat, 4)
        out = self.linear(feat.flatten(1))
        return out.reshape(*lead, 1, out.shape[-1])


def normal_guide(N, guider: NormalGuider):
    return guider(N)


class NormalInjector(nn.Module):
    """h' = Attn(h, p_normal, p_normal) + h, attending over the frame axis.

    Keys and values are the per-frame descriptors projected to the token width.
    """

    def __init__(self, dim: int, normal_dim: int = 512):
        super().__init__()
        self.dim = dim
        self.normal_dim = normal_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(normal_dim, dim, bias=False)
        self.to_v = nn.Linear(normal_dim, dim, bias=False)

    def forward(self, h, p_normal, q_in=None):
        """h: (B, L, Fr, d) tokens per spatial site; p_normal: (B, Fr, normal_dim)."""
        if p_normal.shape[-1] != self.normal_dim:
            raise ValueError(f"descriptor width {p_normal.shape[-1]} != {self.normal_dim}")
        if h.shape[-1] != self.dim:
            raise ValueError(f"token width {h.shape[-1]} != {self.dim}")
        q = self.to_q(h if q_in is None else q_in)
        k = self.to_k(p_normal).unsqueeze(1)
        v = self.to_v(p_normal).unsqueeze(1)
        return attention(q, k, v) + h


def inject_normal(h, p_normal, injector: NormalInjector):
    return injector(h, p_normal)


@dataclass(frozen=True)
class ControlBundle:
    """Per-frame control maps; a dropped modality is zeros with its flag False."""

    S: np.ndarray
    face_map: np.ndarray
    N: np.ndarray
    present_s: bool = True
    present_h: bool = True
    present_n: bool = True

    def __post_init__(self):
        shapes = {tuple(np.shape(a)) for a in (self.S, self.face_map, self.N)}
        if len(shapes) != 1:
            raise ValueError(f"control maps disagree in shape: {shapes}")
        if len(next(iter(shapes))) != 4 or np.shape(self.S)[1] != 3:
            raise ValueError("control maps must be F x 3 x H x W")

    @property
    def frames(self) -> int:
        return np.shape(self.S)[0]

    def permuted(self, order) -> "ControlBundle":
        order = np.asarray(order)
        return replace(self, S=self.S[order], face_map=self.face_map[order], N=self.N[order])


def drop_controls(bundle: ControlBundle, rng: np.random.Generator, p_each: float = 0.01) -> ControlBundle:
    """Independently zero each modality with probability ``p_each``."""
    if not 0.0 <= p_each <= 1.0:
        raise ValueError("p_each must lie in [0, 1]")
    drop = rng.random(3) < p_each
    out = bundle
    if drop[0]:
        out = replace(out, S=np.zeros_like(out.S), present_s=False)
    if drop[1]:
        out = replace(out, face_map=np.zeros_like(out.face_map), present_h=False)
    if drop[2]:
        out = replace(out, N=np.zeros_like(out.N), present_n=False)
    return out


def toy_appearance_embedding(image: np.ndarray) -> np.ndarray:
    """Stand-in semantic image embedding: 4x4 mean-pooled colours plus channel spread.

    image: 3 x H x W in [0, 1]. Returns a 51-vector.
    """
    image = np.asarray(image, dtype=np.float64)
    C, H, W = image.shape
    pooled = image.reshape(C, 4, H // 4, 4, W // 4).mean(axis=(2, 4))
    return np.concatenate([(pooled - 0.5).ravel(), image.std(axis=(1, 2))])


APPEARANCE_DIM = 51
