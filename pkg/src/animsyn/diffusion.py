"""Noise schedules, SNR weighting, v-parameterization and the DDIM step.

Every function here is pure. Latent arguments may be numpy arrays or torch
tensors; only scalar coefficients are taken from the schedule, so the result
keeps the input's array type and dtype.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

#: SNR reported when alpha_bar == 1 (t=0); keeps loss weights finite.
SNR_CAP = 1e12


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray = field(repr=False)
    zero_terminal_snr: bool = False
    beta_lo: float = 1e-4
    beta_hi: float = 0.02
    family: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(ab < 0) or np.any(ab > 1):
            raise ValueError("alpha_bar entries must lie in [0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.zero_terminal_snr != (ab[-1] == 0.0):
            raise ValueError("zero_terminal_snr flag must agree with alpha_bar[T] == 0")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not isinstance(t, (int, np.integer)) or not lo <= t <= self.T:
            raise ValueError(f"timestep {t!r} outside [{lo}, {self.T}]")
        return int(t)

    def coeffs(self, t: int) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) as python floats."""
        ab = float(self.alpha_bar[t])
        return math.sqrt(ab), math.sqrt(1.0 - ab)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "alpha_bar": self.alpha_bar.tolist(),
            "zero_terminal_snr": self.zero_terminal_snr,
            "beta_lo": self.beta_lo,
            "beta_hi": self.beta_hi,
            "family": self.family,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(
            T=int(d["T"]),
            alpha_bar=np.asarray(d["alpha_bar"], dtype=np.float64),
            zero_terminal_snr=bool(d["zero_terminal_snr"]),
            beta_lo=float(d.get("beta_lo", 1e-4)),
            beta_hi=float(d.get("beta_hi", 0.02)),
            family=d.get("family", "linear"),
        )

    @classmethod
    def from_json(cls, s: str) -> "NoiseSchedule":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class WeightConfig:
    gamma: float = 5.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


def make_schedule(T: int, beta_lo: float = 1e-4, beta_hi: float = 0.02,
                  zero_terminal_snr: bool = True, family: str = "linear") -> NoiseSchedule:
    """Linear-beta schedule, optionally rescaled to zero terminal SNR.

    The rescale shifts and scales sqrt(alpha_bar) over t=1..T so that the last
    entry becomes exactly 0 while sqrt(alpha_bar_1) is unchanged.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_lo <= beta_hi < 1):
        raise ValueError(f"need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}")
    if family != "linear":
        raise ValueError(f"unknown beta family {family!r}")
    if T == 1:
        betas = np.array([beta_lo], dtype=np.float64)
    else:
        betas = np.linspace(beta_lo, beta_hi, T, dtype=np.float64)
    ab = np.cumprod(1.0 - betas)

    if zero_terminal_snr:
        sq = np.sqrt(ab)
        first, last = sq[0], sq[-1]
        if T == 1:
            sq = np.zeros(1)
        else:
            sq = (sq - last) * first / (first - last)
            sq[-1] = 0.0
        ab = sq ** 2

    alpha_bar = np.concatenate([[1.0], ab])
    return NoiseSchedule(T=int(T), alpha_bar=alpha_bar, zero_terminal_snr=zero_terminal_snr,
                         beta_lo=float(beta_lo), beta_hi=float(beta_hi), family=family)


def snr(schedule: NoiseSchedule, t: int) -> float:
    """alpha_bar / (1 - alpha_bar); 0 at pure noise, SNR_CAP at alpha_bar == 1."""
    t = schedule.check_t(t)
    ab = float(schedule.alpha_bar[t])
    if ab == 0.0:
        return 0.0
    if ab == 1.0:
        return SNR_CAP
    return min(ab / (1.0 - ab), SNR_CAP)


def loss_weight(snr_value: float, cfg: WeightConfig = WeightConfig()) -> float:
    """min(SNR, gamma) / (SNR + 1)."""
    if snr_value < 0 or math.isnan(snr_value):
        raise ValueError(f"SNR must be non-negative, got {snr_value}")
    return min(snr_value, cfg.gamma) / (snr_value + 1.0)


def weight_table(schedule: NoiseSchedule, cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    """Loss weight for every t in 0..T (index 0 uses the capped SNR)."""
    out = np.empty(schedule.T + 1)
    out[0] = loss_weight(SNR_CAP, cfg)
    for t in range(1, schedule.T + 1):
        out[t] = loss_weight(snr(schedule, t), cfg)
    return out


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x0, eps, schedule: NoiseSchedule, t: int):
    _same_shape(x0, eps, "add_noise")
    a, s = schedule.coeffs(schedule.check_t(t))
    return a * x0 + s * eps


def v_target(x0, eps, schedule: NoiseSchedule, t: int):
    _same_shape(x0, eps, "v_target")
    a, s = schedule.coeffs(schedule.check_t(t))
    return a * eps - s * x0


def v_to_eps(v, z_t, schedule: NoiseSchedule, t: int):
    _same_shape(v, z_t, "v_to_eps")
    a, s = schedule.coeffs(schedule.check_t(t))
    return a * v + s * z_t


def v_to_x0(v, z_t, schedule: NoiseSchedule, t: int):
    _same_shape(v, z_t, "v_to_x0")
    a, s = schedule.coeffs(schedule.check_t(t))
    return a * z_t - s * v


def ddim_step(z_t, eps_pred, schedule: NoiseSchedule, t: int, t_prev: int, v_pred=None):
    """Deterministic DDIM update from t to t_prev.

    At alpha_bar_t == 0 the clean estimate cannot be formed from eps alone;
    pass ``v_pred`` there and the step goes through the v path (x0 = -v).
    """
    t = schedule.check_t(t)
    t_prev = schedule.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    _same_shape(z_t, eps_pred, "ddim_step")
    a_t, s_t = schedule.coeffs(t)
    a_p, s_p = schedule.coeffs(t_prev)
    if a_t == 0.0:
        if v_pred is None:
            raise ValueError("alpha_bar_t == 0: a v prediction is required for this step")
        x0_hat = v_to_x0(v_pred, z_t, schedule, t)
    else:
        x0_hat = (z_t - s_t * eps_pred) / a_t
    return a_p * x0_hat + s_p * eps_pred


def ddim_step_v(z_t, v_pred, schedule: NoiseSchedule, t: int, t_prev: int):
    """DDIM update driven by a v prediction (singularity-free at zero SNR)."""
    t = schedule.check_t(t)
    t_prev = schedule.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    a_p, s_p = schedule.coeffs(t_prev)
    return a_p * v_to_x0(v_pred, z_t, schedule, t) + s_p * v_to_eps(v_pred, z_t, schedule, t)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced grid T -> 0 with ``steps`` intervals, rounded down."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    grid = np.floor(np.linspace(T, 0, steps + 1)).astype(int).tolist()
    grid[0], grid[-1] = T, 0
    if len(set(grid)) != len(grid):
        raise ValueError("timestep grid has repeats; reduce steps")
    return grid


def ddim_sample(z_T, predict_v, schedule: NoiseSchedule, steps: int = 50):
    """Run the reverse pass. ``predict_v(z, t)`` returns the model's v."""
    grid = ddim_timesteps(schedule.T, steps)
    z = z_T
    for t, t_prev in zip(grid[:-1], grid[1:]):
        z = ddim_step_v(z, predict_v(z, t), schedule, t, t_prev)
    return z


def oracle_v(x0, schedule: NoiseSchedule):
    """A predictor returning the exact v for a planted clean sample x0."""
    as_tensor = {}

    def predict(z_t, t):
        ref = x0
        if torch.is_tensor(z_t) and not torch.is_tensor(x0):
            if z_t.dtype not in as_tensor:
                as_tensor[z_t.dtype] = torch.as_tensor(x0, dtype=z_t.dtype)
            ref = as_tensor[z_t.dtype]
        a, s = schedule.coeffs(t)
        if s == 0.0:
            return 0 * ref
        eps = (z_t - a * ref) / s
        return a * eps - s * ref
    return predict
