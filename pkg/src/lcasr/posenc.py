"""Positional encodings: none, learnable sinusoidal (added at the input), rotary (on q/k).

Positions count encoder frames after subsampling, starting at 0. Rotary pairs are
adjacent dimensions ``(2j, 2j+1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

SCHEMES = ("nopos", "sine", "rotary")
ROTARY_DEFAULT_THETA = 10_000.0
ROTARY_THETA_PRESETS = {"default": ROTARY_DEFAULT_THETA, "long": 1_500_000.0}
ROTARY_THETA_RANGE = (1e4, 1e7)


@dataclass(frozen=True)
class RotaryParams:
    theta: float
    d: int

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"rotary dimension must be even and positive, got {self.d}")
        if not self.theta > 0:
            raise ValueError("rotary theta must be positive")

    @property
    def freqs(self) -> np.ndarray:
        j = np.arange(self.d // 2, dtype=np.float64)
        return self.theta ** (-2.0 * j / self.d)


@dataclass
class SinusoidalParams:
    w_r: np.ndarray

    @property
    def d(self) -> int:
        return 2 * len(self.w_r)

    @classmethod
    def init(cls, d: int, base: float = 10_000.0) -> "SinusoidalParams":
        if d % 2:
            raise ValueError("sinusoidal encoding needs an even feature dimension")
        return cls(base ** (-2.0 * np.arange(d // 2) / d))


def sinusoidal_add(x: np.ndarray, n, params: SinusoidalParams) -> np.ndarray:
    """``x + concat(sin(n w_r), cos(n w_r)) / sqrt(d)``; ``n`` may be a scalar or one position per row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match encoding dimension {params.d}")
    ang = np.multiply.outer(np.asarray(n, dtype=np.float64), params.w_r)
    return x + np.concatenate([np.sin(ang), np.cos(ang)], axis=-1) / np.sqrt(params.d)


def rotary_apply(x: np.ndarray, n, params: RotaryParams) -> np.ndarray:
    """Rotate each plane ``(2j, 2j+1)`` of ``x`` by ``n * theta_j``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ValueError("rotary encoding needs an even dimension")
    if x.shape[-1] != params.d:
        raise ValueError(f"dimension {x.shape[-1]} does not match rotary dimension {params.d}")
    ang = np.multiply.outer(np.asarray(n, dtype=np.float64), params.freqs)
    if ang.ndim < x.ndim:
        ang = np.broadcast_to(ang, x.shape[:-1] + (params.d // 2,))
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


# ------------------------------------------------------------------ torch ops


def rotary_tables(num_positions: int, params: RotaryParams, dtype=torch.float32, offset: int = 0):
    """cos/sin tables of shape [num_positions, d/2], computed in float64."""
    pos = np.arange(offset, offset + num_positions, dtype=np.float64)
    ang = np.outer(pos, params.freqs)
    return torch.from_numpy(np.cos(ang)).to(dtype), torch.from_numpy(np.sin(ang)).to(dtype)


def rotary_torch(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Apply rotary tables to ``x`` of shape [..., L, d]."""
    a, b = x[..., 0::2], x[..., 1::2]
    out = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return out.flatten(-2)


class Scheme:
    """Handle returned by :func:`make_scheme`.

    ``apply_input`` acts on the hidden sequence at the encoder input and
    ``apply_qk`` on per-head queries/keys; each is the identity where the scheme
    does not act.
    """

    def __init__(self, name: str, d: int, theta: Optional[float] = None, head_dim: Optional[int] = None):
        self.name = name
        self.d = d
        self.theta = theta
        self.rotary = RotaryParams(theta, head_dim or d) if name == "rotary" else None
        self.sine = SinusoidalParams.init(d) if name == "sine" else None

    def apply_input(self, x: np.ndarray, positions) -> np.ndarray:
        if self.sine is None:
            return np.asarray(x)
        return sinusoidal_add(x, positions, self.sine)

    def apply_qk(self, x: np.ndarray, positions) -> np.ndarray:
        if self.rotary is None:
            return np.asarray(x)
        return rotary_apply(x, positions, self.rotary)

    def __repr__(self):
        extra = f", theta={self.theta:g}" if self.rotary is not None else ""
        return f"Scheme({self.name!r}, d={self.d}{extra})"


def resolve_theta(theta) -> float:
    if theta is None:
        return ROTARY_DEFAULT_THETA
    if isinstance(theta, str):
        if theta not in ROTARY_THETA_PRESETS:
            raise ValueError(f"unknown rotary preset {theta!r}; choose from {sorted(ROTARY_THETA_PRESETS)}")
        return ROTARY_THETA_PRESETS[theta]
    theta = float(theta)
    lo, hi = ROTARY_THETA_RANGE
    if not lo <= theta <= hi:
        raise ValueError(f"rotary theta {theta:g} outside the supported range [{lo:g}, {hi:g}]")
    return theta


def make_scheme(name: str, d: int, theta=None, head_dim: Optional[int] = None) -> Scheme:
    if name not in SCHEMES:
        raise ValueError(f"unknown positional encoding {name!r}; choose from {SCHEMES}")
    return Scheme(name, d, resolve_theta(theta) if name == "rotary" else None, head_dim)
