"""Conformer CTC encoder with depthwise subsampling, batch renormalisation and self-conditioning."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import TileSpec, attend_backward, attend_tiled, sliding_window_mask
from .posenc import RotaryParams, make_scheme, resolve_theta, rotary_tables, rotary_torch

CHECKPOINT_MAGIC = b"LCAM"
CHECKPOINT_VERSION = 1
FROM_CONFIG = "config"


@dataclass
class ModelConfig:
    layers: int = 2
    width: int = 64
    heads: int = 2
    subsampling: int = 8
    conv_kernel: int = 9
    pos_enc: str = "rotary"
    rotary_theta: float = 1.5e6
    window_frames: Optional[int] = None
    vocab_size: int = 256
    mel_bins: int = 80
    ff_mult: int = 4
    dropout: float = 0.1
    attn_impl: str = "naive"
    tile_rows: int = 128
    tile_cols: int = 128
    frontend_channels: Optional[int] = None
    self_condition: bool = True
    renorm_warmup_steps: int = 1000
    renorm_momentum: float = 0.1
    feature_hop_seconds: float = 0.01

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.subsampling not in (4, 8):
            raise ValueError(f"subsampling must be 4 or 8, got {self.subsampling}")
        if self.attn_impl not in ("naive", "tiled"):
            raise ValueError(f"attn_impl must be 'naive' or 'tiled', got {self.attn_impl!r}")
        if self.window_frames is not None and self.window_frames < 1:
            raise ValueError("window_frames must be >= 1")
        make_scheme(self.pos_enc, self.width, self.rotary_theta, self.head_dim)
        if self.head_dim < 64:
            warnings.warn(
                f"attention head dimension {self.head_dim} < 64 tends to hurt long-context models",
                stacklevel=3,
            )

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    @property
    def sub_channels(self) -> int:
        if self.frontend_channels is not None:
            return self.frontend_channels
        return 256 if self.width >= 512 else self.width

    @property
    def hop_seconds(self) -> float:
        return self.feature_hop_seconds * self.subsampling

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def out_length(t_in: int, subsampling: int) -> int:
    return -(-t_in // subsampling)


def _trunc_normal_(w: torch.Tensor, std: float = 0.02):
    nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std)


def _length_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    return torch.arange(size, device=lengths.device)[None, :] < lengths[:, None]


# --------------------------------------------------------------------- frontend


class SubsamplingFrontend(nn.Module):
    """Stride-2 stages: a regular 3x3 conv, then depthwise + pointwise 3x3 stages; each halves time
    and frequency. Output length is ``ceil(T / factor)``."""

    def __init__(self, mel_bins: int, width: int, factor: int, channels: int):
        super().__init__()
        self.factor = factor
        stages = int(round(math.log2(factor)))
        self.stem = nn.Conv2d(1, channels, 3, stride=2, padding=1)
        self.depthwise = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1, groups=channels) for _ in range(stages - 1)
        )
        self.pointwise = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in range(stages - 1))
        freq = mel_bins
        for _ in range(stages):
            freq = -(-freq // 2)
        self.proj = nn.Linear(channels * freq, width)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor):
        """``x``: [B, T, F] with zeroed padding. Returns ``([B, T_out, D], out_lengths)``."""
        h = x.unsqueeze(1)
        h = F.relu(self.stem(h))
        lengths = (lengths + 1) // 2
        h = h * _length_mask(lengths, h.shape[2])[:, None, :, None]
        for dw, pw in zip(self.depthwise, self.pointwise):
            h = F.relu(pw(dw(h)))
            lengths = (lengths + 1) // 2
            h = h * _length_mask(lengths, h.shape[2])[:, None, :, None]
        b, c, t, f = h.shape
        h = self.proj(h.permute(0, 2, 1, 3).reshape(b, t, c * f))
        return h, lengths

    def forward_blocked(self, x: torch.Tensor, block_frames: int = 8192):
        """Exact single-sequence frontend in time blocks with a discarded halo, for long inputs."""
        t_in = x.shape[1]
        if t_in <= block_frames:
            return self.forward(x, torch.tensor([t_in]))[0]
        fac = self.factor
        block = max(fac, (block_frames // fac) * fac)
        halo = 4 * fac
        outs = []
        for a in range(0, t_in, block):
            b = min(t_in, a + block)
            lo, hi = max(0, a - halo), min(t_in, b + halo)
            seg = x[:, lo:hi]
            h = self.forward(seg, torch.tensor([hi - lo]))[0]
            skip = (a - lo) // fac
            outs.append(h[:, skip : skip + out_length(b, fac) - a // fac])
        return torch.cat(outs, dim=1)


# ---------------------------------------------------------------- batch renorm


class BatchRenorm1d(nn.Module):
    """Batch renormalisation over ``[B, C, T]`` with optional ``[B, T]`` validity mask.

    ``r_max``/``d_max`` ramp from 1/0 to their final values over ``warmup_steps``
    unless fixed explicitly.
    """

    def __init__(
        self,
        channels: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        warmup_steps: int = 1000,
        r_max_final: float = 3.0,
        d_max_final: float = 5.0,
        r_max: Optional[float] = None,
        d_max: Optional[float] = None,
    ):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.warmup_steps = warmup_steps
        self.r_max_final = r_max_final
        self.d_max_final = d_max_final
        self.fixed_r_max = r_max
        self.fixed_d_max = d_max
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.register_buffer("steps", torch.zeros((), dtype=torch.long))

    def limits(self) -> tuple[float, float]:
        frac = 1.0 if self.warmup_steps <= 0 else min(1.0, float(self.steps) / self.warmup_steps)
        r_max = self.fixed_r_max if self.fixed_r_max is not None else 1.0 + (self.r_max_final - 1.0) * frac
        d_max = self.fixed_d_max if self.fixed_d_max is not None else self.d_max_final * frac
        return r_max, d_max

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        shape = (1, -1, 1)
        if not self.training:
            xhat = (x - self.running_mean.view(shape)) / torch.sqrt(self.running_var.view(shape) + self.eps)
            return xhat * self.weight.view(shape) + self.bias.view(shape)
        if mask is None:
            mean = x.mean(dim=(0, 2))
            var = x.var(dim=(0, 2), unbiased=False)
        else:
            m = mask[:, None, :].to(x.dtype)
            n = m.sum() .clamp_min(1.0)
            mean = (x * m).sum(dim=(0, 2)) / n
            var = (((x - mean.view(shape)) ** 2) * m).sum(dim=(0, 2)) / n
        std = torch.sqrt(var + self.eps)
        run_std = torch.sqrt(self.running_var + self.eps)
        r_max, d_max = self.limits()
        r = (std.detach() / run_std).clamp(1.0 / r_max, r_max)
        d = ((mean.detach() - self.running_mean) / run_std).clamp(-d_max, d_max)
        xhat = (x - mean.view(shape)) / std.view(shape) * r.view(shape) + d.view(shape)
        with torch.no_grad():
            self.running_mean += self.momentum * (mean.detach() - self.running_mean)
            self.running_var += self.momentum * (var.detach() - self.running_var)
            self.steps += 1
        return xhat * self.weight.view(shape) + self.bias.view(shape)


# -------------------------------------------------------------------- attention


class _TiledAttention(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, v, window, tile_rows, tile_cols):
        tiles = TileSpec(tile_rows, tile_cols)
        qn, kn, vn = (t.detach().cpu().numpy() for t in (q, k, v))
        out, lse = attend_tiled(qn, kn, vn, window, tiles, return_lse=True)
        ctx.window, ctx.tiles = window, tiles
        ctx.save_for_backward(q, k, v, torch.from_numpy(out), torch.from_numpy(lse))
        return torch.from_numpy(out).to(q.dtype)

    @staticmethod
    def backward(ctx, dout):
        q, k, v, out, lse = ctx.saved_tensors
        dq, dk, dv = attend_backward(
            q.detach().numpy(), k.detach().numpy(), v.detach().numpy(), dout.detach().numpy(),
            ctx.window, ctx.tiles, out=out.numpy(), lse=lse.numpy(),
        )
        return torch.from_numpy(dq), torch.from_numpy(dk), torch.from_numpy(dv), None, None, None


def tiled_attention(q, k, v, window=None, tile_rows=128, tile_cols=128):
    return _TiledAttention.apply(q.contiguous(), k.contiguous(), v.contiguous(), window, tile_rows, tile_cols)


def naive_attention(q, k, v, window=None, key_mask=None):
    """Reference attention on ``[B, H, L, d]`` tensors; ``key_mask`` is ``[B, L]`` validity."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    length = q.shape[-2]
    allowed = None
    if window is not None and not sliding_window_mask(length, window).is_full():
        allowed = torch.from_numpy(sliding_window_mask(length, window).dense())[None, None]
    if key_mask is not None:
        keys = key_mask[:, None, None, :]
        allowed = keys if allowed is None else allowed & keys
        # padded queries may see no valid key at all; let them see themselves
        allowed = allowed | torch.eye(length, dtype=torch.bool)
    if allowed is not None:
        scores = scores.masked_fill(~allowed, float("-inf"))
    return torch.matmul(torch.softmax(scores, dim=-1), v)


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.width)
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.out = nn.Linear(cfg.width, cfg.width)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask=None, rope=None, window=None, impl="naive"):
        b, t, _ = x.shape
        h, dh = self.cfg.heads, self.cfg.head_dim
        q, k, v = self.qkv(self.norm(x)).view(b, t, 3, h, dh).permute(2, 0, 3, 1, 4)
        if rope is not None:
            cos, sin = rope
            q, k = rotary_torch(q, cos, sin), rotary_torch(k, cos, sin)
        if impl == "tiled":
            if key_mask is not None and not bool(key_mask.all()):
                raise ValueError("tiled attention does not support padded batches")
            a = tiled_attention(q, k, v, window, self.cfg.tile_rows, self.cfg.tile_cols)
        else:
            a = naive_attention(q, k, v, window, key_mask)
        a = a.transpose(1, 2).reshape(b, t, h * dh)
        return self.dropout(self.out(a))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(cfg.width),
            nn.Linear(cfg.width, cfg.ff_mult * cfg.width),
            nn.SiLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.ff_mult * cfg.width, cfg.width),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.width
        self.norm = nn.LayerNorm(d)
        self.pw1 = nn.Conv1d(d, 2 * d, 1)
        self.dw = nn.Conv1d(d, d, cfg.conv_kernel, padding=cfg.conv_kernel // 2, groups=d)
        self.bn = BatchRenorm1d(d, momentum=cfg.renorm_momentum, warmup_steps=cfg.renorm_warmup_steps)
        self.pw2 = nn.Conv1d(d, d, 1)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask=None):
        h = self.pw1(self.norm(x).transpose(1, 2))
        h = F.glu(h, dim=1)
        if mask is not None:
            h = h * mask[:, None, :].to(h.dtype)
        h = F.silu(self.bn(self.dw(h), mask))
        return self.dropout(self.pw2(h).transpose(1, 2))


class ConformerLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ff1 = FeedForward(cfg)
        self.attn = SelfAttention(cfg)
        self.conv = ConvModule(cfg)
        self.ff2 = FeedForward(cfg)
        self.norm = nn.LayerNorm(cfg.width)
        self.use_conv = True

    def forward(self, x, mask=None, rope=None, window=None, impl="naive"):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x, mask, rope, window, impl)
        if self.use_conv:
            x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


# ---------------------------------------------------------------------- encoder


@dataclass
class EncoderOutput:
    log_probs: torch.Tensor  # [B, T_out, V+1]
    lengths: torch.Tensor
    hop_seconds: float
    hidden: list = field(default_factory=list)


class SelfCondition(nn.Module):
    """``h + embed(softmax(head(norm(h))))`` using the shared output head and embedding."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)

    def forward(self, h, head: nn.Linear, embed: nn.Linear):
        return h + embed(torch.softmax(head(self.norm(h)), dim=-1))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("feat_mean", torch.zeros(cfg.mel_bins))
        self.register_buffer("feat_std", torch.ones(cfg.mel_bins))
        self.frontend = SubsamplingFrontend(cfg.mel_bins, cfg.width, cfg.subsampling, cfg.sub_channels)
        self.layers = nn.ModuleList(ConformerLayer(cfg) for _ in range(cfg.layers))
        self.head = nn.Linear(cfg.width, cfg.num_classes)
        self.cond = nn.ModuleList(SelfCondition(cfg.width) for _ in range(max(0, cfg.layers - 1)))
        self.cond_embed = nn.Linear(cfg.num_classes, cfg.width, bias=False)
        if cfg.pos_enc == "sine":
            ladder = 10_000.0 ** (-2.0 * torch.arange(cfg.width // 2, dtype=torch.float64) / cfg.width)
            self.sine_w = nn.Parameter(ladder.float())
        else:
            self.sine_w = None
        self.rotary = (
            RotaryParams(resolve_theta(cfg.rotary_theta), cfg.head_dim) if cfg.pos_enc == "rotary" else None
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _trunc_normal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        d = self.cfg.width
        eye = torch.eye(d)
        for layer in self.layers:
            conv = layer.conv
            with torch.no_grad():
                conv.pw1.weight.zero_()
                conv.pw1.weight[:d, :, 0] = eye
                conv.pw1.bias.zero_()
                # the output pointwise starts at zero so the whole module is an identity on the residual stream
                conv.pw2.weight.zero_()
                conv.pw2.bias.zero_()

    @property
    def subsampling(self) -> int:
        return self.cfg.subsampling

    @property
    def hop_seconds(self) -> float:
        return self.cfg.hop_seconds

    @property
    def blank_id(self) -> int:
        return self.cfg.blank_id

    @property
    def context_frames(self) -> Optional[int]:
        return self.cfg.window_frames

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray):
        with torch.no_grad():
            self.feat_mean.copy_(torch.as_tensor(mean, dtype=self.feat_mean.dtype))
            self.feat_std.copy_(torch.as_tensor(np.maximum(std, 1e-3), dtype=self.feat_std.dtype))

    def _rope(self, length: int, dtype, offset: int = 0):
        if self.rotary is None:
            return None
        return rotary_tables(length, self.rotary, dtype, offset)

    def forward(
        self,
        x: torch.Tensor,
        lengths: Optional[torch.Tensor] = None,
        window=FROM_CONFIG,
        impl: Optional[str] = None,
        return_hidden: bool = False,
        blocked_frontend: bool = False,
        position_offset: int = 0,
    ) -> EncoderOutput:
        """``x``: [B, T_in, mel_bins] log-mel frames; positions start at ``position_offset``."""
        cfg = self.cfg
        window = cfg.window_frames if window == FROM_CONFIG else window
        impl = impl or cfg.attn_impl
        b, t_in, _ = x.shape
        if lengths is None:
            lengths = torch.full((b,), t_in, dtype=torch.long)
        if t_in < cfg.subsampling:
            raise ValueError(f"input of {t_in} frames is shorter than the subsampling factor {cfg.subsampling}")
        x = (x - self.feat_mean) / self.feat_std
        x = x * _length_mask(lengths, t_in)[:, :, None].to(x.dtype)
        if blocked_frontend and b == 1:
            h = self.frontend.forward_blocked(x)
            out_lengths = torch.tensor([h.shape[1]])
        else:
            h, out_lengths = self.frontend(x, lengths)
        t_out = h.shape[1]
        mask = _length_mask(out_lengths, t_out)
        full = bool(mask.all())
        if self.sine_w is not None:
            pos = torch.arange(position_offset, position_offset + t_out, dtype=h.dtype)
            ang = pos[:, None] * self.sine_w[None, :].to(h.dtype)
            h = h + torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1) / math.sqrt(cfg.width)
        rope = self._rope(t_out, h.dtype, position_offset)
        hidden = []
        for i, layer in enumerate(self.layers):
            h = layer(h, None if full else mask, rope, window, impl)
            if i < len(self.cond) and cfg.self_condition:
                h = self.cond[i](h, self.head, self.cond_embed)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after layer {i}")
            if return_hidden:
                hidden.append(h)
        log_probs = torch.log_softmax(self.head(h), dim=-1)
        return EncoderOutput(log_probs, out_lengths, cfg.hop_seconds, hidden)

    @torch.no_grad()
    def infer(
        self, features: np.ndarray, window_frames=FROM_CONFIG, attn_impl: Optional[str] = None, position_offset: int = 0
    ) -> np.ndarray:
        """Log-posteriors ``[ceil(T_in / subsampling), V+1]`` for one feature matrix, in eval mode."""
        was_training = self.training
        self.eval()
        try:
            x = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))[None]
            out = self.forward(
                x, window=window_frames, impl=attn_impl, blocked_frontend=True, position_offset=position_offset
            )
        finally:
            self.train(was_training)
        return out.log_probs[0].numpy()


# ------------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: Encoder, meta: Optional[dict] = None) -> None:
    """Write ``LCAM`` | u32 version | u32 header length | JSON header | f32 payloads."""
    state = model.state_dict()
    tensors, blobs, offset = {}, [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        tensors[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"config": asdict(model.cfg), "meta": meta or {}, "tensors": tensors}
    hb = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        f.write(hb)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an LCAM checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + n])
    base = 12 + n
    arrays = {}
    for name, info in header["tensors"].items():
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        start = base + info["offset"]
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(info["shape"])
    return header, arrays


def load_checkpoint(path) -> tuple[Encoder, dict]:
    header, arrays = read_checkpoint(path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = Encoder(ModelConfig.from_dict(header["config"]))
    state = model.state_dict()
    for name, ref in state.items():
        state[name] = torch.from_numpy(arrays[name].copy()).to(ref.dtype)
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
