"""Sequence-length warmup, duration-capped batch sizing and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class WarmupSchedule:
    """Chunk length grows with the recording index ``r`` as ``min(s0 + s0 * 2**(r // n), s_max)``."""

    s0: float
    n: int
    s_max: float

    def __post_init__(self):
        if not self.s0 > 0:
            raise ValueError("s0 must be positive")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.s_max < self.s0:
            raise ValueError("s_max must be >= s0")


def warmup_length(r: int, sched: WarmupSchedule) -> float:
    if r < 0:
        raise ValueError("recording index must be non-negative")
    stage = r // sched.n
    # 2**stage overflows float range long after s_max is reached
    if stage > 1023:
        return float(sched.s_max)
    return float(min(sched.s0 + sched.s0 * 2.0**stage, sched.s_max))


@dataclass(frozen=True)
class BatchPlan:
    seq_seconds: float
    batch_size: int
    max_batch_duration_seconds: float = 3600.0


def plan_batches(seq_seconds: float, max_batch_duration: float = 3600.0) -> BatchPlan:
    """Largest whole number of sequences that fits the duration cap."""
    if seq_seconds <= 0:
        raise ValueError("seq_seconds must be positive")
    if seq_seconds > max_batch_duration:
        raise ValueError(f"sequence of {seq_seconds} s exceeds the batch cap of {max_batch_duration} s")
    size = int(math.floor(max_batch_duration / seq_seconds))
    # guard against 3600 / 10.24 style rounding leaving size * seq a hair above the cap
    while size > 1 and size * seq_seconds > max_batch_duration:
        size -= 1
    return BatchPlan(seq_seconds, max(1, size), max_batch_duration)


def cosine_lr(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear ramp to ``peak_lr`` over ``warmup_steps``, then half-cosine decay to zero at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ValueError(f"warmup_steps ({warmup_steps}) exceeds total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    decay = total_steps - warmup_steps
    if decay == 0:
        return peak_lr
    progress = (step - warmup_steps) / decay
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
