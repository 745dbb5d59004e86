"""Training loop: warmup-length chunking, duration-capped batches, CTC, cosine LR, metrics and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .audio import FeatureConfig, Recording, Spectrogram, chunk_recording, log_mel
from .ctc import ctc_loss_torch
from .encoder import Encoder, ModelConfig, out_length, save_checkpoint
from .schedule import WarmupSchedule, cosine_lr, plan_batches, warmup_length
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "recording_index", "seq_seconds", "batch_size", "lr", "loss")

OPTIMIZERS: dict[str, Callable] = {
    "adam": lambda params, lr: torch.optim.Adam(params, lr=lr, betas=(0.9, 0.98), eps=1e-9),
    "adamw": lambda params, lr: torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.98), eps=1e-9, weight_decay=0.01),
    "sgd": lambda params, lr: torch.optim.SGD(params, lr=lr, momentum=0.9),
}


def register_optimizer(name: str, factory: Callable) -> None:
    """Add an optimizer factory ``(params, lr) -> torch.optim.Optimizer`` under ``name``."""
    OPTIMIZERS[name] = factory


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")


@dataclass
class TrainConfig:
    s0: Optional[float] = 2.56
    warmup_n: int = 5000
    s_max: float = 20.0
    max_batch_duration: float = 3600.0
    epochs: int = 1
    seed: int = 0
    deterministic: bool = True
    peak_lr: float = 3e-3
    lr_warmup_steps: int = 50
    optimizer: str = "adam"
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    shuffle: bool = True


@dataclass
class Step:
    recording_index: int
    seq_seconds: float
    chunks: list  # (recording position, chunk position) pairs


@dataclass
class TrainResult:
    model: Encoder
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def compute_features(recordings: Sequence[Recording], config: FeatureConfig = FeatureConfig()) -> list[Spectrogram]:
    return [log_mel(rec.samples, config) for rec in recordings]


def feature_stats(features: Sequence[Spectrogram]) -> tuple[np.ndarray, np.ndarray]:
    total = sum(f.num_frames for f in features)
    s = sum(f.frames.sum(axis=0, dtype=np.float64) for f in features)
    mean = s / total
    sq = sum(((f.frames - mean) ** 2).sum(axis=0) for f in features)
    return mean, np.sqrt(sq / total)


def plan_steps(recordings, features, cfg: TrainConfig, vocab: Vocabulary, subsampling: int):
    """Precompute every optimizer step as ``(chunks, seq_seconds, recording_index)``.

    Recordings are visited in a seeded order per epoch; each is cut at the
    warmup length for its index, and a batch flushes when full or when the
    sequence length changes.
    """
    sched = WarmupSchedule(cfg.s0, cfg.warmup_n, cfg.s_max) if cfg.s0 else None
    rng = random.Random(cfg.seed)
    chunks, steps = [], []
    pending: list = []
    pending_seq, pending_r = None, 0
    r = 0
    for _ in range(cfg.epochs):
        order = list(range(len(recordings)))
        if cfg.shuffle:
            rng.shuffle(order)
        for i in order:
            seq = warmup_length(r, sched) if sched else cfg.s_max
            size = plan_batches(seq, cfg.max_batch_duration).batch_size
            if pending and seq != pending_seq:
                steps.append(Step(pending_r, pending_seq, pending))
                pending = []
            for ch in chunk_recording(recordings[i], features[i], seq, vocab):
                if ch.features.shape[0] < subsampling:
                    continue
                chunks.append(ch)
                pending.append(len(chunks) - 1)
                pending_seq, pending_r = seq, r
                if len(pending) == size:
                    steps.append(Step(pending_r, pending_seq, pending))
                    pending = []
            r += 1
    if pending:
        steps.append(Step(pending_r, pending_seq, pending))
    return chunks, steps


def _collate(batch):
    lengths = torch.tensor([c.features.shape[0] for c in batch])
    x = torch.zeros(len(batch), int(lengths.max()), batch[0].features.shape[1])
    for j, c in enumerate(batch):
        x[j, : c.features.shape[0]] = torch.from_numpy(np.asarray(c.features, dtype=np.float32))
    return x, lengths


def batch_loss(model: Encoder, batch) -> tuple[Optional[torch.Tensor], int]:
    """Token-normalised CTC loss; infeasible items are excluded. Returns ``(loss, n_items_used)``."""
    x, lengths = _collate(batch)
    out = model(x, lengths)
    total, tokens, used = None, 0, 0
    for j, c in enumerate(batch):
        t = int(out.lengths[j])
        loss = ctc_loss_torch(out.log_probs[j, :t], c.targets, model.blank_id)
        if math.isinf(loss.item()):
            continue
        total = loss if total is None else total + loss
        tokens += len(c.targets)
        used += 1
    if total is None:
        return None, 0
    return total / max(tokens, 1), used


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in METRICS_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    recordings: Sequence[Recording],
    vocab: Vocabulary,
    outdir=None,
    features: Optional[Sequence[Spectrogram]] = None,
    model: Optional[Encoder] = None,
    max_steps: Optional[int] = None,
    on_step: Optional[Callable] = None,
) -> TrainResult:
    """Train an encoder and optionally write ``metrics.csv`` and checkpoints into ``outdir``."""
    if model_cfg.num_classes != vocab.size:
        raise ValueError(f"model has {model_cfg.num_classes} outputs but the vocabulary has {vocab.size}")
    if train_cfg.optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {train_cfg.optimizer!r}; choose from {sorted(OPTIMIZERS)}")
    seed_everything(train_cfg.seed, train_cfg.deterministic)
    if features is None:
        features = compute_features(recordings)
    if model is None:
        model = Encoder(model_cfg)
        model.set_feature_stats(*feature_stats(features))
    outdir = Path(outdir) if outdir is not None else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)

    chunks, steps = plan_steps(recordings, features, train_cfg, vocab, model_cfg.subsampling)
    if max_steps is not None:
        steps = steps[:max_steps]
    total = len(steps)
    warm = min(train_cfg.lr_warmup_steps, total)
    opt = OPTIMIZERS[train_cfg.optimizer](model.parameters(), train_cfg.peak_lr)
    result = TrainResult(model)
    meta = {"vocab": vocab.to_json()}
    model.train()
    # parameters before the most recent update, restored if the next loss is non-finite
    good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for k, st in enumerate(steps):
        step = k + 1
        lr = cosine_lr(step, warm, total, train_cfg.peak_lr)
        for g in opt.param_groups:
            g["lr"] = lr
        try:
            loss, used = batch_loss(model, [chunks[i] for i in st.chunks])
        except FloatingPointError:
            loss = torch.tensor(float("nan"))
        if loss is None:
            log.warning("step %d: every item in the batch is infeasible; skipped", step)
            continue
        if not torch.isfinite(loss):
            model.load_state_dict(good)
            ckpt = None
            if outdir is not None:
                ckpt = outdir / "last_good.lcam"
                save_checkpoint(ckpt, model, meta)
            raise TrainingDiverged(step, ckpt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if train_cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        opt.step()
        row = {
            "step": step,
            "recording_index": st.recording_index,
            "seq_seconds": st.seq_seconds,
            "batch_size": len(st.chunks),
            "lr": lr,
            "loss": float(loss.item()),
        }
        result.metrics.append(row)
        if on_step is not None:
            on_step(row)
        if outdir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            path = outdir / f"step{step:06d}.lcam"
            save_checkpoint(path, model, meta)
            result.checkpoints.append(path)
    model.eval()
    if outdir is not None:
        write_metrics(outdir / "metrics.csv", result.metrics)
        path = outdir / "model.lcam"
        save_checkpoint(path, model, meta)
        result.checkpoints.append(path)
        vocab.save(outdir / "vocab.json")
    return result


def config_dict(cfg) -> dict:
    return asdict(cfg)
