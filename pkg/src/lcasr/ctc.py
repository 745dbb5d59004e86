"""CTC loss (log-space forward-backward), greedy decoding and the posterior lattice."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

LATTICE_MAGIC = b"LCLT"


@dataclass
class PosteriorLattice:
    log_probs: np.ndarray  # [T, V] natural-log posteriors, V includes the blank
    blank_id: int
    hop_seconds: float

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    def validate(self, tol: float = 1e-5) -> None:
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[0] < 1:
            raise ValueError(f"lattice must be [T >= 1, V], got {lp.shape}")
        lse = np.logaddexp.reduce(lp, axis=1)
        worst = np.abs(lse).max()
        if not worst <= tol:
            raise ValueError(f"lattice rows are not normalised (max |logsumexp| = {worst:.3g})")

    def dump(self, path) -> None:
        lp = np.ascontiguousarray(self.log_probs, dtype="<f4")
        header = json.dumps(
            {"T": lp.shape[0], "V": lp.shape[1], "blank_id": int(self.blank_id), "hop_seconds": float(self.hop_seconds)},
            sort_keys=True,
        ).encode("utf-8")
        with open(path, "wb") as f:
            f.write(LATTICE_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(lp.tobytes())

    @classmethod
    def load(cls, path) -> "PosteriorLattice":
        data = Path(path).read_bytes()
        if data[:4] != LATTICE_MAGIC:
            raise ValueError(f"{path}: not a lattice dump")
        (n,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8 : 8 + n])
        lp = np.frombuffer(data[8 + n :], dtype="<f4").reshape(header["T"], header["V"])
        return cls(lp.copy(), header["blank_id"], header["hop_seconds"])


class InfeasibleCounter:
    """Counts targets that no alignment can produce."""

    def __init__(self):
        self.count = 0


infeasible = InfeasibleCounter()


def _extended(targets: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    return ext


def _lae3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(log_probs: np.ndarray, targets: Sequence[int], blank: int):
    """Return ``(log_alpha, log_beta, ext)`` over the blank-extended label sequence."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    ext = _extended(targets, blank)
    S = len(ext)
    emit = lp[:, ext]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    ninf = -np.inf
    alpha = np.full((T, S), ninf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    a1 = np.full(S, ninf)
    a2 = np.full(S, ninf)
    for t in range(1, T):
        a = alpha[t - 1]
        a1[1:] = a[:-1]
        a2[2:] = np.where(skip[2:], a[:-2], ninf)
        alpha[t] = _lae3(a, a1, a2) + emit[t]
    beta = np.full((T, S), ninf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    b1 = np.full(S, ninf)
    b2 = np.full(S, ninf)
    for t in range(T - 2, -1, -1):
        b = beta[t + 1]
        b1[:-1] = b[1:]
        b2[:-2] = np.where(skip_next[:-2], b[2:], ninf)
        beta[t] = _lae3(b, b1, b2) + emit[t]
    return alpha, beta, ext


def ctc_loss(log_probs: np.ndarray, targets: Sequence[int], blank: int):
    """Negative log-likelihood of ``targets`` and its gradient w.r.t. ``log_probs``.

    An infeasible target yields ``(inf, zeros)`` and bumps ``infeasible.count``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise ValueError(f"log_probs must be [T >= 1, V], got {lp.shape}")
    targets = [int(t) for t in targets]
    if any(t == blank for t in targets):
        raise ValueError("targets must not contain the blank id")
    alpha, beta, ext = ctc_forward_backward(lp, targets, blank)
    S = len(ext)
    ll = alpha[-1, S - 1] if S == 1 else np.logaddexp(alpha[-1, S - 1], alpha[-1, S - 2])
    if not np.isfinite(ll):
        infeasible.count += 1
        warnings.warn(f"infeasible CTC target: {len(targets)} tokens over {lp.shape[0]} frames", stacklevel=2)
        return float("inf"), np.zeros_like(lp)
    occ = np.exp(alpha + beta - lp[:, ext] - ll)
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-ll), grad


def ctc_loss_lattice(lattice: PosteriorLattice, targets: Sequence[int]):
    return ctc_loss(lattice.log_probs, targets, lattice.blank_id)


def ctc_greedy_decode(lattice: PosteriorLattice):
    """Best-path decoding: returns ``(tokens, spans)`` with inclusive ``(first, last)`` frames."""
    best = np.argmax(np.asarray(lattice.log_probs), axis=1)
    tokens, spans = [], []
    prev = None
    for t, c in enumerate(best):
        c = int(c)
        if c != prev:
            if c != lattice.blank_id:
                tokens.append(c)
                spans.append([t, t])
        elif c != lattice.blank_id:
            spans[-1][1] = t
        prev = c
    return tokens, [tuple(s) for s in spans]


def hypothesis_words(tokens, spans, vocab, hop_seconds: float):
    """Group decoded tokens into words with ``(text, start_s, end_s)``.

    A token whose piece starts with whitespace opens a new word.
    """
    words = []
    for tok, (a, b) in zip(tokens, spans):
        piece = vocab.piece_text(tok)
        if not words or vocab.starts_word(tok):
            words.append([piece.strip(), a, b])
        else:
            words[-1][0] += piece
            words[-1][2] = b
    return [(w, a * hop_seconds, (b + 1) * hop_seconds) for w, a, b in words if w]


# ----------------------------------------------------------------- torch bridge


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, targets, blank):
        loss, grad = ctc_loss(log_probs.detach().cpu().double().numpy(), targets, blank)
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs.dtype))
        return log_probs.new_tensor(loss)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return grad * g, None, None


def ctc_loss_torch(log_probs: torch.Tensor, targets: Sequence[int], blank: int) -> torch.Tensor:
    """Differentiable CTC loss of one ``[T, V]`` log-probability tensor."""
    return _CTCFunction.apply(log_probs, tuple(int(t) for t in targets), int(blank))
