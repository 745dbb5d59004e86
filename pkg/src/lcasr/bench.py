"""Attention memory/time benchmarks and encoder throughput measurement.

``bench_attn`` runs in-process and reads peak allocations from ``tracemalloc``
(numpy reports its buffers there). ``bench_throughput`` runs each configuration
in a fresh interpreter and reports the growth of its resident set, so torch
allocations are counted too and one oversized run cannot poison the next.
"""

from __future__ import annotations

import csv
import json
import os
import resource
import subprocess
import sys
import time
import tracemalloc
from dataclasses import asdict
from typing import Optional, Sequence

import numpy as np

from .attention import TileSpec, attend_naive, attend_tiled
from .decode import attention_bytes

ATTN_COLUMNS = ("length", "attn_impl", "peak_bytes", "seconds")
THROUGHPUT_COLUMNS = (
    "seq_seconds",
    "subsampling",
    "attn_impl",
    "train_mode",
    "audio_hours_per_second",
    "peak_bytes",
    "status",
)


def _peak(fn):
    tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    try:
        fn()
        seconds = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak, seconds


def bench_attn(
    lengths: Sequence[int] = (1024, 4096, 16384),
    impls: Sequence[str] = ("tiled", "naive"),
    heads: int = 1,
    head_dim: int = 64,
    window: Optional[int] = None,
    tiles: TileSpec = TileSpec(),
    seed: int = 0,
) -> list[dict]:
    """Peak traced allocation and wall time of one float32 attention call per ``(length, impl)``."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in lengths:
        q, k, v = (rng.standard_normal((heads, n, head_dim), dtype=np.float32) for _ in range(3))
        for impl in impls:
            if impl == "tiled":
                fn = lambda: attend_tiled(q, k, v, window, tiles)  # noqa: E731
            elif impl == "naive":
                fn = lambda: attend_naive(q, k, v, window)  # noqa: E731
            else:
                raise ValueError(f"unknown attention implementation {impl!r}")
            peak, seconds = _peak(fn)
            rows.append({"length": n, "attn_impl": impl, "peak_bytes": peak, "seconds": seconds})
    return rows


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def physical_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 4 << 30


def estimate_bytes(model_cfg: dict, seq_seconds: float, subsampling: int, impl: str, train_mode: bool) -> int:
    """Working-set guess used to decide whether a run is attempted at all."""
    frames = int(seq_seconds / model_cfg.get("feature_hop_seconds", 0.01))
    length = -(-frames // subsampling)
    width = model_cfg.get("width", 64)
    heads = model_cfg.get("heads", 2)
    layers = model_cfg.get("layers", 2)
    attn = attention_bytes(length, heads, impl)
    acts = 40 * length * width * 4
    if train_mode:
        # autograd keeps every layer's activations; naive also keeps its score matrices
        return layers * (acts + (attn if impl == "naive" else 0)) + attn
    return attn + acts


def _rss_bytes() -> int:
    # ru_maxrss is KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _worker(job: dict) -> dict:
    import torch

    from .encoder import Encoder, ModelConfig

    torch.set_num_threads(1)
    torch.manual_seed(0)
    cfg = ModelConfig.from_dict({**job["model"], "subsampling": job["subsampling"], "attn_impl": job["attn_impl"]})
    model = Encoder(cfg)
    frames = int(round(job["seq_seconds"] / cfg.feature_hop_seconds))
    x = torch.randn(1, frames, cfg.mel_bins)
    train_mode = job["train_mode"]

    def run(inp):
        if train_mode:
            model.train()
            out = model(inp)
            out.log_probs.sum().backward()
            model.zero_grad(set_to_none=True)
        else:
            model.eval()
            with torch.no_grad():
                model(inp, blocked_frontend=True)

    run(x[:, : min(frames, 64 * cfg.subsampling)])  # warm-up outside the timed region
    base = _rss_bytes()
    t0 = time.perf_counter()
    run(x)
    seconds = time.perf_counter() - t0
    return {"seconds": seconds, "peak_bytes": max(0, _rss_bytes() - base)}


def bench_throughput(
    model_cfg: dict,
    seq_seconds: Sequence[float] = (60, 240, 960),
    subsamplings: Sequence[int] = (4, 8),
    impls: Sequence[str] = ("naive", "tiled"),
    train_mode: bool = False,
    memory_budget: Optional[int] = None,
    timeout: float = 1800.0,
) -> list[dict]:
    """One row per ``(seq, subsampling, impl)``; runs that do not fit are rows with status ``OOM``."""
    if hasattr(model_cfg, "__dataclass_fields__"):
        model_cfg = asdict(model_cfg)
    model_cfg = {k: v for k, v in model_cfg.items() if k not in ("subsampling", "attn_impl")}
    budget = memory_budget if memory_budget is not None else physical_memory() // 2
    rows = []
    for seq in seq_seconds:
        for sub in subsamplings:
            for impl in impls:
                row = {"seq_seconds": seq, "subsampling": sub, "attn_impl": impl, "train_mode": train_mode}
                if estimate_bytes(model_cfg, seq, sub, impl, train_mode) > budget:
                    rows.append({**row, "audio_hours_per_second": "", "peak_bytes": "", "status": "OOM"})
                    continue
                job = {"model": model_cfg, "seq_seconds": seq, "subsampling": sub, "attn_impl": impl, "train_mode": train_mode}
                rows.append({**row, **_run_job(job, timeout)})
    return rows


def _run_job(job: dict, timeout: float) -> dict:
    cmd = [sys.executable, "-m", "lcasr.bench", json.dumps(job)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired:
        return {"audio_hours_per_second": "", "peak_bytes": "", "status": "TIMEOUT"}
    if proc.returncode != 0:
        # killed by the kernel or a MemoryError inside torch: both count as out of memory
        oom = proc.returncode < 0 or "MemoryError" in proc.stderr or "out of memory" in proc.stderr.lower()
        if not oom:
            raise RuntimeError(f"benchmark worker failed:\n{proc.stderr[-2000:]}")
        return {"audio_hours_per_second": "", "peak_bytes": "", "status": "OOM"}
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    return {
        "audio_hours_per_second": (job["seq_seconds"] / 3600.0) / res["seconds"],
        "peak_bytes": res["peak_bytes"],
        "status": "ok",
    }


if __name__ == "__main__":
    print(json.dumps(_worker(json.loads(sys.argv[1]))))
