"""Desk-scale acceptance checks, one test per criterion.

Each test records a single pass/fail line (see ``conftest.record``); the full
list is printed in the terminal summary. Toy models are trained once per
session by the fixtures below; total CPU time is roughly a quarter of an hour.
"""

import itertools
import time
import warnings

import numpy as np
import pytest
import torch

from lcasr.attention import TileSpec, attend_naive, attend_tiled
from lcasr.bench import bench_attn
from lcasr.ctc import ctc_loss
from lcasr.decode import WindowPlan, swa_decode
from lcasr.encoder import Encoder, ModelConfig, save_checkpoint
from lcasr.evaluation import (
    InContextItem,
    ambiguous_error_rate,
    corpus_wer,
    decode_corpus,
    distractor_eval,
    fragmentation_compare,
    in_context_score,
    score_corpus,
)
from lcasr.posenc import RotaryParams, rotary_apply
from lcasr.schedule import WarmupSchedule, plan_batches, warmup_length
from lcasr.tokenizer import bpe_train
from lcasr.toyset import ToySpec, ambiguous_words, generate_toyset
from lcasr.training import TrainConfig, compute_features, train

pytestmark = pytest.mark.slow
torch.set_num_threads(1)

TOY_VOCAB = 512


def _quiet_config(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ModelConfig(**kw)


def _frames(recs):
    return [f.frames for f in compute_features(recs)]


# ------------------------------------------------------------------ models


class Trained:
    def __init__(self, model, vocab, seconds):
        self.model, self.vocab, self.seconds = model, vocab, seconds


@pytest.fixture(scope="session")
def smoke_model():
    # 90 x 20 s = 30 minutes of toy audio
    recs = generate_toyset(ToySpec(n_recordings=90, recording_seconds=20.0), seed=1)
    vocab = bpe_train([r.transcript for r in recs], TOY_VOCAB)
    cfg = _quiet_config(vocab_size=vocab.blank_id, layers=2, width=64, heads=2, subsampling=8,
                        pos_enc="rotary", rotary_theta=1.5e6)
    t = time.perf_counter()
    tc = TrainConfig(s0=None, s_max=5.0, max_batch_duration=5.0, peak_lr=3e-3, lr_warmup_steps=20, epochs=1)
    model = train(cfg, tc, recs, vocab, features=compute_features(recs)).model
    return Trained(model, vocab, time.perf_counter() - t)


@pytest.fixture(scope="session")
def context20_model():
    """Rotary model whose final stage trains on 20 s sequences, over three noise levels."""
    recs = []
    for i, ns in enumerate((0.003, 0.01, 0.03)):
        spec = ToySpec(n_recordings=30, recording_seconds=20.0, noise_std=ns)
        recs += generate_toyset(spec, seed=1 + i, prefix=f"n{i}_")
    vocab = bpe_train([r.transcript for r in recs], TOY_VOCAB)
    feats = compute_features(recs)
    cfg = _quiet_config(vocab_size=vocab.blank_id, layers=2, width=64, heads=2, subsampling=8,
                        pos_enc="rotary", rotary_theta=1.5e6)
    t = time.perf_counter()
    stage1 = TrainConfig(s0=None, s_max=5.0, max_batch_duration=5.0, peak_lr=3e-3, lr_warmup_steps=20, epochs=3)
    model = train(cfg, stage1, recs, vocab, features=feats).model
    stage2 = TrainConfig(s0=None, s_max=20.0, max_batch_duration=20.0, peak_lr=1e-3, lr_warmup_steps=10)
    model = train(cfg, stage2, recs, vocab, features=feats, model=model).model
    return Trained(model, vocab, time.perf_counter() - t)


CUE_SPEC = ToySpec(cue_rule=True, n_recordings=120, recording_seconds=80.0)
CUE_HELD = ToySpec(cue_rule=True, n_recordings=6, recording_seconds=80.0)


def _cue_model(window_frames):
    recs = generate_toyset(CUE_SPEC, seed=1)
    vocab = bpe_train([r.transcript for r in recs], TOY_VOCAB)
    cfg = _quiet_config(vocab_size=vocab.blank_id, layers=2, width=64, heads=2, subsampling=8, pos_enc="nopos",
                        window_frames=window_frames)
    tc = TrainConfig(s0=2.56, warmup_n=20, s_max=90.0, max_batch_duration=90.0, epochs=3, peak_lr=3e-3,
                     lr_warmup_steps=20)
    t = time.perf_counter()
    model = train(cfg, tc, recs, vocab, features=compute_features(recs)).model
    return Trained(model, vocab, time.perf_counter() - t)


@pytest.fixture(scope="session")
def cue_long():
    # 2001 frames x 80 ms: each side sees 80 s, beyond the 60 s cue distance
    return _cue_model(2001)


@pytest.fixture(scope="session")
def cue_short():
    # 125 frames x 80 ms = 10 s window
    return _cue_model(125)


@pytest.fixture(scope="session")
def cue_heldout():
    recs = generate_toyset(CUE_HELD, seed=99)
    return recs, _frames(recs)


# ---------------------------------------------------------------- criteria


def test_ac1_attention_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    lengths = [4096, 1] + [int(x) for x in np.exp(rng.uniform(0, np.log(4096), 98))]
    worst = worst_wide = 0.0
    for L in lengths:
        d = int(rng.integers(1, 65))
        window = None if rng.random() < 0.3 else int(rng.integers(1, 2 * L + 2))
        q, k, v = (rng.standard_normal((L, d)) for _ in range(3))
        tiles = TileSpec(int(rng.integers(16, 257)), int(rng.integers(16, 257)))
        got = attend_tiled(q, k, v, window, tiles)
        want = attend_naive(q, k, v, window)[0]
        worst = max(worst, float(np.abs(got - want).max()))
    for L in (1, 17, 300, 2048):
        q, k, v = (rng.standard_normal((2, L, 32)) for _ in range(3))
        full = attend_naive(q, k, v)[0]
        for W in (2 * L - 1, 2 * L + 10):
            worst_wide = max(worst_wide, float(np.abs(attend_tiled(q, k, v, W) - full).max()))
    secs = time.perf_counter() - t0
    record(1, worst <= 1e-4 and worst_wide <= 1e-6 and secs < 120,
           f"max|tiled-naive| {worst:.2e} over 100 instances, window>=2L-1 {worst_wide:.2e}, {secs:.0f} s")


def test_ac2_memory_law(record):
    t0 = time.perf_counter()
    rows = bench_attn((1024, 4096, 16384), ("tiled", "naive"))
    peaks = {impl: [r["peak_bytes"] for r in rows if r["attn_impl"] == impl] for impl in ("tiled", "naive")}
    tr = [b / a for a, b in zip(peaks["tiled"], peaks["tiled"][1:])]
    nr = [b / a for a, b in zip(peaks["naive"], peaks["naive"][1:])]
    secs = time.perf_counter() - t0
    record(2, max(tr) < 4.5 and min(nr) >= 8 and secs < 300,
           f"tiled ratios {', '.join(f'{x:.2f}' for x in tr)}; naive ratios {', '.join(f'{x:.1f}' for x in nr)}; "
           f"{secs:.0f} s")


def _brute_ctc(lp, targets, blank):
    total = 0.0
    for path in itertools.product(range(lp.shape[1]), repeat=lp.shape[0]):
        out, prev = [], None
        for c in path:
            if c != prev and c != blank:
                out.append(c)
            prev = c
        if out == list(targets):
            total += np.exp(sum(lp[t, c] for t, c in enumerate(path)))
    return -np.log(total) if total > 0 else np.inf


def test_ac3_ctc_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_loss = worst_grad = 0.0
    checked = 0
    for T in range(1, 7):
        for V in range(2, 5):
            for tlen in range(0, 4):
                for _ in range(3):
                    x = rng.standard_normal((T, V)) * 1.5
                    lp = x - np.logaddexp.reduce(x, axis=1, keepdims=True)
                    blank = int(rng.integers(V))
                    labels = [c for c in range(V) if c != blank]
                    targets = [int(rng.choice(labels)) for _ in range(tlen)]
                    want = _brute_ctc(lp, targets, blank)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        loss, grad = ctc_loss(lp, targets, blank)
                    if np.isinf(want):
                        assert np.isinf(loss)
                        continue
                    worst_loss = max(worst_loss, abs(loss - want))
                    eps = 1e-6
                    fd = np.zeros_like(lp)
                    for idx in np.ndindex(*lp.shape):
                        hi, lo = lp.copy(), lp.copy()
                        hi[idx] += eps
                        lo[idx] -= eps
                        fd[idx] = (ctc_loss(hi, targets, blank)[0] - ctc_loss(lo, targets, blank)[0]) / (2 * eps)
                    rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
                    worst_grad = max(worst_grad, rel)
                    checked += 1
    secs = time.perf_counter() - t0
    record(3, worst_loss <= 1e-6 and worst_grad <= 1e-4 and secs < 120,
           f"{checked} feasible instances: max|loss-brute| {worst_loss:.1e}, max relative grad error "
           f"{worst_grad:.1e}, {secs:.0f} s")


def test_ac4_rotary(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_norm = worst_shift = 0.0
    for _ in range(1000):
        d = 2 * int(rng.integers(1, 65))
        p = RotaryParams(float(np.exp(rng.uniform(np.log(1e4), np.log(1e7)))), d)
        q, k = rng.standard_normal(d), rng.standard_normal(d)
        m, n, t = (int(x) for x in rng.integers(0, 100_000, 3))
        rq = rotary_apply(q, m, p)
        worst_norm = max(worst_norm, abs(np.linalg.norm(rq) - np.linalg.norm(q)))
        a = rq @ rotary_apply(k, n, p)
        b = rotary_apply(q, m + t, p) @ rotary_apply(k, n + t, p)
        worst_shift = max(worst_shift, abs(a - b))
    secs = time.perf_counter() - t0
    record(4, worst_norm <= 1e-6 and worst_shift <= 1e-5 and secs < 30,
           f"norm drift {worst_norm:.1e}, shift drift {worst_shift:.1e} over 1000 draws, {secs:.1f} s")


def test_ac5_warmup(record):
    t0 = time.perf_counter()
    sched = WarmupSchedule(5.12, 5000, 3600.0)
    expect = {0: 10.24, 4999: 10.24, 5000: 15.36, 25000: 5.12 + 5.12 * 32, 10**7: 3600.0}
    got = {r: warmup_length(r, sched) for r in expect}
    exact = all(abs(got[r] - v) < 1e-12 for r, v in expect.items())
    fits = True
    for r in range(0, 200_000, 997):
        s = warmup_length(r, sched)
        fits &= plan_batches(s).batch_size * s <= 3600.0
    for s in np.linspace(0.01, 3600.0, 5000):
        fits &= plan_batches(float(s)).batch_size * float(s) <= 3600.0
    secs = time.perf_counter() - t0
    record(5, exact and fits and secs < 1,
           f"lengths {[round(got[r], 2) for r in expect]}, batch*seq<=3600 everywhere: {fits}, "
           f"batch at 10.24 s = {plan_batches(10.24).batch_size}, {secs:.2f} s")


def test_ac6_scheme_convergence(record, context20_model):
    t0 = time.perf_counter()
    m, vocab = context20_model.model, context20_model.vocab
    held = generate_toyset(ToySpec(n_recordings=4, recording_seconds=120.0, noise_std=0.03), seed=99)
    feats = _frames(held)
    window = int(round(20.0 / m.hop_seconds))
    wers = {
        "moving_avg 12.5%": score_corpus(held, feats, m, vocab, WindowPlan("moving_avg", 20.0, stride_ratio=0.125)),
        "buffered 75%": score_corpus(held, feats, m, vocab, WindowPlan("buffered", 20.0, central_ratio=0.75)),
        "swa": score_corpus(held, feats, m, vocab, WindowPlan("swa", 20.0), window_frames=window),
    }
    wers = {k: 100 * r.wer for k, r in wers.items()}
    b100 = 100 * score_corpus(held, feats, m, vocab, WindowPlan("buffered", 20.0, central_ratio=1.0)).wer
    spread = max(wers.values()) - min(wers.values())
    secs = context20_model.seconds + time.perf_counter() - t0
    text = ", ".join(f"{k} {v:.2f}%" for k, v in wers.items())
    record(6, spread <= 0.5 and b100 >= wers["buffered 75%"] and secs < 1200,
           f"{text}; spread {spread:.2f} pts; buffered 100% {b100:.2f}% >= converged; {secs:.0f} s with training")


def test_ac7_fragmentation(record, context20_model):
    t0 = time.perf_counter()
    m, vocab = context20_model.model, context20_model.vocab
    rec = generate_toyset(ToySpec(n_recordings=1, recording_seconds=600.0, noise_std=0.03), seed=98)[0]
    res = fragmentation_compare(rec, _frames([rec])[0], m, vocab, 20.0)
    near, interior = res.boundary_vs_interior()
    seg, swa = 100 * res.wer_segmented.wer, 100 * res.wer_swa.wer
    secs = time.perf_counter() - t0
    record(7, seg >= swa and near >= interior and secs < 600,
           f"600 s recording: segmented {seg:.2f}% vs swa {swa:.2f}%; error density within 1 s of a cut "
           f"{near:.4f} vs interior {interior:.4f}; {secs:.0f} s")


def test_ac8_distractors(record, cue_long, cue_heldout):
    t0 = time.perf_counter()
    m, vocab = cue_long.model, cue_long.vocab
    held, feats = cue_heldout
    pool_recs = generate_toyset(ToySpec(cue_rule=True, n_recordings=6, recording_seconds=80.0, mapping_seed=7), seed=5)
    pool = _frames(pool_recs)
    regular = 100 * score_corpus(held, feats, m, vocab).wer
    out, lengths = {}, {}
    for src in ("no_context", "within_recording", "cross_dataset"):
        res = distractor_eval(held, feats, m, vocab, 10.0, src, pool if src == "cross_dataset" else None, seed=0)
        out[src] = 100 * res.report.wer
        lengths[src] = set(res.input_seconds)
    tol = 0.5
    ordered = regular <= out["within_recording"] + tol and out["within_recording"] <= out["cross_dataset"] + tol
    exact = lengths["no_context"] == {3600.0}
    secs = time.perf_counter() - t0
    record(8, ordered and exact and secs < 900,
           f"regular {regular:.2f}% <= within_recording {out['within_recording']:.2f}% <= cross_dataset "
           f"{out['cross_dataset']:.2f}% (no_context {out['no_context']:.2f}%); no_context inputs "
           f"{sorted(lengths['no_context'])} s; {secs:.0f} s")


def test_ac9_long_context_utility(record, cue_long, cue_short, cue_heldout):
    t0 = time.perf_counter()
    held, feats = cue_heldout
    amb = ambiguous_words(CUE_SPEC)
    refs = [r.transcript for r in held]
    rates, wers = {}, {}
    for name, tm in (("long", cue_long), ("short", cue_short)):
        hyps = decode_corpus(feats, tm.model, tm.vocab)
        rates[name] = 100 * ambiguous_error_rate(held, hyps, amb)
        wers[name] = 100 * corpus_wer(refs, hyps).wer
    gap = rates["short"] - rates["long"]

    recs = generate_toyset(ToySpec(repeat_rule=True, n_recordings=400), seed=1)
    vocab = bpe_train([r.transcript for r in recs], TOY_VOCAB)
    cfg = _quiet_config(vocab_size=vocab.blank_id, layers=2, width=64, heads=2, subsampling=8, pos_enc="nopos")
    rep = train(cfg, TrainConfig(s0=None, s_max=8.0, max_batch_duration=24.0, epochs=4), recs, vocab).model
    items = [InContextItem.from_recording(r) for r in generate_toyset(ToySpec(repeat_rule=True, n_recordings=60), 99)]
    full, cut = in_context_score(items, rep, vocab)
    secs = cue_long.seconds + cue_short.seconds + time.perf_counter() - t0
    record(9, gap >= 20 and full > cut and secs < 1800,
           f"ambiguous-token error {rates['long']:.1f}% (160 s window) vs {rates['short']:.1f}% (10 s window), "
           f"gap {gap:.1f} pts [WER {wers['long']:.2f}% vs {wers['short']:.2f}%]; in-context accuracy "
           f"{full:.2f} with repeat vs {cut:.2f} without; {secs:.0f} s with training")


def _param_grad_check(n_checks=50, seed=0):
    torch.manual_seed(seed)
    cfg = _quiet_config(layers=2, width=16, heads=2, subsampling=8, vocab_size=10, mel_bins=16, dropout=0.0)
    m = Encoder(cfg).double().eval()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn_like(p))
    x = torch.randn(1, 48, 16, dtype=torch.float64)
    y = torch.randint(0, 11, (6,))

    def loss():
        return -m(x).log_probs[0, torch.arange(6), y].sum()

    m.zero_grad()
    loss().backward()
    params = [p for p in m.parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + 1e-6
            hi = loss().item()
            p[idx] = old - 1e-6
            lo = loss().item()
            p[idx] = old
        num = (hi - lo) / 2e-6
        worst = max(worst, abs(num - p.grad[idx].item()) / max(1.0, abs(num)))
    return worst


def test_ac10_smoke(record, smoke_model):
    t0 = time.perf_counter()
    m, vocab = smoke_model.model, smoke_model.vocab
    held = generate_toyset(ToySpec(n_recordings=8), seed=99)
    hyps = decode_corpus(_frames(held), m, vocab, window_frames=None)
    w = 100 * corpus_wer([r.transcript for r in held], hyps).wer
    g = _param_grad_check()
    secs = smoke_model.seconds + time.perf_counter() - t0
    record(10, w < 10 and g <= 1e-2 and secs < 1800,
           f"held-out WER {w:.2f}% after 1 epoch on 30 min; worst relative grad error {g:.1e}; {secs:.0f} s")


def test_ac11_determinism(record, tmp_path):
    t0 = time.perf_counter()
    recs = generate_toyset(ToySpec(n_recordings=10, recording_seconds=5.0), seed=4)
    vocab = bpe_train([r.transcript for r in recs], 300)
    feats = compute_features(recs)
    cfg = _quiet_config(vocab_size=vocab.blank_id, layers=2, width=32, heads=2, subsampling=8)
    tc = TrainConfig(s0=1.28, warmup_n=3, s_max=5.0, max_batch_duration=10.0, seed=3, deterministic=True,
                     epochs=3)
    same = True
    dumps = []
    for run in ("a", "b"):
        res = train(cfg, tc, recs, vocab, tmp_path / run, feats, max_steps=10)
        assert len(res.metrics) == 10
        lat = swa_decode(feats[0].frames, res.model)
        lat.dump(tmp_path / run / "lattice.lclt")
        save_checkpoint(tmp_path / run / "again.lcam", res.model, {"vocab": vocab.to_json()})
        dumps.append(tmp_path / run)
    for name in ("metrics.csv", "model.lcam", "lattice.lclt", "again.lcam"):
        same &= (dumps[0] / name).read_bytes() == (dumps[1] / name).read_bytes()
    secs = time.perf_counter() - t0
    record(11, same and secs < 120, f"metrics, checkpoints and lattice dumps byte-identical: {same}; {secs:.0f} s")
