"""
Decoding a long recording without cutting it up
================================================

Train a small encoder on five-second toy chunks, then decode two-minute
recordings three ways: averaging overlapping windows, keeping the centre of
buffered windows, and a single pass with sliding-window attention. Finally
compare hard segmentation against the single pass on a ten-minute recording.

Runs in about a minute on one CPU core.
"""

import warnings

import torch

from lcasr.decode import WindowPlan
from lcasr.encoder import ModelConfig
from lcasr.evaluation import fragmentation_compare, score_corpus
from lcasr.tokenizer import bpe_train
from lcasr.toyset import ToySpec, generate_toyset
from lcasr.training import TrainConfig, compute_features, train

warnings.simplefilter("ignore")
torch.set_num_threads(1)

# Thirty minutes of tone-chord "speech" with exact word timings.
recs = generate_toyset(ToySpec(n_recordings=90, recording_seconds=20.0), seed=1)
vocab = bpe_train([r.transcript for r in recs], 512)
print(recs[0].transcript[:60], "...")

cfg = ModelConfig(vocab_size=vocab.blank_id, layers=2, width=64, heads=2, subsampling=8,
                  pos_enc="rotary", rotary_theta=1.5e6)
model = train(cfg, TrainConfig(s0=None, s_max=5.0, max_batch_duration=5.0, lr_warmup_steps=20),
              recs, vocab, features=compute_features(recs)).model

# Held-out two-minute recordings; every scheme uses the 5 s training length.
held = generate_toyset(ToySpec(n_recordings=3, recording_seconds=120.0), seed=99)
feats = [f.frames for f in compute_features(held)]
window = int(round(5.0 / model.hop_seconds))
# Buffered with a 100% central window keeps no overlap, so edge frames lack context.
for label, plan, extra in (
    ("moving_avg", WindowPlan("moving_avg", 5.0, stride_ratio=0.125), {}),
    ("buffered 75%", WindowPlan("buffered", 5.0, central_ratio=0.75), {}),
    ("buffered 100%", WindowPlan("buffered", 5.0, central_ratio=1.0), {}),
    ("swa", WindowPlan("swa", 5.0), {"window_frames": window}),
):
    print(f"{label:>13}  {score_corpus(held, feats, model, vocab, plan, **extra)}")

# Hard 5 s segments versus one pass over ten minutes.
long = generate_toyset(ToySpec(n_recordings=1, recording_seconds=600.0), seed=98)[0]
res = fragmentation_compare(long, compute_features([long])[0], model, vocab, 5.0)
print("segmented:", res.wer_segmented)
print("one pass: ", res.wer_swa)
near, interior = res.boundary_vs_interior()
print(f"errors per frame within 1 s of a cut {near:.4f}, elsewhere {interior:.4f}")
