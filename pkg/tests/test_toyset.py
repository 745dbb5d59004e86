import json

import numpy as np
import pytest

from lcasr.audio import load_manifest
from lcasr.toyset import ToySpec, ambiguous_words, build_lexicon, generate_toyset, make_toyset, render_chord


def test_same_seed_same_bytes(tmp_path):
    spec = ToySpec(n_recordings=3, recording_seconds=4.0)
    make_toyset(spec, 5, tmp_path / "a")
    make_toyset(spec, 5, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.jsonl" in names and "toyset.json" in names and len(names) == 5
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_different_seed_differs():
    a = generate_toyset(ToySpec(n_recordings=1, recording_seconds=3.0), seed=1)[0]
    b = generate_toyset(ToySpec(n_recordings=1, recording_seconds=3.0), seed=2)[0]
    assert not np.array_equal(a.samples, b.samples)


def test_manifest_loads_with_exact_words(tmp_path):
    spec = ToySpec(n_recordings=2, recording_seconds=5.0)
    recs = load_manifest(make_toyset(spec, 0, tmp_path))
    for r in recs:
        assert r.duration == pytest.approx(5.0)
        assert r.transcript == " ".join(w.text for w in r.words)
        for w in r.words:
            assert w.end - w.start == pytest.approx(spec.word_seconds)
        starts = [w.start for w in r.words]
        np.testing.assert_allclose(np.diff(starts), spec.word_period, atol=1e-6)


def test_chord_energy_is_where_the_word_is():
    spec = ToySpec(n_recordings=1, recording_seconds=3.0, noise_std=0.0)
    rec = generate_toyset(spec, 0)[0]
    w = rec.words[0]
    a, b = int(w.start * 16000), int(w.end * 16000)
    assert np.abs(rec.samples[a:b]).max() > 0.05
    assert np.abs(rec.samples[b + 200 : b + 2000]).max() == 0.0


def test_cue_rule_shares_audio_between_pair_members():
    spec = ToySpec(cue_rule=True, n_recordings=4, recording_seconds=70.0, cue_distance=60.0)
    lex = build_lexicon(spec)
    for a, b in lex.pairs:
        assert lex.chords[a] == lex.chords[b]
    amb = ambiguous_words(spec)
    recs = generate_toyset(spec, 0)
    assert [r.extra["cue"] for r in recs] == ["A", "B", "A", "B"]
    seen = 0
    for r in recs:
        side = 0 if r.extra["cue"] == "A" else 1
        for w in r.words:
            if w.text in amb:
                seen += 1
                assert w.start >= 60.0
                assert any(p[side] == w.text for p in lex.pairs)
    assert seen > 0


def test_repeat_items():
    spec = ToySpec(repeat_rule=True, n_recordings=5)
    lex = build_lexicon(spec)
    for r in generate_toyset(spec, 0):
        ex = r.extra
        assert ex["target_word"] in lex.targets
        assert ex["sA_start"] < ex["sA_end"] < ex["sC_start"] < ex["sC_end"] <= r.duration
        words = r.transcript.split()
        assert words.count(ex["target_word"]) >= 2 and words[-1] == ex["target_word"]
        assert " ".join(words[spec.sa_words : spec.sa_words + 3]) == "please repeat that"
        assert lex.chords[ex["target_word"]][0] == lex.marker


def test_render_chord_length():
    x = render_chord((440.0, 880.0), 0.1, 0.3, np.random.default_rng(0))
    assert len(x) == 1600 and np.abs(x).max() <= 0.3


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        ToySpec.from_dict({"n_word": 3})
    with pytest.raises(ValueError):
        build_lexicon(ToySpec(n_words=60))
    make_toyset({"n_recordings": 1, "recording_seconds": 2.0}, 0, tmp_path)
    doc = json.loads((tmp_path / "toyset.json").read_text())
    assert doc["spec"]["n_recordings"] == 1 and doc["seed"] == 0
