"""Synthetic tone-chord speech corpora with exact word timestamps.

Every word is a short chord of pure tones followed by a silent gap. Two
optional rules create long-range dependencies:

* **cue rule**: a cue chord near the start (variant A or B) decides which of
  two labels an *ambiguous* chord carries; ambiguous chords only occur at least
  ``cue_distance`` seconds after the cue.
* **repeat rule**: an item is ``S_A | S_B | S_C``. In ``S_A`` the target word is
  rendered by a marker tone alone, ``S_B`` is a fixed request phrase and
  ``S_C`` repeats the target clearly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import SAMPLE_RATE, Recording, Word, write_manifest

CONSONANTS = "bdgkmnprstvz"
VOWELS = "aeiou"
REQUEST_PHRASE = ("please", "repeat", "that")


def syllables() -> list[str]:
    return [c + v for c in CONSONANTS for v in VOWELS]


@dataclass
class ToySpec:
    n_words: int = 24
    tones_per_token: int = 2
    n_recordings: int = 20
    recording_seconds: float = 20.0
    word_seconds: float = 0.1
    gap_seconds: float = 0.15
    lead_seconds: float = 0.2
    noise_std: float = 0.003
    amplitude: float = 0.3
    mapping_seed: int = 0
    groups: list = field(default_factory=list)
    # cue rule
    cue_rule: bool = False
    cue_distance: float = 60.0
    cue_seconds: float = 3.0
    n_pairs: int = 4
    ambiguous_fraction: float = 0.5
    # repeat rule
    repeat_rule: bool = False
    n_targets: int = 6
    sa_words: int = 12

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown toyset keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def word_period(self) -> float:
        return self.word_seconds + self.gap_seconds


@dataclass
class ToyLexicon:
    """Word names and their tone chords for one ``mapping_seed``."""

    plain: list[str]
    pairs: list[tuple[str, str]]
    targets: list[str]
    request: list[str]
    chords: dict  # name -> tuple of frequencies
    ambiguous: list[tuple]  # chord shared by pair i
    cue: dict  # "A"/"B" -> chord
    marker: float

    @property
    def names(self) -> list[str]:
        out = list(self.plain)
        for a, b in self.pairs:
            out += [a, b]
        return out + list(self.targets) + list(self.request)


def tone_grid(n: int = 28, lo: float = 250.0, hi: float = 6500.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def build_lexicon(spec: ToySpec) -> ToyLexicon:
    names = syllables()
    need = spec.n_words + 2 * spec.n_pairs + spec.n_targets
    if need > len(names):
        raise ValueError(f"toy lexicon needs {need} names but only {len(names)} syllables exist")
    plain = names[: spec.n_words]
    rest = names[spec.n_words :]
    pairs = [(rest[2 * i], rest[2 * i + 1]) for i in range(spec.n_pairs)]
    targets = rest[2 * spec.n_pairs : 2 * spec.n_pairs + spec.n_targets]
    request = list(REQUEST_PHRASE)

    rng = np.random.default_rng(spec.mapping_seed)
    grid = tone_grid()
    marker = float(grid[0])
    pool = grid[1:]
    combos = list(itertools.combinations(range(len(pool)), spec.tones_per_token))
    order = rng.permutation(len(combos))
    n_chords = len(plain) + spec.n_pairs + len(targets) + len(request)
    if n_chords > len(combos):
        raise ValueError("not enough distinct chords for this lexicon; raise tones_per_token")
    picked = [tuple(float(pool[j]) for j in combos[i]) for i in order[:n_chords]]
    it = iter(picked)
    chords = {w: next(it) for w in plain}
    ambiguous = [next(it) for _ in range(spec.n_pairs)]
    for (a, b), ch in zip(pairs, ambiguous):
        chords[a] = chords[b] = ch
    for w in targets:
        chords[w] = (marker,) + next(it)
    for w in request:
        chords[w] = next(it)
    tri = list(itertools.combinations(range(len(pool)), 3))
    cue_pick = rng.choice(len(tri), size=2, replace=False)
    cue = {k: tuple(float(pool[j]) for j in tri[c]) for k, c in zip("AB", cue_pick)}
    return ToyLexicon(plain, pairs, targets, request, chords, ambiguous, cue, marker)


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp :] = r[::-1]
    return env


def render_chord(freqs, seconds: float, amplitude: float, rng) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for f in freqs:
        out += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out * (amplitude / max(1, len(freqs))) * _envelope(n, int(0.01 * SAMPLE_RATE))


class _Track:
    """Accumulates audio events on a fixed timeline."""

    def __init__(self, seconds: float, spec: ToySpec, rng):
        self.spec = spec
        self.rng = rng
        self.audio = np.zeros(int(round(seconds * SAMPLE_RATE)))
        self.words: list[Word] = []

    def put(self, t: float, freqs, seconds: float, text: Optional[str] = None):
        seg = render_chord(freqs, seconds, self.spec.amplitude, self.rng)
        i = int(round(t * SAMPLE_RATE))
        self.audio[i : i + len(seg)] += seg[: len(self.audio) - i]
        if text is not None:
            self.words.append(Word(text, round(t, 6), round(t + seconds, 6)))

    def finish(self) -> np.ndarray:
        noise = self.rng.standard_normal(len(self.audio)) * self.spec.noise_std
        return (self.audio + noise).astype(np.float32)


def _plain_recording(spec, lex, rng, rid, group, index) -> Recording:
    track = _Track(spec.recording_seconds, spec, rng)
    cue = None
    t = spec.lead_seconds
    if spec.cue_rule:
        cue = "AB"[index % 2]  # alternate so every split is balanced
        track.put(t, lex.cue[cue], spec.cue_seconds)
        t += spec.cue_seconds + spec.gap_seconds
    end = spec.recording_seconds - spec.word_period
    while t <= end:
        if spec.cue_rule and t >= spec.cue_distance + spec.lead_seconds and rng.random() < spec.ambiguous_fraction:
            i = int(rng.integers(spec.n_pairs))
            name = lex.pairs[i][0 if cue == "A" else 1]
        else:
            name = lex.plain[int(rng.integers(len(lex.plain)))]
        track.put(t, lex.chords[name], spec.word_seconds, name)
        t += spec.word_period
    extra = {"cue": cue} if cue else {}
    return _make(rid, track, group, extra)


def _repeat_item(spec, lex, rng, rid, group, index) -> Recording:
    n_a = spec.sa_words
    total = spec.lead_seconds + (n_a + len(lex.request) + 1) * spec.word_period + 2 * spec.gap_seconds + 0.3
    track = _Track(total, spec, rng)
    target = lex.targets[int(rng.integers(len(lex.targets)))]
    slot = int(rng.integers(n_a))
    t = spec.lead_seconds
    sa_start = t
    for j in range(n_a):
        if j == slot:
            track.put(t, (lex.marker,), spec.word_seconds, target)
        else:
            name = lex.plain[int(rng.integers(len(lex.plain)))]
            track.put(t, lex.chords[name], spec.word_seconds, name)
        t += spec.word_period
    sa_end = t
    t += spec.gap_seconds
    for name in lex.request:
        track.put(t, lex.chords[name], spec.word_seconds, name)
        t += spec.word_period
    t += spec.gap_seconds
    sc_start = t
    track.put(t, lex.chords[target], spec.word_seconds, target)
    sc_end = t + spec.word_period
    extra = {
        "target_word": target,
        "sA_start": round(sa_start, 6),
        "sA_end": round(sa_end, 6),
        "sC_start": round(sc_start, 6),
        "sC_end": round(sc_end, 6),
    }
    return _make(rid, track, group, extra)


def _make(rid, track, group, extra) -> Recording:
    samples = track.finish()
    return Recording(
        id=rid,
        samples=samples,
        transcript=" ".join(w.text for w in track.words),
        words=track.words,
        group=group,
        audio_path=f"{rid}.wav",
        extra=extra,
    )


def generate_toyset(spec: ToySpec, seed: int = 0, prefix: str = "toy") -> list[Recording]:
    """Build the corpus in memory; identical ``(spec, seed)`` gives identical samples."""
    lex = build_lexicon(spec)
    rng = np.random.default_rng([seed, spec.mapping_seed])
    groups = spec.groups or [None]
    recs = []
    for i in range(spec.n_recordings):
        rid = f"{prefix}{seed:03d}_{i:04d}"
        group = groups[i % len(groups)]
        make = _repeat_item if spec.repeat_rule else _plain_recording
        recs.append(make(spec, lex, rng, rid, group, i))
    return recs


def make_toyset(spec, seed: int, outdir) -> Path:
    """Write ``manifest.jsonl``, one WAV per recording and ``toyset.json``; returns the manifest path."""
    if isinstance(spec, dict):
        spec = ToySpec.from_dict(spec)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    recs = generate_toyset(spec, seed)
    manifest = outdir / "manifest.jsonl"
    write_manifest(manifest, recs)
    doc = {"spec": asdict(spec), "seed": seed, "lexicon": _lexicon_doc(build_lexicon(spec))}
    (outdir / "toyset.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest


def _lexicon_doc(lex: ToyLexicon) -> dict:
    return {
        "plain": lex.plain,
        "pairs": [list(p) for p in lex.pairs],
        "targets": lex.targets,
        "request": lex.request,
        "chords": {k: list(v) for k, v in lex.chords.items()},
        "cue": {k: list(v) for k, v in lex.cue.items()},
        "marker": lex.marker,
    }


def ambiguous_words(spec: ToySpec) -> set[str]:
    lex = build_lexicon(spec)
    return {w for p in lex.pairs for w in p}
