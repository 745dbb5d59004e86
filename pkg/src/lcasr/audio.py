"""Audio ingestion, log-mel features, noise mixing and training-chunk partitioning."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SAMPLE_RATE = 16000


class ManifestError(ValueError):
    """A manifest line could not be parsed or violates the timestamp rules."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass
class Word:
    text: str
    start: float
    end: float

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass
class Recording:
    id: str
    samples: np.ndarray
    transcript: str
    words: list[Word] = field(default_factory=list)
    group: Optional[str] = None
    audio_path: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return len(self.samples) / SAMPLE_RATE

    def validate(self) -> None:
        check_words(self.words, self.duration)


def check_words(words: Sequence[Word], duration: Optional[float] = None) -> None:
    prev_start = 0.0
    for i, w in enumerate(words):
        if w.end < w.start:
            raise ValueError(f"word {i} ({w.text!r}) ends before it starts: {w.start} > {w.end}")
        if w.start < prev_start:
            raise ValueError(f"word {i} ({w.text!r}) starts before the previous word")
        if w.start < 0 or (duration is not None and w.end > duration + 1e-6):
            raise ValueError(f"word {i} ({w.text!r}) lies outside [0, {duration}]")
        prev_start = w.start


@dataclass
class Spectrogram:
    frames: np.ndarray  # [num_frames, mel_bins]
    hop_seconds: float

    @property
    def mel_bins(self) -> int:
        return self.frames.shape[1]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class TrainChunk:
    features: np.ndarray
    targets: list[int]
    recording_id: str
    start_seconds: float
    words: list[Word] = field(default_factory=list)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    win_seconds: float = 0.025
    hop_seconds: float = 0.010
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: Optional[float] = None
    floor: float = 1e-10

    @property
    def win_length(self) -> int:
        return int(round(self.win_seconds * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_seconds * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()


# --------------------------------------------------------------------------- WAV


def read_wav(path) -> np.ndarray:
    """Read a 16-bit PCM mono 16 kHz WAV file as float32 samples in [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != SAMPLE_RATE:
            raise ValueError(
                f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()} Hz (resampling is not supported)"
            )
        if f.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV is not supported")
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------- manifest


def _parse_line(obj, lineno: int) -> tuple[dict, list[Word]]:
    if not isinstance(obj, dict):
        raise ManifestError("expected a JSON object", lineno)
    for key in ("id", "audio", "text", "words"):
        if key not in obj:
            raise ManifestError(f"missing field {key!r}", lineno)
    try:
        words = [Word(str(w["w"]), float(w["s"]), float(w["e"])) for w in obj["words"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed words entry ({e})", lineno) from None
    try:
        check_words(words)
    except ValueError as e:
        raise ManifestError(str(e), lineno) from None
    return obj, words


def load_manifest(path, load_audio: bool = True) -> list[Recording]:
    """Read a JSON Lines manifest; audio paths are relative to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    recordings = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", lineno) from None
            obj, words = _parse_line(obj, lineno)
            audio_path = root / obj["audio"]
            if load_audio:
                if not audio_path.exists():
                    raise ManifestError(f"audio file not found: {audio_path}", lineno)
                samples = read_wav(audio_path)
            else:
                samples = np.zeros(0, dtype=np.float32)
            extra = {k: v for k, v in obj.items() if k not in ("id", "audio", "text", "words", "group")}
            rec = Recording(
                id=str(obj["id"]),
                samples=samples,
                transcript=str(obj["text"]),
                words=words,
                group=obj.get("group"),
                audio_path=str(obj["audio"]),
                extra=extra,
            )
            if load_audio:
                try:
                    check_words(words, rec.duration)
                except ValueError as e:
                    raise ManifestError(str(e), lineno) from None
            recordings.append(rec)
    return recordings


def write_manifest(path, recordings: Sequence[Recording], write_audio: bool = True) -> None:
    """Write recordings as JSON Lines, storing audio next to the manifest when needed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in recordings:
            audio = rec.audio_path or f"{rec.id}.wav"
            if write_audio:
                (path.parent / audio).parent.mkdir(parents=True, exist_ok=True)
                write_wav(path.parent / audio, rec.samples)
            obj = {
                "id": rec.id,
                "audio": audio,
                "text": rec.transcript,
                "words": [{"w": w.text, "s": w.start, "e": w.end} for w in rec.words],
            }
            if rec.group is not None:
                obj["group"] = rec.group
            obj.update(rec.extra)
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------- features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    fmax = config.fmax if config.fmax is not None else config.sample_rate / 2
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.mel_bins + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank(config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular filters with unit peak, shape [mel_bins, n_fft // 2 + 1]."""
    fmax = config.fmax if config.fmax is not None else config.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.mel_bins + 2))
    freqs = np.fft.rfftfreq(config.n_fft, d=1.0 / config.sample_rate)
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (center - lo)
    down = (hi - freqs[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(num_samples: int, config: FeatureConfig = FeatureConfig()) -> int:
    if num_samples < config.win_length:
        return 0
    return (num_samples - config.win_length) // config.hop_length + 1


def log_mel(samples: np.ndarray, config: FeatureConfig = FeatureConfig()) -> Spectrogram:
    """Natural-log mel energies of non-centred Hann-windowed frames."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D sample buffer")
    n = num_frames(len(x), config)
    if n == 0:
        raise ValueError(
            f"buffer of {len(x)} samples is shorter than one analysis window ({config.win_length})"
        )
    window = np.hanning(config.win_length + 1)[:-1]  # periodic Hann
    fb = mel_filterbank(config)
    out = np.empty((n, config.mel_bins), dtype=np.float32)
    block = 4096
    for s in range(0, n, block):
        idx = np.arange(s, min(n, s + block))[:, None] * config.hop_length + np.arange(config.win_length)
        spec = np.fft.rfft(x[idx] * window, n=config.n_fft, axis=1)
        power = spec.real**2 + spec.imag**2
        out[s : s + len(idx)] = np.log(power @ fb.T + config.floor)
    return Spectrogram(out, config.hop_seconds)


# ------------------------------------------------------------------------- noise


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def measure_snr(clean: np.ndarray, mixed: np.ndarray) -> float:
    noise = np.asarray(mixed, dtype=np.float64) - clean
    return 10.0 * np.log10(signal_power(clean) / signal_power(noise))


def mix_noise_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Add ``noise`` to ``clean`` scaled so that the mixture has the requested SNR.

    Noise shorter than the clean signal is looped to length.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) == 0:
        raise ValueError("noise buffer is empty")
    if len(noise) < len(clean):
        noise = np.tile(noise, -(-len(clean) // len(noise)))
    noise = noise[: len(clean)]
    p_clean, p_noise = signal_power(clean), signal_power(noise)
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power")
    if p_noise == 0.0:
        raise ValueError("noise has zero power")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


# ---------------------------------------------------------------------- chunking


def chunk_recording(
    rec: Recording, features: Spectrogram, chunk_seconds: float, tokenizer=None
) -> list[TrainChunk]:
    """Partition a recording into consecutive chunks of ``chunk_seconds``.

    A word belongs to the chunk containing its midpoint; the last partial chunk
    is kept.
    """
    if chunk_seconds <= 0:
        raise ValueError("chunk_seconds must be positive")
    total = features.num_frames
    if total < 1:
        raise ValueError(f"recording {rec.id} is shorter than one frame")
    hop = features.hop_seconds
    step = max(1, int(round(chunk_seconds / hop)))
    mids = np.array([w.midpoint for w in rec.words])
    chunks = []
    for start in range(0, total, step):
        stop = min(total, start + step)
        t0, t1 = start * hop, stop * hop
        if stop == total:
            mask = mids >= t0 if len(mids) else np.zeros(0, bool)
        else:
            mask = (mids >= t0) & (mids < t1) if len(mids) else np.zeros(0, bool)
        words = [w for w, m in zip(rec.words, mask) if m]
        targets = tokenizer.encode_words([w.text for w in words]) if tokenizer is not None else []
        chunks.append(TrainChunk(features.frames[start:stop], targets, rec.id, t0, words))
    return chunks
