"""Word error rate scoring and the long-context evaluation protocols."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .audio import SAMPLE_RATE, FeatureConfig, log_mel, mix_noise_at_snr
from .ctc import PosteriorLattice
from .decode import WindowPlan, decode, lattice_text, lattice_words, swa_decode
from .encoder import FROM_CONFIG

REPORT_COLUMNS = ("scheme", "context_seconds", "group", "wer", "S", "I", "D", "N", "seed")

_PUNCT = re.compile(r"[^\w\s']", flags=re.UNICODE)
_SPACE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, drop punctuation other than apostrophes, collapse whitespace."""
    text = _PUNCT.sub(" ", text.lower()).replace("_", " ")
    return _SPACE.sub(" ", text).strip()


# ----------------------------------------------------------------- alignment


def align(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[str, Optional[int], Optional[int]]]:
    """Minimum edit-distance alignment as ``(op, ref_index, hyp_index)`` with op in C/S/I/D.

    Among equal-cost alignments the backtrace prefers substitution, then
    insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row, prev = cost[i], cost[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            row[j] = min(diag, row[j - 1] + 1, prev[j] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("C" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and cost[i][j] == cost[i][j - 1] + 1:
            ops.append(("I", None, j - 1))
            j -= 1
        else:
            ops.append(("D", i - 1, None))
            i -= 1
    ops.reverse()
    return ops


@dataclass
class EvalReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_word_count: int = 0
    empty_reference: bool = False
    groups: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.ref_word_count == 0:
            return self.insertions / 1.0 if self.insertions else 0.0
        return self.errors / self.ref_word_count

    def add(self, other: "EvalReport", group: Optional[str] = None) -> None:
        self.substitutions += other.substitutions
        self.insertions += other.insertions
        self.deletions += other.deletions
        self.ref_word_count += other.ref_word_count
        self.empty_reference = self.empty_reference or other.empty_reference
        for g, rep in other.groups.items():
            self.groups.setdefault(g, EvalReport()).add(rep)
        if group is not None:
            self.groups.setdefault(group, EvalReport()).add(_flat(other))

    def rows(self, scheme: str = "", context_seconds=None, seed=None) -> list[dict]:
        def row(g, r):
            return {
                "scheme": scheme,
                "context_seconds": "" if context_seconds is None else context_seconds,
                "group": g,
                "wer": round(r.wer, 6),
                "S": r.substitutions,
                "I": r.insertions,
                "D": r.deletions,
                "N": r.ref_word_count,
                "seed": "" if seed is None else seed,
            }

        return [row("all", self)] + [row(g, self.groups[g]) for g in sorted(self.groups, key=str)]

    def __str__(self):
        return (
            f"WER {100 * self.wer:.2f}% (S={self.substitutions} I={self.insertions} "
            f"D={self.deletions} N={self.ref_word_count})"
        )


def _flat(rep: EvalReport) -> EvalReport:
    return EvalReport(rep.substitutions, rep.insertions, rep.deletions, rep.ref_word_count, rep.empty_reference)


def counts_from_ops(ops) -> EvalReport:
    rep = EvalReport()
    for op, i, _ in ops:
        if op == "S":
            rep.substitutions += 1
        elif op == "I":
            rep.insertions += 1
        elif op == "D":
            rep.deletions += 1
        if i is not None:
            rep.ref_word_count += 1
    return rep


def wer(reference: str, hypothesis: str, normalizer: Optional[Callable[[str], str]] = normalize_text) -> EvalReport:
    norm = normalizer or (lambda s: s)
    ref, hyp = norm(reference).split(), norm(hypothesis).split()
    rep = counts_from_ops(align(ref, hyp))
    rep.empty_reference = not ref and bool(hyp)
    return rep


def corpus_wer(
    references: Sequence[str],
    hypotheses: Sequence[str],
    groups: Optional[Sequence[Optional[str]]] = None,
    normalizer=normalize_text,
) -> EvalReport:
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    total = EvalReport()
    for k, (r, h) in enumerate(zip(references, hypotheses)):
        g = groups[k] if groups is not None else None
        total.add(wer(r, h, normalizer), group=g)
    return total


def subset_error_rate(reference: Sequence[str], hypothesis: Sequence[str], selected: set) -> tuple[int, int]:
    """Errors on reference words in ``selected``: ``(substituted_or_deleted, count)``."""
    errs = n = 0
    for op, i, _ in align(list(reference), list(hypothesis)):
        if i is not None and reference[i] in selected:
            n += 1
            errs += op in ("S", "D")
    return errs, n


def write_report(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ------------------------------------------------------------------ decoding


def _words_text(words) -> str:
    return " ".join(w for w, _, _ in words)


def _frames(x) -> np.ndarray:
    return np.asarray(getattr(x, "frames", x), dtype=np.float32)


def _sub_frames(seconds: float, sub: int, hop: float = 0.01) -> int:
    """Input frames for ``seconds``, rounded to a multiple of the subsampling factor."""
    return int(round(seconds / hop / sub)) * sub


def decode_corpus(features, model, vocab, plan: Optional[WindowPlan] = None, **swa_kwargs) -> list[str]:
    plan = plan or WindowPlan("swa", 1.0)
    return [lattice_text(decode(_frames(f), model, plan, **swa_kwargs), vocab) for f in features]


def score_corpus(recordings, features, model, vocab, plan: Optional[WindowPlan] = None, **swa_kwargs) -> EvalReport:
    hyps = decode_corpus(features, model, vocab, plan, **swa_kwargs)
    return corpus_wer([r.transcript for r in recordings], hyps, [r.group for r in recordings])


def ambiguous_error_rate(recordings, hypotheses: Sequence[str], selected: set) -> float:
    errs = n = 0
    for rec, hyp in zip(recordings, hypotheses):
        e, c = subset_error_rate(normalize_text(rec.transcript).split(), normalize_text(hyp).split(), selected)
        errs, n = errs + e, n + c
    return errs / n if n else 0.0


# ------------------------------------------------------------- fragmentation


@dataclass
class HistogramBin:
    lo: float
    hi: float
    errors: int
    frames: int

    @property
    def density(self) -> float:
        return self.errors / self.frames if self.frames else 0.0


@dataclass
class FragmentationResult:
    wer_segmented: EvalReport
    wer_swa: EvalReport
    boundaries: list  # interior segment boundaries in seconds
    histogram: list  # HistogramBin, errors of the segmented decode by distance to the nearest boundary
    histogram_swa: list

    def boundary_vs_interior(self, hist=None) -> tuple[float, float]:
        """Error density in the first bin versus all further bins."""
        hist = self.histogram if hist is None else hist
        first = hist[0]
        rest_e = sum(b.errors for b in hist[1:])
        rest_f = sum(b.frames for b in hist[1:])
        return first.density, (rest_e / rest_f if rest_f else 0.0)


def _error_times(ref_words, hyp_words) -> list[float]:
    """Midpoint time of every error: S/D at the reference word, I at the hypothesis word."""
    ref = [normalize_text(w.text) for w in ref_words]
    hyp = [normalize_text(w) for w, _, _ in hyp_words]
    times = []
    for op, i, j in align(ref, hyp):
        if op in ("S", "D"):
            times.append(ref_words[i].midpoint)
        elif op == "I":
            _, s, e = hyp_words[j]
            times.append(0.5 * (s + e))
    return times


def error_histogram(error_times, boundaries, duration: float, hop: float, bin_seconds: float, n_bins: int):
    """Errors and frame counts binned by distance to the nearest boundary."""
    edges = np.arange(n_bins + 1) * bin_seconds
    bnd = np.asarray(boundaries, dtype=np.float64)

    def dist(t):
        t = np.asarray(t, dtype=np.float64)
        if bnd.size == 0:
            return np.full(t.shape, np.inf)
        return np.abs(t[..., None] - bnd).min(axis=-1)

    centers = (np.arange(int(round(duration / hop))) + 0.5) * hop
    fd = dist(centers)
    ed = dist(np.asarray(error_times)) if len(error_times) else np.zeros(0)
    out = []
    for k in range(n_bins):
        lo, hi = edges[k], edges[k + 1]
        last = k == n_bins - 1
        fm = (fd >= lo) & ((fd < hi) | last)
        em = (ed >= lo) & ((ed < hi) | last)
        out.append(HistogramBin(float(lo), float(hi) if not last else float("inf"), int(em.sum()), int(fm.sum())))
    return out


def fragmentation_compare(
    recording,
    features,
    model,
    vocab,
    context_seconds: float,
    boundaries: Optional[Sequence[float]] = None,
    bin_seconds: float = 1.0,
    n_bins: Optional[int] = None,
) -> FragmentationResult:
    """Independent hard segments versus one sliding-window pass over the whole recording.

    Without explicit ``boundaries`` the recording is cut every ``context_seconds``.
    """
    feats = _frames(features)
    sub = model.subsampling
    hop_in = model.hop_seconds / sub
    total = feats.shape[0]
    if boundaries is None:
        step = _sub_frames(context_seconds, sub, hop_in)
        cuts = list(range(step, total, step))
    else:
        cuts = sorted({_sub_frames(b, sub, hop_in) for b in boundaries if 0 < b * 1.0 / hop_in < total})
    edges = [0] + cuts + [total]
    seg_words = []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a < sub:
            continue
        lat = PosteriorLattice(model.infer(feats[a:b]), model.blank_id, model.hop_seconds)
        seg_words += lattice_words(lat, vocab, offset_seconds=a * hop_in)
    swa_words = lattice_words(swa_decode(feats, model), vocab)
    ref = recording.transcript
    rep_seg = wer(ref, _words_text(seg_words))
    rep_swa = wer(ref, _words_text(swa_words))
    bnd = [c * hop_in for c in cuts]
    n_bins = n_bins or max(2, int(context_seconds / (2 * bin_seconds)))
    duration = math.ceil(total / sub) * model.hop_seconds
    hop = model.hop_seconds
    hist = error_histogram(_error_times(recording.words, seg_words), bnd, duration, hop, bin_seconds, n_bins)
    hist_swa = error_histogram(_error_times(recording.words, swa_words), bnd, duration, hop, bin_seconds, n_bins)
    return FragmentationResult(rep_seg, rep_swa, bnd, hist, hist_swa)


# ---------------------------------------------------------------- distractors

DISTRACTOR_SOURCES = ("within_recording", "within_dataset", "cross_dataset", "no_context")


@dataclass
class Assembly:
    features: np.ndarray
    real_start: int  # input frame in ``features`` where the real buffer begins
    real_range: tuple  # (start, stop) input frames of the real buffer within the recording
    picks: list  # (side, pool index, start frame) per distractor segment


def _candidates(pool, seg: int, exclude=None):
    out = []
    for p, f in enumerate(pool):
        for s in range(0, f.shape[0] - seg + 1, seg):
            if exclude is not None and exclude[0] == p and s < exclude[2] and s + seg > exclude[1]:
                continue
            out.append((p, s))
    return out


def real_buffer(n: int, score: tuple[int, int], context: int, total: int) -> tuple[int, int]:
    """Frames ``[start, stop)`` of real audio around a scored window, shifted inwards at the edges."""
    s, e = score
    width = min(n, (e - s) + 2 * context, total)
    start = min(max(0, s - context), n - width)
    return start, start + width


def assemble_distractor_input(
    feats: np.ndarray,
    score: tuple[int, int],
    context: int,
    source: str,
    pool: Sequence[np.ndarray],
    rng: np.random.Generator,
    total: int,
    seg: int,
    exclude=None,
) -> Assembly:
    """``[distractors | left context | scored window | right context | distractors]`` of ``total`` frames.

    The real buffer is ``2 * context`` frames wider than the scored window and is
    shifted inwards at the recording edges.
    """
    if source not in DISTRACTOR_SOURCES:
        raise ValueError(f"unknown distractor source {source!r}; choose from {DISTRACTOR_SOURCES}")
    s, e = score
    start, stop = real_buffer(feats.shape[0], score, context, total)
    width = stop - start
    real = feats[start:stop]
    remaining = max(0, total - width)
    left = remaining // 2
    right = remaining - left
    picks: list = []
    cands = None
    if source != "no_context" and remaining:
        for f in pool:
            if f.shape[0] < seg:
                raise ValueError(f"distractor pool segment of {f.shape[0]} frames is shorter than {seg}")
        cands = _candidates(pool, seg, exclude) or _candidates(pool, seg)
        if not cands:
            raise ValueError("distractor pool is empty")

    def fill(side: str, amount: int) -> list:
        parts, have = [], 0
        while have < amount:
            take = min(seg, amount - have)
            if source == "no_context":
                parts.append(np.zeros((take, feats.shape[1]), dtype=feats.dtype))
            else:
                p, s0 = cands[int(rng.integers(len(cands)))]
                parts.append(pool[p][s0 : s0 + take])
                picks.append((side, p, s0))
            have += take
        return parts

    lparts = fill("left", left)
    rparts = fill("right", right)
    # left distractors sit to the left of the real buffer, so reverse their order of draw
    out = np.concatenate(lparts[::-1] + [real] + rparts, axis=0) if (lparts or rparts) else real.copy()
    return Assembly(out, left, (start, start + width), picks)


@dataclass
class DistractorResult:
    report: EvalReport
    input_seconds: list = field(default_factory=list)
    picks: list = field(default_factory=list)
    hypotheses: list = field(default_factory=list)


def distractor_eval(
    recordings,
    features,
    model,
    vocab,
    context_seconds: float,
    source: str,
    pool: Optional[Sequence] = None,
    total_seconds: float = 3600.0,
    window_seconds: float = 20.0,
    seed: int = 0,
) -> DistractorResult:
    """Score each ``window_seconds`` window inside a ``total_seconds`` input padded with distractors.

    ``pool`` supplies the cross-dataset features; the within-recording and
    within-dataset pools are drawn from ``features`` itself. Only the scored
    window's rows of each pass enter the recording's lattice.
    """
    if source not in DISTRACTOR_SOURCES:
        raise ValueError(f"unknown distractor source {source!r}; choose from {DISTRACTOR_SOURCES}")
    feats = [_frames(f) for f in features]
    sub = model.subsampling
    hop_in = model.hop_seconds / sub
    seg = _sub_frames(window_seconds, sub, hop_in)
    ctx = _sub_frames(context_seconds, sub, hop_in)
    total = _sub_frames(total_seconds, sub, hop_in)
    if source == "cross_dataset":
        if not pool:
            raise ValueError("cross_dataset evaluation needs a non-empty distractor pool")
        cross = [_frames(p) for p in pool]
    rng = np.random.default_rng(seed)
    result = DistractorResult(EvalReport())
    for k, (rec, f) in enumerate(zip(recordings, feats)):
        n_out = math.ceil(f.shape[0] / sub)
        rows = None
        for s in range(0, f.shape[0], seg):
            e = min(f.shape[0], s + seg)
            exclude = None
            if source == "within_recording":
                # segments overlapping the real buffer are not reused as distractors
                src_pool, exclude = [f], (0, *real_buffer(f.shape[0], (s, e), ctx, total))
            elif source == "within_dataset":
                src_pool = [g for j, g in enumerate(feats) if j != k] or [f]
            elif source == "cross_dataset":
                src_pool = cross
            else:
                src_pool = []
            asm = assemble_distractor_input(f, (s, e), ctx, source, src_pool, rng, total, seg, exclude)
            result.input_seconds.append(asm.features.shape[0] * hop_in)
            result.picks.append((rec.id, s, asm.picks))
            off = asm.real_start + (s - asm.real_range[0])
            lo_out, hi_out = off // sub, off // sub + math.ceil((e - s) / sub)
            lat = swa_decode(asm.features, model, region=(lo_out, hi_out))
            if rows is None:
                rows = np.empty((n_out, lat.log_probs.shape[1]), dtype=np.float32)
            rows[s // sub : s // sub + (hi_out - lo_out)] = lat.log_probs
        lattice = PosteriorLattice(rows, model.blank_id, model.hop_seconds)
        hyp = lattice_text(lattice, vocab)
        result.hypotheses.append(hyp)
        result.report.add(wer(rec.transcript, hyp), group=rec.group)
    return result


# --------------------------------------------------------------- concatenation


def concat_eval(
    recordings,
    features,
    model,
    vocab,
    seed: int = 0,
    context_seconds: Optional[float] = None,
    window_frames=FROM_CONFIG,
) -> EvalReport:
    """Pad each recording with randomly chosen other recordings up to ``context_seconds`` and score its span.

    The default context is the model's attention window (whole recording when unbounded).
    """
    if len(recordings) < 3:
        raise ValueError("concatenation evaluation needs at least 3 recordings")
    feats = [_frames(f) for f in features]
    sub = model.subsampling
    hop_in = model.hop_seconds / sub
    if context_seconds is None:
        context_seconds = (model.context_frames or 0) * model.hop_seconds
    rng = np.random.default_rng(seed)
    report = EvalReport()
    for k, (rec, f) in enumerate(zip(recordings, feats)):
        target = _sub_frames(context_seconds, sub, hop_in)
        pad = max(0, target - f.shape[0])
        pad -= pad % sub
        before_n = (pad // 2) - (pad // 2) % sub
        after_n = pad - before_n
        others = [j for j in range(len(feats)) if j != k]

        def take(amount):
            parts, have = [], 0
            while have < amount:
                g = feats[others[int(rng.integers(len(others)))]]
                g = g[: g.shape[0] - g.shape[0] % sub] if g.shape[0] >= sub else g
                chunk = g[: amount - have]
                parts.append(chunk)
                have += chunk.shape[0]
            return parts

        before, after = take(before_n), take(after_n)
        x = np.concatenate(before + [f] + after, axis=0)
        lo = before_n // sub
        hi = lo + math.ceil(f.shape[0] / sub)
        lat = swa_decode(x, model, window_frames=window_frames, region=(lo, hi))
        report.add(wer(rec.transcript, lattice_text(lat, vocab)), group=rec.group)
    return report


# ------------------------------------------------------------------ in-context


@dataclass
class InContextItem:
    samples: np.ndarray
    transcript: str
    target_word: str
    sa_start: float
    sa_end: float
    sc_start: Optional[float] = None
    sc_end: Optional[float] = None
    id: str = ""

    @classmethod
    def from_recording(cls, rec) -> "InContextItem":
        ex = rec.extra
        for key in ("target_word", "sA_start", "sA_end"):
            if key not in ex:
                raise ValueError(f"recording {rec.id} lacks in-context field {key!r}")
        item = cls(
            rec.samples, rec.transcript, ex["target_word"], float(ex["sA_start"]), float(ex["sA_end"]),
            ex.get("sC_start"), ex.get("sC_end"), rec.id,
        )
        if normalize_text(item.target_word) not in normalize_text(rec.transcript).split():
            raise ValueError(f"target word {item.target_word!r} not in the reference of {rec.id}")
        if not 0 <= item.sa_start < item.sa_end <= rec.duration + 1e-6:
            raise ValueError(f"S_A region of {rec.id} outside the recording")
        return item

    def without_repeat(self) -> np.ndarray:
        if self.sc_start is None:
            raise ValueError(f"item {self.id} has no S_C region to remove")
        a = int(round(self.sc_start * SAMPLE_RATE))
        b = len(self.samples) if self.sc_end is None else int(round(self.sc_end * SAMPLE_RATE))
        return np.concatenate([self.samples[:a], self.samples[b:]])


def in_context_hit(words, item: InContextItem) -> bool:
    target = normalize_text(item.target_word)
    return any(normalize_text(w) == target and s < item.sa_end and e > item.sa_start for w, s, e in words)


def in_context_score(items: Sequence[InContextItem], model, vocab, feature_config=None) -> tuple[float, float]:
    """``(accuracy_full, accuracy_no_repeat)`` of the target word inside S_A."""
    cfg = feature_config or FeatureConfig()
    if not items:
        return 0.0, 0.0
    full = cut = 0
    for item in items:
        for samples, is_full in ((item.samples, True), (item.without_repeat(), False)):
            words = lattice_words(swa_decode(log_mel(samples, cfg).frames, model), vocab)
            hit = in_context_hit(words, item)
            if is_full:
                full += hit
            else:
                cut += hit
    return full / len(items), cut / len(items)


# ---------------------------------------------------------------------- sweeps


def snr_sweep(recordings, noise, snr_values, model, vocab, plan: Optional[WindowPlan] = None, feature_config=None):
    """WER per SNR for recordings mixed with ``noise``; ``None`` in ``snr_values`` means clean."""
    cfg = feature_config or FeatureConfig()
    out = []
    for snr in snr_values:
        feats = []
        for rec in recordings:
            x = rec.samples if snr is None else mix_noise_at_snr(rec.samples, noise, snr)
            feats.append(log_mel(x, cfg).frames)
        out.append((snr, score_corpus(recordings, feats, model, vocab, plan)))
    return out


def stride_sweep(recordings, features, model, vocab, scheme: str, window_seconds: float, ratios):
    """WER of ``moving_avg`` (stride ratios) or ``buffered`` (central ratios) per ratio."""
    out = []
    for r in ratios:
        if scheme == "moving_avg":
            plan = WindowPlan("moving_avg", window_seconds, stride_ratio=r)
        elif scheme == "buffered":
            plan = WindowPlan("buffered", window_seconds, central_ratio=r)
        else:
            raise ValueError("stride sweeps apply to moving_avg or buffered decoding")
        out.append((r, score_corpus(recordings, features, model, vocab, plan)))
    return out
