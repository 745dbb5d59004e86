"""``lcasr`` command line: training, decoding, evaluation, benchmarks and toy corpora.

Exit status is 0 on success, 2 for invalid invocations or configuration and 1
when the run itself fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .audio import FeatureConfig, ManifestError, Recording, load_manifest, log_mel, read_wav
from .config import KEYS, ConfigError, RunConfig, default_output_dir

log = logging.getLogger("lcasr")

REPORT_NAME = "report.csv"


class UsageError(Exception):
    """Bad input paths or arguments detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.update(RunConfig.parse_overrides(args.set))
    flags = {k: getattr(args, k, None) for k in _FLAG_KEYS}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


_FLAG_KEYS = ("scheme", "window_seconds", "stride_ratio", "central_ratio")


def _outdir(args, cfg: RunConfig) -> Path:
    out = args.output_dir or cfg["output_dir"] or default_output_dir(args.command)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.values["output_dir"] = str(out)
    cfg.write_resolved(out)
    return out


def _recordings(path) -> list[Recording]:
    return load_manifest(_existing(path, "manifest"))


def _model(path):
    from .encoder import load_checkpoint
    from .tokenizer import Vocabulary

    model, meta = load_checkpoint(_existing(path, "checkpoint"))
    if "vocab" not in meta:
        raise UsageError(f"checkpoint {path} carries no vocabulary")
    return model, Vocabulary.from_json(meta["vocab"])


def _feature_config(model) -> FeatureConfig:
    return FeatureConfig(mel_bins=model.cfg.mel_bins, hop_seconds=model.cfg.feature_hop_seconds)


def _features(recs, model) -> list[np.ndarray]:
    fc = _feature_config(model)
    return [log_mel(r.samples, fc).frames for r in recs]


def _swa_window(cfg: RunConfig, model):
    from .encoder import FROM_CONFIG

    return cfg["window_frames"] if "window_frames" in cfg.explicit else FROM_CONFIG


def _decode_kwargs(cfg: RunConfig, model) -> dict:
    if cfg["scheme"] != "swa":
        return {}
    return {"window_frames": _swa_window(cfg, model)}


def _write_rows(path: Path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _write_jsonl(path: Path, docs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d, sort_keys=True) + "\n")


def _csv_list(text: str, kind=float) -> list:
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


# --------------------------------------------------------------- commands


def cmd_make_toyset(args, cfg: RunConfig) -> int:
    from .toyset import ToySpec, make_toyset

    doc = {}
    if args.spec:
        try:
            doc = json.loads(_existing(args.spec, "toy spec").read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: invalid JSON ({e.msg})") from None
    for key, value in RunConfig.parse_overrides(args.toy).items():
        try:
            doc[key] = json.loads(value)
        except json.JSONDecodeError:
            doc[key] = value
    try:
        spec = ToySpec.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    out = _outdir(args, cfg)
    manifest = make_toyset(spec, args.seed, out)
    print(manifest)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .encoder import load_checkpoint
    from .tokenizer import Vocabulary, bpe_train
    from .training import compute_features, train

    recs = _recordings(args.manifest)
    if args.vocab:
        vocab = Vocabulary.load(_existing(args.vocab, "vocabulary"))
    else:
        vocab = bpe_train([r.transcript for r in recs], cfg["vocab_size"])
    model_cfg = cfg.model_config(len(vocab.pieces))
    train_cfg = cfg.train_config()
    out = _outdir(args, cfg)
    init = None
    if args.init:
        init, _ = load_checkpoint(_existing(args.init, "checkpoint"))
    feats = compute_features(recs, FeatureConfig(mel_bins=model_cfg.mel_bins, hop_seconds=model_cfg.feature_hop_seconds))
    result = train(model_cfg, train_cfg, recs, vocab, out, features=feats, model=init, max_steps=cfg["max_steps"])
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"{len(result.metrics)} steps, final loss {last:.4f}; model written to {out / 'model.lcam'}")
    return 0


def cmd_decode(args, cfg: RunConfig) -> int:
    from .decode import decode, lattice_words

    model, vocab = _model(args.checkpoint)
    plan = cfg.window_plan()
    if args.manifest:
        recs = _recordings(args.manifest)
        items = [(r.id, r.samples) for r in recs]
    else:
        if not args.audio:
            raise UsageError("decode needs --manifest or at least one --audio file")
        items = [(Path(a).stem, read_wav(_existing(a, "audio file"))) for a in args.audio]
    out = _outdir(args, cfg)
    (out / "lattices").mkdir(exist_ok=True)
    fc = _feature_config(model)
    docs = []
    for rid, samples in items:
        lat = decode(log_mel(samples, fc).frames, model, plan, **_decode_kwargs(cfg, model))
        lat.dump(out / "lattices" / f"{rid}.lclt")
        words = lattice_words(lat, vocab)
        docs.append({
            "id": rid,
            "text": " ".join(w for w, _, _ in words),
            "words": [{"word": w, "start": round(s, 4), "end": round(e, 4)} for w, s, e in words],
        })
    _write_jsonl(out / "hypotheses.jsonl", docs)
    print(f"decoded {len(docs)} recording(s) into {out}")
    return 0


def cmd_eval_wer(args, cfg: RunConfig) -> int:
    from .evaluation import corpus_wer, decode_corpus, write_report

    recs = _recordings(args.manifest)
    if args.hypotheses:
        by_id = {}
        for line in _existing(args.hypotheses, "hypotheses").read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                by_id[d["id"]] = d.get("text", "")
        hyps = [by_id.get(r.id, "") for r in recs]
    elif args.checkpoint:
        model, vocab = _model(args.checkpoint)
        hyps = decode_corpus(_features(recs, model), model, vocab, cfg.window_plan(), **_decode_kwargs(cfg, model))
    else:
        raise UsageError("eval-wer needs --checkpoint or --hypotheses")
    out = _outdir(args, cfg)
    rep = corpus_wer([r.transcript for r in recs], hyps, [r.group for r in recs])
    write_report(out / REPORT_NAME, rep.rows(cfg["scheme"], cfg["window_seconds"], cfg["seed"]))
    _write_jsonl(out / "hypotheses.jsonl", [{"id": r.id, "text": h} for r, h in zip(recs, hyps)])
    print(rep)
    return 0


def cmd_eval_frag(args, cfg: RunConfig) -> int:
    from .evaluation import EvalReport, fragmentation_compare, write_report

    recs = _recordings(args.manifest)
    model, vocab = _model(args.checkpoint)
    feats = _features(recs, model)
    out = _outdir(args, cfg)
    ctx = cfg["context_seconds"]
    seg, swa = EvalReport(), EvalReport()
    hist_rows = []
    for rec, f in zip(recs, feats):
        res = fragmentation_compare(rec, f, model, vocab, ctx)
        seg.add(res.wer_segmented, group=rec.group)
        swa.add(res.wer_swa, group=rec.group)
        for name, hist in (("segmented", res.histogram), ("swa", res.histogram_swa)):
            for b in hist:
                hist_rows.append({
                    "id": rec.id, "scheme": name, "distance_lo": b.lo, "distance_hi": b.hi,
                    "errors": b.errors, "frames": b.frames, "density": b.density,
                })
    write_report(out / REPORT_NAME, seg.rows("segmented", ctx, cfg["seed"]) + swa.rows("swa", ctx, cfg["seed"]))
    _write_rows(out / "histogram.csv", hist_rows,
                ("id", "scheme", "distance_lo", "distance_hi", "errors", "frames", "density"))
    print(f"segmented {seg.wer:.4f}  swa {swa.wer:.4f}")
    return 0


def cmd_eval_distractor(args, cfg: RunConfig) -> int:
    from .evaluation import write_report, distractor_eval

    recs = _recordings(args.manifest)
    model, vocab = _model(args.checkpoint)
    feats = _features(recs, model)
    pool = None
    if cfg["source"] == "cross_dataset":
        if not args.pool:
            raise UsageError("source cross_dataset needs --pool MANIFEST")
        pool = _features(_recordings(args.pool), model)
    out = _outdir(args, cfg)
    res = distractor_eval(
        recs, feats, model, vocab, cfg["context_seconds"], cfg["source"], pool,
        total_seconds=cfg["total_seconds"], window_seconds=cfg["score_window_seconds"], seed=cfg["seed"],
    )
    write_report(out / REPORT_NAME, res.report.rows(cfg["source"], cfg["context_seconds"], cfg["seed"]))
    _write_jsonl(out / "picks.jsonl", [
        {"id": rid, "start_frame": start, "picks": [list(p) for p in picks]} for rid, start, picks in res.picks
    ])
    print(res.report)
    return 0


def cmd_eval_concat(args, cfg: RunConfig) -> int:
    from .evaluation import concat_eval, write_report

    recs = _recordings(args.manifest)
    model, vocab = _model(args.checkpoint)
    ctx = cfg["context_seconds"] if "context_seconds" in cfg.explicit else None
    out = _outdir(args, cfg)
    rep = concat_eval(recs, _features(recs, model), model, vocab, seed=cfg["seed"], context_seconds=ctx,
                      window_frames=_swa_window(cfg, model))
    write_report(out / REPORT_NAME, rep.rows("concat", ctx, cfg["seed"]))
    print(rep)
    return 0


def cmd_eval_incontext(args, cfg: RunConfig) -> int:
    from .evaluation import InContextItem, in_context_score

    recs = _recordings(args.manifest)
    model, vocab = _model(args.checkpoint)
    try:
        items = [InContextItem.from_recording(r) for r in recs]
    except ValueError as e:
        raise ManifestError(str(e)) from None
    out = _outdir(args, cfg)
    full, cut = in_context_score(items, model, vocab, _feature_config(model))
    _write_rows(out / "incontext.csv", [{"items": len(items), "accuracy_full": full, "accuracy_no_repeat": cut}],
                ("items", "accuracy_full", "accuracy_no_repeat"))
    print(f"accuracy_full {full:.4f}  accuracy_no_repeat {cut:.4f}")
    return 0


def cmd_bench_attn(args, cfg: RunConfig) -> int:
    from .bench import ATTN_COLUMNS, bench_attn, write_csv

    lengths = _csv_list(args.lengths, int)
    impls = args.impls.split(",")
    for impl in impls:
        if impl not in ("naive", "tiled"):
            raise UsageError(f"unknown attention implementation {impl!r}")
    out = _outdir(args, cfg)
    rows = bench_attn(lengths, impls, heads=args.heads, head_dim=args.head_dim)
    write_csv(out / "bench_attn.csv", rows, ATTN_COLUMNS)
    for r in rows:
        print(f"L={r['length']:>6} {r['attn_impl']:>5}  peak {r['peak_bytes']:>12} B  {r['seconds']:.3f} s")
    return 0


def cmd_bench_throughput(args, cfg: RunConfig) -> int:
    from .bench import THROUGHPUT_COLUMNS, bench_throughput, write_csv

    model_cfg = asdict(cfg.model_config(cfg["vocab_size"]))
    seqs = _csv_list(args.seq_seconds, float)
    subs = _csv_list(args.subsamplings, int)
    out = _outdir(args, cfg)
    rows = bench_throughput(model_cfg, seqs, subs, args.impls.split(","), train_mode=args.train_mode,
                            memory_budget=args.memory_budget)
    write_csv(out / "throughput.csv", rows, THROUGHPUT_COLUMNS)
    for r in rows:
        print(r)
    return 0


COMMANDS = {
    "train": (cmd_train, "train an encoder on a manifest"),
    "decode": (cmd_decode, "decode audio into lattice dumps and timestamped words"),
    "eval-wer": (cmd_eval_wer, "word error rate with group breakdown"),
    "eval-frag": (cmd_eval_frag, "hard segmentation versus sliding-window decoding"),
    "eval-distractor": (cmd_eval_distractor, "scored windows inside one-hour distractor assemblies"),
    "eval-concat": (cmd_eval_concat, "recordings padded with other recordings"),
    "eval-incontext": (cmd_eval_incontext, "target-word accuracy with and without the repeat"),
    "bench-attn": (cmd_bench_attn, "attention memory and time"),
    "bench-throughput": (cmd_bench_throughput, "encoder throughput and peak memory"),
    "make-toyset": (cmd_make_toyset, "write a synthetic tone-chord corpus"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = ", ".join(sorted(KEYS))
    parser = _Parser(prog="lcasr", description="Long-context CTC speech recognition toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           epilog=f"config keys: {keys}")
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--output-dir", help="directory for outputs (default: $LCASR_OUTPUT_ROOT/<command>)")
        if name in ("train", "eval-wer", "eval-frag", "eval-distractor", "eval-concat", "eval-incontext"):
            p.add_argument("--manifest", required=True, help="JSONL manifest")
        if name in ("decode", "eval-frag", "eval-distractor", "eval-concat", "eval-incontext"):
            p.add_argument("--checkpoint", required=True, help="LCAM checkpoint")
        if name == "train":
            p.add_argument("--vocab", help="existing vocabulary JSON (otherwise trained from transcripts)")
            p.add_argument("--init", help="checkpoint to continue training from")
        if name in ("decode", "eval-wer"):
            g = p.add_argument_group("decoding (shorthand for the matching config keys)")
            g.add_argument("--scheme", choices=("moving_avg", "buffered", "swa"))
            g.add_argument("--window-seconds", type=float)
            g.add_argument("--stride-ratio", type=float)
            g.add_argument("--central-ratio", type=float)
        if name == "decode":
            p.add_argument("--manifest", help="JSONL manifest of recordings to decode")
            p.add_argument("--audio", action="append", help="WAV file to decode (repeatable)")
        if name == "eval-wer":
            p.add_argument("--checkpoint", help="LCAM checkpoint to decode with")
            p.add_argument("--hypotheses", help="JSONL of {id, text} to score instead of decoding")
        if name == "eval-distractor":
            p.add_argument("--pool", help="manifest of cross-dataset distractors")
        if name == "bench-attn":
            p.add_argument("--lengths", default="1024,4096,16384")
            p.add_argument("--impls", default="tiled,naive")
            p.add_argument("--heads", type=int, default=1)
            p.add_argument("--head-dim", type=int, default=64)
        if name == "bench-throughput":
            p.add_argument("--seq-seconds", default="60,240,960")
            p.add_argument("--subsamplings", default="4,8")
            p.add_argument("--impls", default="naive,tiled")
            p.add_argument("--train-mode", action="store_true", help="time forward plus backward")
            p.add_argument("--memory-budget", type=int, help="bytes; larger runs are reported as OOM")
        if name == "make-toyset":
            p.add_argument("--spec", help="JSON file of toy corpus settings")
            p.add_argument("--toy", action="append", metavar="KEY=VALUE", help="override one toy setting")
            p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = _resolve(args)
        return fn(args, cfg)
    except (ConfigError, UsageError, ManifestError) as e:
        print(f"lcasr {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any failure of the run itself
        if args.verbose:
            log.exception("run failed")
        print(f"lcasr {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
