"""Command-line surface: data generation, training, evaluation, decoding,
rescoring, held-out-day analysis, scaling runs, benchmarking and attention
export. Every command materializes its resolved configuration and the tool
version next to its outputs and is deterministic given (config, seed,
input bytes).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, no_grad
from .checkpoint import CheckpointError
from .config import ConfigKeyError, RunConfig, resolve, write_resolved
from .container import ContainerError, read_dataset, write_dataset
from .evaluate import decode_phonemes, decode_words, evaluate_split
from .heldout import exclude_days, heldout_day_eval, summarize_over_seeds
from .layers import Ctx
from .metrics import per, wer
from .rescoring import (
    fit_ngram, generate_candidates, oracle_select, score_candidates, select_best,
)
from .scaling import fit_power_law, run_scaling
from .seq2seq import SpeechSeq2Seq
from .svgplot import render_panel
from .synthdata import ConfigError, generate_corpus, zscore_trials
from .trainer import TrainingDivergedError, model_from_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", action="append", default=[],
                   help="config file (repeatable; later files win)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")


def _load_run(args) -> RunConfig:
    return resolve(args.config, args.overrides)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_gen_data(args) -> int:
    run = _load_run(args)
    seed = args.seed if args.seed is not None else 0
    out = _outdir(args)
    ds = generate_corpus(run.data, seed=seed)
    paths = write_dataset(ds, out)
    manifest = {
        "tool_version": __version__,
        "seed": seed,
        "splits": {s: {"file": p.name, "bytes": p.stat().st_size,
                       "n_trials": len(ds.trials(s))} for s, p in paths.items()},
        "days": ds.days,
        "vocab_size": ds.word_vocab.n_words,
    }
    _write_json(out / "manifest.json", manifest)
    write_resolved(run, out, __version__)
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run(args)
    tc = run.train
    if args.stage is not None:
        tc = replace(tc, stage=args.stage)
    if args.variant is not None:
        tc = replace(tc, variant=args.variant)
    if args.daycal is not None:
        tc = replace(tc, daycal=args.daycal)
    if args.mfcc is not None:
        tc = replace(tc, use_mfcc=args.mfcc == "on")
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    tc.validate()
    run = replace(run, train=tc, daycal=replace(run.daycal, mode=tc.daycal))
    dataset = read_dataset(args.data)
    out = _outdir(args)
    if tc.stage == 2 and args.init is None:
        raise ConfigKeyError("stage 2 requires --init with a stage-1 checkpoint")
    result = train(dataset, tc, run.model, run.frontend, run.daycal, run.ctc,
                   init_checkpoint=args.init, out_path=out / "ckpt.nsqc")
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_per", "lr"])
        for row in result.history:
            w.writerow([row["epoch"], repr(row["train_loss"]),
                        repr(row["val_per"]), repr(row["lr"])])
    _write_json(out / "train_summary.json", {
        "tool_version": __version__,
        "best_val_per": result.best_val_per,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "wall_seconds": result.wall_seconds,
        "checkpoint": str(result.checkpoint_path),
        "param_counts": audit_params(result.model),
    })
    write_resolved(run, out, __version__)
    return EXIT_OK


def audit_params(model) -> dict:
    counts = {}
    for comp in ("frontend", "daycal", "encoder", "gru", "ph_decoder",
                 "word_decoder", "mfcc_head", "readout", "word_proj"):
        obj = getattr(model, comp, None)
        if obj is not None:
            counts[comp] = obj.param_count()
    counts["total"] = model.param_count()
    if hasattr(model.daycal, "params_per_day"):
        counts["daycal_per_day"] = model.daycal.params_per_day()
    return counts


def cmd_eval(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    model, ckpt = model_from_checkpoint(args.ckpt, dataset)
    out = _outdir(args)
    variant = ckpt.header["variant"]
    with_words = args.words == "on" and ckpt.header["with_word_decoder"]
    report = evaluate_split(model, variant, dataset, split=args.split,
                            with_words=with_words, seed=run.gen.seed)
    _write_json(out / "eval.json", {
        "tool_version": __version__, "checkpoint": str(args.ckpt),
        "variant": variant, **report.to_dict()})
    with (out / "per_trial.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["index", "day", "per", "wer"])
        for i, row in enumerate(report.per_trial):
            w.writerow([i, row["day"], repr(row["per"]),
                        "" if row["wer"] is None else repr(row["wer"])])
    write_resolved(run, out, __version__)
    return EXIT_OK


def cmd_decode(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    model, ckpt = model_from_checkpoint(args.ckpt, dataset)
    variant = ckpt.header["variant"]
    out = _outdir(args)
    trials = dataset.trials(args.split)
    feats = zscore_trials(trials)
    with (out / "hypotheses.jsonl").open("w", encoding="utf-8") as f:
        for i, (x, t) in enumerate(zip(feats, trials)):
            hyp_ph = decode_phonemes(model, variant, x, t)
            rec = {
                "index": i, "day": t.day_id,
                "ref_text": t.text,
                "ref_phonemes": dataset.phoneme_vocab.to_symbols(t.phonemes),
                "hyp_phonemes": dataset.phoneme_vocab.to_symbols(hyp_ph),
                "per": per(t.phonemes, hyp_ph, dataset.phoneme_vocab).rate,
            }
            if ckpt.header["with_word_decoder"]:
                wids = decode_words(model, x, t,
                                    max_length=run.gen.max_length)
                rec["hyp_text"] = dataset.word_vocab.text(wids)
                rec["wer"] = wer(t.text, rec["hyp_text"]).rate
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_resolved(run, out, __version__)
    return EXIT_OK


def _word_step_fn(model, enc):
    def step(prefix):
        return model.word_decoder.step_logprobs(enc, list(prefix))
    return step


def _rescore_split(model, dataset, split, gen_cfg, max_trials=0):
    """Candidate pools, scores, and per-selector WER sums over a split."""
    trials = dataset.trials(split)
    feats = zscore_trials(trials)
    if max_trials > 0:
        trials = trials[:max_trials]
        feats = feats[:max_trials]
    lm = fit_ngram(dataset.trials("train"), dataset.word_vocab)
    rows = []
    for i, (x, t) in enumerate(zip(feats, trials)):
        with no_grad():
            enc, _ = model.encode(x, t.day_id, Ctx(train=False))
            greedy_ph = model.greedy_phonemes(
                enc, int(np.ceil(1.5 * len(t.phonemes))) + 1)
            step = _word_step_fn(model, enc)
            cfg_trial = replace(gen_cfg, seed=int(
                np.random.default_rng([gen_cfg.seed, i]).integers(0, 2**31)))
            pool = generate_candidates(step, dataset.word_vocab, cfg_trial)
            pool = score_candidates(pool, model, enc, greedy_ph,
                                    dataset.lexicon, lm, cfg_trial)
            from .rescoring import greedy_search
            g_tokens, _ = greedy_search(step, dataset.word_vocab.bos_id,
                                        dataset.word_vocab.eos_id,
                                        gen_cfg.max_length)
        best = select_best(pool)
        oracle = oracle_select(pool, t.text)
        beam_top = max(pool, key=lambda h: (h.gen_logprob, h.tokens))
        rows.append({
            "index": i, "day": t.day_id, "ref_text": t.text,
            "greedy_text": dataset.word_vocab.text(g_tokens),
            "selected": pool.index(best), "oracle": pool.index(oracle),
            "candidates": [{"text": h.text, "source": h.source, **h.scores()}
                           for h in pool],
        })
    return rows


def cmd_rescore(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    model, ckpt = model_from_checkpoint(args.ckpt, dataset)
    if not ckpt.header["with_word_decoder"]:
        raise CheckpointError("rescoring requires a stage-2 checkpoint")
    out = _outdir(args)
    rows = _rescore_split(model, dataset, args.split, run.gen,
                          max_trials=args.max_trials)
    sums = {"greedy": [0, 0], "beam_top": [0, 0], "blend": [0, 0],
            "oracle": [0, 0]}
    with (out / "rescore.jsonl").open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
            ref = row["ref_text"]
            pool = row["candidates"]
            picks = {
                "greedy": row["greedy_text"],
                "beam_top": max(pool, key=lambda h: h["gen_logprob"])["text"],
                "blend": pool[row["selected"]]["text"],
                "oracle": pool[row["oracle"]]["text"],
            }
            for k, text in picks.items():
                e = wer(ref, text)
                sums[k][0] += e.edits
                sums[k][1] += e.ref_len
    summary = {k: (v[0] / v[1] if v[1] else 0.0) for k, v in sums.items()}
    _write_json(out / "rescore_summary.json", {
        "tool_version": __version__, "n_trials": len(rows),
        "wer": summary, "weights": list(run.gen.weights)})
    write_resolved(run, out, __version__)
    return EXIT_OK


def cmd_heldout(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    out = _outdir(args)
    k = args.holdout_days
    days = list(dataset.days)
    if k < 1 or k >= len(days):
        raise ConfigKeyError(f"--holdout-days must be in [1, {len(days) - 1})")
    proximal = days[-k - 1]
    drop = days[-k:]
    trunc_ds = exclude_days(dataset, drop)
    seeds = [int(s) for s in args.seeds.split(",")]
    reports = []
    for seed in seeds:
        tc = replace(run.train, seed=seed)
        full = train(dataset, tc, run.model, run.frontend, run.daycal, run.ctc)
        trunc = train(trunc_ds, tc, run.model, run.frontend, run.daycal, run.ctc)
        reports.append(heldout_day_eval(full.model, trunc.model, dataset,
                                        proximal, variant=tc.variant))
    summary = summarize_over_seeds(reports, metric="per")
    _write_json(out / "heldout.json", {
        "tool_version": __version__, "proximal_day": proximal,
        "seeds": seeds, "summary": summary,
        "reports": [r.to_dict() for r in reports]})
    with (out / "delta_vs_gap.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["day", "gap", "condition", "mean_delta", "ci_low", "ci_high"])
        for day, entry in summary["days"].items():
            for cond in ("seen", "unseen"):
                w.writerow([day, entry["gap"], cond,
                            repr(entry[cond]["mean"]),
                            repr(entry[cond]["ci"][0]),
                            repr(entry[cond]["ci"][1])])
    write_resolved(run, out, __version__)
    return EXIT_OK


def cmd_scale(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    out = _outdir(args)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    points = run_scaling(dataset, run.train, fractions=fractions, seeds=seeds,
                         model_cfg=run.model)
    exclude = ()
    if args.exclude_fraction is not None:
        n_total = len(dataset.trials("train"))
        per_day = {}
        for t in dataset.trials("train"):
            per_day[t.day_id] = per_day.get(t.day_id, 0) + 1
        n_excl = sum(int(np.floor(args.exclude_fraction * c + 0.5))
                     for c in per_day.values())
        exclude = (n_excl,)
    fit = fit_power_law([(p.n, p.error) for p in points], exclude=exclude)
    extrap = {}
    for n in (10000, 20000, 100000):
        ci = fit.extrapolate_ci(n)
        extrap[str(n)] = {"value": fit.extrapolate(n), "ci": [ci.low, ci.high]}
    _write_json(out / "scaling.json", {
        "tool_version": __version__,
        "points": [{"n": p.n, "seed": p.seed, "per_percent": p.error}
                   for p in points],
        "fit": fit.to_dict(), "extrapolation": extrap})
    with (out / "scaling_points.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["n", "seed", "per_percent"])
        for p in points:
            w.writerow([p.n, p.seed, repr(p.error)])
    write_resolved(run, out, __version__)
    return EXIT_OK


def cmd_bench(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    model, ckpt = model_from_checkpoint(args.ckpt, dataset)
    if not ckpt.header["with_word_decoder"]:
        raise CheckpointError("benchmarking needs a stage-2 checkpoint")
    out = _outdir(args)
    trials = dataset.trials(args.split)
    feats = zscore_trials(trials)
    if args.max_trials > 0:
        trials = trials[:args.max_trials]
        feats = feats[:args.max_trials]
    n_words = sum(len(t.words) for t in trials)

    t0 = time.perf_counter()
    for x, t in zip(feats, trials):
        decode_words(model, x, t, max_length=run.gen.max_length)
    direct_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    _rescore_split(model, dataset, args.split, run.gen,
                   max_trials=args.max_trials or len(trials))
    rescored_s = time.perf_counter() - t0

    def rates(seconds):
        n = len(trials)
        return {"seconds": seconds,
                "sentences_per_s": n / seconds if seconds else float("inf"),
                "words_per_s": n_words / seconds if seconds else float("inf"),
                "ms_per_sentence": 1000.0 * seconds / n,
                "ms_per_word": 1000.0 * seconds / max(1, n_words)}

    _write_json(out / "bench.json", {
        "tool_version": __version__, "n_sentences": len(trials),
        "n_words": n_words,
        "direct": rates(direct_s), "rescored": rates(rescored_s)})
    write_resolved(run, out, __version__)
    return EXIT_OK


def cmd_attn_export(args) -> int:
    run = _load_run(args)
    dataset = read_dataset(args.data)
    model, ckpt = model_from_checkpoint(args.ckpt, dataset)
    if not isinstance(model, SpeechSeq2Seq):
        raise CheckpointError("attention export needs a seq2seq checkpoint")
    out = _outdir(args)
    trials = dataset.trials(args.split)
    if not (0 <= args.trial_id < len(trials)):
        raise ContainerError(f"unknown trial id {args.trial_id} "
                             f"(split has {len(trials)} trials)")
    trial = trials[args.trial_id]
    feats = zscore_trials(trials)[args.trial_id]
    bundle = model.capture_attention(
        feats, trial.day_id, trial.phonemes,
        trial.words if ckpt.header["with_word_decoder"] else None)
    maps = list(bundle.named_maps())
    for name, m in maps:
        with (out / f"{name}.csv").open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            for row in np.asarray(m):
                w.writerow([repr(float(v)) for v in row])
    envelope = np.abs(feats).mean(axis=1)
    render_panel(maps, envelope=envelope, path=out / "attention.svg")
    _write_json(out / "attn_manifest.json", {
        "tool_version": __version__, "trial_id": args.trial_id,
        "split": args.split, "day": trial.day_id, "text": trial.text,
        "maps": [name for name, _ in maps]})
    write_resolved(run, out, __version__)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="neuroseq",
        description="desk-scale sequence-to-sequence neural speech decoding")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _common_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one stage of one variant")
    _common_flags(p)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--variant", choices=("seq2seq", "ctc"))
    p.add_argument("--daycal", choices=("nhs", "linear", "none"))
    p.add_argument("--mfcc", choices=("on", "off"))
    p.add_argument("--seed", type=int)
    p.add_argument("--init", help="stage-1 checkpoint for stage 2")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="PER/WER with bootstrap CIs")
    _common_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--words", choices=("on", "off"), default="on")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decode", help="per-trial hypotheses as JSON lines")
    _common_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("rescore", help="candidate generation + blended rescoring")
    _common_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--max-trials", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rescore)

    p = sub.add_parser("heldout", help="held-out-day generalization harness")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout-days", type=int, default=3)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_heldout)

    p = sub.add_parser("scale", help="retrain across dataset fractions + fit")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.05,0.10,0.25,0.50,0.75,1.00")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--exclude-fraction", type=float, default=0.05,
                   help="fraction excluded from the extrapolation fit")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_scale)

    p = sub.add_parser("bench", help="wall-clock decode benchmarking")
    _common_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--max-trials", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("attn-export", help="attention maps as CSV + SVG")
    _common_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--trial-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attn_export)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ContainerError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingDivergedError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigKeyError, ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
