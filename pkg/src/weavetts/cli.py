"""Operator entry point.

Verbs: gen-data, train, synth, bench, check. Global flags --config,
--seed, --out-dir, --quick apply to every verb. Exit codes: 0 success,
1 usage error, 2 configuration validation error, 3 runtime failure.

Relative paths from the config's ``paths`` section are resolved under the
output directory, so ``--out-dir`` relocates a whole run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import bench as bench_mod
from .checks import run_all_checks
from .config import (
    EngineConfig,
    config_hash,
    default_config,
    load_config,
    save_config,
)
from .errors import ConfigError, WeaveTtsError
from .melfile import write_melf, write_sidecar
from .model import MelLanguageModel, load_model
from .runtime import Prompt, synthesize
from .synthdata import (
    DEFAULT_FRAME_SHIFT_MS,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from .train import synthesis_scores, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise UsageFailure(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="weavetts", description=__doc__.split("\n")[1])
    parser.add_argument("--config", help="engine config JSON (defaults built in)")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--out-dir", help="output directory (default from config)")
    parser.add_argument("--quick", action="store_true", help="reduced work for smoke runs")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic corpus")

    p_train = sub.add_parser("train", help="teacher-forced training run")
    p_train.add_argument("--max-steps", type=int, help="override training.max_steps")

    p_synth = sub.add_parser("synth", help="stream one synthesis to a MELF file")
    p_synth.add_argument("--checkpoint", help="model checkpoint (default from config)")
    p_synth.add_argument("--tokens", help="comma-separated token ids")
    p_synth.add_argument("--token-file", help="file of whitespace/comma separated ids")
    p_synth.add_argument("--output", default="synth.melf", help="output MELF name")
    p_synth.add_argument("--d-llm", "--llm-delay-ms", dest="llm_delay_ms", type=float,
                         default=0.0, help="per-token upstream delay in ms")
    p_synth.add_argument("--prompt-utterance", type=int,
                         help="corpus utterance id to condition on")
    p_synth.add_argument("--prompt-mode", choices=["continuation", "cross-sentence"],
                         default="cross-sentence")
    p_synth.add_argument("--prompt-frames", type=int,
                         help="frames of the prompt utterance to keep (continuation)")
    p_synth.add_argument("--sample-times", type=int, help="latent draws per step")

    p_bench = sub.add_parser("bench", help="latency/throughput measurements")
    p_bench.add_argument("--checkpoint", help="optional trained checkpoint")
    p_bench.add_argument("--scenario", choices=["fpl-a", "fpl-l"], default="fpl-a")
    p_bench.add_argument("--clock", choices=["virtual", "wall"], default="virtual")
    p_bench.add_argument("--trials", type=int, help="default 1 virtual, 30 wall")
    p_bench.add_argument("--warmup", type=int, help="default 0 virtual, 5 wall")
    p_bench.add_argument("--n-tokens", type=int, default=8)
    p_bench.add_argument("--n-frames", type=int, default=64)
    p_bench.add_argument("--d-llm", "--llm-delay-ms", dest="llm_delay_ms", type=float,
                         default=25.0)
    p_bench.add_argument("--sweep", choices=[bench_mod.AXIS_INTERLEAVE,
                                             bench_mod.AXIS_REDUCTION,
                                             bench_mod.AXIS_SAMPLE_TIMES],
                         help="run an ablation sweep over this axis")
    p_bench.add_argument("--values", help="comma-separated sweep values")

    sub.add_parser("check", help="run the full invariant suite")
    return parser


def _load_engine_config(args) -> EngineConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.corpus = dataclasses.replace(cfg.corpus, seed=args.seed)
        cfg.training = dataclasses.replace(cfg.training, seed=args.seed)
        cfg.runtime = dataclasses.replace(cfg.runtime, seed=args.seed)
    return cfg


def _out_dir(args, cfg: EngineConfig) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(path_str: str, out: Path) -> Path:
    p = Path(path_str)
    return p if p.is_absolute() else out / p


def cmd_gen_data(args) -> int:
    cfg = _load_engine_config(args)
    out = _out_dir(args, cfg)
    corpus_dir = _resolve(cfg.paths.corpus_dir, out)
    spec = cfg.corpus
    if args.quick:
        spec = dataclasses.replace(spec, n_utterances=min(spec.n_utterances, 200))
    corpus = generate_corpus(spec)
    save_corpus(corpus, corpus_dir)
    print(f"corpus written to {corpus_dir}")
    print(f"  utterances: {spec.n_utterances} ({len(corpus.train)} train, "
          f"{len(corpus.val)} val)")
    print(f"  vocab {spec.vocab_size}, {spec.n_mels} mel bins, "
          f"{spec.frames_per_token} frames per token, seed {spec.seed}")
    print(f"  normalization: mean {corpus.mel_mean:.6f}, std {corpus.mel_std:.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_engine_config(args)
    if args.max_steps is not None:
        cfg.training = dataclasses.replace(cfg.training, max_steps=args.max_steps)
    if args.quick:
        cfg.training = dataclasses.replace(
            cfg.training, max_steps=min(cfg.training.max_steps, 300), eval_interval=100
        )
    out = _out_dir(args, cfg)
    corpus_dir = _resolve(cfg.paths.corpus_dir, out)
    if not (corpus_dir / "manifest.jsonl").exists():
        raise WeaveTtsError(f"no corpus at {corpus_dir}; run gen-data first")
    corpus = load_corpus(corpus_dir)
    result = train(cfg, corpus, out, progress=print)

    checkpoint = _resolve(cfg.paths.checkpoint, out)
    if str(checkpoint) != result.checkpoint_path:
        checkpoint.write_bytes(Path(result.checkpoint_path).read_bytes())
    save_config(cfg, out / "train_config.json")
    print(f"best checkpoint (step {result.best_step}, val_reg "
          f"{result.best_val_reg:.4f}) at {checkpoint}")
    scores = synthesis_scores(result.model, corpus, cfg, corpus.val[:20],
                              seed=cfg.runtime.seed)
    print(f"free-running synthesis on 20 val utterances: "
          f"template_accuracy {scores['template_accuracy']:.3f}, "
          f"median frame MSE {scores['frame_mse_median']:.4f}")
    return EXIT_OK


def _parse_tokens(args, vocab_size: int) -> List[int]:
    raw: Optional[str] = None
    if args.token_file:
        raw = Path(args.token_file).read_text()
    elif args.tokens:
        raw = args.tokens
    if raw is None:
        return []
    tokens = [int(t) for t in raw.replace(",", " ").split()]
    bad = [t for t in tokens if not 0 <= t < vocab_size]
    if bad:
        raise ConfigError(f"token ids {bad} outside vocab of {vocab_size}")
    return tokens


def cmd_synth(args) -> int:
    cfg = _load_engine_config(args)
    out = _out_dir(args, cfg)
    checkpoint = Path(args.checkpoint) if args.checkpoint else _resolve(cfg.paths.checkpoint, out)
    model = load_model(checkpoint, expect=cfg.model)
    tokens = _parse_tokens(args, cfg.model.vocab_size)

    prompt: Optional[Prompt] = None
    if args.prompt_utterance is not None:
        corpus = load_corpus(_resolve(cfg.paths.corpus_dir, out))
        by_id = {u.utt_id: u for u in corpus.utterances}
        if args.prompt_utterance not in by_id:
            raise ConfigError(f"utterance {args.prompt_utterance} not in corpus")
        utt = by_id[args.prompt_utterance]
        if args.prompt_mode == "continuation":
            if tokens:
                raise UsageFailure("continuation mode takes its text from the prompt")
            keep = args.prompt_frames or (len(utt.mel) // 2)
            keep -= keep % cfg.schedule.frames_per_step
            prompt = Prompt.make(utt.tokens, utt.mel[:keep])
        else:
            prompt = Prompt.make(utt.tokens, utt.mel)
    if not tokens and prompt is None:
        raise UsageFailure("provide --tokens/--token-file or a prompt utterance")

    runtime_cfg = dataclasses.replace(
        cfg.runtime,
        prompt=prompt,
        sample_times=args.sample_times or cfg.runtime.sample_times,
    )
    events = bench_mod.simulate_llm_source(tokens, args.llm_delay_ms)
    output = synthesize(events, runtime_cfg, model)

    mel_path = out / args.output
    write_melf(mel_path, output.frames, DEFAULT_FRAME_SHIFT_MS)
    sidecar = [
        {
            "stop_reason": output.stop_reason,
            "frame_count": output.frame_count,
            "timestamps_ms": [float(t) for t in output.timestamps_ms],
            "config_hash": config_hash(cfg),
            "checkpoint": str(checkpoint),
            "tokens": tokens,
            "llm_delay_ms": args.llm_delay_ms,
            "seed": runtime_cfg.seed,
        }
    ]
    write_sidecar(mel_path.with_suffix(".meta.jsonl"), sidecar)
    print(f"{output.frame_count} frames -> {mel_path} ({output.stop_reason})")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_engine_config(args)
    out = _out_dir(args, cfg)
    scenario = bench_mod.FPL_A if args.scenario == "fpl-a" else bench_mod.FPL_L
    trials = args.trials if args.trials is not None else (30 if args.clock == "wall" else 1)
    warmup = args.warmup if args.warmup is not None else (5 if args.clock == "wall" else 0)
    if args.quick:
        trials, warmup = min(trials, 3), min(warmup, 1)
    spec = bench_mod.LatencySpec(
        llm_delay_ms=args.llm_delay_ms,
        trials=trials,
        warmup=warmup,
        scenario=scenario,
        n_tokens=args.n_tokens,
        n_frames=args.n_frames,
    )
    runtime_cfg = dataclasses.replace(cfg.runtime, clock_mode=args.clock)

    model: Optional[MelLanguageModel] = None
    if args.checkpoint:
        model = load_model(args.checkpoint)

    if args.sweep:
        if not args.values:
            raise UsageFailure("--sweep needs --values")
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        provider = None
        if model is not None:
            loaded = model
            provider = (
                lambda m_cfg: loaded if m_cfg == loaded.cfg
                else MelLanguageModel(m_cfg, seed=runtime_cfg.seed)
            )
        rows = bench_mod.ablation_sweep(
            args.sweep, values, cfg.model, runtime_cfg, spec, model_provider=provider
        )
        csv_path = out / "bench_sweep.csv"
        csv_path.write_text(bench_mod.sweep_rows_to_csv(rows))
        jsonl_path = out / "bench_sweep.jsonl"
        with open(jsonl_path, "w", encoding="utf-8") as f:
            for row in rows:
                record = {
                    "axis": row.axis, "value": row.value, "ok": row.ok,
                    "error": row.error, "metrics": row.metrics,
                    "report": row.report.as_dict() if row.report else None,
                }
                f.write(json.dumps(record) + "\n")
        for row in rows:
            status = "ok" if row.ok else f"failed ({row.error})"
            extra = f" rtf={row.report.rtf:.4f} fpl={row.report.fpl_ms_median:.2f}ms" if row.report else ""
            print(f"  {row.axis}={row.value}: {status}{extra}")
        print(f"sweep written to {csv_path} and {jsonl_path}")
        return EXIT_OK

    if model is None:
        model = MelLanguageModel(cfg.model, seed=runtime_cfg.seed)
    report = bench_mod.run_bench(model, runtime_cfg, spec)
    report_path = out / "bench_report.jsonl"
    with open(report_path, "w", encoding="utf-8") as f:
        record = report.as_dict()
        record["config_hash"] = config_hash(cfg)
        f.write(json.dumps(record) + "\n")
    csv_path = out / "bench_report.csv"
    columns = ["scenario", "fpl_ms_median", "fpl_ms_p95", "rtf",
               "steps_text", "steps_frame", "frame_count"]
    csv_path.write_text(
        ",".join(columns) + "\n"
        + ",".join(str(getattr(report, c)) for c in columns) + "\n"
    )
    print(f"scenario {report.scenario}: FPL median {report.fpl_ms_median:.3f} ms "
          f"(p95 {report.fpl_ms_p95:.3f}), RTF {report.rtf:.4f}")
    print(f"  {report.steps_text} text steps, {report.steps_frame} frame steps, "
          f"{report.frame_count} frames")
    print(f"report written to {report_path} and {csv_path}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_all_checks(quick=args.quick)
    failed = 0
    for result in results:
        status = "PASS" if result.ok else "FAIL"
        print(f"[{status}] {result.name}: {result.detail}")
        failed += 0 if result.ok else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synth": cmd_synth,
    "bench": cmd_bench,
    "check": cmd_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageFailure as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageFailure as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except WeaveTtsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
