"""Latency and throughput harness.

First-packet latency (FPL) is the clock time from the synthesis request to
the first emitted packet. The ``fpl_a`` scenario delivers the whole token
sequence at time zero, so FPL is pure engine compute:
tokens_per_group * step_cost + emit_cost on the virtual clock. The
``fpl_l`` scenario models a single-threaded upstream language model that
needs one forward pass per token: producing token k costs llm_delay_ms,
serialized with the engine's own steps, so FPL grows by exactly
tokens_per_group * llm_delay_ms over the immediate-text case.

The real-time factor (RTF) is total synthesis compute divided by the audio
duration of the produced frames. Reports are derived from synthesis traces
alone, so re-scoring a stored trace reproduces the report exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, InvalidReduction, NoOutput, WeaveTtsError
from .model import MelLanguageModel, ModelConfig
from .runtime import (
    EndOfText,
    RuntimeConfig,
    StreamEvent,
    SynthesisOutput,
    TextArrived,
    synthesize,
)
from .schedule import ScheduleConfig

FPL_A = "fpl_a"
FPL_L = "fpl_l"

AXIS_INTERLEAVE = "interleave_ratio"
AXIS_REDUCTION = "reduction_factor"
AXIS_SAMPLE_TIMES = "sample_times"


@dataclass(frozen=True)
class LatencySpec:
    llm_delay_ms: float = 25.0
    frame_shift_ms: float = 12.5
    trials: int = 1
    scenario: str = FPL_A
    n_tokens: int = 8
    n_frames: int = 64
    warmup: int = 0

    def __post_init__(self) -> None:
        if self.llm_delay_ms < 0:
            raise ConfigError("llm_delay_ms must be >= 0")
        if self.frame_shift_ms <= 0:
            raise ConfigError("frame_shift_ms must be > 0")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.scenario not in (FPL_A, FPL_L):
            raise ConfigError(f"unknown scenario {self.scenario!r}")


@dataclass
class LatencyReport:
    scenario: str
    fpl_ms_median: float
    fpl_ms_p95: float
    rtf: float
    steps_text: int
    steps_frame: int
    frame_count: int
    step_time_us: Dict[str, float]
    config: Dict[str, object]

    def as_dict(self) -> dict:
        return asdict(self)


def simulate_llm_source(
    tokens: Sequence[int], llm_delay_ms: float, first_at_ms: float = 0.0
) -> List[StreamEvent]:
    """Free-running upstream source: token k arrives at k * llm_delay_ms
    (offset by ``first_at_ms``), end-of-text one period after the last."""
    events: List[StreamEvent] = [
        TextArrived(int(tok), first_at_ms + k * llm_delay_ms)
        for k, tok in enumerate(tokens)
    ]
    events.append(EndOfText(first_at_ms + len(tokens) * llm_delay_ms))
    return events


def serial_llm_source(
    tokens: Sequence[int], llm_delay_ms: float, step_cost_ms: float
) -> List[StreamEvent]:
    """Upstream source sharing one thread with the engine: each token is
    ready llm_delay_ms after the engine finished consuming the previous
    one, i.e. token k arrives at (k+1)*llm_delay + k*step_cost."""
    events: List[StreamEvent] = [
        TextArrived(int(tok), (k + 1) * llm_delay_ms + k * step_cost_ms)
        for k, tok in enumerate(tokens)
    ]
    last = events[-1].arrival_ms if events else 0.0
    events.append(EndOfText(last))
    return events


def score_trace(trace, frame_shift_ms: float) -> Dict[str, float]:
    """Latency numbers as a pure function of one synthesis trace."""
    emit_times = [rec.clock_ms for rec in trace if rec.kind == "emit"]
    frame_count = sum(rec.n_frames for rec in trace if rec.kind == "emit")
    if frame_count == 0:
        raise NoOutput("trace emitted zero frames")
    compute_ms = sum(rec.compute_ms for rec in trace)
    step_times_us = [
        rec.compute_ms * 1e3 for rec in trace if rec.kind in ("consume_text", "feed", "bos")
    ]
    arr = np.asarray(step_times_us, dtype=np.float64)
    return {
        "fpl_ms": emit_times[0],
        "rtf": compute_ms / (frame_count * frame_shift_ms),
        "steps_text": sum(1 for rec in trace if rec.kind == "consume_text"),
        "steps_frame": len(emit_times),
        "frame_count": frame_count,
        "step_us_mean": float(arr.mean()) if arr.size else 0.0,
        "step_us_median": float(np.median(arr)) if arr.size else 0.0,
        "step_us_p95": float(np.percentile(arr, 95)) if arr.size else 0.0,
    }


def _scenario_events(spec: LatencySpec, runtime_cfg: RuntimeConfig,
                     tokens: Sequence[int]) -> List[StreamEvent]:
    if spec.scenario == FPL_A:
        return simulate_llm_source(tokens, 0.0)
    if runtime_cfg.clock_mode == "virtual":
        return serial_llm_source(tokens, spec.llm_delay_ms, runtime_cfg.step_cost_ms)
    # wall mode: free-running source, first token after one upstream pass
    return simulate_llm_source(tokens, spec.llm_delay_ms, first_at_ms=spec.llm_delay_ms)


def run_bench(
    model: MelLanguageModel, runtime_cfg: RuntimeConfig, spec: LatencySpec
) -> LatencyReport:
    """Measure FPL and RTF over ``spec.trials`` runs of a fixed-length
    synthesis (min_frames == max_frames == n_frames, so step counts are a
    pure function of the schedule)."""
    tokens = [k % model.cfg.vocab_size for k in range(spec.n_tokens)]
    cfg = replace(
        runtime_cfg,
        min_frames=spec.n_frames,
        max_frames=spec.n_frames,
        prompt=None,
    )
    events = _scenario_events(spec, cfg, tokens)

    old_threads = torch.get_num_threads()
    if cfg.clock_mode == "wall":
        torch.set_num_threads(1)
    try:
        for _ in range(spec.warmup):
            synthesize(events, cfg, model)
        outputs: List[SynthesisOutput] = [
            synthesize(events, cfg, model) for _ in range(spec.trials)
        ]
    finally:
        torch.set_num_threads(old_threads)

    scores = [score_trace(out.trace, spec.frame_shift_ms) for out in outputs]
    fpls = np.asarray([s["fpl_ms"] for s in scores])
    last = scores[-1]
    return LatencyReport(
        scenario=spec.scenario,
        fpl_ms_median=float(np.median(fpls)),
        fpl_ms_p95=float(np.percentile(fpls, 95)),
        rtf=float(np.median([s["rtf"] for s in scores])),
        steps_text=int(last["steps_text"]),
        steps_frame=int(last["steps_frame"]),
        frame_count=int(last["frame_count"]),
        step_time_us={
            "mean": last["step_us_mean"],
            "median": last["step_us_median"],
            "p95": last["step_us_p95"],
        },
        config={
            "tokens_per_group": cfg.schedule.tokens_per_group,
            "frames_per_group": cfg.schedule.frames_per_group,
            "frames_per_step": cfg.schedule.frames_per_step,
            "llm_delay_ms": spec.llm_delay_ms,
            "frame_shift_ms": spec.frame_shift_ms,
            "clock_mode": cfg.clock_mode,
            "step_cost_ms": cfg.step_cost_ms,
            "emit_cost_ms": cfg.emit_cost_ms,
            "n_tokens": spec.n_tokens,
            "n_frames": spec.n_frames,
            "trials": spec.trials,
            "seed": cfg.seed,
        },
    )


@dataclass
class SweepRow:
    axis: str
    value: str
    ok: bool
    error: Optional[str] = None
    report: Optional[LatencyReport] = None
    metrics: Dict[str, float] = field(default_factory=dict)


def parse_ratio(value: str) -> tuple[int, int]:
    parts = value.split(":")
    if len(parts) != 2:
        raise ConfigError(f"ratio must look like 'n:m', got {value!r}")
    n, m = int(parts[0]), int(parts[1])
    if n < 1 or m < 1:
        raise ConfigError(f"ratio parts must be positive, got {value!r}")
    return n, m


def ablation_sweep(
    axis: str,
    values: Sequence[object],
    model_cfg: ModelConfig,
    runtime_cfg: RuntimeConfig,
    spec: LatencySpec,
    model_provider: Optional[Callable[[ModelConfig], MelLanguageModel]] = None,
    evaluate: Optional[Callable[[MelLanguageModel, RuntimeConfig], Dict[str, float]]] = None,
) -> List[SweepRow]:
    """One benchmark row per axis value; invalid values fail their row
    without aborting the sweep.

    ``model_provider`` maps a (possibly reshaped) model config to a model;
    the default builds freshly initialized weights, which is sufficient
    for latency since it depends on the architecture, not the weights.
    ``evaluate`` may attach quality metrics (e.g. reconstruction scores).
    """
    provider = model_provider or (lambda cfg: MelLanguageModel(cfg, seed=runtime_cfg.seed))
    rows: List[SweepRow] = []
    for value in values:
        label = str(value)
        try:
            m_cfg, r_cfg = _apply_axis(axis, value, model_cfg, runtime_cfg)
            model = provider(m_cfg)
            report = run_bench(model, r_cfg, spec)
            metrics = evaluate(model, r_cfg) if evaluate is not None else {}
            rows.append(SweepRow(axis=axis, value=label, ok=True, report=report,
                                 metrics=metrics))
        except (ConfigError, InvalidReduction, ValueError, WeaveTtsError) as exc:
            rows.append(SweepRow(axis=axis, value=label, ok=False, error=str(exc)))
    return rows


def _apply_axis(
    axis: str, value: object, model_cfg: ModelConfig, runtime_cfg: RuntimeConfig
) -> tuple[ModelConfig, RuntimeConfig]:
    if axis == AXIS_INTERLEAVE:
        n, m = parse_ratio(str(value))
        schedule = ScheduleConfig(
            tokens_per_group=n, frames_per_group=m,
            frames_per_step=runtime_cfg.schedule.frames_per_step,
        )
        return model_cfg, replace(runtime_cfg, schedule=schedule)
    if axis == AXIS_REDUCTION:
        r = int(value)
        schedule = ScheduleConfig(
            tokens_per_group=runtime_cfg.schedule.tokens_per_group,
            frames_per_group=runtime_cfg.schedule.frames_per_group,
            frames_per_step=r,
        )
        new_model_cfg = ModelConfig(**{**model_cfg.__dict__, "frames_per_step": r})
        return new_model_cfg, replace(runtime_cfg, schedule=schedule)
    if axis == AXIS_SAMPLE_TIMES:
        return model_cfg, replace(runtime_cfg, sample_times=int(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def sweep_rows_to_csv(rows: Sequence[SweepRow]) -> str:
    """Plot-ready table: one line per row, comma separated."""
    metric_keys = sorted({k for row in rows for k in row.metrics})
    header = ["axis", "value", "ok", "fpl_ms_median", "rtf", "steps_frame"] + metric_keys
    lines = [",".join(header)]
    for row in rows:
        base = [
            row.axis,
            row.value,
            "1" if row.ok else "0",
            f"{row.report.fpl_ms_median:.6f}" if row.report else "",
            f"{row.report.rtf:.6f}" if row.report else "",
            str(row.report.steps_frame) if row.report else "",
        ]
        base += [f"{row.metrics.get(k, float('nan')):.6f}" if k in row.metrics else ""
                 for k in metric_keys]
        lines.append(",".join(base))
    return "\n".join(lines) + "\n"
