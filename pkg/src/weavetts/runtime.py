"""Streaming synthesis runtime.

One :class:`SynthesisStream` owns one decoder state and walks the
interleaving schedule: text tokens are consumed as they arrive (each one
is a decoder position; no frames are produced while a successor token is
pending), and every frame step turns the latest hidden state into a packet
of frames_per_step frames via the latent sampler and post-net, then feeds
the packet back through the decoder as its own input. The hidden state
that results carries the stop probability for the packet just produced,
which matches how the stop labels are placed during training.

Generation is free-running: the model consumes its own emitted frames.
The first frame step of a stream with no preceding input uses the model's
learned begin-of-speech vector instead of a pre-net projection.

Time is tracked on a per-stream clock. In ``virtual`` mode every decoder
forward costs ``step_cost_ms`` and every packet emission costs
``emit_cost_ms``, which makes latency reports exact deterministic
functions of the schedule; ``wall`` mode measures real elapsed time.
Waiting for late text advances the clock to the token's arrival time
without charging compute.

Streams are independent: many may decode concurrently against the same
immutable model parameters, but a single stream must be driven by one
thread, with events delivered in order.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import (
    AlreadyPrimed,
    ConfigError,
    ShapeError,
    StreamClosed,
    TraceIncomplete,
)
from .model import MelLanguageModel, StepOutput
from .schedule import ScheduleConfig, ScheduleCursor

STOP_TOKEN = "stop_token"
MAX_LENGTH = "max_length"


@dataclass(frozen=True)
class TextArrived:
    token_id: int
    arrival_ms: float = 0.0


@dataclass(frozen=True)
class EndOfText:
    arrival_ms: float = 0.0


StreamEvent = Union[TextArrived, EndOfText]


@dataclass(frozen=True)
class Prompt:
    """Conditioning prefix: a transcript (or part of one) plus mel frames.

    For continuation-style prompting the token list may extend past the
    frames; the surplus tokens are queued as already-arrived text.
    """

    tokens: Tuple[int, ...]
    mel: np.ndarray

    @staticmethod
    def make(tokens: Sequence[int], mel: np.ndarray) -> "Prompt":
        return Prompt(tokens=tuple(int(t) for t in tokens), mel=np.asarray(mel, dtype=np.float32))


@dataclass
class RuntimeConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stop_threshold: float = 0.5
    min_frames: Optional[int] = None  # defaults to frames_per_group
    max_frames: int = 2048
    sample_times: int = 1
    seed: int = 0
    prompt: Optional[Prompt] = None
    clock_mode: str = "virtual"
    step_cost_ms: float = 5.0
    emit_cost_ms: float = 0.0
    # inference-time overrides used by the sample-count studies
    log_var_override: Optional[float] = None
    sigma_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.stop_threshold < 1.0:
            raise ConfigError("stop_threshold must lie strictly inside (0, 1)")
        if self.min_frames is not None and self.min_frames > self.max_frames:
            raise ConfigError("min_frames must not exceed max_frames")
        if self.sample_times < 1:
            raise ConfigError("sample_times must be >= 1")
        if self.clock_mode not in ("virtual", "wall"):
            raise ConfigError(f"unknown clock_mode {self.clock_mode!r}")
        if self.step_cost_ms < 0 or self.emit_cost_ms < 0:
            raise ConfigError("virtual costs must be nonnegative")
        if self.sigma_scale < 0:
            raise ConfigError("sigma_scale must be nonnegative")

    @property
    def resolved_min_frames(self) -> int:
        return self.schedule.frames_per_group if self.min_frames is None else self.min_frames


@dataclass(frozen=True)
class NeedText:
    pass


@dataclass
class Emitted:
    frames: np.ndarray  # (k, n_mels), k == frames_per_step except the last packet
    stop_prob: float
    timestamp_ms: float


@dataclass(frozen=True)
class Stopped:
    reason: str


StepResult = Union[NeedText, Emitted, Stopped]


@dataclass(frozen=True)
class TraceRecord:
    kind: str  # "prime" | "consume_text" | "bos" | "emit" | "feed" | "stop"
    position: int
    clock_ms: float
    compute_ms: float
    n_frames: int = 0


@dataclass
class SynthesisOutput:
    frames: np.ndarray  # (T, n_mels)
    timestamps_ms: np.ndarray  # (T,)
    stop_reason: str
    trace: List[TraceRecord]

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])


class SynthesisStream:
    """Single streaming synthesis session over shared model parameters."""

    def __init__(self, model: MelLanguageModel, cfg: RuntimeConfig):
        if model.cfg.frames_per_step != cfg.schedule.frames_per_step:
            raise ConfigError(
                f"model emits {model.cfg.frames_per_step} frames per step but the "
                f"schedule expects {cfg.schedule.frames_per_step}"
            )
        self.model = model
        self.cfg = cfg
        self.state = model.init_state(cfg.seed)
        self.cursor = ScheduleCursor(cfg.schedule)
        self.text_buffer: Deque[Tuple[int, float]] = deque()
        self.eot_seen = False
        self.started = False
        self.closed = False
        self.stopping: Optional[str] = None
        self.last_hidden: Optional[torch.Tensor] = None
        self.last_step_output: Optional[StepOutput] = None
        self.frames_emitted = 0
        self.text_consumed = 0
        self.clock_ms = 0.0
        self.compute_ms = 0.0
        self.trace: List[TraceRecord] = []

    # ----- clock ---------------------------------------------------------

    def _timed(self, virtual_cost: float, fn):
        """Run one compute section, charging the clock. Returns (out, ms)."""
        if self.cfg.clock_mode == "virtual":
            out = fn()
            elapsed = virtual_cost
        else:
            t0 = time.perf_counter()
            out = fn()
            elapsed = (time.perf_counter() - t0) * 1e3
        self.clock_ms += elapsed
        self.compute_ms += elapsed
        return out, elapsed

    def _record(self, kind: str, n_frames: int = 0, compute_ms: float = 0.0) -> None:
        self.trace.append(
            TraceRecord(
                kind=kind,
                position=self.state.position,
                clock_ms=self.clock_ms,
                compute_ms=compute_ms,
                n_frames=n_frames,
            )
        )

    # ----- event delivery ------------------------------------------------

    def push_event(self, event: StreamEvent) -> None:
        if isinstance(event, TextArrived):
            if self.eot_seen:
                raise TraceIncomplete("text arrived after end-of-text")
            self.text_buffer.append((event.token_id, event.arrival_ms))
        elif isinstance(event, EndOfText):
            self.eot_seen = True
        else:
            raise TypeError(f"unknown event {event!r}")

    # ----- priming --------------------------------------------------------

    def prime(self, prompt: Prompt) -> None:
        """Feed a conditioning prefix through the decoder without emitting.

        The prompt is walked in schedule order with its own frames standing
        in for the model's outputs. If the prompt's tokens run out first,
        its remaining frames are fed as one tail run and the pattern resets
        for upcoming text; if its frames run out first, the surplus tokens
        become already-arrived buffered text and the pattern position is
        carried into generation.
        """
        if self.started:
            raise AlreadyPrimed("stream already primed or stepped")
        self.started = True
        mel = np.asarray(prompt.mel, dtype=np.float32)
        if mel.size == 0:
            mel = mel.reshape(0, self.model.cfg.n_mels)
        if mel.ndim != 2 or mel.shape[1] != self.model.cfg.n_mels:
            raise ShapeError(f"prompt mel must be (T, {self.model.cfg.n_mels})")
        r = self.cfg.schedule.frames_per_step
        if mel.shape[0] % r != 0:
            raise ShapeError(
                f"prompt frame count {mel.shape[0]} must be a multiple of "
                f"frames_per_step {r}"
            )
        tokens = list(prompt.tokens)
        ti = 0
        fi = 0
        total = mel.shape[0]
        with torch.no_grad():
            while fi < total:
                if self.cursor.next_is_text():
                    if ti >= len(tokens):
                        # prompt transcript exhausted: remaining prompt
                        # frames form the tail, then the pattern restarts
                        while fi < total:
                            self._feed_frames(mel[fi : fi + r])
                            fi += r
                        self.cursor = ScheduleCursor(self.cfg.schedule)
                        break
                    self._consume_token(tokens[ti], arrival_ms=0.0)
                    self.cursor.advance_text()
                    ti += 1
                else:
                    self._feed_frames(mel[fi : fi + r])
                    self.cursor.advance_frames(r)
                    fi += r
        for token in tokens[ti:]:
            self.text_buffer.append((token, 0.0))
        self._record("prime")

    def _consume_token(self, token_id: int, arrival_ms: float) -> None:
        self.clock_ms = max(self.clock_ms, arrival_ms)
        x = self.model.embed_text(token_id)
        e, elapsed = self._timed(
            self.cfg.step_cost_ms, lambda: self.model.decode_step(self.state, x)[0]
        )
        self.last_hidden = e
        self.text_consumed += 1
        self._record("consume_text", compute_ms=elapsed)

    def _feed_frames(self, frames: np.ndarray) -> torch.Tensor:
        x = self.model.prenet_frames(torch.from_numpy(np.ascontiguousarray(frames)))
        e, elapsed = self._timed(
            self.cfg.step_cost_ms, lambda: self.model.decode_step(self.state, x)[0]
        )
        self.last_hidden = e
        self._record("feed", compute_ms=elapsed)
        return e

    # ----- generation -----------------------------------------------------

    def _sample_frames(self) -> np.ndarray:
        """Latent draw and post-net projection off the latest hidden state."""
        step = self.model.step_heads(
            self.last_hidden,
            self.state.rng,
            sample_times=self.cfg.sample_times,
            log_var_override=self.cfg.log_var_override,
            sigma_scale=self.cfg.sigma_scale,
        )
        self.last_step_output = step
        return step.frames.detach().cpu().numpy().astype(np.float32)

    def step(self) -> StepResult:
        """Advance to the next observable event.

        Consumes however many due text tokens are buffered (returning
        :class:`NeedText` if the schedule wants one that has not arrived),
        then produces one packet, or reports the stop.
        """
        if self.closed:
            raise StreamClosed("stream already stopped")
        self.started = True
        if self.stopping is not None:
            self.closed = True
            self._record("stop")
            return Stopped(self.stopping)

        with torch.no_grad():
            # consume text while the schedule calls for it
            while self.cursor.next_is_text():
                if not self.text_buffer:
                    if self.eot_seen:
                        self.cursor.mark_text_exhausted()
                        break
                    return NeedText()
                token_id, arrival = self.text_buffer.popleft()
                self._consume_token(token_id, arrival)
                self.cursor.advance_text()

            # a frame step needs one decoder position for the feedback; if
            # the cache is full the stream ends rather than erroring
            if self.state.position >= self.model.cfg.max_positions:
                self.stopping = MAX_LENGTH
                self.closed = True
                self._record("stop")
                return Stopped(MAX_LENGTH)

            if self.last_hidden is None:
                # stream begins with frames: use the begin-of-speech input
                e, elapsed = self._timed(
                    self.cfg.step_cost_ms,
                    lambda: self.model.decode_step(self.state, self.model.first_frame_input())[0],
                )
                self.last_hidden = e
                self._record("bos", compute_ms=elapsed)

            frames, emit_ms = self._timed(self.cfg.emit_cost_ms, self._sample_frames)
            keep = min(len(frames), self.cfg.max_frames - self.frames_emitted)
            emitted = frames[:keep]
            self.frames_emitted += keep
            timestamp = self.clock_ms
            self._record("emit", n_frames=keep, compute_ms=emit_ms)

            # feed the model its own output and read the stop probability
            # at the packet's own position
            if self.state.position < self.model.cfg.max_positions:
                e = self._feed_frames(frames)
                self.cursor.advance_frames(keep)
                stop_prob = float(self.model.stop_head(e))
            else:
                stop_prob = float(self.model.stop_head(self.last_hidden))
                self.stopping = MAX_LENGTH

        # termination is only the stop head's call while the schedule is in
        # a frame phase; when text owns the next slot (a token is buffered
        # or may still arrive) generation continues regardless
        text_owns_next = self.cursor.next_is_text() and (
            bool(self.text_buffer) or not self.eot_seen
        )
        if self.frames_emitted >= self.cfg.max_frames:
            self.stopping = MAX_LENGTH
        elif (
            not text_owns_next
            and stop_prob >= self.cfg.stop_threshold
            and self.frames_emitted >= self.cfg.resolved_min_frames
        ):
            self.stopping = STOP_TOKEN
        return Emitted(frames=emitted, stop_prob=stop_prob, timestamp_ms=timestamp)


def validate_events(events: Sequence[StreamEvent]) -> None:
    if not events or not isinstance(events[-1], EndOfText):
        raise TraceIncomplete("event trace must end with EndOfText")
    if sum(1 for e in events if isinstance(e, EndOfText)) != 1:
        raise TraceIncomplete("event trace must contain exactly one EndOfText")
    times = [e.arrival_ms for e in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("event arrival times must be nondecreasing")


def synthesize(
    events: Sequence[StreamEvent], cfg: RuntimeConfig, model: MelLanguageModel
) -> SynthesisOutput:
    """Run a full synthesis over a complete event trace.

    The virtual clock waits on token arrival times, so first-packet
    latency falls directly out of the returned timestamps and trace.
    """
    validate_events(events)
    stream = SynthesisStream(model, cfg)
    if cfg.prompt is not None:
        stream.prime(cfg.prompt)
    for event in events:
        stream.push_event(event)

    chunks: List[np.ndarray] = []
    stamps: List[float] = []
    while True:
        result = stream.step()
        if isinstance(result, Emitted):
            if len(result.frames):
                chunks.append(result.frames)
                stamps.extend([result.timestamp_ms] * len(result.frames))
        elif isinstance(result, Stopped):
            reason = result.reason
            break
        else:  # NeedText cannot happen on a complete trace
            raise TraceIncomplete("schedule demanded text beyond the trace")

    if chunks:
        frames = np.concatenate(chunks, axis=0)
    else:
        frames = np.empty((0, model.cfg.n_mels), dtype=np.float32)
    return SynthesisOutput(
        frames=frames,
        timestamps_ms=np.asarray(stamps, dtype=np.float64),
        stop_reason=reason,
        trace=stream.trace,
    )
