"""Interleaving schedule: how text tokens and mel frames share one sequence.

The joint input sequence repeats a fixed pattern of ``tokens_per_group``
text tokens followed by ``frames_per_group`` mel frames. Once the text is
exhausted, all remaining mel frames follow in one tail run. Everything
downstream (training targets, streaming step order, the closed-form
position map) is derived from this one construction, so this module also
carries the constructive oracle that the closed form is checked against.

All functions here are pure and operate on immutable inputs; they are safe
to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

from .errors import InvalidReduction, TextOverrun

IGNORE = -1  # target slot with no frame to predict (fill or terminal)


@dataclass(frozen=True)
class ScheduleConfig:
    """Interleaving pattern: tokens_per_group text tokens, then
    frames_per_group mel frames, with frames_per_step frames emitted per
    decoding step."""

    tokens_per_group: int = 1
    frames_per_group: int = 4
    frames_per_step: int = 1

    def __post_init__(self) -> None:
        if self.tokens_per_group < 1:
            raise ValueError("tokens_per_group must be >= 1")
        if self.frames_per_group < 1:
            raise ValueError("frames_per_group must be >= 1")
        if self.frames_per_step < 1:
            raise ValueError("frames_per_step must be >= 1")
        if self.frames_per_group % self.frames_per_step != 0:
            raise InvalidReduction(
                f"frames_per_step={self.frames_per_step} must divide "
                f"frames_per_group={self.frames_per_group}"
            )


@dataclass(frozen=True)
class SequenceElement:
    """One slot of the interleaved sequence.

    ``kind`` is "text" (``index`` is the token id) or "mel" (``index`` is
    the frame index). Fill markers never appear in the input sequence; they
    are realized as ignored target slots in :class:`TrainingTargets`.
    """

    kind: str
    index: int


@dataclass
class InterleavedSeq:
    """Interleaved sequence over ``text_len`` tokens and ``mel_len`` frames.

    Internally stored as an int32 code array: text token ``tok`` is encoded
    as ``-(tok + 1)``, mel frame ``t`` as ``t``. This keeps the exhaustive
    position-map check cheap while the element API stays convenient.
    """

    codes: np.ndarray
    text_len: int
    mel_len: int

    def __len__(self) -> int:
        return len(self.codes)

    def __getitem__(self, position: int) -> SequenceElement:
        code = int(self.codes[position])
        if code < 0:
            return SequenceElement("text", -code - 1)
        return SequenceElement("mel", code)

    def __iter__(self) -> Iterator[SequenceElement]:
        for code in self.codes:
            c = int(code)
            yield SequenceElement("text", -c - 1) if c < 0 else SequenceElement("mel", c)

    @property
    def elements(self) -> List[SequenceElement]:
        return list(self)

    def mel_positions(self) -> np.ndarray:
        """Position of each mel frame, in frame order (codes are built in
        frame order, so nonzero scan order matches frame index)."""
        return np.nonzero(self.codes >= 0)[0]

    def text_positions(self) -> np.ndarray:
        return np.nonzero(self.codes < 0)[0]


def build_interleaved(
    tokens: Sequence[int], mel_len: int, cfg: ScheduleConfig
) -> InterleavedSeq:
    """Construct the interleaved sequence for one utterance.

    Repeats [tokens_per_group text, frames_per_group mel] while both
    modalities remain; the final text group may be short; once text is
    exhausted every remaining frame is appended. Raises
    :class:`TextOverrun` when the frames cannot host all text groups or
    when the sequence would end on a text token (training sequences must
    end in mel).
    """
    n = cfg.tokens_per_group
    m = cfg.frames_per_group
    text_len = len(tokens)
    if mel_len < 1:
        raise ValueError("mel_len must be >= 1")

    parts: List[np.ndarray] = []
    ti = 0
    mi = 0
    while ti < text_len:
        take = min(n, text_len - ti)
        parts.append(-(np.asarray(tokens[ti : ti + take], dtype=np.int32) + 1))
        ti += take
        if ti < text_len:
            # another text group follows, so a full mel group is required
            if mel_len - mi < m:
                raise TextOverrun(
                    f"{text_len - ti} text tokens left but only "
                    f"{mel_len - mi} mel frames remain"
                )
            parts.append(np.arange(mi, mi + m, dtype=np.int32))
            mi += m
        elif mi >= mel_len:
            raise TextOverrun("sequence would end on a text token")
    parts.append(np.arange(mi, mel_len, dtype=np.int32))

    codes = np.concatenate(parts) if parts else np.empty(0, dtype=np.int32)
    return InterleavedSeq(codes=codes.astype(np.int32), text_len=text_len, mel_len=mel_len)


def mel_positions_oracle(text_len: int, mel_len: int, cfg: ScheduleConfig) -> np.ndarray:
    """Constructive positions of every mel frame, by simulating the
    group-by-group interleave with running counters.

    Kept free of the closed-form arithmetic on purpose: this is the
    reference the closed form is validated against.
    """
    n = cfg.tokens_per_group
    m = cfg.frames_per_group
    parts: List[np.ndarray] = []
    ti = 0
    mi = 0
    pos = 0
    while ti < text_len:
        take = min(n, text_len - ti)
        ti += take
        pos += take
        if ti < text_len:
            if mel_len - mi < m:
                raise TextOverrun("mel frames exhausted while text remains")
            parts.append(np.arange(pos, pos + m, dtype=np.int64))
            mi += m
            pos += m
        elif mi >= mel_len:
            raise TextOverrun("sequence would end on a text token")
    parts.append(np.arange(pos, pos + (mel_len - mi), dtype=np.int64))
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def position_of_frame(
    t: int, text_len: int, cfg: ScheduleConfig, *, printed_form: bool = False
) -> int:
    """Index of mel frame ``t`` in the interleaved sequence (closed form).

    The default form is ``t + min((t // m + 1) * n, L)``: frame t sits after
    every text group that precedes its mel group, and the min() caps the
    text at L once tokens are exhausted (covering a short final group).

    ``printed_form=True`` selects the variant that counts only completed
    groups, ``t + (t // m) * n`` while that is below L. For text-first
    layouts it places frame 0 before the first token, so it exists purely
    for comparison; see the oracle-equivalence tests.
    """
    if t < 0:
        raise ValueError("frame index must be >= 0")
    n = cfg.tokens_per_group
    m = cfg.frames_per_group
    group = t // m
    if printed_form:
        consumed = group * n
        return t + consumed if consumed < text_len else t + text_len
    return t + min((group + 1) * n, text_len)


def frame_positions(text_len: int, mel_len: int, cfg: ScheduleConfig) -> np.ndarray:
    """Vectorized closed-form positions for frames 0..mel_len-1."""
    t = np.arange(mel_len, dtype=np.int64)
    n = cfg.tokens_per_group
    m = cfg.frames_per_group
    return t + np.minimum((t // m + 1) * n, text_len)


@dataclass
class TrainingTargets:
    """Per-position prediction targets for a teacher-forced pass.

    ``target_frame[p]`` is the frame index position p must predict, or
    ``IGNORE`` when the successor is a text token (fill) or p is terminal.
    ``stop_labels`` is 1 exactly at the final mel frame's position.
    ``loss_mask`` is True exactly where a frame is predicted.
    """

    target_frame: np.ndarray
    stop_labels: np.ndarray
    loss_mask: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.loss_mask = self.target_frame != IGNORE


def build_training_targets(seq: InterleavedSeq) -> TrainingTargets:
    """Targets for one interleaved sequence.

    Position p predicts the element at p+1 when that element is a mel
    frame; positions whose successor is text are fills and carry no
    target. The last position (always the final mel frame, by
    construction) carries the stop label and predicts nothing.
    """
    codes = seq.codes
    length = len(codes)
    target = np.full(length, IGNORE, dtype=np.int64)
    successors = codes[1:]
    target[:-1] = np.where(successors >= 0, successors, IGNORE)
    stop = np.zeros(length, dtype=np.uint8)
    stop[-1] = 1
    return TrainingTargets(target_frame=target, stop_labels=stop)


@dataclass(frozen=True)
class Step:
    """One streaming step: consume ``count`` text tokens or emit ``count``
    frames (count < frames_per_step only on the final padded step)."""

    kind: str  # "text" | "frames"
    count: int


class ScheduleCursor:
    """Tracks progress through the repeating n-text / m-frames pattern.

    The streaming runtime drives one cursor per stream and only ever asks
    whether the next element is text or frames. Once the text stream is
    declared exhausted the cursor stays in the frames phase forever (the
    tail rule), even if that cuts a text group short.
    """

    def __init__(self, cfg: ScheduleConfig) -> None:
        self.cfg = cfg
        self.phase = "text"
        self.in_phase = 0
        self.text_done = False

    def next_is_text(self) -> bool:
        return self.phase == "text" and not self.text_done

    def mark_text_exhausted(self) -> None:
        self.text_done = True
        if self.phase == "text":
            self.phase = "frames"
            self.in_phase = 0

    def advance_text(self) -> None:
        assert self.phase == "text" and not self.text_done
        self.in_phase += 1
        if self.in_phase >= self.cfg.tokens_per_group:
            self.phase = "frames"
            self.in_phase = 0

    def advance_frames(self, count: int) -> None:
        assert self.phase == "frames"
        self.in_phase += count
        if not self.text_done and self.in_phase >= self.cfg.frames_per_group:
            self.phase = "text"
            self.in_phase = 0


def plan_steps(text_len: int, mel_len: int, cfg: ScheduleConfig) -> List[Step]:
    """Expand the schedule into an ordered step list for a known length.

    Every mel group becomes frames_per_group / frames_per_step emit steps;
    the tail run is chunked the same way and its final step may be short.
    Raises :class:`TextOverrun` for pairs the interleave cannot host.
    """
    if mel_len < 1:
        raise ValueError("mel_len must be >= 1")
    r = cfg.frames_per_step
    steps: List[Step] = []
    cursor = ScheduleCursor(cfg)
    consumed = 0
    emitted = 0
    if text_len == 0:
        cursor.mark_text_exhausted()
    while emitted < mel_len or consumed < text_len:
        if cursor.next_is_text():
            take = min(cfg.tokens_per_group - cursor.in_phase, text_len - consumed)
            steps.append(Step("text", take))
            for _ in range(take):
                cursor.advance_text()
            consumed += take
            if consumed >= text_len:
                cursor.mark_text_exhausted()
        else:
            if emitted >= mel_len:
                raise TextOverrun("mel frames exhausted while text remains")
            count = min(r, mel_len - emitted)
            steps.append(Step("frames", count))
            cursor.advance_frames(count)
            emitted += count
    if steps and steps[-1].kind == "text":
        raise TextOverrun("sequence would end on a text token")
    return steps


@dataclass(frozen=True)
class GroupedPosition:
    """One decoder position: a single text token or a run of up to
    frames_per_step consecutive frame indices."""

    kind: str  # "text" | "frames"
    token_id: Optional[int] = None
    frame_indices: Optional[np.ndarray] = None


def grouped_positions(seq: InterleavedSeq, frames_per_step: int) -> List[GroupedPosition]:
    """Collapse an interleaved sequence into decoder positions.

    Text tokens stay one per position; each run of mel frames is chunked
    into groups of ``frames_per_step`` (the group size divides the pattern
    size, so only the tail run can leave a short final chunk).
    """
    out: List[GroupedPosition] = []
    codes = seq.codes
    i = 0
    length = len(codes)
    while i < length:
        code = int(codes[i])
        if code < 0:
            out.append(GroupedPosition("text", token_id=-code - 1))
            i += 1
        else:
            j = i
            while j < length and codes[j] >= 0:
                j += 1
            run = codes[i:j]
            for k in range(0, len(run), frames_per_step):
                chunk = run[k : k + frames_per_step]
                out.append(GroupedPosition("frames", frame_indices=chunk.astype(np.int64)))
            i = j
    return out
