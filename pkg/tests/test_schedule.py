"""Schedule construction, the position map, and its constructive oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weavetts.errors import InvalidReduction, TextOverrun
from weavetts.schedule import (
    IGNORE,
    ScheduleConfig,
    ScheduleCursor,
    build_interleaved,
    build_training_targets,
    frame_positions,
    grouped_positions,
    mel_positions_oracle,
    plan_steps,
    position_of_frame,
)


def cfg(n=1, m=4, r=1):
    return ScheduleConfig(tokens_per_group=n, frames_per_group=m, frames_per_step=r)


def as_tags(seq):
    return [(e.kind, e.index) for e in seq]


class TestBuildInterleaved:
    def test_ratio_one_to_four(self):
        # x=[x0,x1], T=10 with a 1:4 pattern
        seq = build_interleaved([7, 9], 10, cfg(n=1, m=4))
        expected = (
            [("text", 7)]
            + [("mel", t) for t in range(4)]
            + [("text", 9)]
            + [("mel", t) for t in range(4, 10)]
        )
        assert as_tags(seq) == expected

    def test_pure_mel(self):
        seq = build_interleaved([], 3, cfg(n=1, m=2))
        assert as_tags(seq) == [("mel", 0), ("mel", 1), ("mel", 2)]

    def test_text_overrun(self):
        with pytest.raises(TextOverrun):
            build_interleaved([1, 2, 3], 2, cfg(n=2, m=3))

    def test_ends_on_text_is_overrun(self):
        # all tokens fit but the last one would have no frames after it
        with pytest.raises(TextOverrun):
            build_interleaved([1, 2], 4, cfg(n=1, m=4))

    def test_short_final_text_group(self):
        seq = build_interleaved([1, 2, 3], 8, cfg(n=2, m=2))
        assert as_tags(seq) == [
            ("text", 1),
            ("text", 2),
            ("mel", 0),
            ("mel", 1),
            ("text", 3),
            ("mel", 2),
            ("mel", 3),
            ("mel", 4),
            ("mel", 5),
            ("mel", 6),
            ("mel", 7),
        ]

    def test_length_is_text_plus_mel(self):
        seq = build_interleaved(list(range(4)), 16, cfg(n=1, m=4))
        assert len(seq) == 20


class TestPositionOfFrame:
    def test_first_frame_after_first_token(self):
        assert position_of_frame(0, 2, cfg(n=1, m=2)) == 1

    def test_later_frame(self):
        assert position_of_frame(4, 2, cfg(n=1, m=2)) == 6

    def test_no_text_is_identity(self):
        assert position_of_frame(5, 0, cfg(n=1, m=4)) == 5

    def test_printed_form_places_frame_zero_before_text(self):
        # the variant that counts only completed groups puts y0 at index 0
        # even when a token precedes it; kept only for comparison
        assert position_of_frame(0, 2, cfg(n=1, m=2), printed_form=True) == 0
        assert position_of_frame(0, 2, cfg(n=1, m=2)) == 1

    def test_matches_element_oracle_small_sweep(self):
        for n in range(1, 5):
            for m in range(1, 5):
                for text_len in range(0, 9):
                    for mel_len in range(1, 33):
                        c = cfg(n=n, m=m)
                        try:
                            seq = build_interleaved(list(range(text_len)), mel_len, c)
                        except TextOverrun:
                            continue
                        positions = seq.mel_positions()
                        for t in range(mel_len):
                            assert position_of_frame(t, text_len, c) == positions[t]

    def test_vectorized_matches_scalar(self):
        c = cfg(n=3, m=2)
        vec = frame_positions(7, 20, c)
        for t in range(20):
            assert vec[t] == position_of_frame(t, 7, c)


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 8),
    m=st.integers(1, 8),
    text_len=st.integers(0, 32),
    mel_len=st.integers(1, 128),
)
def test_interleave_properties(n, m, text_len, mel_len):
    c = cfg(n=n, m=m)
    try:
        seq = build_interleaved(list(range(100, 100 + text_len)), mel_len, c)
    except TextOverrun:
        return
    tags = as_tags(seq)
    # permutation: both modalities appear exactly once each, order preserved
    assert [v for k, v in tags if k == "text"] == list(range(100, 100 + text_len))
    assert [v for k, v in tags if k == "mel"] == list(range(mel_len))
    assert len(tags) == text_len + mel_len
    # sequences always end on a mel frame
    assert tags[-1][0] == "mel"
    # monotonicity of the position map
    positions = [position_of_frame(t, text_len, c) for t in range(mel_len)]
    assert all(a < b for a, b in zip(positions, positions[1:]))
    # closed form against the group-level constructive oracle
    assert np.array_equal(mel_positions_oracle(text_len, mel_len, c), positions)
    assert np.array_equal(frame_positions(text_len, mel_len, c), positions)


class TestTrainingTargets:
    def test_minimal_sequence(self):
        seq = build_interleaved([5], 2, cfg(n=1, m=4))
        targets = build_training_targets(seq)
        assert list(targets.target_frame) == [0, 1, IGNORE]
        assert list(targets.stop_labels) == [0, 0, 1]
        assert list(targets.loss_mask) == [True, True, False]

    def test_fill_before_text(self):
        # [x0, y0, x1, y1]: y0's position predicts nothing (successor is text)
        seq = build_interleaved([0, 1], 2, cfg(n=1, m=1))
        targets = build_training_targets(seq)
        assert list(targets.target_frame) == [0, IGNORE, 1, IGNORE]
        assert list(targets.stop_labels) == [0, 0, 0, 1]

    def test_fill_count_for_one_to_four(self):
        seq = build_interleaved([0, 1], 8, cfg(n=1, m=4))
        targets = build_training_targets(seq)
        # one fill before the second token, plus the terminal position
        ignored = np.flatnonzero(targets.target_frame == IGNORE)
        assert len(ignored) == 2
        assert ignored[-1] == len(seq) - 1

    def test_target_coverage(self):
        for n, m, text_len, mel_len in [(1, 4, 3, 12), (2, 3, 5, 30), (1, 1, 2, 9)]:
            seq = build_interleaved(list(range(text_len)), mel_len, cfg(n=n, m=m))
            targets = build_training_targets(seq)
            covered = targets.target_frame[targets.target_frame != IGNORE]
            # every frame is predicted exactly once, frame 0 from the
            # position just before it
            assert sorted(covered) == list(range(mel_len))
            assert int(targets.stop_labels.sum()) == 1
            assert targets.stop_labels[-1] == 1

    def test_pure_mel_coverage(self):
        # with no text there is no position before frame 0
        seq = build_interleaved([], 5, cfg())
        targets = build_training_targets(seq)
        covered = targets.target_frame[targets.target_frame != IGNORE]
        assert sorted(covered) == list(range(1, 5))


class TestPlanSteps:
    def test_single_group(self):
        steps = plan_steps(1, 4, cfg(n=1, m=4, r=2))
        assert [(s.kind, s.count) for s in steps] == [
            ("text", 1),
            ("frames", 2),
            ("frames", 2),
        ]

    def test_full_expansion(self):
        steps = plan_steps(2, 10, cfg(n=1, m=4, r=1))
        kinds = [s.kind for s in steps]
        assert kinds.count("text") == 2
        assert kinds.count("frames") == 10
        assert kinds == ["text"] + ["frames"] * 4 + ["text"] + ["frames"] * 6

    def test_padded_tail(self):
        steps = plan_steps(1, 10, cfg(n=1, m=4, r=4))
        frame_steps = [s for s in steps if s.kind == "frames"]
        assert len(frame_steps) == 3  # ceil(10 / 4)
        assert [s.count for s in frame_steps] == [4, 4, 2]

    def test_invalid_reduction(self):
        with pytest.raises(InvalidReduction):
            cfg(n=1, m=4, r=3)

    def test_step_accounting(self):
        for n, m, r, text_len, mel_len in [
            (1, 4, 2, 3, 16),
            (2, 6, 3, 5, 30),
            (1, 2, 1, 4, 11),
        ]:
            steps = plan_steps(text_len, mel_len, cfg(n=n, m=m, r=r))
            assert sum(s.count for s in steps if s.kind == "text") == text_len
            assert sum(s.count for s in steps if s.kind == "frames") == mel_len
            n_frame_steps = sum(1 for s in steps if s.kind == "frames")
            assert n_frame_steps == -(-mel_len // r)

    def test_matches_interleave_validity(self):
        for n in range(1, 5):
            for m in range(1, 5):
                for text_len in range(0, 7):
                    for mel_len in range(1, 25):
                        c = cfg(n=n, m=m)
                        build_raised = plan_raised = False
                        try:
                            build_interleaved(list(range(text_len)), mel_len, c)
                        except TextOverrun:
                            build_raised = True
                        try:
                            plan_steps(text_len, mel_len, c)
                        except TextOverrun:
                            plan_raised = True
                        assert build_raised == plan_raised, (n, m, text_len, mel_len)


class TestGroupedPositions:
    def test_groups_match_plan(self):
        c = cfg(n=1, m=4, r=2)
        seq = build_interleaved([3, 8], 10, c)
        groups = grouped_positions(seq, 2)
        kinds = [g.kind for g in groups]
        plan = plan_steps(2, 10, c)
        assert kinds == [s.kind for s in plan]
        frame_groups = [g for g in groups if g.kind == "frames"]
        flat = np.concatenate([g.frame_indices for g in frame_groups])
        assert list(flat) == list(range(10))

    def test_short_tail_chunk(self):
        seq = build_interleaved([0], 5, cfg(n=1, m=4, r=2))
        groups = grouped_positions(seq, 2)
        counts = [len(g.frame_indices) for g in groups if g.kind == "frames"]
        assert counts == [2, 2, 1]


class TestScheduleCursor:
    def test_tail_rule_engages_mid_group(self):
        cursor = ScheduleCursor(cfg(n=3, m=2))
        assert cursor.next_is_text()
        cursor.advance_text()
        cursor.mark_text_exhausted()
        assert not cursor.next_is_text()
        cursor.advance_frames(2)
        assert not cursor.next_is_text()

    def test_pattern_repeats(self):
        cursor = ScheduleCursor(cfg(n=2, m=2))
        cursor.advance_text()
        cursor.advance_text()
        assert not cursor.next_is_text()
        cursor.advance_frames(2)
        assert cursor.next_is_text()
