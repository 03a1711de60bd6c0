"""Training loop mechanics on a miniature problem."""

import json

import numpy as np
import pytest
import torch

from weavetts.config import config_from_dict
from weavetts.model import load_model
from weavetts.schedule import ScheduleConfig
from weavetts.synthdata import generate_corpus
from weavetts.train import (
    batch_inputs,
    batch_loss,
    collate,
    evaluate,
    pack_utterance,
    stop_eligible_positions,
    synthesis_scores,
    train,
)

TINY_RAW = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "n_mels": 4,
              "d_latent": 4, "vocab_size": 8, "max_positions": 128},
    "schedule": {"tokens_per_group": 1, "frames_per_group": 2},
    "corpus": {"vocab_size": 8, "n_mels": 4, "frames_per_token": 2,
               "n_utterances": 60, "min_tokens": 2, "max_tokens": 4,
               "speaker_count": 2, "noise_std": 0.02, "seed": 3},
    "training": {"batch_size": 16, "max_steps": 60, "eval_interval": 30,
                 "warmup_steps": 10, "seed": 1},
}


@pytest.fixture(scope="module")
def tiny():
    cfg = config_from_dict(TINY_RAW)
    corpus = generate_corpus(cfg.corpus)
    return cfg, corpus


class TestPacking:
    def test_pack_shapes(self, tiny):
        cfg, corpus = tiny
        utt = corpus.train[0]
        packed = pack_utterance(utt, cfg.schedule, cfg.model.n_mels)
        text_positions = int((packed.token_ids >= 0).sum())
        assert text_positions == len(utt.tokens)
        assert packed.seq_len == len(utt.tokens) + utt.mel.shape[0] // 1
        assert int(packed.stop_labels.sum()) == 1
        assert bool(packed.stop_labels[-1] == 1)

    def test_every_frame_targeted_once(self, tiny):
        cfg, corpus = tiny
        for utt in corpus.train[:5]:
            packed = pack_utterance(utt, cfg.schedule, cfg.model.n_mels)
            assert sorted(packed.scatter_frame.tolist()) == list(range(utt.mel.shape[0]))

    def test_packing_with_reduction(self, tiny):
        cfg, corpus = tiny
        schedule = ScheduleConfig(tokens_per_group=1, frames_per_group=2,
                                  frames_per_step=2)
        utt = corpus.train[0]
        packed = pack_utterance(utt, schedule, cfg.model.n_mels)
        assert packed.seq_len == len(utt.tokens) + utt.mel.shape[0] // 2
        assert sorted(packed.scatter_frame.tolist()) == list(range(utt.mel.shape[0]))

    def test_stop_eligible_positions(self, tiny):
        cfg, corpus = tiny
        packed = pack_utterance(corpus.train[0], cfg.schedule, cfg.model.n_mels)
        eligible = stop_eligible_positions(packed)
        # the final position is always eligible; positions right before a
        # text token never are
        assert bool(eligible[-1])
        nxt_text = (packed.token_ids >= 0).roll(-1)
        nxt_text[-1] = False
        assert not bool((eligible & nxt_text).any())

    def test_masked_loss_matches_unpadded(self, tiny):
        # padding an utterance into a larger batch must not change its loss
        cfg, corpus = tiny
        from weavetts.model import MelLanguageModel

        model = MelLanguageModel(cfg.model, seed=0)
        short = pack_utterance(corpus.train[0], cfg.schedule, cfg.model.n_mels)
        long = pack_utterance(
            max(corpus.train[:10], key=lambda u: u.mel.shape[0]),
            cfg.schedule, cfg.model.n_mels,
        )
        alone = collate([short])
        padded = collate([short, long])
        with torch.no_grad():
            _, b_alone, _ = batch_loss(model, alone, cfg.weights, noise=None)
        # evaluate only the first row of the padded batch by re-collating
        # with the same max length
        with torch.no_grad():
            inputs = batch_inputs(model, padded)
            hidden = model.full_forward(inputs)
        # teacher-forced hidden states for the short row agree with the
        # unpadded run over its real positions (padding sits after, and
        # causal masking keeps it invisible)
        with torch.no_grad():
            hidden_alone = model.full_forward(batch_inputs(model, alone))
        s = short.seq_len
        assert (hidden[0, :s] - hidden_alone[0, :s]).abs().max().item() < 1e-5


class TestTrainLoop:
    def test_loss_decreases_and_logs(self, tiny, tmp_path):
        cfg, corpus = tiny
        result = train(cfg, corpus, tmp_path / "run")
        assert result.steps_run == 60
        assert result.history[0]["step"] == 0
        assert result.history[-1]["val_reg"] < result.history[0]["val_reg"]

        log_lines = (tmp_path / "run" / "training_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 61  # header + one record per step
        header = json.loads(log_lines[0])
        assert "config_hash" in header
        record = json.loads(log_lines[1])
        for key in ("step", "reg_l1", "reg_l2", "kl", "flux", "stop", "total"):
            assert key in record

    def test_checkpoint_loadable(self, tiny, tmp_path):
        cfg, corpus = tiny
        result = train(cfg, corpus, tmp_path / "run2")
        model = load_model(result.checkpoint_path, expect=cfg.model)
        ev = evaluate(model, [pack_utterance(u, cfg.schedule, cfg.model.n_mels)
                              for u in corpus.val], cfg.weights, 16)
        assert np.isfinite(ev.reg)

    def test_training_is_reproducible(self, tiny, tmp_path):
        cfg, corpus = tiny
        a = train(cfg, corpus, tmp_path / "a")
        b = train(cfg, corpus, tmp_path / "b")
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)
        assert a.history == b.history

    def test_stop_condition_halts(self, tiny, tmp_path):
        cfg, corpus = tiny
        result = train(cfg, corpus, tmp_path / "run3",
                       stop_condition=lambda history: len(history) >= 2)
        assert result.steps_run == 30

    def test_synthesis_scores_run(self, tiny, tmp_path):
        cfg, corpus = tiny
        result = train(cfg, corpus, tmp_path / "run4")
        scores = synthesis_scores(result.model, corpus, cfg, corpus.val[:4])
        assert 0.0 <= scores["template_accuracy"] <= 1.0
        assert scores["frame_mse_median"] >= 0.0

    def test_nan_aborts_with_snapshot(self, tiny, tmp_path):
        import copy

        from weavetts.errors import NonFiniteLoss

        cfg, corpus = tiny
        poisoned = copy.deepcopy(corpus)
        for utt in poisoned.train:
            utt.mel[0, 0] = np.nan
        with pytest.raises(NonFiniteLoss):
            train(cfg, poisoned, tmp_path / "nan_run")
        snapshot = tmp_path / "nan_run" / "diagnostic_snapshot.json"
        assert snapshot.exists()
        payload = json.loads(snapshot.read_text())
        assert payload["failed_step"] >= 1
