"""Acceptance suite: one test per release criterion, at full budget.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS line per
criterion. The trained-model criteria share a single convergence run via
the module-scoped fixture.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from weavetts.bench import FPL_A, FPL_L, LatencySpec, run_bench
from weavetts.checks import (
    check_cache_equivalence,
    check_checkpoint_round_trip,
    check_determinism_replay,
    check_grad_full_objective,
    check_kl_monte_carlo,
    check_schedule_oracle,
)
from weavetts.cli import main
from weavetts.config import default_config
from weavetts.loss import LossWeights, combine_components, total_loss
from weavetts.melfile import write_melf
from weavetts.model import LatentParams, MelLanguageModel, ModelConfig, load_model
from weavetts.runtime import EndOfText, RuntimeConfig, TextArrived, synthesize
from weavetts.schedule import ScheduleConfig
from weavetts.synthdata import generate_corpus
from weavetts.train import synthesis_scores, train


def report(criterion: str, detail: str) -> None:
    print(f"\n[PASS] {criterion}: {detail}")


# ----- shared trained model (criteria 6, 8, 9) ---------------------------


@pytest.fixture(scope="module")
def trained():
    cfg = default_config()
    corpus = generate_corpus(cfg.corpus)

    def converged(history):
        first, last = history[0], history[-1]
        return (
            last["val_reg"] < 0.10 * first["val_reg"]
            and last["stop_accuracy"] >= 0.95
        )

    start = time.monotonic()
    result = train(cfg, corpus, "/tmp/weavetts_acceptance", stop_condition=converged)
    elapsed = time.monotonic() - start
    return cfg, corpus, result, elapsed


# ----- criteria -----------------------------------------------------------


def test_criterion_01_schedule_oracle_equivalence():
    start = time.monotonic()
    result = check_schedule_oracle(n_max=8, m_max=8, l_max=32, t_max=256)
    elapsed = time.monotonic() - start
    assert result.ok, result.detail
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    report("criterion 1 (schedule oracle equivalence)",
           f"{result.detail} in {elapsed:.1f}s")


def test_criterion_02_cache_equivalence():
    start = time.monotonic()
    result = check_cache_equivalence(n_sequences=100, max_len=64, tolerance=1e-5)
    elapsed = time.monotonic() - start
    assert result.ok, result.detail
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    report("criterion 2 (cache equivalence)", f"{result.detail} in {elapsed:.1f}s")


def test_criterion_03_causality_no_lookahead():
    # model level: mutate suffixes of a forward pass, prefixes must be
    # bit-identical
    cfg = ModelConfig(d_model=48, n_layers=2, n_heads=4, d_ff=96, n_mels=8,
                      d_latent=8, vocab_size=16, max_positions=128,
                      frames_per_step=1)
    model = MelLanguageModel(cfg, seed=0)
    g = torch.Generator().manual_seed(42)
    violations = 0
    for trial in range(50):
        length = int(torch.randint(4, 32, (1,), generator=g))
        inputs = torch.randn(length, cfg.d_model, generator=g)
        base = model.full_forward(inputs)
        cut = int(torch.randint(1, length, (1,), generator=g))
        mutated = inputs.clone()
        mutated[cut:] = torch.randn(length - cut, cfg.d_model, generator=g)
        out = model.full_forward(mutated)
        if not torch.equal(out[:cut], base[:cut]):
            violations += 1

    # stream level: later text events must not affect earlier packets
    schedule = ScheduleConfig(tokens_per_group=1, frames_per_group=4, frames_per_step=1)
    for trial in range(50):
        seed = 1000 + trial
        tokens = torch.randint(0, 16, (6,), generator=g).tolist()
        run_cfg = RuntimeConfig(schedule=schedule, max_frames=40, seed=seed)

        def run(toks):
            events = [TextArrived(t, 5.0 * i) for i, t in enumerate(toks)]
            events.append(EndOfText(5.0 * len(toks)))
            return synthesize(events, run_cfg, model)

        cut = int(torch.randint(1, 5, (1,), generator=g))
        full = run(tokens)
        mutated_tokens = tokens[:cut] + [(t + 7) % 16 for t in tokens[cut:]]
        mutated = run(mutated_tokens)
        withheld = run(tokens[:cut])
        # frames emitted before the (cut+1)-th token is consumed
        prefix = 0
        consumed = 0
        for rec in full.trace:
            if rec.kind == "consume_text":
                consumed += 1
                if consumed > cut:
                    break
            elif rec.kind == "emit":
                prefix += rec.n_frames
        if full.frames[:prefix].tobytes() != mutated.frames[:prefix].tobytes():
            violations += 1
        if full.frames[:prefix].tobytes() != withheld.frames[:prefix].tobytes():
            violations += 1

    assert violations == 0
    report("criterion 3 (causality / no lookahead)",
           "100 randomized trials, zero violations")


def test_criterion_04_loss_correctness():
    mc = check_kl_monte_carlo(draws=100, samples=1_000_000, rel_tol=0.02)
    assert mc.ok, mc.detail

    weights = LossWeights()
    assert (weights.reg_weight, weights.kl_weight, weights.flux_weight,
            weights.stop_weight) == (2.0, 0.05, 1.0, 0.5)
    assert combine_components(0.6, 0.4, 2.0, 0.5, 0.2, weights) == pytest.approx(
        2.70, abs=1e-12
    )

    # exact weighted-sum identity and masked-content invariance on random
    # inputs
    g = torch.Generator().manual_seed(8)
    pred = torch.randn(12, 8, generator=g)
    target = torch.randn(12, 8, generator=g)
    mask = torch.rand(12, generator=g) < 0.7
    mask[0] = True
    latent = LatentParams(mu=torch.randn(12, 4, generator=g),
                          log_var=torch.randn(12, 4, generator=g))
    stop_logits = torch.randn(12, generator=g)
    stop_labels = torch.zeros(12)
    stop_labels[-1] = 1.0
    _, breakdown = total_loss(pred, target, mask, latent, mask,
                              stop_logits, stop_labels, weights)
    assert breakdown.total == combine_components(
        breakdown.reg_l1, breakdown.reg_l2, breakdown.kl, breakdown.flux,
        breakdown.stop, weights,
    )

    hidden = ~mask
    pred2, target2 = pred.clone(), target.clone()
    pred2[hidden], target2[hidden] = 123.0, -55.0
    latent2 = LatentParams(mu=latent.mu.clone(), log_var=latent.log_var.clone())
    latent2.mu[hidden] = 77.0
    _, after = total_loss(pred2, target2, mask, latent2, mask,
                          stop_logits, stop_labels, weights)
    assert breakdown.as_dict() == after.as_dict()
    report("criterion 4 (loss correctness)",
           f"{mc.detail}; weighted sum exact; masked content inert")


def test_criterion_05_gradient_check():
    start = time.monotonic()
    result = check_grad_full_objective(coords=200, tolerance=1e-3)
    elapsed = time.monotonic() - start
    assert result.ok, result.detail
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    report("criterion 5 (gradient check)", f"{result.detail} in {elapsed:.1f}s")


def test_criterion_06_toy_learning(trained):
    cfg, corpus, result, elapsed = trained
    first = result.history[0]
    last = result.history[-1]
    assert result.steps_run <= 5000
    assert last["val_reg"] < 0.10 * first["val_reg"], (
        f"val_reg {last['val_reg']:.4f} vs initial {first['val_reg']:.4f}"
    )
    assert last["stop_accuracy"] >= 0.95
    assert elapsed < 900.0, f"training took {elapsed:.0f}s"

    model = load_model(result.checkpoint_path, expect=cfg.model)
    scores = synthesis_scores(model, corpus, cfg, corpus.val[:200], seed=123)
    assert scores["template_accuracy"] >= 0.80, scores
    report(
        "criterion 6 (toy learning)",
        f"val_reg {last['val_reg']:.4f} ({last['val_reg'] / first['val_reg']:.1%} "
        f"of initial) at step {result.steps_run}, stop accuracy "
        f"{last['stop_accuracy']:.3f}, free-running template accuracy "
        f"{scores['template_accuracy']:.3f}, trained in {elapsed:.0f}s",
    )


def test_criterion_07_latency_accounting():
    step_cost, emit_cost, llm_delay = 5.0, 1.0, 25.0
    model_cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, n_mels=4,
                            d_latent=8, vocab_size=16, max_positions=512,
                            frames_per_step=1)
    model = MelLanguageModel(model_cfg, seed=0)
    for n in (1, 2, 4):
        schedule = ScheduleConfig(tokens_per_group=n, frames_per_group=4,
                                  frames_per_step=1)
        run_cfg = RuntimeConfig(schedule=schedule, step_cost_ms=step_cost,
                                emit_cost_ms=emit_cost)
        common = dict(llm_delay_ms=llm_delay, n_tokens=8, n_frames=16)
        a = run_bench(model, run_cfg, LatencySpec(scenario=FPL_A, **common))
        l = run_bench(model, run_cfg, LatencySpec(scenario=FPL_L, **common))
        assert a.fpl_ms_median == n * step_cost + emit_cost
        assert l.fpl_ms_median - a.fpl_ms_median == n * llm_delay
        if n == 1:
            # the single-group identity: latency = upstream pass + engine pass
            assert l.fpl_ms_median == llm_delay + (step_cost + emit_cost)
    report("criterion 7 (latency accounting)",
           "FPL-A = n*step + emit and FPL-L - FPL-A = n*25 ms exact for n in {1,2,4}")


def test_criterion_08_reduction_factor_trend(trained):
    cfg, corpus, result, _ = trained
    virtual_rtf = {}
    wall_rtf = {}
    steps = {}
    for r in (1, 2, 4):
        model_cfg = ModelConfig(**{**cfg.model.__dict__, "frames_per_step": r})
        if r == cfg.model.frames_per_step:
            model = load_model(result.checkpoint_path, expect=cfg.model)
        else:
            model = MelLanguageModel(model_cfg, seed=0)
        schedule = ScheduleConfig(tokens_per_group=1, frames_per_group=4,
                                  frames_per_step=r)
        base = RuntimeConfig(schedule=schedule, step_cost_ms=5.0)
        spec = LatencySpec(scenario=FPL_A, n_tokens=8, n_frames=64)
        virtual = run_bench(model, base, spec)
        virtual_rtf[r] = virtual.rtf
        steps[r] = virtual.steps_frame
        wall = run_bench(
            model,
            replace(base, clock_mode="wall"),
            replace(spec, trials=7, warmup=2),
        )
        wall_rtf[r] = wall.rtf
    assert steps == {1: 64, 2: 32, 4: 16}  # ceil(T / r)
    assert virtual_rtf[1] > virtual_rtf[2] > virtual_rtf[4]
    assert wall_rtf[1] > wall_rtf[2] > wall_rtf[4]
    report(
        "criterion 8 (reduction factor trend)",
        f"frame steps {steps}; RTF virtual {virtual_rtf[1]:.3f} > "
        f"{virtual_rtf[2]:.3f} > {virtual_rtf[4]:.3f}, wall "
        f"{wall_rtf[1]:.4f} > {wall_rtf[2]:.4f} > {wall_rtf[4]:.4f}",
    )


def test_criterion_09_sample_times_trend(trained):
    cfg, corpus, result, _ = trained
    model = load_model(result.checkpoint_path, expect=cfg.model)
    utterances = (corpus.val + corpus.train)[:200]

    def median_mse(sample_times: int) -> float:
        mses = []
        for i, utt in enumerate(utterances):
            run_cfg = RuntimeConfig(
                schedule=cfg.schedule,
                min_frames=len(utt.mel),
                max_frames=len(utt.mel),
                sample_times=sample_times,
                seed=9000 + i,
                log_var_override=-2.0,
                step_cost_ms=0.0,
            )
            events = [TextArrived(int(t), 0.0) for t in utt.tokens]
            events.append(EndOfText(0.0))
            out = synthesize(events, run_cfg, model)
            diff = out.frames - utt.mel[: len(out.frames)]
            mses.append(float(np.mean(diff * diff)))
        return float(np.median(mses))

    medians = {k: median_mse(k) for k in (1, 4, 16)}
    assert medians[1] >= medians[4] >= medians[16], medians

    # sigma forced to zero: the sampler degenerates to the mean path,
    # independent of seed and sample count
    utt = utterances[0]

    def mean_path(seed, k):
        run_cfg = RuntimeConfig(
            schedule=cfg.schedule, min_frames=len(utt.mel), max_frames=len(utt.mel),
            sample_times=k, seed=seed, sigma_scale=0.0, step_cost_ms=0.0,
        )
        events = [TextArrived(int(t), 0.0) for t in utt.tokens] + [EndOfText(0.0)]
        return synthesize(events, run_cfg, model).frames.tobytes()

    assert mean_path(1, 1) == mean_path(777, 16)
    report(
        "criterion 9 (sample times trend)",
        f"median MSE {medians[1]:.4f} >= {medians[4]:.4f} >= {medians[16]:.4f} "
        "over 200 utterances; zero-sigma path exact",
    )


def test_criterion_10_determinism_and_round_trip(tmp_path):
    ckpt = check_checkpoint_round_trip()
    assert ckpt.ok, ckpt.detail
    replay = check_determinism_replay()
    assert replay.ok, replay.detail

    # identical config + seed produce identical MELF bytes end to end
    model_cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, n_mels=4,
                            d_latent=8, vocab_size=16, max_positions=256,
                            frames_per_step=1)
    model = MelLanguageModel(model_cfg, seed=1)
    run_cfg = RuntimeConfig(
        schedule=ScheduleConfig(tokens_per_group=1, frames_per_group=4,
                                frames_per_step=1),
        max_frames=24, seed=5,
    )
    events = [TextArrived(t, 0.0) for t in (1, 2, 3)] + [EndOfText(0.0)]
    for name in ("one.melf", "two.melf"):
        out = synthesize(events, run_cfg, model)
        write_melf(tmp_path / name, out.frames, 12.5)
    assert (tmp_path / "one.melf").read_bytes() == (tmp_path / "two.melf").read_bytes()

    assert main(["--quick", "check"]) == 0
    report("criterion 10 (determinism & round trip)",
           f"{ckpt.detail}; {replay.detail}; MELF bytes stable; check exits 0")
