"""Self-check suite shared by the `check` command and the acceptance tests.

Each check is independent, deterministic, and returns a result with enough
detail to act on. Reduced ranges are for quick smoke runs; the defaults
are the full verification budget.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from .errors import CheckpointError, TextOverrun
from .loss import LossWeights, grad_check, kl_loss, kl_monte_carlo, total_loss
from .model import (
    LatentParams,
    MelLanguageModel,
    ModelConfig,
    load_model,
    save_model,
)
from .runtime import EndOfText, RuntimeConfig, TextArrived, synthesize
from .schedule import ScheduleConfig, frame_positions, mel_positions_oracle
from .synthdata import CorpusSpec, generate_corpus
from .train import batch_loss, collate, pack_utterance


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def check_schedule_oracle(
    n_max: int = 8, m_max: int = 8, l_max: int = 32, t_max: int = 256
) -> CheckResult:
    """Closed-form position map against the constructive interleave,
    exhaustively over the configured ranges."""
    positions_checked = 0
    for n in range(1, n_max + 1):
        for m in range(1, m_max + 1):
            cfg = ScheduleConfig(tokens_per_group=n, frames_per_group=m, frames_per_step=1)
            for text_len in range(0, l_max + 1):
                for mel_len in range(1, t_max + 1):
                    try:
                        oracle = mel_positions_oracle(text_len, mel_len, cfg)
                    except TextOverrun:
                        continue
                    closed = frame_positions(text_len, mel_len, cfg)
                    if not np.array_equal(oracle, closed):
                        return CheckResult(
                            "schedule_oracle",
                            False,
                            f"mismatch at n={n} m={m} L={text_len} T={mel_len}",
                        )
                    positions_checked += mel_len
    return CheckResult(
        "schedule_oracle", True, f"{positions_checked} frame positions agree"
    )


def check_cache_equivalence(
    n_sequences: int = 100, max_len: int = 64, tolerance: float = 1e-5
) -> CheckResult:
    """Incremental decoding against the batched causal pass.

    Unit-scale random weights saturate the attention softmax, which in
    float32 amplifies pure rounding noise past the tolerance, so that
    variant runs in float64; production-scale float32 weights are checked
    at the same tolerance.
    """
    cfg = ModelConfig(d_model=64, n_layers=2, n_heads=4, d_ff=256, n_mels=8,
                      d_latent=16, vocab_size=16, max_positions=max_len + 1,
                      frames_per_step=1)
    worst = 0.0
    for i in range(n_sequences):
        g = torch.Generator().manual_seed(1000 + i)
        unit_gaussian = i % 2 == 0
        model = MelLanguageModel(cfg, seed=0)
        if unit_gaussian:
            model = model.double()
        with torch.no_grad():
            for p in model.parameters():
                p.normal_(0.0, 1.0 if unit_gaussian else 0.05, generator=g)
        length = int(torch.randint(1, max_len + 1, (1,), generator=g))
        dtype = torch.float64 if unit_gaussian else torch.float32
        inputs = torch.randn(length, cfg.d_model, generator=g, dtype=dtype)
        full = model.full_forward(inputs)
        state = model.init_state()
        outs = []
        for t in range(length):
            e, state = model.decode_step(state, inputs[t])
            outs.append(e)
        diff = (torch.stack(outs) - full).abs().max().item()
        worst = max(worst, diff)
        if diff >= tolerance:
            return CheckResult(
                "cache_equivalence", False,
                f"sequence {i} (len {length}): max abs diff {diff:.3e}",
            )
    return CheckResult(
        "cache_equivalence", True,
        f"{n_sequences} sequences, worst diff {worst:.3e} < {tolerance:g}",
    )


def check_kl_monte_carlo(
    draws: int = 100, samples: int = 1_000_000, rel_tol: float = 0.02
) -> CheckResult:
    """Closed-form KL against a direct Monte Carlo estimate of
    E_q[log q - log p] on random parameter draws."""
    g = torch.Generator().manual_seed(7)
    worst = 0.0
    for trial in range(draws):
        mu = torch.empty(8, dtype=torch.float64).uniform_(0.5, 1.5, generator=g)
        log_var = torch.empty(8, dtype=torch.float64).uniform_(-1.0, 0.5, generator=g)
        params = LatentParams(mu=mu.unsqueeze(0), log_var=log_var.unsqueeze(0))
        closed = float(kl_loss(params, torch.ones(1, dtype=torch.bool)))
        mc = kl_monte_carlo(
            LatentParams(mu=mu, log_var=log_var),
            samples,
            torch.Generator().manual_seed(5000 + trial),
        )
        rel = abs(closed - mc) / abs(closed)
        worst = max(worst, rel)
        if rel >= rel_tol:
            return CheckResult(
                "kl_monte_carlo", False,
                f"draw {trial}: closed {closed:.5f} vs MC {mc:.5f} (rel {rel:.3%})",
            )
    return CheckResult(
        "kl_monte_carlo", True, f"{draws} draws, worst relative gap {worst:.3%}"
    )


def _grad_check_setup(seed: int = 0):
    """Tiny float64 model plus a deterministic full-objective loss over a
    mixed batch: two text/mel utterances and one mel-only sequence whose
    first step runs off the begin-of-speech input (so its gradient is
    covered too)."""
    model_cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, n_mels=4,
                            d_latent=4, vocab_size=8, max_positions=64,
                            frames_per_step=1)
    schedule = ScheduleConfig(tokens_per_group=1, frames_per_group=2, frames_per_step=1)
    corpus_spec = CorpusSpec(vocab_size=8, n_mels=4, frames_per_token=2,
                             n_utterances=4, min_tokens=2, max_tokens=3,
                             speaker_count=2, noise_std=0.05, seed=seed)
    corpus = generate_corpus(corpus_spec)
    packed = [pack_utterance(u, schedule, 4) for u in corpus.utterances[:2]]
    batch = collate(packed)
    weights = LossWeights()

    model = MelLanguageModel(model_cfg, seed=seed).double()
    for p in model.parameters():
        p.requires_grad_(True)
    batch.input_frames = batch.input_frames.double()
    batch.stop_labels = batch.stop_labels.double()
    for p in batch.packed:
        p.mel = p.mel.double()

    g = torch.Generator().manual_seed(seed + 1)
    noise = torch.randn(
        (2, batch.token_ids.shape[1], model_cfg.d_latent),
        generator=g, dtype=torch.float64,
    )
    # mel-only path: [bos, G0, G1] predicting [G0, G1, G2] with a stop at
    # the final frame
    tail = torch.randn(3, 1, 4, generator=g, dtype=torch.float64)
    tail_noise = torch.randn(3, model_cfg.d_latent, generator=g, dtype=torch.float64)

    def loss_fn():
        total, _, _ = batch_loss(model, batch, weights, noise)

        inputs = torch.cat(
            [
                model.first_frame_input().unsqueeze(0),
                model.prenet_frames(tail[:2]).view(2, -1),
            ],
            dim=0,
        )
        hidden = model.full_forward(inputs)
        latent = model.latent_head(hidden)
        z = latent.mu + torch.exp(0.5 * latent.log_var) * tail_noise
        pred = model.postnet_frames(z)
        stop_logits = model.stop_logit(hidden)
        mask = torch.ones(3, 1, dtype=torch.bool)
        labels = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        tail_total, _ = total_loss(
            pred=pred, target=tail, frame_mask=mask,
            latent=latent, latent_mask=mask.squeeze(-1),
            stop_logits=stop_logits, stop_labels=labels, weights=weights,
        )
        return total + tail_total

    return model, loss_fn


def check_grad_full_objective(
    coords: int = 200, tolerance: float = 1e-3, epsilon: float = 1e-4
) -> CheckResult:
    """Analytic gradients of the complete objective (through the
    reparameterized sampler) against central finite differences."""
    model, loss_fn = _grad_check_setup()
    params = [p for p in model.parameters()]
    err = grad_check(loss_fn, params, epsilon=epsilon, max_coords=coords,
                     rng=torch.Generator().manual_seed(3))
    ok = err < tolerance
    return CheckResult(
        "grad_full_objective", ok,
        f"max relative error {err:.2e} over {coords} coordinates "
        f"({'<' if ok else '>='} {tolerance:g})",
    )


def check_determinism_replay() -> CheckResult:
    """Two synthesis runs with one seed must agree byte for byte."""
    model_cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, n_mels=4,
                            d_latent=8, vocab_size=16, max_positions=256,
                            frames_per_step=1)
    model = MelLanguageModel(model_cfg, seed=4)
    cfg = RuntimeConfig(
        schedule=ScheduleConfig(tokens_per_group=1, frames_per_group=4, frames_per_step=1),
        max_frames=32, seed=17, sample_times=4,
    )
    events = [TextArrived(t, 10.0 * t) for t in range(4)] + [EndOfText(40.0)]
    a = synthesize(events, cfg, model)
    b = synthesize(events, cfg, model)
    if a.frames.tobytes() != b.frames.tobytes():
        return CheckResult("determinism_replay", False, "frame bytes differ")
    if a.stop_reason != b.stop_reason or not np.array_equal(a.timestamps_ms, b.timestamps_ms):
        return CheckResult("determinism_replay", False, "metadata differs")
    return CheckResult(
        "determinism_replay", True,
        f"{a.frame_count} frames reproduced bit-exactly",
    )


def check_checkpoint_round_trip() -> CheckResult:
    """Save/load/save must be byte-stable and corruption must be caught."""
    model_cfg = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=32, n_mels=4,
                            d_latent=8, vocab_size=8, max_positions=64,
                            frames_per_step=1)
    model = MelLanguageModel(model_cfg, seed=9)
    with tempfile.TemporaryDirectory() as tmp:
        path_a = os.path.join(tmp, "a.smel")
        path_b = os.path.join(tmp, "b.smel")
        save_model(model, path_a)
        save_model(load_model(path_a), path_b)
        with open(path_a, "rb") as f:
            raw_a = f.read()
        with open(path_b, "rb") as f:
            raw_b = f.read()
        if raw_a != raw_b:
            return CheckResult("checkpoint_round_trip", False, "round trip not byte-stable")
        corrupted = bytearray(raw_a)
        corrupted[60] ^= 0xFF
        with open(path_a, "wb") as f:
            f.write(bytes(corrupted))
        try:
            load_model(path_a)
        except CheckpointError:
            return CheckResult(
                "checkpoint_round_trip", True,
                f"{len(raw_a)} bytes stable; corruption detected",
            )
        return CheckResult("checkpoint_round_trip", False, "corruption went undetected")


def run_all_checks(quick: bool = False) -> List[CheckResult]:
    if quick:
        return [
            check_schedule_oracle(n_max=4, m_max=4, l_max=8, t_max=64),
            check_cache_equivalence(n_sequences=10, max_len=32),
            check_kl_monte_carlo(draws=10, samples=100_000, rel_tol=0.05),
            check_grad_full_objective(coords=50),
            check_determinism_replay(),
            check_checkpoint_round_trip(),
        ]
    return [
        check_schedule_oracle(),
        check_cache_equivalence(),
        check_kl_monte_carlo(),
        check_grad_full_objective(),
        check_determinism_replay(),
        check_checkpoint_round_trip(),
    ]
