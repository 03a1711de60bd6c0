"""Teacher-forced training over interleaved sequences.

Each utterance is packed once: its interleaved sequence is grouped into
decoder positions (one per text token, one per frame group), inputs and
next-element targets are gathered, and scatter indices are recorded so the
per-position frame predictions can be reassembled into a time-ordered mel
for the regression and flux terms. Fill positions (successor is text)
simply have no target and drop out through the masks.

The optimizer is Adam with linear warmup and gradient-norm clipping. Runs
are reproducible from (config, seed): shuffling, latent noise, and
initialization all derive from the training seed. A non-finite loss aborts
with a diagnostic snapshot instead of continuing silently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import EngineConfig, config_hash
from .errors import NonFiniteLoss
from .loss import LossWeights, total_loss
from .model import MelLanguageModel, save_model
from .runtime import EndOfText, RuntimeConfig, TextArrived, synthesize
from .schedule import ScheduleConfig, build_interleaved, grouped_positions
from .synthdata import Corpus, Utterance, score_reconstruction


@dataclass
class PackedUtterance:
    """Tensors for one utterance, precomputed once."""

    token_ids: torch.Tensor  # (S,) long, -1 at frame positions
    input_frames: torch.Tensor  # (S, r, n_mels)
    target_frames: torch.Tensor  # (S, r, n_mels)
    target_mask: torch.Tensor  # (S, r) bool
    stop_labels: torch.Tensor  # (S,) float
    scatter_pos: torch.Tensor  # (T,) position of each predicted frame
    scatter_sub: torch.Tensor  # (T,) subframe within the group
    scatter_frame: torch.Tensor  # (T,) timeline index
    mel: torch.Tensor  # (T, n_mels)
    seq_len: int
    mel_len: int


def pack_utterance(utt: Utterance, schedule: ScheduleConfig, n_mels: int) -> PackedUtterance:
    r = schedule.frames_per_step
    mel = torch.from_numpy(np.ascontiguousarray(utt.mel))
    mel_len = mel.shape[0]
    seq = build_interleaved(utt.tokens, mel_len, schedule)
    groups = grouped_positions(seq, r)
    s_len = len(groups)

    token_ids = torch.full((s_len,), -1, dtype=torch.long)
    input_frames = torch.zeros(s_len, r, n_mels)
    target_frames = torch.zeros(s_len, r, n_mels)
    target_mask = torch.zeros(s_len, r, dtype=torch.bool)
    stop_labels = torch.zeros(s_len)
    stop_labels[-1] = 1.0
    scatter_pos: List[int] = []
    scatter_sub: List[int] = []
    scatter_frame: List[int] = []

    for s, g in enumerate(groups):
        if g.kind == "text":
            token_ids[s] = g.token_id
        else:
            idx = torch.from_numpy(g.frame_indices)
            input_frames[s, : len(idx)] = mel[idx]
        if s + 1 < s_len and groups[s + 1].kind == "frames":
            idx = groups[s + 1].frame_indices
            target_frames[s, : len(idx)] = mel[torch.from_numpy(idx)]
            target_mask[s, : len(idx)] = True
            for j, f in enumerate(idx):
                scatter_pos.append(s)
                scatter_sub.append(j)
                scatter_frame.append(int(f))

    return PackedUtterance(
        token_ids=token_ids,
        input_frames=input_frames,
        target_frames=target_frames,
        target_mask=target_mask,
        stop_labels=stop_labels,
        scatter_pos=torch.tensor(scatter_pos, dtype=torch.long),
        scatter_sub=torch.tensor(scatter_sub, dtype=torch.long),
        scatter_frame=torch.tensor(scatter_frame, dtype=torch.long),
        mel=mel,
        seq_len=s_len,
        mel_len=mel_len,
    )


@dataclass
class Batch:
    token_ids: torch.Tensor  # (B, S)
    input_frames: torch.Tensor  # (B, S, r, n_mels)
    stop_labels: torch.Tensor  # (B, S)
    valid: torch.Tensor  # (B, S) bool
    kl_mask: torch.Tensor  # (B, S) bool, frame-predicting positions
    packed: List[PackedUtterance]
    t_max: int


def collate(packed: Sequence[PackedUtterance]) -> Batch:
    b = len(packed)
    s_max = max(p.seq_len for p in packed)
    r, n_mels = packed[0].input_frames.shape[1:]
    token_ids = torch.full((b, s_max), -1, dtype=torch.long)
    input_frames = torch.zeros(b, s_max, r, n_mels)
    stop_labels = torch.zeros(b, s_max)
    valid = torch.zeros(b, s_max, dtype=torch.bool)
    kl_mask = torch.zeros(b, s_max, dtype=torch.bool)
    for i, p in enumerate(packed):
        s = p.seq_len
        token_ids[i, :s] = p.token_ids
        input_frames[i, :s] = p.input_frames
        stop_labels[i, :s] = p.stop_labels
        valid[i, :s] = True
        kl_mask[i, :s] = p.target_mask.any(dim=-1)
    return Batch(
        token_ids=token_ids,
        input_frames=input_frames,
        stop_labels=stop_labels,
        valid=valid,
        kl_mask=kl_mask,
        packed=list(packed),
        t_max=max(p.mel_len for p in packed),
    )


def batch_inputs(model: MelLanguageModel, batch: Batch) -> torch.Tensor:
    """Mixed embedding: token rows where the position is text, pre-net
    projections where it is a frame group."""
    is_text = (batch.token_ids >= 0).unsqueeze(-1)
    tokens = batch.token_ids.clamp(min=0)
    text_part = model.token_embed(tokens)
    flat = batch.input_frames.flatten(-2)
    frame_part = model.prenet(flat)
    return torch.where(is_text, text_part, frame_part)


def assemble_timeline(pred: torch.Tensor, batch: Batch) -> tuple:
    """Scatter per-position frame predictions back into time order."""
    b, _, _, n_mels = pred.shape
    timeline_pred = pred.new_zeros(b, batch.t_max, n_mels)
    timeline_target = pred.new_zeros(b, batch.t_max, n_mels)
    time_mask = torch.zeros(b, batch.t_max, dtype=torch.bool)
    for i, p in enumerate(batch.packed):
        if len(p.scatter_frame):
            timeline_pred[i, p.scatter_frame] = pred[i, p.scatter_pos, p.scatter_sub]
            time_mask[i, p.scatter_frame] = True
        timeline_target[i, : p.mel_len] = p.mel
    return timeline_pred, timeline_target, time_mask


def batch_loss(
    model: MelLanguageModel,
    batch: Batch,
    weights: LossWeights,
    noise: Optional[torch.Tensor],
):
    """Forward pass plus the four-term objective.

    ``noise`` supplies the reparameterization draw; pass None for the
    deterministic mean path (used in evaluation).
    """
    inputs = batch_inputs(model, batch)
    hidden = model.full_forward(inputs)
    latent = model.latent_head(hidden)
    z = latent.mu if noise is None else latent.mu + torch.exp(0.5 * latent.log_var) * noise
    pred = model.postnet_frames(z)
    stop_logits = model.stop_logit(hidden)

    timeline_pred, timeline_target, time_mask = assemble_timeline(pred, batch)
    total, breakdown = total_loss(
        pred=timeline_pred,
        target=timeline_target,
        frame_mask=time_mask,
        latent=latent,
        latent_mask=batch.kl_mask,
        stop_logits=stop_logits[batch.valid],
        stop_labels=batch.stop_labels[batch.valid],
        weights=weights,
    )
    return total, breakdown, stop_logits


@dataclass
class EvalResult:
    reg: float
    total: float
    stop_accuracy: float


def stop_eligible_positions(p: PackedUtterance) -> torch.Tensor:
    """Positions where the streaming runtime would consult the stop head:
    frame positions whose successor is another frame step, plus the final
    position. Group-final positions followed by text are the text side's
    decision and are never stop checks."""
    is_frame = p.token_ids < 0
    eligible = torch.zeros_like(is_frame)
    next_is_frame = torch.zeros_like(is_frame)
    next_is_frame[:-1] = is_frame[1:]
    eligible = is_frame & next_is_frame
    eligible[-1] = bool(is_frame[-1])
    return eligible


def evaluate(
    model: MelLanguageModel,
    packed: Sequence[PackedUtterance],
    weights: LossWeights,
    batch_size: int,
    stop_threshold: float = 0.5,
) -> EvalResult:
    """Teacher-forced validation on the mean latent path.

    Stop accuracy is per utterance and strict: among the positions the
    runtime would actually consult, the first probability crossing the
    threshold must sit exactly at the final one.
    """
    reg_sum = total_sum = 0.0
    hits = 0
    n_batches = 0
    with torch.no_grad():
        for start in range(0, len(packed), batch_size):
            chunk = packed[start : start + batch_size]
            batch = collate(chunk)
            total, breakdown, stop_logits = batch_loss(model, batch, weights, noise=None)
            reg_sum += breakdown.reg_l1 + breakdown.reg_l2
            total_sum += breakdown.total
            n_batches += 1
            probs = torch.sigmoid(stop_logits)
            for i, p in enumerate(chunk):
                eligible = stop_eligible_positions(p)
                fired = ((probs[i, : p.seq_len] >= stop_threshold) & eligible).nonzero()
                if len(fired) and int(fired[0]) == p.seq_len - 1:
                    hits += 1
    return EvalResult(
        reg=reg_sum / n_batches,
        total=total_sum / n_batches,
        stop_accuracy=hits / len(packed),
    )


def synthesis_scores(
    model: MelLanguageModel,
    corpus: Corpus,
    cfg: EngineConfig,
    utterances: Sequence[Utterance],
    seed: int = 0,
) -> Dict[str, float]:
    """Free-running synthesis quality against the reference templates."""
    mses: List[float] = []
    accs: List[float] = []
    for i, utt in enumerate(utterances):
        runtime_cfg = RuntimeConfig(
            schedule=cfg.schedule,
            stop_threshold=cfg.runtime.stop_threshold,
            min_frames=cfg.schedule.frames_per_group,
            max_frames=2 * utt.mel.shape[0] + cfg.schedule.frames_per_group,
            sample_times=cfg.runtime.sample_times,
            seed=seed + i,
            clock_mode="virtual",
            step_cost_ms=0.0,
        )
        events = [TextArrived(int(t), 0.0) for t in utt.tokens]
        events.append(EndOfText(0.0))
        out = synthesize(events, runtime_cfg, model)
        scores = score_reconstruction(out.frames, utt, corpus)
        mses.append(scores["frame_mse"])
        accs.append(scores["template_accuracy"])
    return {
        "frame_mse_mean": float(np.mean(mses)),
        "frame_mse_median": float(np.median(mses)),
        "template_accuracy": float(np.mean(accs)),
    }


@dataclass
class TrainResult:
    model: MelLanguageModel
    history: List[Dict[str, float]] = field(default_factory=list)
    best_step: int = 0
    best_val_reg: float = float("inf")
    steps_run: int = 0
    checkpoint_path: Optional[str] = None
    log_path: Optional[str] = None


def train(
    cfg: EngineConfig,
    corpus: Corpus,
    out_dir: str | Path,
    stop_condition: Optional[Callable[[List[Dict[str, float]]], bool]] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run the optimization loop; saves the best checkpoint and a
    line-delimited loss log under ``out_dir``.

    ``stop_condition`` inspects the evaluation history after each eval and
    may end the run early (used by convergence-gated callers).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.training
    report = progress or (lambda msg: None)

    model = MelLanguageModel(cfg.model, seed=tcfg.seed)
    packed_train = [pack_utterance(u, cfg.schedule, cfg.model.n_mels) for u in corpus.train]
    packed_val = [pack_utterance(u, cfg.schedule, cfg.model.n_mels) for u in corpus.val]
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)
    noise_rng = torch.Generator().manual_seed(tcfg.seed + 1)
    shuffle_rng = np.random.Generator(np.random.Philox(key=np.array(
        [tcfg.seed & (2**64 - 1), 2], dtype=np.uint64)))

    result = TrainResult(model=model)
    log_path = out / "training_log.jsonl"
    checkpoint_path = out / "best.smel"
    hash_hex = config_hash(cfg)

    def run_eval(step: int) -> Dict[str, float]:
        ev = evaluate(model, packed_val, cfg.weights, tcfg.batch_size,
                      cfg.runtime.stop_threshold)
        record = {
            "step": step,
            "val_reg": ev.reg,
            "val_total": ev.total,
            "stop_accuracy": ev.stop_accuracy,
        }
        result.history.append(record)
        report(
            f"step {step}: val_reg={ev.reg:.4f} val_total={ev.total:.4f} "
            f"stop_acc={ev.stop_accuracy:.3f}"
        )
        if ev.reg < result.best_val_reg:
            result.best_val_reg = ev.reg
            result.best_step = step
            save_model(model, checkpoint_path)
        return record

    order = np.arange(len(packed_train))
    cursor = len(order)  # force an initial shuffle

    with open(log_path, "w", encoding="utf-8") as log:
        log.write(json.dumps({"config_hash": hash_hex}) + "\n")
        run_eval(0)
        step = 0
        try:
            while step < tcfg.max_steps:
                if cursor + tcfg.batch_size > len(order):
                    shuffle_rng.shuffle(order)
                    cursor = 0
                chosen = order[cursor : cursor + tcfg.batch_size]
                cursor += tcfg.batch_size
                batch = collate([packed_train[i] for i in chosen])

                noise = torch.randn(
                    (len(chosen), batch.token_ids.shape[1], cfg.model.d_latent),
                    generator=noise_rng,
                )
                total, breakdown, _ = batch_loss(model, batch, cfg.weights, noise)

                optimizer.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip_norm)
                warm = min(1.0, (step + 1) / max(1, tcfg.warmup_steps))
                for group in optimizer.param_groups:
                    group["lr"] = tcfg.learning_rate * warm
                optimizer.step()
                step += 1
                result.steps_run = step

                entry = {"step": step, "lr": tcfg.learning_rate * warm}
                entry.update(breakdown.as_dict())
                log.write(json.dumps(entry) + "\n")

                if step % tcfg.eval_interval == 0 or step == tcfg.max_steps:
                    run_eval(step)
                    if stop_condition is not None and stop_condition(result.history):
                        report(f"stop condition met at step {step}")
                        break
        except NonFiniteLoss:
            snapshot = {
                "failed_step": step + 1,
                "history": result.history,
                "config_hash": hash_hex,
            }
            (out / "diagnostic_snapshot.json").write_text(
                json.dumps(snapshot, indent=2) + "\n"
            )
            raise

    result.checkpoint_path = str(checkpoint_path)
    result.log_path = str(log_path)
    return result
