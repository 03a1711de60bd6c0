"""Autoregressive mel language model.

A causal Transformer decoder over a mixed sequence of text-token
embeddings and pre-net projections of mel frame groups. Each hidden state
feeds three heads: a Gaussian latent head (mean and log-variance, sampled
with the reparameterization trick and projected back to frames by the
post-net), and a stop head for termination.

Model parameters are immutable during inference and may be shared across
any number of concurrently decoding streams; each stream owns exactly one
:class:`DecoderState` (the per-layer attention key/value cache).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from .errors import (
    CheckpointError,
    InvalidSampleCount,
    MaxLengthExceeded,
    ShapeError,
    UnknownToken,
)

LOG_VAR_MIN = -14.0
LOG_VAR_MAX = 6.0

CHECKPOINT_MAGIC = b"SMEL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    n_mels: int = 8
    d_latent: int = 16
    vocab_size: int = 16
    max_positions: int = 1024
    frames_per_step: int = 1

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_latent > self.d_model:
            raise ValueError("d_latent must not exceed d_model")

    # field order doubles as the checkpoint config-block layout
    FIELDS = (
        "d_model", "n_layers", "n_heads", "d_ff", "n_mels",
        "d_latent", "vocab_size", "max_positions", "frames_per_step",
    )


@dataclass
class LatentParams:
    """Per-step Gaussian over the latent: mean and clamped log-variance."""

    mu: Tensor
    log_var: Tensor


@dataclass
class DecoderState:
    """Per-stream incremental decoding state.

    ``keys[i]`` / ``values[i]`` hold layer i's cache with shape
    (n_heads, position, d_head). Exclusively owned by one stream.
    """

    keys: List[Tensor]
    values: List[Tensor]
    position: int
    rng: torch.Generator

    def cache_len(self, layer: int) -> int:
        return int(self.keys[layer].shape[1])


@dataclass
class StepOutput:
    """Everything one decoding step produces."""

    hidden: Tensor
    latent: LatentParams
    frames: Optional[Tensor]  # (frames_per_step, n_mels); None at fill steps
    stop_prob: float


class DecoderBlock(nn.Module):
    """Pre-norm Transformer block with causal self-attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.ln_attn = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.attn_out = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln_ff = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def _split_heads(self, x: Tensor) -> Tensor:
        # (..., S, d_model) -> (..., n_heads, S, d_head)
        new_shape = x.shape[:-1] + (self.n_heads, self.d_head)
        return x.view(new_shape).transpose(-3, -2)

    def _merge_heads(self, x: Tensor) -> Tensor:
        x = x.transpose(-3, -2).contiguous()
        return x.view(x.shape[:-2] + (self.n_heads * self.d_head,))

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = self._split_heads(q)
        k = self._split_heads(k)
        v = self._split_heads(v)
        scores = q @ k.transpose(-2, -1) / (self.d_head ** 0.5)
        scores = scores.masked_fill(mask, float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        x = x + self.attn_out(self._merge_heads(ctx))
        return x + self.ff(self.ln_ff(x))

    def forward_step(self, x: Tensor, k_cache: Tensor, v_cache: Tensor
                     ) -> Tuple[Tensor, Tensor, Tensor]:
        """One position with cached history; returns (out, new_k, new_v)."""
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(self.n_heads, 1, self.d_head)
        k_cache = torch.cat([k_cache, k.view(self.n_heads, 1, self.d_head)], dim=1)
        v_cache = torch.cat([v_cache, v.view(self.n_heads, 1, self.d_head)], dim=1)
        scores = q @ k_cache.transpose(-2, -1) / (self.d_head ** 0.5)
        ctx = torch.softmax(scores, dim=-1) @ v_cache
        x = x + self.attn_out(ctx.reshape(1, -1)).view(-1)
        x = x + self.ff(self.ln_ff(x))
        return x, k_cache, v_cache


class MelLanguageModel(nn.Module):
    """Decoder-only model over interleaved text/mel positions."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        r = cfg.frames_per_step
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.prenet = nn.Sequential(
            nn.Linear(r * cfg.n_mels, cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.d_model, cfg.d_model),
        )
        # input for the very first frame step when nothing precedes it
        self.bos_group = nn.Parameter(torch.zeros(cfg.d_model))
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.latent_mu = nn.Linear(cfg.d_model, cfg.d_latent)
        self.latent_log_var = nn.Linear(cfg.d_model, cfg.d_latent)
        self.postnet = nn.Sequential(
            nn.Linear(cfg.d_latent, cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.d_model, r * cfg.n_mels),
        )
        self.stop_proj = nn.Linear(cfg.d_model, 1)
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2 or name in ("bos_group",):
                p.data.normal_(0.0, 0.02, generator=g)
            elif name.endswith("weight"):  # LayerNorm scales
                p.data.fill_(1.0)
            else:
                p.data.zero_()

    # ----- inputs -------------------------------------------------------

    def embed_text(self, token_id: int) -> Tensor:
        if not 0 <= token_id < self.cfg.vocab_size:
            raise UnknownToken(f"token {token_id} outside vocab of {self.cfg.vocab_size}")
        return self.token_embed.weight[token_id]

    def first_frame_input(self) -> Tensor:
        """Decoder input for a frame step with no predecessor: the learned
        begin-of-speech vector, trained jointly with everything else."""
        return self.bos_group

    def prenet_frames(self, frames: Tensor) -> Tensor:
        """Project one group of frames_per_step frames into the model width."""
        frames = torch.as_tensor(frames, dtype=self.token_embed.weight.dtype)
        r = self.cfg.frames_per_step
        if frames.shape[-2:] != (r, self.cfg.n_mels):
            raise ShapeError(
                f"expected frame group of shape ({r}, {self.cfg.n_mels}), "
                f"got {tuple(frames.shape)}"
            )
        flat = frames.reshape(frames.shape[:-2] + (r * self.cfg.n_mels,))
        return self.prenet(flat)

    # ----- decoding -----------------------------------------------------

    def init_state(self, seed: int = 0) -> DecoderState:
        dtype = self.token_embed.weight.dtype
        d_head = self.cfg.d_model // self.cfg.n_heads
        empty = lambda: torch.zeros(self.cfg.n_heads, 0, d_head, dtype=dtype)
        rng = torch.Generator().manual_seed(seed)
        return DecoderState(
            keys=[empty() for _ in range(self.cfg.n_layers)],
            values=[empty() for _ in range(self.cfg.n_layers)],
            position=0,
            rng=rng,
        )

    def decode_step(self, state: DecoderState, x: Tensor) -> Tuple[Tensor, DecoderState]:
        """Advance one position; attends to the cache plus itself."""
        if x.shape != (self.cfg.d_model,):
            raise ShapeError(f"decode_step input must be ({self.cfg.d_model},), got {tuple(x.shape)}")
        if state.position >= self.cfg.max_positions:
            raise MaxLengthExceeded(f"position {state.position} at max_positions")
        h = x + self.pos_embed.weight[state.position]
        for i, block in enumerate(self.blocks):
            h, state.keys[i], state.values[i] = block.forward_step(
                h, state.keys[i], state.values[i]
            )
        state.position += 1
        return self.final_norm(h), state

    def full_forward(self, inputs: Tensor) -> Tensor:
        """Teacher-forcing pass over (S, d_model) or (B, S, d_model)."""
        if inputs.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"last dim must be {self.cfg.d_model}, got {inputs.shape[-1]}")
        seq_len = inputs.shape[-2]
        if seq_len > self.cfg.max_positions:
            raise MaxLengthExceeded(f"sequence of {seq_len} exceeds max_positions")
        if seq_len == 0:
            return inputs
        h = inputs + self.pos_embed.weight[:seq_len]
        mask = torch.triu(
            torch.ones(seq_len, seq_len, dtype=torch.bool, device=inputs.device), diagonal=1
        )
        for block in self.blocks:
            h = block(h, mask)
        return self.final_norm(h)

    # ----- output heads -------------------------------------------------

    def latent_head(self, e: Tensor) -> LatentParams:
        if e.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"latent head expects width {self.cfg.d_model}")
        mu = self.latent_mu(e)
        log_var = torch.clamp(self.latent_log_var(e), LOG_VAR_MIN, LOG_VAR_MAX)
        return LatentParams(mu=mu, log_var=log_var)

    def sample_latent(self, params: LatentParams, rng: torch.Generator,
                      sample_count: int = 1) -> Tensor:
        """Reparameterized draw; with several candidates, keep the one with
        the highest Gaussian log-density under ``params``.

        log N(mu + sigma*eps; mu, sigma^2) differs across candidates only
        through -0.5 * ||eps||^2, so density selection reduces to the draw
        with the smallest noise norm.
        """
        if sample_count < 1:
            raise InvalidSampleCount(f"sample_count must be >= 1, got {sample_count}")
        sigma = torch.exp(0.5 * params.log_var)
        eps = torch.randn(
            (sample_count,) + params.mu.shape, generator=rng, dtype=params.mu.dtype
        )
        if sample_count == 1:
            return params.mu + sigma * eps[0]
        best = torch.argmin((eps * eps).flatten(1).sum(dim=1))
        return params.mu + sigma * eps[best]

    def postnet_frames(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.cfg.d_latent:
            raise ShapeError(f"postnet expects width {self.cfg.d_latent}")
        flat = self.postnet(z)
        return flat.view(z.shape[:-1] + (self.cfg.frames_per_step, self.cfg.n_mels))

    def step_heads(
        self,
        e: Tensor,
        rng: torch.Generator,
        sample_times: int = 1,
        log_var_override: Optional[float] = None,
        sigma_scale: float = 1.0,
        emit: bool = True,
    ) -> StepOutput:
        """All head outputs for one position's hidden state.

        ``emit=False`` marks a fill position: the latent and stop outputs
        are still produced but no frames are, and the sampler draws
        nothing (keeping the noise stream aligned across fills).
        ``sigma_scale`` rescales the predicted standard deviation; zero
        selects the deterministic mean path without touching ``rng``.
        """
        params = self.latent_head(e)
        if log_var_override is not None:
            params = LatentParams(
                mu=params.mu, log_var=torch.full_like(params.log_var, log_var_override)
            )
        frames = None
        if emit:
            if sigma_scale == 0.0:
                z = params.mu
            else:
                sampling = params
                if sigma_scale != 1.0:
                    sampling = LatentParams(
                        mu=params.mu,
                        log_var=params.log_var + 2.0 * float(np.log(sigma_scale)),
                    )
                z = self.sample_latent(sampling, rng, sample_times)
            frames = self.postnet_frames(z)
        return StepOutput(
            hidden=e,
            latent=params,
            frames=frames,
            stop_prob=float(self.stop_head(e).detach()),
        )

    def stop_logit(self, e: Tensor) -> Tensor:
        if e.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"stop head expects width {self.cfg.d_model}")
        return self.stop_proj(e).squeeze(-1)

    def stop_head(self, e: Tensor) -> Tensor:
        return torch.sigmoid(self.stop_logit(e))


# ----- checkpoint serialization ----------------------------------------
#
#   magic "SMEL" | version u32 | config block (ModelConfig.FIELDS as u32)
#   | parameters as f32, in named_parameters() registration order
#   | crc32 u32 over config block + parameter blob
#
# All integers and floats little-endian.


def save_model(model: MelLanguageModel, path: str | Path) -> None:
    cfg = model.cfg
    config_block = np.array(
        [getattr(cfg, f) for f in ModelConfig.FIELDS], dtype="<u4"
    ).tobytes()
    blob = b"".join(
        p.detach().cpu().numpy().astype("<f4").tobytes()
        for _, p in model.named_parameters()
    )
    payload = config_block + blob
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([CHECKPOINT_VERSION], dtype="<u4").tobytes())
        f.write(payload)
        f.write(np.array([crc], dtype="<u4").tobytes())


def load_model(path: str | Path, expect: Optional[ModelConfig] = None) -> MelLanguageModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n_fields = len(ModelConfig.FIELDS)
    header_end = 8 + 4 * n_fields
    if len(raw) < header_end + 4:
        raise CheckpointError("truncated checkpoint header")
    payload = raw[8:-4]
    stored_crc = int(np.frombuffer(raw[-4:], dtype="<u4")[0])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checkpoint checksum mismatch")
    values = np.frombuffer(raw[8:header_end], dtype="<u4")
    cfg = ModelConfig(**{f: int(v) for f, v in zip(ModelConfig.FIELDS, values)})
    if expect is not None and cfg != expect:
        raise CheckpointError(f"checkpoint config {cfg} does not match expected {expect}")

    model = MelLanguageModel(cfg)
    blob = raw[header_end:-4]
    expected_floats = sum(p.numel() for _, p in model.named_parameters())
    if len(blob) != 4 * expected_floats:
        raise CheckpointError(
            f"parameter blob holds {len(blob) // 4} floats, expected {expected_floats}"
        )
    data = np.frombuffer(blob, dtype="<f4")
    offset = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            count = p.numel()
            chunk = data[offset : offset + count].reshape(tuple(p.shape)).copy()
            p.copy_(torch.from_numpy(chunk))
            offset += count
    return model
