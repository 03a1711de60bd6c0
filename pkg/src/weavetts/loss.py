"""Training objective: masked regression, KL, flux, and stop terms.

The total is the weighted sum

    total = reg_weight * (l1 + l2) + kl_weight * kl
          + flux_weight * flux + stop_weight * stop

with defaults reg_weight=2, kl_weight=0.05, flux_weight=1, stop_weight=0.5.
Component reductions are masked means over elements, so the weights stay
comparable across utterance lengths. Every function is pure and thread
safe; batching is the caller's concern.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import EmptyMask, NonFiniteLoss
from .model import LatentParams

FLUX_MATCH_TARGET = "match_target"
FLUX_DYNAMIC = "dynamic"


@dataclass(frozen=True)
class LossWeights:
    reg_weight: float = 2.0
    kl_weight: float = 0.05
    flux_weight: float = 1.0
    stop_weight: float = 0.5
    stop_pos_weight: float = 100.0
    flux_variant: str = FLUX_MATCH_TARGET

    def __post_init__(self) -> None:
        for name in ("reg_weight", "kl_weight", "flux_weight", "stop_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.flux_variant not in (FLUX_MATCH_TARGET, FLUX_DYNAMIC):
            raise ValueError(f"unknown flux_variant {self.flux_variant!r}")


@dataclass
class LossBreakdown:
    reg_l1: float
    reg_l2: float
    kl: float
    flux: float
    stop: float
    total: float
    masked_frame_count: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def reg_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tuple[Tensor, Tensor]:
    """Masked L1 and L2 means over frame elements.

    ``pred`` and ``target`` are (..., n_mels) frames, ``mask`` a boolean
    over the frame axes; only masked frames' elements enter the means.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if not bool(mask.any()):
        raise EmptyMask("regression loss over an empty mask")
    diff = (pred - target)[mask]
    return diff.abs().mean(), (diff * diff).mean()


def kl_loss(params: LatentParams, mask: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) in closed form, averaged over masked
    steps: mean of 0.5 * sum_d(exp(log_var) + mu^2 - 1 - log_var)."""
    if not bool(mask.any()):
        raise EmptyMask("KL loss over an empty mask")
    per_step = 0.5 * (torch.exp(params.log_var) + params.mu * params.mu
                      - 1.0 - params.log_var).sum(dim=-1)
    return per_step[mask].mean()


def flux_loss(
    pred: Tensor, target: Tensor, mask: Tensor, variant: str = FLUX_MATCH_TARGET
) -> Tuple[Tensor, int]:
    """Frame-to-frame difference penalty over masked consecutive pairs.

    ``match_target`` (default) is the mean L1 between predicted deltas and
    target deltas; it is bounded and zero for a constant offset.
    ``dynamic`` instead rewards temporal variation outright by penalizing
    small predicted deltas (negative mean delta magnitude).

    Returns (loss, pair_count); with fewer than one valid consecutive pair
    the loss is 0 and pair_count flags it.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    pair_mask = mask[..., 1:] & mask[..., :-1]
    n_pairs = int(pair_mask.sum())
    if n_pairs == 0:
        return torch.zeros((), dtype=pred.dtype, device=pred.device), 0
    pred_delta = pred[..., 1:, :] - pred[..., :-1, :]
    if variant == FLUX_MATCH_TARGET:
        target_delta = target[..., 1:, :] - target[..., :-1, :]
        values = (pred_delta - target_delta).abs()
    elif variant == FLUX_DYNAMIC:
        values = -pred_delta.abs()
    else:
        raise ValueError(f"unknown flux variant {variant!r}")
    return values[pair_mask].mean(), n_pairs


def stop_loss(logits: Tensor, labels: Tensor, pos_weight: float = 100.0) -> Tensor:
    """Class-weighted binary cross-entropy on stop logits.

    Uses the softplus form (-log sigmoid(x) = softplus(-x)) so large
    logits cannot overflow. The positive class is upweighted because one
    utterance contributes exactly one positive step.
    """
    if logits.shape != labels.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(labels.shape)}")
    y = labels.to(logits.dtype)
    per_step = pos_weight * y * F.softplus(-logits) + (1.0 - y) * F.softplus(logits)
    return per_step.mean()


def combine_components(
    reg_l1: float, reg_l2: float, kl: float, flux: float, stop: float,
    weights: LossWeights,
) -> float:
    """The one place the weighted sum is spelled out; breakdown totals are
    bit-reproducible because every caller uses this accumulation order."""
    return (
        weights.reg_weight * (reg_l1 + reg_l2)
        + weights.kl_weight * kl
        + weights.flux_weight * flux
        + weights.stop_weight * stop
    )


def total_loss(
    pred: Tensor,
    target: Tensor,
    frame_mask: Tensor,
    latent: LatentParams,
    latent_mask: Tensor,
    stop_logits: Tensor,
    stop_labels: Tensor,
    weights: LossWeights,
) -> Tuple[Tensor, LossBreakdown]:
    """Evaluate all four terms and their weighted sum.

    The returned tensor drives backprop; the breakdown records each
    component as a float with the total recomputed from those floats via
    :func:`combine_components`.
    """
    l1, l2 = reg_loss(pred, target, frame_mask)
    kl = kl_loss(latent, latent_mask)
    flux, _ = flux_loss(pred, target, frame_mask, weights.flux_variant)
    stop = stop_loss(stop_logits, stop_labels, weights.stop_pos_weight)
    total = (
        weights.reg_weight * (l1 + l2)
        + weights.kl_weight * kl
        + weights.flux_weight * flux
        + weights.stop_weight * stop
    )
    if not bool(torch.isfinite(total)):
        raise NonFiniteLoss("total loss is not finite")
    f_l1, f_l2, f_kl = float(l1.detach()), float(l2.detach()), float(kl.detach())
    f_flux, f_stop = float(flux.detach()), float(stop.detach())
    breakdown = LossBreakdown(
        reg_l1=f_l1,
        reg_l2=f_l2,
        kl=f_kl,
        flux=f_flux,
        stop=f_stop,
        total=combine_components(f_l1, f_l2, f_kl, f_flux, f_stop, weights),
        masked_frame_count=int(frame_mask.sum()),
    )
    return total, breakdown


def kl_monte_carlo(
    params: LatentParams, n_samples: int, rng: torch.Generator
) -> float:
    """Monte Carlo estimate of KL(q || N(0, I)) as E_q[log q - log p].

    Independent of the closed form: draws from q and evaluates both log
    densities directly. Used to validate ``kl_loss``.
    """
    mu = params.mu.to(torch.float64)
    log_var = params.log_var.to(torch.float64)
    sigma = torch.exp(0.5 * log_var)
    eps = torch.randn((n_samples,) + mu.shape, generator=rng, dtype=torch.float64)
    z = mu + sigma * eps
    log_q = (-0.5 * (eps * eps + log_var + torch.log(torch.tensor(2 * torch.pi)))).sum(-1)
    log_p = (-0.5 * (z * z + torch.log(torch.tensor(2 * torch.pi)))).sum(-1)
    return float((log_q - log_p).mean())


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    max_coords: int = 200,
    rng: Optional[torch.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic (fix any sampling noise beforehand)
    and should run in float64: differences are accumulated in 64-bit and
    the default step of 1e-4 assumes that precision. Coordinates where
    both gradients sit below 1e-6 are compared absolutely instead, since
    a ratio of noise terms is meaningless there.
    """
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLoss("loss is not finite at the expansion point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    n_coords = min(max_coords, total)
    chosen = torch.randperm(total, generator=rng)[:n_coords]

    max_rel = 0.0
    for flat_index in chosen.tolist():
        param_index = 0
        while flat_index >= sizes[param_index]:
            flat_index -= sizes[param_index]
            param_index += 1
        p = params[param_index]
        flat = p.data.view(-1)
        original = flat[flat_index].item()

        with torch.no_grad():
            flat[flat_index] = original + epsilon
            loss_plus = float(loss_fn())
            flat[flat_index] = original - epsilon
            loss_minus = float(loss_fn())
            flat[flat_index] = original

        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        analytic = float(grads[param_index].view(-1)[flat_index])
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-6:
            rel = abs(analytic - numeric)  # absolute at the noise floor
        else:
            rel = abs(analytic - numeric) / scale
        max_rel = max(max_rel, rel)
    return max_rel
