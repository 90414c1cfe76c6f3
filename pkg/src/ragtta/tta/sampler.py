"""DDPM ancestral sampling with classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import RejectedInput
from .model import Denoiser, pad_contexts
from .schedule import NoiseSchedule


def guided_epsilon(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ancestral_update(x_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule,
                     noise: torch.Tensor | None) -> torch.Tensor:
    """Posterior mean from the (clipped) x0 estimate plus sigma_t * noise; no noise at t = 0."""
    ab = schedule.alpha_bar
    betas = schedule.betas
    ab_t = float(ab[t])
    ab_prev = float(ab[t - 1]) if t > 0 else 1.0
    beta_t = float(betas[t])
    x0 = ((x_t - (1.0 - ab_t) ** 0.5 * eps) / ab_t ** 0.5).clamp(-1.0, 1.0)
    mean = (ab_prev ** 0.5 * beta_t / (1.0 - ab_t)) * x0 \
        + ((1.0 - beta_t) ** 0.5 * (1.0 - ab_prev) / (1.0 - ab_t)) * x_t
    if t == 0:
        return mean
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + var ** 0.5 * noise


@dataclass
class Conditioning:
    """Per-item conditioning for one guided batch.

    text: list of (n_i, d_text) tensors. audio: (B, n_patches, d_audio) or
    None when no audio condition is present for the whole batch.
    """

    text: list[torch.Tensor]
    audio: torch.Tensor | None = None
    lam: float = 1.0


def _guided_eps(model: Denoiser, x_t, t: int, cond: Conditioning, guidance_scale: float):
    B = x_t.shape[0]
    text, mask = pad_contexts(list(cond.text) + [model.null_text] * B)
    audio = None
    if cond.audio is not None:
        # null audio = zero features, whose attention output is exactly zero
        audio = torch.cat([cond.audio, torch.zeros_like(cond.audio)])
    tt = torch.full((2 * B,), t, dtype=torch.long)
    eps = model(torch.cat([x_t, x_t]), tt, text, mask, audio, cond.lam)
    return guided_epsilon(eps[:B], eps[B:], guidance_scale)


def denoise_step(model: Denoiser, x_t: torch.Tensor, t: int, cond: Conditioning,
                 guidance_scale: float, schedule: NoiseSchedule,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    if not 0 <= t < schedule.T:
        raise RejectedInput(f"timestep {t} outside [0, {schedule.T})")
    eps = _guided_eps(model, x_t, t, cond, guidance_scale)
    return ancestral_update(x_t, eps, t, schedule, noise)


@torch.no_grad()
def sample(model: Denoiser, cond: Conditioning, seeds: list[int], n_frames: int,
           schedule: NoiseSchedule, guidance_scale: float, trace: list | None = None) -> np.ndarray:
    """Full reverse pass; each item draws all of its noise from its own seeded generator.

    Returns normalized mels of shape (B, n_mels, n_frames).
    """
    if len(seeds) != len(cond.text):
        raise RejectedInput("one seed per conditioning item required")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = (n_frames, model.cfg.n_mels)

    def draw():
        return torch.stack([torch.randn(shape, generator=g) for g in gens])

    x = draw()
    for t in reversed(range(schedule.T)):
        noise = draw() if t > 0 else None
        x = denoise_step(model, x, t, cond, guidance_scale, schedule, noise)
        if trace is not None:
            trace.append(t)
    return x.transpose(1, 2).numpy().astype(np.float64)
