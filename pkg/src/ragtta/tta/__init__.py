"""Toy mel-space diffusion model: schedule, denoiser, sampler, training, checkpoints."""
