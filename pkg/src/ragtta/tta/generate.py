"""Text (and optionally audio) conditioned generation from a checkpoint."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..audio import AudioClip, SAMPLE_RATE, denormalize_db, n_frames_for
from ..errors import ConfigurationError
from ..synthcorpus import EventCaption
from .checkpoint import Checkpoint
from .sampler import Conditioning, sample

DEFAULT_GUIDANCE = 3.0


def checkpoint_frames(ckpt: Checkpoint) -> int:
    n = ckpt.config.get("n_frames")
    if not n:
        n = n_frames_for(int(2.0 * SAMPLE_RATE))
    return int(n)


def generate_mels(ckpt: Checkpoint | None, captions: Sequence[EventCaption], seeds: Sequence[int],
                  guidance_scale: float = DEFAULT_GUIDANCE,
                  reference_mels: Sequence[np.ndarray | None] | None = None,
                  lam: float = 1.0) -> list[np.ndarray]:
    """Generated dB mels, one per (caption, seed).

    ``reference_mels`` supplies retrieved audio for the fuser; None (or all
    entries None) means no audio condition, which takes exactly the base
    model's computation path.
    """
    if ckpt is None:
        raise ConfigurationError("no checkpoint loaded")
    text = [torch.from_numpy(ckpt.text_encoder(c.validate(ckpt.vocabulary)).features)
            for c in captions]
    audio = None
    if reference_mels is not None and any(m is not None for m in reference_mels):
        if not ckpt.enhanced:
            raise ConfigurationError("audio references need a checkpoint with an attached fuser")
        feats = []
        shape = None
        for m in reference_mels:
            if m is not None:
                f = ckpt.audio_encoder.encode_mel(m).patches
                shape = f.shape
                feats.append(f)
            else:
                feats.append(None)
        audio = torch.from_numpy(np.stack([f if f is not None else np.zeros(shape, np.float32)
                                           for f in feats]))
    cond = Conditioning(text, audio, lam)
    with torch.no_grad():
        x = sample(ckpt.model, cond, list(seeds), checkpoint_frames(ckpt), ckpt.schedule,
                   guidance_scale)
    return [denormalize_db(m) for m in x]


def generate(ckpt: Checkpoint, caption: EventCaption, seed: int,
             guidance_scale: float = DEFAULT_GUIDANCE, reference: AudioClip | None = None,
             lam: float = 1.0, render_audio: bool = True) -> AudioClip:
    refs = None if reference is None else [reference.mel]
    mel = generate_mels(ckpt, [caption], [seed], guidance_scale, refs, lam)[0]
    n_samples = int(round(ckpt.config.get("duration", 2.0) * SAMPLE_RATE))
    if render_audio:
        return AudioClip.from_mel(mel, n_samples)
    return AudioClip(samples=np.zeros(n_samples, np.float32), _mel=mel)
