"""Base denoiser training (epsilon prediction, text-condition dropout)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..audio import normalize_db, read_wav
from ..encoders import AudioPatchEncoder, TextEncoder
from ..errors import RejectedInput, TrainingError
from ..synthcorpus import CorpusManifest, EventCaption, EventVocabulary, default_vocabulary
from .checkpoint import Checkpoint
from .model import Denoiser, DenoiserConfig, pad_contexts
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class BaseTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    text_dropout: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    T: int = 100
    text_seed: int = 0
    audio_seed: int = 1
    log_every: int = 100


def load_split_mels(manifest: CorpusManifest, split: str) -> tuple[torch.Tensor, list[EventCaption], list[str]]:
    """Normalized mels (N, n_frames, n_mels) for every clip of ``split``."""
    recs = manifest.split(split)
    if not recs:
        raise RejectedInput(f"manifest has no {split!r} records")
    mels = [normalize_db(read_wav(manifest.resolve(r)).mel).T for r in recs]
    return (torch.tensor(np.stack(mels), dtype=torch.float32), [r.caption for r in recs],
            [r.id for r in recs])


def noisy(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, alpha_bar: torch.Tensor):
    a = alpha_bar[t].reshape(-1, *([1] * (x0.dim() - 1))).to(x0.dtype)
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def denoiser_loss(model: Denoiser, x0, t, eps, text_rows, alpha_bar, audio=None, lam=1.0):
    """Mean squared error between true and predicted noise."""
    ctx, mask = pad_contexts(text_rows)
    pred = model(noisy(x0, t, eps, alpha_bar), t, ctx.to(x0.dtype), mask,
                 None if audio is None else audio.to(x0.dtype), lam)
    return torch.mean((pred - eps) ** 2)


def smoothed(losses, beta=0.98):
    out, ema = [], None
    for v in losses:
        ema = v if ema is None else beta * ema + (1 - beta) * v
        out.append(ema)
    return out


def train_base(manifest: CorpusManifest, hp: BaseTrainConfig | None = None,
               vocabulary: EventVocabulary | None = None,
               model_cfg: DenoiserConfig | None = None) -> Checkpoint:
    hp = hp or BaseTrainConfig()
    vocabulary = vocabulary or default_vocabulary()
    X, captions, _ = load_split_mels(manifest, "train")
    duration = read_wav(manifest.resolve(manifest.split("train")[0])).duration
    torch.manual_seed(hp.seed)
    model = Denoiser(model_cfg)
    text_enc = TextEncoder(vocabulary, model.cfg.d_text, seed=hp.text_seed)
    audio_enc = AudioPatchEncoder(model.cfg.d_audio, seed=hp.audio_seed)
    ckpt = Checkpoint(model, text_enc, audio_enc, vocabulary, NoiseSchedule(hp.T),
                      config={"base_train": asdict(hp), "n_frames": int(X.shape[1]),
                              "duration": duration},
                      seeds={"train": hp.seed, "text_encoder": hp.text_seed,
                             "audio_encoder": hp.audio_seed})
    ctx = [torch.from_numpy(text_enc(c).features) for c in captions]
    alpha_bar = torch.tensor(ckpt.schedule.alpha_bar, dtype=torch.float32)
    gen = torch.Generator().manual_seed(hp.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(hp.warmup, 1)))
    model.train()
    losses = []
    for step in range(hp.steps):
        idx = torch.randint(0, len(X), (hp.batch_size,), generator=gen)
        t = torch.randint(0, hp.T, (hp.batch_size,), generator=gen)
        eps = torch.randn(X[idx].shape, generator=gen)
        drop = torch.rand(hp.batch_size, generator=gen) < hp.text_dropout
        rows = [model.null_text if d else ctx[i] for i, d in zip(idx.tolist(), drop.tolist())]
        loss = denoiser_loss(model, X[idx], t, eps, rows, alpha_bar)
        if not torch.isfinite(loss):
            raise TrainingError(f"base training diverged at step {step} (loss={loss.item()}); "
                                f"lr={hp.lr}, batch={hp.batch_size}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), hp.grad_clip)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if hp.log_every and step % hp.log_every == 0:
            log.info("base step %d loss %.4f", step, smoothed(losses)[-1])
    model.eval()
    ckpt.history["base_losses"] = losses
    return ckpt
