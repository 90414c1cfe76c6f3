"""Decoupled audio cross-attention fuser and its frozen-base training harness.

Each text cross-attention site gets its own audio key/value projections.
The audio branch shares the text query, and its output is added to the
text branch output with weight ``lam``. Only those projections train.
"""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import read_wav
from .encoders import JointEmbedder
from .errors import ConfigurationError, RejectedInput, TrainingError
from .retrieval import RetrievalIndex, search
from .synthcorpus import CorpusManifest, ManifestRecord
from .tta.attention import cross_attention
from .tta.checkpoint import Checkpoint
from .tta.train import denoiser_loss, load_split_mels, smoothed

log = logging.getLogger(__name__)


@dataclass
class FuserConfig:
    lam: float = 1.0
    condition_dropout: float = 0.05
    init_scale: float = 1e-3

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise RejectedInput("lambda must be finite and non-negative")
        if not 0.0 <= self.condition_dropout < 1.0:
            raise RejectedInput("condition dropout must lie in [0, 1)")


@dataclass
class FuserTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-2
    condition_dropout: float = 0.05
    lam: float = 1.0
    seed: int = 0
    max_skip_fraction: float = 0.5
    log_every: int = 100


def fused_cross_attention(z, c_t, c_a, W_q, W_k, W_v, W_k_audio, W_v_audio, lam: float = 1.0,
                          n_heads: int = 1):
    """Text attention plus ``lam`` times audio attention over the same queries.

    With ``c_a`` None or ``lam`` 0 the audio branch is skipped and the result
    is exactly the text branch.
    """
    z_t = cross_attention(z, c_t, W_q, W_k, W_v, n_heads)
    if c_a is None or lam == 0.0:
        return z_t
    return z_t + lam * cross_attention(z, c_a, W_q, W_k_audio, W_v_audio, n_heads)


def attach_fuser(base: Checkpoint, init_scale: float = 1e-3, seed: int = 0) -> Checkpoint:
    """Copy of ``base`` with seeded-normal * init_scale audio projections at every site."""
    layers = base.model.cross_attention_layers()
    shapes = {(l.to_q.out_features, l.to_k.out_features) for l in layers}
    if len(shapes) != 1 or any(a != b for a, b in shapes):
        raise ConfigurationError(f"inconsistent cross-attention shapes in checkpoint: {shapes}")
    if base.enhanced:
        raise ConfigurationError("checkpoint already carries a fuser")
    enhanced = copy.deepcopy(base)
    enhanced.model.attach_audio_branch()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, w in enhanced.model.fuser_parameters():
            w.copy_(torch.randn(w.shape, generator=gen) * init_scale)
    enhanced.config = {**base.config, "fuser": {"init_scale": init_scale, "seed": seed}}
    enhanced.seeds = {**base.seeds, "fuser_init": seed}
    enhanced.model.eval()
    return enhanced


PairingPolicy = Callable[[ManifestRecord], "str | None"]


def self_retrieval_policy(index: RetrievalIndex, embedder: JointEmbedder,
                          exclude_self: bool = True) -> PairingPolicy:
    """Reference = highest-cosine database clip for the caption, never the target itself."""
    def pick(record: ManifestRecord):
        hits = search(index, record.caption, 2, embedder)
        for h in hits:
            if not (exclude_self and h.id == record.id):
                return h.audio_path
        return None
    return pick


def _freeze_base(model):
    fuser = {id(p) for _, p in model.fuser_parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) in fuser)


def reference_features(ckpt: Checkpoint, paths: Sequence[str | None]) -> list[np.ndarray | None]:
    cache: dict[str, np.ndarray] = {}
    out = []
    for p in paths:
        if p is None:
            out.append(None)
            continue
        if p not in cache:
            cache[p] = ckpt.audio_encoder(read_wav(p)).patches
        out.append(cache[p])
    return out


def train_fuser(enhanced: Checkpoint, manifest: CorpusManifest, pairing_policy: PairingPolicy,
                hp: FuserTrainConfig | None = None) -> Checkpoint:
    """Train only the audio projections; every base array stays bit-identical.

    Each example is (caption, target clip, reference clip). The text and
    audio conditions are each dropped independently with probability
    ``condition_dropout``: text falls back to the base model's null token,
    audio to all-zero patch features (whose attention output is exactly 0).
    """
    hp = hp or FuserTrainConfig()
    if not enhanced.enhanced:
        raise ConfigurationError("attach a fuser before training it")
    ckpt = copy.deepcopy(enhanced)
    model = ckpt.model
    X, captions, ids = load_split_mels(manifest, "train")
    recs = {r.id: r for r in manifest.split("train")}
    refs = []
    for i in ids:
        refs.append(pairing_policy(recs[i]))
    skipped = sum(r is None for r in refs)
    if skipped:
        warnings.warn(f"{skipped} of {len(refs)} training captions have no reference; skipped")
    if skipped > hp.max_skip_fraction * len(refs):
        raise TrainingError(f"pairing policy found no reference for {skipped}/{len(refs)} captions")
    keep = [k for k, r in enumerate(refs) if r is not None]
    feats = reference_features(ckpt, [refs[k] for k in keep])
    X = X[keep]
    A = torch.from_numpy(np.stack(feats))
    ctx = [torch.from_numpy(ckpt.text_encoder(captions[k]).features) for k in keep]

    _freeze_base(model)
    params = [p for _, p in model.fuser_parameters()]
    opt = torch.optim.AdamW(params, lr=hp.lr, weight_decay=hp.weight_decay)
    alpha_bar = torch.tensor(ckpt.schedule.alpha_bar, dtype=torch.float32)
    gen = torch.Generator().manual_seed(hp.seed)
    T = ckpt.schedule.T
    # dropout and layer norm hold no state, but keep eval mode so the base is a pure function
    model.eval()
    losses = []
    for step in range(hp.steps):
        idx = torch.randint(0, len(X), (hp.batch_size,), generator=gen)
        t = torch.randint(0, T, (hp.batch_size,), generator=gen)
        eps = torch.randn(X[idx].shape, generator=gen)
        drop_text = (torch.rand(hp.batch_size, generator=gen) < hp.condition_dropout).tolist()
        drop_audio = torch.rand(hp.batch_size, generator=gen) < hp.condition_dropout
        rows = [model.null_text.detach() if d else ctx[i] for i, d in zip(idx.tolist(), drop_text)]
        audio = A[idx] * (~drop_audio).to(A.dtype)[:, None, None]
        loss = denoiser_loss(model, X[idx], t, eps, rows, alpha_bar, audio, hp.lam)
        if not torch.isfinite(loss):
            raise TrainingError(f"fuser training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if hp.log_every and step % hp.log_every == 0:
            log.info("fuser step %d loss %.4f", step, smoothed(losses)[-1])
    for p in model.parameters():
        p.requires_grad_(False)
    ckpt.config = {**ckpt.config, "fuser_train": asdict(hp)}
    ckpt.history = {**ckpt.history, "fuser_losses": losses, "fuser_skipped": skipped}
    return ckpt


def validation_losses(ckpt: Checkpoint, manifest: CorpusManifest, pairing_policy: PairingPolicy,
                      split: str = "test", n_draws: int = 4, seed: int = 123,
                      lam: float = 1.0, max_items: int | None = None) -> tuple[float, float]:
    """(loss with references through the fuser, loss of the base path without audio),
    over identical noise and timesteps."""
    X, captions, ids = load_split_mels(manifest, split)
    recs = {r.id: r for r in manifest.split(split)}
    if max_items:
        X, captions, ids = X[:max_items], captions[:max_items], ids[:max_items]
    feats = reference_features(ckpt, [pairing_policy(recs[i]) for i in ids])
    shape = next(f.shape for f in feats if f is not None)
    A = torch.from_numpy(np.stack([f if f is not None else np.zeros(shape, np.float32) for f in feats]))
    ctx = [torch.from_numpy(ckpt.text_encoder(c).features) for c in captions]
    alpha_bar = torch.tensor(ckpt.schedule.alpha_bar, dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    with_ref, without = [], []
    with torch.no_grad():
        for _ in range(n_draws):
            for s in range(0, len(X), 32):
                sl = slice(s, s + 32)
                n = X[sl].shape[0]
                t = torch.randint(0, ckpt.schedule.T, (n,), generator=gen)
                eps = torch.randn(X[sl].shape, generator=gen)
                with_ref.append(float(denoiser_loss(ckpt.model, X[sl], t, eps, ctx[sl], alpha_bar,
                                                    A[sl], lam)) * n)
                without.append(float(denoiser_loss(ckpt.model, X[sl], t, eps, ctx[sl], alpha_bar)) * n)
    total = n_draws * len(X)
    return sum(with_ref) / total, sum(without) / total
