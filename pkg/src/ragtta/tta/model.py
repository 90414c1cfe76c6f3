"""Transformer denoiser over log-mel frames with text (and optional audio) cross-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..audio import N_MELS
from .attention import attend


@dataclass
class DenoiserConfig:
    n_mels: int = N_MELS
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_text: int = 64
    d_audio: int = 64
    mlp_ratio: int = 2
    max_frames: int = 1024

    def to_dict(self):
        return asdict(self)


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = positions.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class CrossAttention(nn.Module):
    """Text cross-attention, optionally with a decoupled audio branch.

    The audio branch (``k_audio``/``v_audio``) reuses the text query and its
    output is blended as z_text + lam * z_audio before the shared output
    projection. It exists only after an audio fuser has been attached.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(cfg.d_text, d, bias=False)
        self.to_v = nn.Linear(cfg.d_text, d, bias=False)
        self.to_out = nn.Linear(d, d)
        self.k_audio: nn.Linear | None = None
        self.v_audio: nn.Linear | None = None

    def add_audio_branch(self, d_audio: int):
        d = self.to_q.out_features
        self.k_audio = nn.Linear(d_audio, d, bias=False)
        self.v_audio = nn.Linear(d_audio, d, bias=False)

    def forward(self, h, text_ctx, text_mask=None, audio_ctx=None, lam: float = 1.0):
        q = self.to_q(h)
        z = attend(q, self.to_k(text_ctx), self.to_v(text_ctx), self.n_heads, text_mask)
        if audio_ctx is not None and lam != 0.0 and self.k_audio is not None:
            z_a = attend(q, self.k_audio(audio_ctx), self.v_audio(audio_ctx), self.n_heads)
            z = z + lam * z_a
        return self.to_out(z)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.time_proj = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = CrossAttention(cfg)
        self.norm3 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(),
                                 nn.Linear(cfg.mlp_ratio * d, d))

    def forward(self, h, temb, text_ctx, text_mask, audio_ctx, lam):
        h = h + self.time_proj(temb)[:, None, :]
        x = self.norm1(h)
        h = h + self.self_attn(x, x, x, need_weights=False)[0]
        h = h + self.cross_attn(self.norm2(h), text_ctx, text_mask, audio_ctx, lam)
        return h + self.mlp(self.norm3(h))


class Denoiser(nn.Module):
    """Predicts the noise in a normalized mel grid, one token per frame.

    Input ``x`` is (B, n_frames, n_mels); text context (B, n_text, d_text)
    with a boolean key mask; audio context (B, n_patches, d_audio) or None.
    """

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.n_mels, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.n_mels)
        # learned replacement for the text condition under classifier-free dropout
        self.null_text = nn.Parameter(torch.randn(1, cfg.d_text))
        self.register_buffer("pos", sinusoid(torch.arange(cfg.max_frames), d).float(),
                             persistent=False)

    @property
    def has_fuser(self) -> bool:
        return self.blocks[0].cross_attn.k_audio is not None

    def cross_attention_layers(self) -> list[CrossAttention]:
        return [b.cross_attn for b in self.blocks]

    def attach_audio_branch(self):
        for layer in self.cross_attention_layers():
            layer.add_audio_branch(self.cfg.d_audio)

    def fuser_parameters(self):
        for i, layer in enumerate(self.cross_attention_layers()):
            if layer.k_audio is not None:
                yield f"blocks.{i}.cross_attn.k_audio.weight", layer.k_audio.weight
                yield f"blocks.{i}.cross_attn.v_audio.weight", layer.v_audio.weight

    def forward(self, x, t, text_ctx, text_mask=None, audio_ctx=None, lam: float = 1.0):
        n = x.shape[1]
        h = self.in_proj(x) + self.pos[:n].to(x.dtype)
        temb = self.time_mlp(sinusoid(t, self.cfg.d_model).to(x.dtype))
        for block in self.blocks:
            h = block(h, temb, text_ctx, text_mask, audio_ctx, lam)
        return self.out_proj(self.out_norm(h))


def pad_contexts(rows: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (n_i, d) contexts into (B, n_max, d) plus a key mask."""
    n_max = max(r.shape[0] for r in rows)
    d = rows[0].shape[1]
    out = rows[0].new_zeros((len(rows), n_max, d))
    mask = torch.zeros((len(rows), n_max), dtype=torch.bool)
    for i, r in enumerate(rows):
        out[i, :r.shape[0]] = r
        mask[i, :r.shape[0]] = True
    return out, mask


def epsilon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(pred, target)
