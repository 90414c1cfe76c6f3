"""Scaled dot-product cross-attention as used at every conditioning site."""
from __future__ import annotations

import math

import torch

from ..errors import RejectedInput


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int = 1,
           mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_head)) v, split over ``n_heads``.

    q: (..., n_q, d), k and v: (..., n_k, d). ``mask`` (..., n_k) is True for
    keys that may be attended to.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise RejectedInput(f"incompatible attention shapes {tuple(q.shape)}, "
                            f"{tuple(k.shape)}, {tuple(v.shape)}")
    if d % n_heads:
        raise RejectedInput(f"d={d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(x):
        return x.reshape(*x.shape[:-1], n_heads, dh).transpose(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        logits = logits.masked_fill(~mask[..., None, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = weights @ vh
    return out.transpose(-2, -3).reshape(*q.shape[:-1], d)


def cross_attention(z: torch.Tensor, context: torch.Tensor, W_q: torch.Tensor,
                    W_k: torch.Tensor, W_v: torch.Tensor, n_heads: int = 1,
                    mask: torch.Tensor | None = None) -> torch.Tensor:
    """Attention(z W_q, c W_k, c W_v) for row-vector features.

    W_q: (d_model, d_attn); W_k, W_v: (d_context, d_attn).
    """
    if context.shape[-2] == 0:
        raise RejectedInput("context must have at least one row")
    if z.shape[-1] != W_q.shape[0] or context.shape[-1] != W_k.shape[0] \
            or context.shape[-1] != W_v.shape[0]:
        raise RejectedInput("feature and projection dimensions disagree")
    return attend(z @ W_q, context @ W_k, context @ W_v, n_heads, mask)


def attention_weights(z, context, W_q, W_k):
    """Single-head attention probabilities, for inspection and tests."""
    q, k = z @ W_q, context @ W_k
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
