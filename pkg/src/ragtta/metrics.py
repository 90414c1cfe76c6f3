"""Evaluation metrics: Frechet distance, paired KL, Inception Score and CLAP-style score.

Every metric runs over a pluggable ``ClipModel`` (features plus a class
posterior per clip). The built-in model uses detector correlations as
features and their temperature softmax as the posterior. Frechet audio
distance is ``frechet_distance`` under a different feature model.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from .audio import AudioClip
from .encoders import JointEmbedder
from .errors import RejectedInput
from .synthcorpus import EventCaption, EventVocabulary, default_vocabulary

log = logging.getLogger(__name__)

KL_EPS = 1e-6
SHRINKAGE = 1e-3
EIG_TOL = 1e-8


class ClipModel(Protocol):
    fingerprint: str

    def embed(self, clip: AudioClip) -> np.ndarray: ...

    def posterior(self, clip: AudioClip) -> np.ndarray: ...


class DetectorModel:
    """Features: template correlations; posterior: softmax(temperature * correlations)."""

    def __init__(self, vocabulary: EventVocabulary | None = None, temperature: float = 10.0):
        self.vocabulary = vocabulary or default_vocabulary()
        self.temperature = temperature
        self.fingerprint = f"{JointEmbedder(self.vocabulary).fingerprint}-softmax{temperature:g}"

    def embed(self, clip: AudioClip) -> np.ndarray:
        return self.vocabulary.correlations(clip.mel)

    def posterior(self, clip: AudioClip) -> np.ndarray:
        logits = self.temperature * self.embed(clip)
        p = np.exp(logits - logits.max())
        return p / p.sum()


@dataclass
class MetricReport:
    fd: float
    kl: float
    is_mean: float
    is_std: float
    clap_percent: float
    n_items: int
    model_fingerprint: str
    fd_shrinkage: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def schema(cls) -> dict:
        num = {"type": "number"}
        return {
            "type": "object",
            "required": ["fd", "kl", "is_mean", "is_std", "clap_percent", "n_items",
                         "model_fingerprint"],
            "properties": {
                "fd": {"type": "number", "minimum": 0},
                "kl": {"type": "number", "minimum": 0},
                "is_mean": {"type": "number", "minimum": 1},
                "is_std": num,
                "clap_percent": {"type": "number", "minimum": -100, "maximum": 100},
                "n_items": {"type": "integer", "minimum": 0},
                "model_fingerprint": {"type": "string"},
                "fd_shrinkage": {"type": "boolean"},
            },
        }


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -EIG_TOL * scale:
        raise RejectedInput(f"matrix is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as Tr((S_a^1/2 S_b S_a^1/2)^1/2),
    which is symmetric PSD and handled by eigendecomposition.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(float), np.atleast_2d(cov_b).astype(float)
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Mean and covariance; shrinks towards sigma^2 * I when there are fewer than D + 1 rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise RejectedInput("features must be a non-empty (n, D) array")
    if not np.all(np.isfinite(x)):
        raise RejectedInput("features contain NaN or inf")
    n, d = x.shape
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    shrunk = n < d + 1
    if shrunk:
        sigma2 = float(np.trace(cov)) / d
        cov = cov + sigma2 * SHRINKAGE * np.eye(d)
    return mu, cov, shrunk


def frechet_distance(features_a, features_b, return_shrinkage: bool = False):
    mu_a, cov_a, sa = gaussian_fit(features_a)
    mu_b, cov_b, sb = gaussian_fit(features_b)
    fd = frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
    return (fd, sa or sb) if return_shrinkage else fd


def _smooth(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64) + KL_EPS
    return p / p.sum(axis=-1, keepdims=True)


def kl_rows(p_ref: np.ndarray, p_gen: np.ndarray) -> np.ndarray:
    """Per-row KL(p_ref || p_gen) after epsilon smoothing."""
    p, q = _smooth(p_ref), _smooth(p_gen)
    return np.sum(p * np.log(p / q), axis=-1)


def paired_kl_from_posteriors(p_ref, p_gen) -> float:
    p_ref, p_gen = np.atleast_2d(p_ref), np.atleast_2d(p_gen)
    if p_ref.shape != p_gen.shape:
        raise RejectedInput("reference and generated posteriors are not aligned")
    return max(math.fsum(kl_rows(p_ref, p_gen)) / len(p_ref), 0.0)


def paired_kl(reference_clips: Sequence[AudioClip], generated_clips: Sequence[AudioClip],
              model: ClipModel) -> float:
    if len(reference_clips) != len(generated_clips):
        raise RejectedInput("reference and generated clip lists differ in length")
    return paired_kl_from_posteriors([model.posterior(c) for c in reference_clips],
                                     [model.posterior(c) for c in generated_clips])


def inception_score_from_posteriors(posteriors, n_splits: int = 1) -> tuple[float, float]:
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or len(p) < 2:
        raise RejectedInput("inception score needs at least 2 posteriors")
    if p.shape[1] == 1:
        log.warning("single-class model: inception score is 1 by construction")
        return 1.0, 0.0
    scores = []
    for part in np.array_split(p, n_splits):
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(math.fsum(terms.sum(axis=1)) / len(part)))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(generated_clips: Sequence[AudioClip], model: ClipModel,
                    n_splits: int = 1) -> tuple[float, float]:
    return inception_score_from_posteriors([model.posterior(c) for c in generated_clips], n_splits)


def clap_score_from_embeddings(text_emb, audio_emb) -> float:
    t, a = np.atleast_2d(text_emb), np.atleast_2d(audio_emb)
    if t.shape != a.shape:
        raise RejectedInput("caption and clip embeddings are not aligned")
    cos = np.sum(t * a, axis=1) / (np.linalg.norm(t, axis=1) * np.linalg.norm(a, axis=1))
    return 100.0 * math.fsum(np.clip(cos, -1.0, 1.0)) / len(cos)


def clap_score(captions: Sequence[EventCaption], generated_clips: Sequence[AudioClip],
               embedder: JointEmbedder | None = None) -> float:
    if len(captions) != len(generated_clips):
        raise RejectedInput("captions and clips differ in length")
    embedder = embedder or JointEmbedder()
    return clap_score_from_embeddings([embedder.embed_text(c) for c in captions],
                                      [embedder.embed_audio(c) for c in generated_clips])


def evaluate(captions: Sequence[EventCaption], reference_clips: Sequence[AudioClip],
             generated_clips: Sequence[AudioClip], model: ClipModel | None = None,
             embedder: JointEmbedder | None = None, n_splits: int = 1) -> MetricReport:
    """Full report for generated clips against references paired by caption."""
    model = model or DetectorModel()
    fd, shrunk = frechet_distance([model.embed(c) for c in reference_clips],
                                  [model.embed(c) for c in generated_clips], return_shrinkage=True)
    is_mean, is_std = inception_score(generated_clips, model, n_splits)
    return MetricReport(
        fd=fd, kl=paired_kl(reference_clips, generated_clips, model), is_mean=is_mean,
        is_std=is_std, clap_percent=clap_score(captions, generated_clips, embedder),
        n_items=len(generated_clips), model_fingerprint=model.fingerprint, fd_shrinkage=shrunk)
