"""Frozen feature extractors: text tokens, audio mel patches and the joint embedder."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .audio import AudioClip, N_MELS, normalize_db
from .errors import RejectedInput
from .synthcorpus import EventCaption, EventVocabulary, default_vocabulary

D_TEXT = 64
D_AUDIO = 64
PATCH_MELS = 4
PATCH_FRAMES = 8
START_TOKEN = 0


@dataclass
class TextFeatures:
    tokens: np.ndarray  # (n,) int
    features: np.ndarray  # (n, d_text)


@dataclass
class AudioPatchFeatures:
    patches: np.ndarray  # (n_patches, d_audio)
    grid: tuple[int, int]  # (mel blocks, frame blocks)


class TextEncoder:
    """Embedding-table lookup; token 0 is a start token, label i maps to i + 1.

    No positional information is added, so permuting the caption permutes
    the event rows.
    """

    def __init__(self, vocabulary: EventVocabulary, d_text: int = D_TEXT, seed: int = 0,
                 table: np.ndarray | None = None):
        self.vocabulary = vocabulary
        self.seed = seed
        if table is None:
            table = np.random.default_rng(seed).standard_normal((len(vocabulary) + 1, d_text))
        self.table = np.asarray(table, dtype=np.float32)

    def tokenize(self, caption: EventCaption) -> np.ndarray:
        return np.array([START_TOKEN] + [self.vocabulary.index(e) + 1 for e in caption.events])

    def __call__(self, caption: EventCaption) -> TextFeatures:
        tokens = self.tokenize(caption)
        return TextFeatures(tokens, self.table[tokens])


class AudioPatchEncoder:
    """Seeded linear projection of non-overlapping normalized log-mel patches.

    Stands in for a frozen masked-autoencoder encoder: the projection is
    injective, so patch features retain the full patch content.
    """

    def __init__(self, d_audio: int = D_AUDIO, seed: int = 1, patch_mels: int = PATCH_MELS,
                 patch_frames: int = PATCH_FRAMES, projection: np.ndarray | None = None):
        self.seed = seed
        self.patch_mels = patch_mels
        self.patch_frames = patch_frames
        size = patch_mels * patch_frames
        if projection is None:
            projection = np.random.default_rng(seed).standard_normal((size, d_audio)) / math.sqrt(size)
        self.projection = np.asarray(projection, dtype=np.float32)

    def grid(self, n_frames: int) -> tuple[int, int]:
        return math.ceil(N_MELS / self.patch_mels), math.ceil(n_frames / self.patch_frames)

    def patchify(self, mel_db: np.ndarray) -> np.ndarray:
        """(n_patches, patch_mels * patch_frames) patches of the normalized mel, row-major over
        (mel block, frame block); ragged edges are padded with the floor value."""
        n_mels, n_frames = mel_db.shape
        if n_frames < self.patch_frames:
            raise RejectedInput(f"clip has {n_frames} frames, shorter than one patch")
        gm, gf = self.grid(n_frames)
        x = np.full((gm * self.patch_mels, gf * self.patch_frames), -1.0)
        x[:n_mels, :n_frames] = normalize_db(mel_db)
        x = x.reshape(gm, self.patch_mels, gf, self.patch_frames).transpose(0, 2, 1, 3)
        return x.reshape(gm * gf, -1)

    def encode_mel(self, mel_db: np.ndarray) -> AudioPatchFeatures:
        patches = self.patchify(mel_db).astype(np.float32) @ self.projection
        return AudioPatchFeatures(patches, self.grid(mel_db.shape[1]))

    def __call__(self, clip: AudioClip) -> AudioPatchFeatures:
        return self.encode_mel(clip.mel)


def encode_text(caption: EventCaption, encoder: TextEncoder) -> TextFeatures:
    return encoder(caption)


def encode_audio_patches(clip: AudioClip, encoder: AudioPatchEncoder) -> AudioPatchFeatures:
    return encoder(clip)


class EmbeddingModel(Protocol):
    """Shared text/audio embedding space used for retrieval and the CLAP-style score."""

    fingerprint: str

    def embed_text(self, caption: EventCaption) -> np.ndarray: ...

    def embed_audio(self, clip: AudioClip) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        return np.full(len(v), 1.0 / math.sqrt(len(v)))
    return v / n


class JointEmbedder:
    """Analytic joint space with one axis per vocabulary label.

    Text: normalized mean of the caption's one-hot vectors. Audio: normalized
    vector of squared detector correlations (negatives clipped to 0 first);
    squaring suppresses the moderate spurious correlations between templates.
    Labels are never consulted on the audio side. Silence maps to the
    uniform vector.
    """

    def __init__(self, vocabulary: EventVocabulary | None = None):
        self.vocabulary = vocabulary or default_vocabulary()
        spec = repr([(e.label, e.kind, e.params) for e in self.vocabulary.entries])
        self.fingerprint = "detcorr2-" + hashlib.sha256(spec.encode()).hexdigest()[:16]

    @property
    def dim(self) -> int:
        return len(self.vocabulary)

    def embed_text(self, caption: EventCaption) -> np.ndarray:
        v = np.zeros(self.dim)
        for e in caption.events:
            v[self.vocabulary.index(e)] += 1.0
        return _unit(v / len(caption.events))

    def embed_audio(self, clip: AudioClip) -> np.ndarray:
        return self.embed_mel(clip.mel)

    def embed_mel(self, mel_db: np.ndarray) -> np.ndarray:
        return _unit(np.maximum(self.vocabulary.correlations(mel_db), 0.0) ** 2)


def embed_text(caption: EventCaption, embedder: JointEmbedder | None = None) -> np.ndarray:
    return (embedder or JointEmbedder()).embed_text(caption)


def embed_audio(clip: AudioClip, embedder: JointEmbedder | None = None) -> np.ndarray:
    return (embedder or JointEmbedder()).embed_audio(clip)
