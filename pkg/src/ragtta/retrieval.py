"""Text-to-audio retrieval over an unlabeled clip database.

The index stores one unit-norm audio embedding per clip and is searched by
exhaustive cosine scan. Labels in the manifest are never read at ingestion.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import read_wav
from .encoders import JointEmbedder
from .errors import RagTTAError, RejectedInput, StaleIndexError
from .synthcorpus import CorpusManifest, EventCaption

log = logging.getLogger(__name__)

INDEX_FORMAT = "ragtta-index/1"


@dataclass(frozen=True)
class Hit:
    id: str
    score: float
    audio_path: str


@dataclass
class RetrievalIndex:
    ids: list[str]
    embeddings: np.ndarray  # (N, K) float64, unit rows
    audio_paths: list[str]
    embedder_fingerprint: str
    dim: int = field(default=0)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if not self.dim:
            self.dim = emb.shape[-1] if emb.ndim == 2 else emb.size // max(len(self.ids), 1)
        self.embeddings = emb.reshape(len(self.ids), self.dim)
        if len(set(self.ids)) != len(self.ids):
            raise RejectedInput("index ids must be unique")
        if len(self.ids) and not np.allclose(np.linalg.norm(self.embeddings, axis=1), 1.0, atol=1e-6):
            raise RejectedInput("index embeddings must be unit-norm")

    def __len__(self):
        return len(self.ids)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"format": INDEX_FORMAT, "embedder_fingerprint":
                                 self.embedder_fingerprint, "K": self.dim}) + "\n")
            for i, e, p in zip(self.ids, self.embeddings, self.audio_paths):
                # repr of a float round-trips exactly
                fh.write(json.dumps({"id": i, "audio_path": p,
                                     "embedding": [float(x) for x in e]}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != INDEX_FORMAT:
                raise RejectedInput(f"{path}: not a retrieval index")
            rows = [json.loads(line) for line in fh if line.strip()]
        emb = np.array([r["embedding"] for r in rows], dtype=np.float64).reshape(len(rows), header["K"])
        return cls([r["id"] for r in rows], emb, [r["audio_path"] for r in rows],
                   header["embedder_fingerprint"], header["K"])


def ingest(manifest: CorpusManifest, embedder: JointEmbedder, split: str = "database") -> RetrievalIndex:
    """Embed every clip of ``split`` from its audio alone.

    Unreadable files are skipped with a warning; if every file fails the
    ingestion fails.
    """
    records = manifest.split(split)
    ids, embs, paths = [], [], []
    failures = 0
    for rec in records:
        path = manifest.resolve(rec)
        try:
            clip = read_wav(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable clip %s: %s", path, exc)
            failures += 1
            continue
        ids.append(rec.id)
        embs.append(embedder.embed_audio(clip))
        paths.append(str(path))
    if records and failures == len(records):
        raise RagTTAError(f"none of the {len(records)} clips in split {split!r} could be read")
    return RetrievalIndex(ids, np.array(embs).reshape(len(ids), embedder.dim), paths,
                          embedder.fingerprint, embedder.dim)


def search_vector(index: RetrievalIndex, query: np.ndarray, k: int) -> list[Hit]:
    if k < 1:
        raise RejectedInput("k must be at least 1")
    if len(index) == 0:
        return []
    scores = np.clip(index.embeddings @ np.asarray(query, dtype=np.float64), -1.0, 1.0)
    # descending score, ascending id on ties
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))[:k]
    return [Hit(index.ids[i], float(scores[i]), index.audio_paths[i]) for i in order]


def search(index: RetrievalIndex, caption: EventCaption, k: int,
           embedder: JointEmbedder) -> list[Hit]:
    if embedder.fingerprint != index.embedder_fingerprint:
        raise StaleIndexError(f"index built with {index.embedder_fingerprint}, "
                              f"query embedder is {embedder.fingerprint}")
    return search_vector(index, embedder.embed_text(caption), k)


def brute_force_search(ids: Sequence[str], vectors: Sequence[Sequence[float]],
                       query: Sequence[float], k: int) -> list[tuple[str, float]]:
    """Reference scan in plain Python; used to check ``search``."""
    scored = []
    for i, v in zip(ids, vectors):
        dot = sum(a * b for a, b in zip(v, query))
        scored.append((-dot, i))
    scored.sort()
    return [(i, -s) for s, i in scored[:k]]
