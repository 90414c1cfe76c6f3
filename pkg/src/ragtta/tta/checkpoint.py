"""Checkpoint container: a directory with ``manifest.json`` and one float32 LE blob per array.

Array names are namespaced: ``base/...`` for the denoiser, ``encoders/...``
for the frozen text table and patch projection, ``fuser/...`` for adapter
weights. The manifest marks every array trainable or frozen and records
its SHA-256.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..encoders import AudioPatchEncoder, TextEncoder
from ..errors import ConfigurationError
from ..synthcorpus import EventVocabulary
from .model import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule

FORMAT = "ragtta-checkpoint/1"
FUSER_PREFIX = "fuser/"


def array_sha256(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f4").tobytes()).hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    """In-memory model bundle: denoiser, encoders, schedule and bookkeeping."""

    model: Denoiser
    text_encoder: TextEncoder
    audio_encoder: AudioPatchEncoder
    vocabulary: EventVocabulary
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    @property
    def enhanced(self) -> bool:
        return self.model.has_fuser

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        fuser = {n for n, _ in self.model.fuser_parameters()}
        for name, p in self.model.state_dict().items():
            key = (FUSER_PREFIX if name in fuser else "base/") + name
            out[key] = p.detach().cpu().numpy().astype(np.float32)
        out["encoders/text_table"] = self.text_encoder.table
        out["encoders/patch_projection"] = self.audio_encoder.projection
        return out

    def base_hashes(self) -> dict[str, str]:
        return {k: array_sha256(v) for k, v in self.arrays().items()
                if not k.startswith(FUSER_PREFIX)}

    def all_hashes(self) -> dict[str, str]:
        return {k: array_sha256(v) for k, v in self.arrays().items()}

    def trainable_names(self) -> set[str]:
        return {k for k in self.arrays() if k.startswith(FUSER_PREFIX)} if self.enhanced \
            else {k for k in self.arrays() if k.startswith("base/")}

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "enhanced": self.enhanced,
            "denoiser": self.model.cfg.to_dict(),
            "schedule": {"T": self.schedule.T},
            "vocabulary": self.vocabulary.to_json(),
            "encoders": {"text_seed": self.text_encoder.seed, "audio_seed": self.audio_encoder.seed,
                         "patch_mels": self.audio_encoder.patch_mels,
                         "patch_frames": self.audio_encoder.patch_frames},
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seeds": self.seeds,
            "history": self.history,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        trainable = self.trainable_names()
        entries = {}
        for name, a in sorted(self.arrays().items()):
            fname = name.replace("/", "__") + ".bin"
            data = np.ascontiguousarray(a, dtype="<f4")
            (path / fname).write_bytes(data.tobytes())
            entries[name] = {"file": fname, "dtype": "float32", "byte_order": "little",
                             "shape": list(a.shape), "sha256": array_sha256(a),
                             "trainable": name in trainable}
        manifest = self.manifest()
        manifest["arrays"] = entries
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        mfile = path / "manifest.json"
        if not mfile.exists():
            raise ConfigurationError(f"no checkpoint at {path}")
        m = json.loads(mfile.read_text())
        if m.get("format") != FORMAT:
            raise ConfigurationError(f"{path}: unsupported checkpoint format {m.get('format')!r}")
        arrays = {}
        for name, e in m["arrays"].items():
            raw = np.frombuffer((path / e["file"]).read_bytes(), dtype="<f4")
            arrays[name] = raw.reshape(e["shape"]).copy()
        vocab = EventVocabulary.from_json(m["vocabulary"])
        model = Denoiser(DenoiserConfig(**m["denoiser"]))
        if m["enhanced"]:
            model.attach_audio_branch()
        state = {}
        for name, a in arrays.items():
            if name.startswith("base/"):
                state[name[5:]] = torch.from_numpy(a)
            elif name.startswith(FUSER_PREFIX):
                state[name[len(FUSER_PREFIX):]] = torch.from_numpy(a)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise ConfigurationError(f"{path}: arrays do not match the model layout: {exc}") from exc
        enc = m["encoders"]
        text = TextEncoder(vocab, seed=enc["text_seed"], table=arrays["encoders/text_table"])
        audio = AudioPatchEncoder(seed=enc["audio_seed"], patch_mels=enc["patch_mels"],
                                  patch_frames=enc["patch_frames"],
                                  projection=arrays["encoders/patch_projection"])
        model.eval()
        return cls(model, text, audio, vocab, NoiseSchedule(m["schedule"]["T"]),
                   m.get("config", {}), m.get("seeds", {}), m.get("history", {}))


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())
