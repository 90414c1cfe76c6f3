"""Synthetic multi-event corpus and the matched-filter event detector.

Every event is a 0.5 s synthetic sound of one of five template kinds. Clips
place their events in disjoint time slots, so the detector (normalized
cross-correlation of each event's log-mel template against the clip's
log-mel grid) is an exact oracle for what a clip contains.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .audio import SAMPLE_RATE, AudioClip, log_mel, write_wav
from .errors import ConfigurationError, RejectedInput

log = logging.getLogger(__name__)

TEMPLATE_KINDS = ("tone", "chirp_up", "chirp_down", "harmonic_stack", "noise_band")
EVENT_DURATION = 0.5
FADE = 0.01
DEFAULT_THRESHOLD = 0.6
MAX_CROSS_CORRELATION = 0.5
SPLITS = ("train", "test", "database")


@dataclass(frozen=True)
class VocabEntry:
    label: str
    kind: str
    params: tuple[float, ...]  # Hz: tone (f,), chirps (f_start, f_end), stack (f0, n), band (lo, hi)

    def __post_init__(self):
        if self.kind not in TEMPLATE_KINDS:
            raise RejectedInput(f"unknown template kind {self.kind!r}")


def _fade(x: np.ndarray) -> np.ndarray:
    n = int(FADE * SAMPLE_RATE)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, n))
    x = x.copy()
    x[:n] *= ramp
    x[-n:] *= ramp[::-1]
    return x


def render_event(entry: VocabEntry, rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit-gain waveform of one event, EVENT_DURATION long, peak |x| <= 1."""
    n = int(EVENT_DURATION * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    p = entry.params
    if entry.kind == "tone":
        x = np.sin(2 * np.pi * p[0] * t)
    elif entry.kind in ("chirp_up", "chirp_down"):
        x = signal.chirp(t, f0=p[0], t1=EVENT_DURATION, f1=p[1], method="logarithmic", phi=-90)
    elif entry.kind == "harmonic_stack":
        f0, n_harm = p[0], int(p[1])
        x = sum(np.sin(2 * np.pi * f0 * k * t) for k in range(1, n_harm + 1))
        x = x / np.max(np.abs(x))
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        sos = signal.butter(6, [p[0], p[1]], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        # filter a longer stretch so the transient settles before the event starts
        noise = signal.sosfilt(sos, rng.standard_normal(n + 2048))[2048:]
        x = 0.3 * noise / np.sqrt(np.mean(noise ** 2))
        x = np.clip(x, -1.0, 1.0)
    return _fade(np.asarray(x, dtype=np.float64))


class EventVocabulary:
    """Labelled event templates; validated for spectral distinguishability."""

    def __init__(self, entries: Iterable[VocabEntry], check: bool = True):
        self.entries = tuple(entries)
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise RejectedInput("vocabulary labels must be unique")
        if len(self.entries) < 8:
            raise RejectedInput("vocabulary needs at least 8 entries")
        self._index = {e.label: i for i, e in enumerate(self.entries)}
        if check:
            worst = self.cross_correlation()
            np.fill_diagonal(worst, -1.0)
            if worst.max() >= MAX_CROSS_CORRELATION:
                i, j = np.unravel_index(np.argmax(worst), worst.shape)
                raise RejectedInput(
                    f"templates {labels[i]!r} and {labels[j]!r} correlate at {worst[i, j]:.3f}")

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, label):
        return label in self._index

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise RejectedInput(f"unknown event label {label!r}") from None

    def entry(self, label: str) -> VocabEntry:
        return self.entries[self.index(label)]

    @cached_property
    def templates(self) -> np.ndarray:
        """(K, N_MELS, L) dB templates covering the frames that lie inside an event."""
        out = []
        for e in self.entries:
            if e.kind == "noise_band":
                # average power over realizations for a smoother matched filter
                power = np.mean([10 ** (log_mel(render_event(e, np.random.default_rng(s))) / 10)
                                 for s in range(8)], axis=0)
                out.append(10 * np.log10(power))
            else:
                out.append(log_mel(render_event(e)))
        return np.stack(out)

    @cached_property
    def _unit_templates(self) -> np.ndarray:
        flat = self.templates.reshape(len(self), -1)
        flat = flat - flat.mean(axis=1, keepdims=True)
        return flat / np.linalg.norm(flat, axis=1, keepdims=True)

    def correlations(self, mel: np.ndarray) -> np.ndarray:
        """Max normalized cross-correlation of every template against ``mel``, in [-1, 1]."""
        length = self.templates.shape[2]
        mel = np.asarray(mel, dtype=np.float64)
        if mel.shape[1] < length:
            pad = np.full((mel.shape[0], length - mel.shape[1]), mel.min() if mel.size else 0.0)
            mel = np.concatenate([mel, pad], axis=1)
        win = sliding_window_view(mel, length, axis=1)  # (mels, P, L)
        win = win.transpose(1, 0, 2).reshape(win.shape[1], -1)
        win = win - win.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(win, axis=1)
        scores = win @ self._unit_templates.T
        ok = norms > 1e-9 * np.sqrt(win.shape[1])
        scores = np.where(ok[:, None], scores / np.where(ok, norms, 1.0)[:, None], 0.0)
        return np.clip(scores.max(axis=0), -1.0, 1.0)

    def cross_correlation(self) -> np.ndarray:
        """Detector response of every template to every other event rendered alone.

        Entry (i, j) is the correlation of template j against a clip holding
        only event i, so partial overlaps at every lag are included.
        """
        out = np.zeros((len(self), len(self)))
        for i, e in enumerate(self.entries):
            n = int(2 * EVENT_DURATION * SAMPLE_RATE)
            x = np.zeros(n)
            ev = render_event(e, np.random.default_rng(1234))
            x[n // 4: n // 4 + len(ev)] = ev
            out[i] = self.correlations(log_mel(x))
        return out

    def to_json(self) -> list[dict]:
        return [{"label": e.label, "template_kind": e.kind, "parameters": list(e.params)}
                for e in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[Mapping]) -> "EventVocabulary":
        return cls(VocabEntry(d["label"], d["template_kind"], tuple(d["parameters"])) for d in data)


DEFAULT_ENTRIES = (
    VocabEntry("tone_440", "tone", (440.0,)),
    VocabEntry("tone_1500", "tone", (1500.0,)),
    VocabEntry("tone_3800", "tone", (3800.0,)),
    VocabEntry("chirp_up", "chirp_up", (300.0, 4500.0)),
    VocabEntry("chirp_down", "chirp_down", (6500.0, 900.0)),
    VocabEntry("siren", "chirp_up", (2200.0, 3400.0)),
    VocabEntry("dog_bark", "harmonic_stack", (600.0, 2.0)),
    VocabEntry("harmonic_stack", "harmonic_stack", (1000.0, 2.0)),
    VocabEntry("noise_band_lo", "noise_band", (40.0, 160.0)),
    VocabEntry("noise_band_hi", "noise_band", (4800.0, 7600.0)),
)

_DEFAULT_VOCAB: EventVocabulary | None = None


def default_vocabulary() -> EventVocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = EventVocabulary(DEFAULT_ENTRIES)
    return _DEFAULT_VOCAB


@dataclass(frozen=True)
class EventCaption:
    events: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise RejectedInput("caption needs at least one event")
        if len(set(self.events)) != len(self.events):
            raise RejectedInput(f"duplicate events in caption {self.events}")
        for e in self.events:
            if not e or "," in e or " and " in f" {e} " or e != e.strip():
                raise RejectedInput(f"label {e!r} cannot be rendered unambiguously")

    @property
    def prompt(self) -> str:
        if len(self.events) == 1:
            return self.events[0]
        return ", ".join(self.events[:-1]) + " and " + self.events[-1]

    @classmethod
    def parse(cls, prompt: str) -> "EventCaption":
        if not isinstance(prompt, str) or not prompt.strip():
            raise RejectedInput("empty prompt")
        head, sep, last = prompt.rpartition(" and ")
        parts = (head.split(", ") + [last]) if sep else [prompt]
        return cls(tuple(parts))

    def validate(self, vocabulary: EventVocabulary) -> "EventCaption":
        for e in self.events:
            vocabulary.index(e)
        return self

    def __str__(self):
        return self.prompt


def synthesize_clip(events: Sequence[str], seed: int, duration: float = 4.0,
                    vocabulary: EventVocabulary | None = None,
                    gains: Sequence[float] | None = None) -> AudioClip:
    """Mix each event once into a disjoint slot at a seed-determined onset.

    Slots are the clip split evenly into len(events) parts, assigned in a
    seeded random order; per-event gain is drawn from [0.5, 1.0] unless given.
    """
    vocabulary = vocabulary or default_vocabulary()
    if not events:
        raise RejectedInput("event list is empty")
    caption = EventCaption(tuple(events)).validate(vocabulary)
    if not 2.0 <= duration <= 10.0:
        raise RejectedInput(f"duration {duration} outside [2, 10] s")
    n = int(round(duration * SAMPLE_RATE))
    ev_len = int(EVENT_DURATION * SAMPLE_RATE)
    slot = n // len(caption.events)
    if slot < ev_len:
        raise RejectedInput(f"{len(caption.events)} events do not fit in {duration} s")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(caption.events))
    x = np.zeros(n)
    for k, label in enumerate(caption.events):
        start = order[k] * slot + int(rng.integers(0, slot - ev_len + 1))
        gain = rng.uniform(0.5, 1.0) if gains is None else gains[k]
        ev = render_event(vocabulary.entry(label), rng)
        x[start:start + ev_len] += gain * ev
    return AudioClip(samples=np.clip(x, -1.0, 1.0))


def detect_events(clip: AudioClip, threshold: float = DEFAULT_THRESHOLD,
                  vocabulary: EventVocabulary | None = None) -> dict[str, float]:
    """Labels whose template correlates with the clip mel at or above ``threshold``.

    Returns label -> confidence (the correlation, in [0, 1]).
    """
    if not 0.0 < threshold < 1.0:
        raise RejectedInput("threshold must lie in (0, 1)")
    vocabulary = vocabulary or default_vocabulary()
    corr = vocabulary.correlations(clip.mel)
    return {lab: float(c) for lab, c in zip(vocabulary.labels, corr) if c >= threshold}


@dataclass
class ManifestRecord:
    id: str
    audio_path: str
    caption: EventCaption
    split: str

    def to_json(self) -> dict:
        return {"id": self.id, "audio_path": self.audio_path, "events": list(self.caption.events),
                "prompt": self.caption.prompt, "split": self.split}


@dataclass
class CorpusManifest:
    records: list[ManifestRecord]
    rarity_profile: dict[str, float] = field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.audio_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def label_frequency(self, split: str = "train") -> dict[str, float]:
        recs = self.split(split)
        counts: dict[str, int] = {}
        for r in recs:
            for e in r.caption.events:
                counts[e] = counts.get(e, 0) + 1
        return {k: v / max(len(recs), 1) for k, v in counts.items()}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json()) + "\n")
        if self.rarity_profile:
            with open(path.with_suffix(".rarity.json"), "w") as fh:
                json.dump(self.rarity_profile, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"manifest {path} not found")
        records = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    records.append(ManifestRecord(d["id"], d["audio_path"],
                                                  EventCaption(tuple(d["events"])), d["split"]))
        rarity_path = path.with_suffix(".rarity.json")
        rarity = json.loads(rarity_path.read_text()) if rarity_path.exists() else {}
        return cls(records, rarity, root=path.parent)


def _allocate(rng, labels, counts, n_clips, max_events):
    """Spread exact per-label occurrence counts over clips, least-filled first."""
    fill = np.zeros(n_clips, dtype=int)
    clips: list[list[str]] = [[] for _ in range(n_clips)]
    for li in rng.permutation(len(labels)):
        c = counts[li]
        open_ = np.flatnonzero(fill < max_events)
        if c > len(open_):
            raise ConfigurationError(f"cannot fit {c} occurrences of {labels[li]} "
                                     f"into {n_clips} clips of at most {max_events} events")
        key = fill[open_] + rng.random(len(open_))
        for ci in open_[np.argsort(key)[:c]]:
            clips[ci].append(labels[li])
            fill[ci] += 1
    return clips


def build_corpus(out_dir: str | Path | None, rarity_profile: Mapping[str, float] | None,
                 n_train: int, n_test: int, n_database: int, seed: int,
                 vocabulary: EventVocabulary | None = None, duration: float = 4.0,
                 max_events: int = 3, default_fraction: float = 0.2,
                 write_audio: bool = True) -> CorpusManifest:
    """Generate train/test/database splits and (optionally) their WAV files.

    Every label occurs in round(fraction * n) clips of a split. Train uses the
    rarity profile (labels absent from it get ``default_fraction``); test and
    database give every label ``default_fraction``, so labels that are rare
    in training stay fully covered where retrieval looks for them.
    Clips that would end up empty receive occurrences first.
    """
    vocabulary = vocabulary or default_vocabulary()
    if min(n_train, n_test, n_database) <= 0:
        raise ConfigurationError("split sizes must be positive")
    labels = vocabulary.labels
    profile = {lab: float(default_fraction) for lab in labels}
    for lab, frac in (rarity_profile or {}).items():
        if lab not in vocabulary:
            raise ConfigurationError(f"rarity profile names unknown label {lab!r}")
        if not 0.0 < frac <= 1.0:
            raise ConfigurationError(f"rarity fraction for {lab} must lie in (0, 1]")
        if frac * n_train < 1.0:
            raise ConfigurationError(
                f"{lab}: expected {frac * n_train:.2f} train occurrences (< 1)")
        profile[lab] = float(frac)
    rng = np.random.default_rng(seed)
    records: list[ManifestRecord] = []
    out = Path(out_dir) if out_dir is not None else None

    def make(split, count, fractions):
        counts = [max(1, int(round(f * count))) for f in fractions]
        if sum(counts) < count:
            raise ConfigurationError(f"{split}: {sum(counts)} occurrences cannot cover {count} clips")
        for i, events in enumerate(_allocate(rng, labels, counts, count, max_events)):
            events = [str(e) for e in rng.permutation(events)]
            rec_id = f"{split}-{i:05d}"
            rel = f"audio/{split}/{rec_id}.wav"
            clip_seed = int(rng.integers(0, 2 ** 31 - 1))
            if out is not None and write_audio:
                write_wav(out / rel, synthesize_clip(events, clip_seed, duration, vocabulary))
            records.append(ManifestRecord(rec_id, rel, EventCaption(tuple(events)), split))

    make("train", n_train, [profile[lab] for lab in labels])
    make("test", n_test, [default_fraction] * len(labels))
    make("database", n_database, [default_fraction] * len(labels))
    manifest = CorpusManifest(records, profile, root=out)
    if out is not None:
        manifest.save(out / "manifest.jsonl")
    return manifest
