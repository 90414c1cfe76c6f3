"""Feedback-driven retrieval-augmented generation loop and the base-vs-RAG benchmark.

Per caption: generate from text alone, ask the evaluator which prompt events
are missing, retrieve database audio for those events, regenerate with the
retrieved clip fed through the fuser, and repeat up to ``max_iterations``.
No weights change at any point.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .audio import AudioClip, SAMPLE_RATE, read_wav, write_wav
from .encoders import JointEmbedder
from .errors import ConfigurationError, EvaluatorError, RagTTAError, StageError
from .feedback import EndpointConfig, FeedbackQuery, FeedbackReport, evaluate_oracle, evaluate_remote
from .metrics import DetectorModel, MetricReport, evaluate
from .retrieval import RetrievalIndex, search
from .synthcorpus import (DEFAULT_THRESHOLD, CorpusManifest, EventCaption, detect_events)
from .tta.checkpoint import Checkpoint
from .tta.generate import DEFAULT_GUIDANCE, generate_mels

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    manifest: str | None = None
    base_checkpoint: str | None = None
    enhanced_checkpoint: str | None = None
    index: str | None = None
    evaluator: str = "oracle"
    evaluator_url: str | None = None
    evaluator_timeout: float = 30.0
    on_evaluator_error: str = "fallback"  # or "abort"
    k: int = 1
    lam: float = 1.0
    guidance_scale: float = DEFAULT_GUIDANCE
    max_iterations: int = 1
    seed: int = 0
    regen_seed_offset: int = 0
    threshold: float = DEFAULT_THRESHOLD
    rag_enabled: bool = True
    n_captions: int | None = None
    caption_filter: list[str] | None = None
    save_audio: bool = True
    run_dir: str | None = None

    def validate(self, check_paths: bool = True) -> "PipelineConfig":
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.max_iterations < 0:
            raise ConfigurationError("max_iterations must be >= 0")
        if self.evaluator not in ("oracle", "remote"):
            raise ConfigurationError(f"unknown evaluator {self.evaluator!r}")
        if self.evaluator == "remote" and not self.evaluator_url:
            raise ConfigurationError("remote evaluator needs evaluator_url")
        if self.on_evaluator_error not in ("fallback", "abort"):
            raise ConfigurationError("on_evaluator_error must be 'fallback' or 'abort'")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError("lambda must be finite and non-negative")
        if check_paths:
            for name in ("manifest", "base_checkpoint", "enhanced_checkpoint", "index"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise ConfigurationError(f"{name} path {p} does not exist")
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        # nested sections are flattened: {"pipeline": {...}, "paths": {...}}
        flat: dict[str, Any] = {}
        for key, value in data.items():
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        return cls.from_dict(flat)


@dataclass
class PassRecord:
    iteration: int
    clip_path: str | None
    events: list[str]
    feedback: dict | None = None
    hits: list[dict] = field(default_factory=list)
    reference_id: str | None = None


@dataclass
class RunRecord:
    caption_id: str
    prompt: str
    seed: int
    passes: list[PassRecord] = field(default_factory=list)
    evaluator_error: str | None = None
    timings: dict = field(default_factory=dict)

    @property
    def pass1_events(self) -> set[str]:
        return set(self.passes[0].events)

    @property
    def final_events(self) -> set[str]:
        return set(self.passes[-1].events)

    @property
    def n_retrievals(self) -> int:
        return sum(1 for p in self.passes if p.hits)

    def to_json(self, with_timings: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not with_timings:
            d.pop("timings")
        return d


def _events(mel: np.ndarray, threshold: float, ckpt: Checkpoint) -> list[str]:
    clip = AudioClip(samples=np.zeros(1, np.float32), _mel=mel)
    return sorted(detect_events(clip, threshold, ckpt.vocabulary))


class Evaluator:
    """Wraps the configured feedback evaluator behind one call."""

    def __init__(self, config: PipelineConfig, ckpt: Checkpoint):
        self.config = config
        self.ckpt = ckpt
        self.endpoint = (EndpointConfig(config.evaluator_url, config.evaluator_timeout)
                         if config.evaluator == "remote" else None)

    def __call__(self, mel: np.ndarray, caption: EventCaption) -> FeedbackReport:
        if self.endpoint is None:
            clip = AudioClip(samples=np.zeros(1, np.float32), _mel=mel)
            return evaluate_oracle(FeedbackQuery(clip, caption.prompt), self.config.threshold,
                                   self.ckpt.vocabulary)
        n = int(round(self.ckpt.config.get("duration", 2.0) * SAMPLE_RATE))
        return evaluate_remote(FeedbackQuery(AudioClip.from_mel(mel, n), caption.prompt),
                               self.endpoint)


@dataclass
class RagRuntime:
    """Everything a RAG run needs, loaded once and never modified."""

    config: PipelineConfig
    ckpt: Checkpoint
    index: RetrievalIndex | None
    embedder: JointEmbedder
    evaluator: Callable[[np.ndarray, EventCaption], FeedbackReport]
    database_ids: set[str] | None = None

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "RagRuntime":
        config.validate()
        path = config.enhanced_checkpoint or config.base_checkpoint
        if path is None:
            raise ConfigurationError("config names no checkpoint")
        ckpt = Checkpoint.load(path)
        index = RetrievalIndex.load(config.index) if config.index else None
        if config.rag_enabled and config.max_iterations > 0 and (index is None or not ckpt.enhanced):
            raise ConfigurationError("RAG needs an enhanced checkpoint and a retrieval index")
        db_ids = None
        if config.manifest:
            db_ids = {r.id for r in CorpusManifest.load(config.manifest).split("database")}
        embedder = JointEmbedder(ckpt.vocabulary)
        return cls(config, ckpt, index, embedder, Evaluator(config, ckpt), db_ids)


def _save_clip(run_dir: Path | None, name: str, mel: np.ndarray, ckpt: Checkpoint,
               save_audio: bool) -> str | None:
    if run_dir is None:
        return None
    rel = f"clips/{name}"
    np.save(run_dir / f"{rel}.mel.npy", mel)
    if save_audio:
        n = int(round(ckpt.config.get("duration", 2.0) * SAMPLE_RATE))
        write_wav(run_dir / f"{rel}.wav", AudioClip.from_mel(mel, n))
        return f"{rel}.wav"
    return f"{rel}.mel.npy"


def rag_generate_batch(rt: RagRuntime, captions: Sequence[EventCaption], seeds: Sequence[int],
                       ids: Sequence[str] | None = None,
                       run_dir: str | Path | None = None) -> tuple[list[np.ndarray], list[RunRecord]]:
    """Run the feedback/retrieval loop for several captions, batching each pass."""
    cfg = rt.config
    ids = list(ids) if ids is not None else [f"caption-{i:04d}" for i in range(len(captions))]
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    mels = generate_mels(rt.ckpt, captions, seeds, cfg.guidance_scale)
    t_gen = time.perf_counter() - t0
    records = []
    for cid, cap, seed, mel in zip(ids, captions, seeds, mels):
        path = _save_clip(out_dir, f"{cid}_pass1", mel, rt.ckpt, cfg.save_audio)
        records.append(RunRecord(cid, cap.prompt, int(seed),
                                 [PassRecord(0, path, _events(mel, cfg.threshold, rt.ckpt))],
                                 timings={"pass1_generate_s": t_gen / len(captions)}))
    current = list(mels)
    active = list(range(len(captions))) if cfg.rag_enabled else []
    for it in range(1, cfg.max_iterations + 1):
        todo, refs = [], []
        for i in active:
            rec = records[i]
            t1 = time.perf_counter()
            try:
                report = rt.evaluator(current[i], captions[i])
            except EvaluatorError as exc:
                if cfg.on_evaluator_error == "abort":
                    raise StageError(f"evaluator failed: {exc}", ids[i]) from exc
                log.warning("%s: evaluator failed (%s); keeping current output", ids[i], exc)
                rec.evaluator_error = str(exc)
                continue
            rec.timings[f"feedback_{it}_s"] = time.perf_counter() - t1
            if not report.missing:
                rec.passes[-1].feedback = report.to_json()
                continue
            missing = EventCaption(tuple(report.missing))
            hits = search(rt.index, missing, cfg.k, rt.embedder)
            if rt.database_ids is not None and any(h.id not in rt.database_ids for h in hits):
                raise StageError("retrieval returned a clip outside the database split", ids[i])
            if not hits:
                rec.passes[-1].feedback = report.to_json()
                continue
            # k > 1 hits are logged; the first one conditions the fuser
            refs.append(read_wav(hits[0].audio_path).mel)
            rec.passes.append(PassRecord(it, None, [], report.to_json(),
                                         [dataclasses.asdict(h) for h in hits], hits[0].id))
            todo.append(i)
        if not todo:
            break
        t1 = time.perf_counter()
        new = generate_mels(rt.ckpt, [captions[i] for i in todo],
                            [seeds[i] + cfg.regen_seed_offset for i in todo],
                            cfg.guidance_scale, refs, cfg.lam)
        dt = (time.perf_counter() - t1) / len(todo)
        for i, mel in zip(todo, new):
            current[i] = mel
            p = records[i].passes[-1]
            p.events = _events(mel, cfg.threshold, rt.ckpt)
            p.clip_path = _save_clip(out_dir, f"{ids[i]}_pass{it + 1}", mel, rt.ckpt, cfg.save_audio)
            records[i].timings[f"pass{it + 1}_generate_s"] = dt
        active = todo
    return current, records


def rag_generate(rt: RagRuntime, caption: EventCaption, seed: int,
                 run_dir: str | Path | None = None) -> tuple[AudioClip, RunRecord]:
    mels, records = rag_generate_batch(rt, [caption], [seed], run_dir=run_dir)
    n = int(round(rt.ckpt.config.get("duration", 2.0) * SAMPLE_RATE))
    return AudioClip.from_mel(mels[0], n), records[0]


def write_records(path: str | Path, records: Sequence[RunRecord], with_timings: bool = True) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(with_timings), sort_keys=True) + "\n")


def label_recall(records: Sequence[RunRecord], captions: Sequence[EventCaption],
                 final: bool) -> dict[str, float]:
    hit: dict[str, int] = {}
    tot: dict[str, int] = {}
    for rec, cap in zip(records, captions):
        events = rec.final_events if final else rec.pass1_events
        for e in cap.events:
            tot[e] = tot.get(e, 0) + 1
            hit[e] = hit.get(e, 0) + (e in events)
    return {e: hit[e] / tot[e] for e in sorted(tot)}


@dataclass
class BenchmarkResult:
    base: MetricReport
    rag: MetricReport
    records: list[RunRecord]
    captions: list[EventCaption]
    recall_base: dict[str, float]
    recall_rag: dict[str, float]
    superset_fraction: float
    hashes_unchanged: bool

    def summary(self) -> dict:
        return {"base": self.base.to_json(), "rag": self.rag.to_json(),
                "recall_base": self.recall_base, "recall_rag": self.recall_rag,
                "superset_fraction": self.superset_fraction,
                "hashes_unchanged": self.hashes_unchanged}


def select_test_records(manifest: CorpusManifest, config: PipelineConfig):
    recs = manifest.split("test")
    if config.caption_filter:
        wanted = set(config.caption_filter)
        recs = [r for r in recs if wanted & set(r.caption.events)]
    if config.n_captions is not None:
        recs = recs[:config.n_captions]
    if not recs:
        raise ConfigurationError("no test captions selected")
    return recs


def run_benchmark(rt: RagRuntime, manifest: CorpusManifest,
                  run_dir: str | Path | None = None) -> BenchmarkResult:
    """Base arm (text-only pass) vs RAG arm over the same test captions and seeds."""
    cfg = rt.config
    recs = select_test_records(manifest, cfg)
    captions = [r.caption for r in recs]
    seeds = [cfg.seed + i for i in range(len(recs))]
    before = rt.ckpt.all_hashes()
    try:
        finals, records = rag_generate_batch(rt, captions, seeds, [r.id for r in recs], run_dir)
    except RagTTAError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(str(exc)) from exc
    hashes_unchanged = before == rt.ckpt.all_hashes()
    if not hashes_unchanged:
        raise StageError("model weights changed during inference")
    n = int(round(rt.ckpt.config.get("duration", 2.0) * SAMPLE_RATE))

    def clip(mel):
        return AudioClip(samples=np.zeros(n, np.float32), _mel=mel)

    pass1 = [clip(np.load(Path(run_dir) / f"clips/{r.caption_id}_pass1.mel.npy")) if run_dir
             else None for r in records]
    if run_dir is None:
        # pass-1 mels are regenerated only when nothing was persisted
        pass1 = [clip(m) for m in generate_mels(rt.ckpt, captions, seeds, cfg.guidance_scale)]
    refs = [read_wav(manifest.resolve(r)) for r in recs]
    model = DetectorModel(rt.ckpt.vocabulary)
    base_report = evaluate(captions, refs, pass1, model, rt.embedder)
    rag_report = evaluate(captions, refs, [clip(m) for m in finals], model, rt.embedder)
    result = BenchmarkResult(
        base_report, rag_report, records, captions,
        label_recall(records, captions, final=False), label_recall(records, captions, final=True),
        float(np.mean([r.pass1_events <= r.final_events for r in records])), hashes_unchanged)
    if run_dir is not None:
        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        write_records(out / "run_records.jsonl", records)
        (out / "metrics_base.json").write_text(json.dumps(base_report.to_json(), indent=2))
        (out / "metrics_rag.json").write_text(json.dumps(rag_report.to_json(), indent=2))
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
    return result
