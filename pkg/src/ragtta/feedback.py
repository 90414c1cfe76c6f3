"""Missing-event feedback: detector oracle, remote evaluator client, SFT data, scoring."""
from __future__ import annotations

import base64
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np
from scipy.io import wavfile

from .audio import AudioClip, write_wav
from .errors import EvaluatorError, RejectedInput
from .synthcorpus import (DEFAULT_THRESHOLD, CorpusManifest, EventCaption, EventVocabulary,
                          default_vocabulary, synthesize_clip)

log = logging.getLogger(__name__)

PLACEHOLDER = "<target prompt>"
DEFAULT_TEMPLATE = f"What sound events are missing from the audio compared to {PLACEHOLDER}?"
NONE_ANSWER = "none"


def render_query(target_prompt: str, template: str = DEFAULT_TEMPLATE) -> str:
    if template.count(PLACEHOLDER) != 1:
        raise RejectedInput(f"template must contain {PLACEHOLDER!r} exactly once")
    return template.replace(PLACEHOLDER, target_prompt)


@dataclass
class FeedbackQuery:
    generated: AudioClip
    target_prompt: str
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        render_query(self.target_prompt, self.template)

    @property
    def text(self) -> str:
        return render_query(self.target_prompt, self.template)

    def caption(self) -> EventCaption:
        try:
            return EventCaption.parse(self.target_prompt)
        except RejectedInput as exc:
            raise RejectedInput(f"cannot parse prompt {self.target_prompt!r}: {exc}") from exc


@dataclass
class FeedbackReport:
    missing: list[str]
    confidences: dict[str, float] = field(default_factory=dict)
    evaluator_id: str = "oracle"

    def __post_init__(self):
        if len(set(self.missing)) != len(self.missing):
            raise RejectedInput("duplicate labels in feedback report")

    def to_json(self) -> dict:
        return {"missing": list(self.missing), "confidences": dict(self.confidences),
                "evaluator_id": self.evaluator_id}


def evaluate_oracle(query: FeedbackQuery, threshold: float = DEFAULT_THRESHOLD,
                    vocabulary: EventVocabulary | None = None) -> FeedbackReport:
    """Prompt events whose detector correlation is below ``threshold``.

    Present-but-weak events count as missing. Confidence is 1 - correlation.
    """
    vocabulary = vocabulary or default_vocabulary()
    caption = query.caption().validate(vocabulary)
    corr = vocabulary.correlations(query.generated.mel)
    missing, conf = [], {}
    for e in caption.events:
        c = float(corr[vocabulary.index(e)])
        if c < threshold:
            missing.append(e)
            conf[e] = float(np.clip(1.0 - max(c, 0.0), 0.0, 1.0))
    return FeedbackReport(missing, conf, f"oracle@{threshold:g}")


@dataclass
class EndpointConfig:
    url: str
    timeout: float = 30.0
    retries: int = 0


def wav_base64(clip: AudioClip) -> str:
    buf = io.BytesIO()
    wavfile.write(buf, clip.sample_rate, np.clip(clip.samples, -1.0, 1.0).astype("<f4"))
    return base64.b64encode(buf.getvalue()).decode("ascii")


def clip_from_base64(data: str) -> AudioClip:
    sr, samples = wavfile.read(io.BytesIO(base64.b64decode(data)))
    return AudioClip(samples=samples.astype(np.float32), sample_rate=int(sr))


def request_body(query: FeedbackQuery) -> dict:
    return {"audio_wav_base64": wav_base64(query.generated), "prompt": query.target_prompt,
            "query": query.text}


def evaluate_remote(query: FeedbackQuery, endpoint: EndpointConfig,
                    client: httpx.Client | None = None) -> FeedbackReport:
    """POST the query to a remote evaluator and validate its answer.

    Labels outside the prompt are dropped with a warning. Transport errors,
    timeouts and malformed replies raise ``EvaluatorError``.
    """
    caption = query.caption()
    body = request_body(query)
    last_exc: Exception | None = None
    for _ in range(endpoint.retries + 1):
        try:
            if client is None:
                resp = httpx.post(endpoint.url, json=body, timeout=endpoint.timeout)
            else:
                resp = client.post(endpoint.url, json=body, timeout=endpoint.timeout)
            resp.raise_for_status()
            payload = resp.json()
            break
        except httpx.TimeoutException as exc:
            last_exc = EvaluatorError(f"evaluator at {endpoint.url} timed out after {endpoint.timeout}s")
            last_exc.__cause__ = exc
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            last_exc = EvaluatorError(f"evaluator request failed: {exc}")
            last_exc.__cause__ = exc
    else:
        raise last_exc
    events = payload.get("missing_events") if isinstance(payload, dict) else None
    if not isinstance(events, list) or not all(isinstance(e, str) for e in events):
        raise EvaluatorError(f"malformed evaluator response: {payload!r}")
    allowed = set(caption.events)
    missing: list[str] = []
    for e in events:
        e = e.strip()
        if e not in allowed:
            log.warning("dropping label %r returned by evaluator: not in prompt %r",
                        e, query.target_prompt)
        elif e not in missing:
            missing.append(e)
    return FeedbackReport(missing, {e: 1.0 for e in missing}, f"remote:{endpoint.url}")


@dataclass
class SftInstance:
    audio_path: str
    query: str
    answer: str
    events: tuple[str, ...] = ()
    omitted: tuple[str, ...] = ()
    clip: AudioClip | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"audio_path": self.audio_path, "query": self.query, "answer": self.answer}


def build_sft_dataset(manifest: CorpusManifest, omission_ratio: float, seed: int,
                      out_dir: str | Path | None = None, n_instances: int | None = None,
                      split: str = "train", duration: float = 2.0,
                      vocabulary: EventVocabulary | None = None) -> list[SftInstance]:
    """Missing-event identification examples built by synthetic omission.

    For each source caption (cycling through the split when ``n_instances``
    exceeds it), with probability ``omission_ratio`` a non-empty random subset
    of its events is left out of the synthesized audio; the answer lists the
    omitted labels in caption order, or "none".
    """
    if not 0.0 <= omission_ratio <= 1.0:
        raise RejectedInput("omission_ratio must lie in [0, 1]")
    records = manifest.split(split)
    if not records:
        raise RejectedInput(f"manifest has no {split!r} records")
    vocabulary = vocabulary or default_vocabulary()
    n = len(records) if n_instances is None else n_instances
    rng = np.random.default_rng(seed)
    out = Path(out_dir) if out_dir is not None else None
    instances = []
    for i in range(n):
        caption = records[i % len(records)].caption
        events = caption.events
        omitted: tuple[str, ...] = ()
        if rng.random() < omission_ratio:
            size = int(rng.integers(1, len(events) + 1))
            chosen = set(rng.choice(len(events), size=size, replace=False).tolist())
            omitted = tuple(e for j, e in enumerate(events) if j in chosen)
        kept = [e for e in events if e not in omitted]
        clip_seed = int(rng.integers(0, 2 ** 31 - 1))
        clip = (synthesize_clip(kept, clip_seed, duration, vocabulary) if kept
                else AudioClip.silence(duration))
        rel = f"sft/{i:06d}.wav"
        if out is not None:
            write_wav(out / rel, clip)
        answer = ", ".join(omitted) if omitted else NONE_ANSWER
        instances.append(SftInstance(rel, render_query(caption.prompt), answer, events, omitted, clip))
    if out is not None:
        with open(out / "sft.jsonl", "w") as fh:
            for inst in instances:
                fh.write(json.dumps(inst.to_json()) + "\n")
    return instances


def answer_labels(answer: str) -> set[str]:
    text = answer.strip().replace(" and ", ", ")
    if not text or text.lower() == NONE_ANSWER:
        return set()
    return {t.strip() for t in text.split(",") if t.strip()}


def token_set_f1(prediction: str, reference: str) -> float:
    """F1 between the label sets of two answers, in [0, 1]; two "none" answers score 1."""
    p, r = answer_labels(prediction), answer_labels(reference)
    if not p and not r:
        return 1.0
    tp = len(p & r)
    if tp == 0:
        return 0.0
    precision, recall = tp / len(p), tp / len(r)
    return 2 * precision * recall / (precision + recall)


SimilarityProvider = Callable[[str, str], float]


def score_identification(predictions: Sequence[str], references: Sequence[str],
                         similarity_provider: SimilarityProvider = token_set_f1) -> float:
    """Mean provider similarity over aligned answers, scaled to [0, 100]."""
    if len(predictions) != len(references):
        raise RejectedInput("predictions and references differ in length")
    if not predictions:
        raise RejectedInput("nothing to score")
    return 100.0 * float(np.mean([similarity_provider(p, r) for p, r in zip(predictions, references)]))
