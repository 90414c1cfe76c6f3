"""Shared fixtures. The trained desk-scale pipeline is built once per session.

Set RAGTTA_ARTIFACTS=/some/dir to keep the trained artifacts between runs;
a directory that already holds them is reused instead of retrained.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from ragtta.encoders import JointEmbedder
from ragtta.fuser import FuserTrainConfig, attach_fuser, self_retrieval_policy, train_fuser
from ragtta.retrieval import RetrievalIndex, ingest
from ragtta.synthcorpus import CorpusManifest, build_corpus, default_vocabulary
from ragtta.tta.checkpoint import Checkpoint
from ragtta.tta.train import BaseTrainConfig, train_base

RARE_LABEL = "siren"
RARE_FRACTION = 0.02
N_TRAIN, N_TEST, N_DATABASE = 1000, 300, 400
BASE_STEPS = 2000
FUSER_STEPS = 2000


@dataclass
class Desk:
    root: Path
    manifest: CorpusManifest
    manifest_path: Path
    base_path: Path
    enhanced_path: Path
    index_path: Path
    base: Checkpoint
    enhanced: Checkpoint
    index: RetrievalIndex
    base_hashes_before_fuser: dict
    timings: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> Desk:
    keep = os.environ.get("RAGTTA_ARTIFACTS")
    root = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    logging.getLogger("ragtta").setLevel(logging.WARNING)
    timings = {}
    manifest_path = root / "corpus" / "manifest.jsonl"
    t0 = time.perf_counter()
    if not manifest_path.exists():
        build_corpus(root / "corpus", {RARE_LABEL: RARE_FRACTION}, N_TRAIN, N_TEST, N_DATABASE,
                     seed=0, duration=2.0)
    manifest = CorpusManifest.load(manifest_path)
    timings["corpus_s"] = time.perf_counter() - t0

    base_path = root / "base"
    t0 = time.perf_counter()
    if not (base_path / "manifest.json").exists():
        train_base(manifest, BaseTrainConfig(steps=BASE_STEPS, log_every=0)).save(base_path)
    base = Checkpoint.load(base_path)
    timings["base_train_s"] = time.perf_counter() - t0

    embedder = JointEmbedder(base.vocabulary)
    index_path = root / "index.jsonl"
    if not index_path.exists():
        ingest(manifest, embedder).save(index_path)
    index = RetrievalIndex.load(index_path)

    enhanced_path = root / "enhanced"
    attached = attach_fuser(base, 1e-3, 0)
    before = attached.base_hashes()
    t0 = time.perf_counter()
    if not (enhanced_path / "manifest.json").exists():
        policy = self_retrieval_policy(index, embedder)
        train_fuser(attached, manifest, policy,
                    FuserTrainConfig(steps=FUSER_STEPS, log_every=0)).save(enhanced_path)
    enhanced = Checkpoint.load(enhanced_path)
    timings["fuser_train_s"] = time.perf_counter() - t0
    return Desk(root, manifest, manifest_path, base_path, enhanced_path, index_path, base,
                enhanced, index, before, timings)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed at the end of the run."""
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
