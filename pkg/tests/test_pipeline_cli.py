import json

import pytest
import torch

from ragtta import cli
from ragtta.encoders import AudioPatchEncoder, JointEmbedder, TextEncoder
from ragtta.errors import ConfigurationError, EvaluatorError, StageError
from ragtta.feedback import FeedbackReport
from ragtta.fuser import attach_fuser
from ragtta.pipeline import (Evaluator, PipelineConfig, RagRuntime, rag_generate, rag_generate_batch,
                             run_benchmark, write_records)
from ragtta.retrieval import ingest
from ragtta.synthcorpus import CorpusManifest, EventCaption, build_corpus, default_vocabulary
from ragtta.tta.checkpoint import Checkpoint
from ragtta.tta.generate import generate_mels
from ragtta.tta.model import Denoiser, DenoiserConfig
from ragtta.tta.schedule import NoiseSchedule

SMALL = DenoiserConfig(d_model=16, n_heads=2, n_layers=2)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    build_corpus(root / "corpus", {}, 30, 8, 30, seed=4, duration=2.0)
    manifest_path = root / "corpus" / "manifest.jsonl"
    manifest = CorpusManifest.load(manifest_path)
    torch.manual_seed(0)
    vocab = default_vocabulary()
    model = Denoiser(SMALL)
    model.eval()
    base = Checkpoint(model, TextEncoder(vocab), AudioPatchEncoder(), vocab, NoiseSchedule(10),
                      config={"n_frames": 198, "duration": 2.0})
    enhanced = attach_fuser(base, 0.5, 0)
    base.save(root / "base")
    enhanced.save(root / "enh")
    ingest(manifest, JointEmbedder(vocab)).save(root / "index.jsonl")
    return root, manifest


def _config(root, **kw):
    cfg = PipelineConfig(manifest=str(root / "corpus" / "manifest.jsonl"),
                         base_checkpoint=str(root / "base"), enhanced_checkpoint=str(root / "enh"),
                         index=str(root / "index.jsonl"), save_audio=False)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class Scripted:
    def __init__(self, answer=None, error=False):
        self.answer, self.error, self.calls = answer, error, 0

    def __call__(self, mel, caption):
        self.calls += 1
        if self.error:
            raise EvaluatorError("stub failure")
        missing = list(caption.events) if self.answer is None else self.answer
        return FeedbackReport(missing, {}, "stub")


CAP = EventCaption(("siren", "tone_440"))


def test_max_iterations_zero_is_plain_generation(setup):
    root, _ = setup
    rt = RagRuntime.from_config(_config(root, max_iterations=0))
    mels, recs = rag_generate_batch(rt, [CAP], [3])
    plain = generate_mels(rt.ckpt, [CAP], [3])
    assert mels[0].tobytes() == plain[0].tobytes()
    assert recs[0].n_retrievals == 0 and len(recs[0].passes) == 1


def test_nothing_missing_keeps_pass_one(setup):
    root, _ = setup
    rt = RagRuntime.from_config(_config(root))
    rt.evaluator = Scripted(answer=[])
    mels, recs = rag_generate_batch(rt, [CAP], [3])
    assert mels[0].tobytes() == generate_mels(rt.ckpt, [CAP], [3])[0].tobytes()
    assert recs[0].n_retrievals == 0


def test_missing_events_trigger_retrieval(setup):
    root, manifest = setup
    rt = RagRuntime.from_config(_config(root))
    rt.evaluator = Scripted(answer=["siren"])
    mels, recs = rag_generate_batch(rt, [CAP], [3])
    rec = recs[0]
    assert rec.n_retrievals == 1 and len(rec.passes) == 2
    assert rec.passes[1].feedback["missing"] == ["siren"]
    db = {r.id for r in manifest.split("database")}
    assert rec.passes[1].reference_id in db
    assert all(h["id"] in db for h in rec.passes[1].hits)
    assert mels[0].tobytes() != generate_mels(rt.ckpt, [CAP], [3])[0].tobytes()


def test_evaluator_failure_fallback_and_abort(setup):
    root, _ = setup
    rt = RagRuntime.from_config(_config(root))
    rt.evaluator = Scripted(error=True)
    mels, recs = rag_generate_batch(rt, [CAP], [3])
    assert recs[0].evaluator_error == "stub failure"
    assert mels[0].tobytes() == generate_mels(rt.ckpt, [CAP], [3])[0].tobytes()
    rt = RagRuntime.from_config(_config(root, on_evaluator_error="abort"))
    rt.evaluator = Scripted(error=True)
    with pytest.raises(StageError) as info:
        rag_generate_batch(rt, [CAP], [3], ids=["test-00042"])
    assert info.value.item_id == "test-00042"


def test_remote_evaluator_timeout_falls_back(setup):
    root, _ = setup
    cfg = _config(root, evaluator="remote", evaluator_url="http://127.0.0.1:9/evaluate",
                  evaluator_timeout=0.5)
    rt = RagRuntime.from_config(cfg)
    assert isinstance(rt.evaluator, Evaluator)
    _, recs = rag_generate_batch(rt, [CAP], [0])
    assert recs[0].evaluator_error


def test_weights_untouched_by_inference(setup):
    root, _ = setup
    rt = RagRuntime.from_config(_config(root))
    before = rt.ckpt.all_hashes()
    for s in range(3):
        rag_generate(rt, CAP, s)
    assert rt.ckpt.all_hashes() == before


def test_benchmark_rag_disabled_gives_identical_arms(setup, tmp_path):
    root, manifest = setup
    rt = RagRuntime.from_config(_config(root, rag_enabled=False, n_captions=4))
    result = run_benchmark(rt, manifest, tmp_path)
    assert result.base.to_json() == result.rag.to_json()
    for name in ("config.json", "run_records.jsonl", "metrics_base.json", "metrics_rag.json", "summary.json"):
        assert (tmp_path / name).exists()


def test_benchmark_replay_is_byte_identical(setup, tmp_path):
    root, manifest = setup
    outs = []
    for run in ("a", "b"):
        rt = RagRuntime.from_config(_config(root, n_captions=4))
        result = run_benchmark(rt, manifest, tmp_path / run)
        write_records(tmp_path / f"{run}.jsonl", result.records, with_timings=False)
        outs.append(((tmp_path / f"{run}.jsonl").read_bytes(), result.base.to_json(), result.rag.to_json()))
    assert outs[0] == outs[1]


def test_config_validation(setup, tmp_path):
    root, _ = setup
    for bad in (dict(k=0), dict(max_iterations=-1), dict(evaluator="llm"), dict(threshold=1.5),
                dict(lam=-1.0), dict(index=str(tmp_path / "missing.jsonl")),
                dict(evaluator="remote", evaluator_url=None)):
        with pytest.raises(ConfigurationError):
            _config(root, **bad).validate()
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"k": 1, "bogus": 2})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"pipeline": {"k": 2, "lam": 0.5}, "seed": 9}))
    cfg = PipelineConfig.load(path)
    assert (cfg.k, cfg.lam, cfg.seed) == (2, 0.5, 9)


def test_rag_needs_fuser_and_index(setup):
    root, _ = setup
    with pytest.raises(ConfigurationError):
        RagRuntime.from_config(_config(root, enhanced_checkpoint=None))


# command line

def test_cli_end_to_end(setup, tmp_path, capsys):
    root, _ = setup
    corpus = tmp_path / "c"
    assert cli.main(["synth-corpus", "--out", str(corpus), "--n-train", "20", "--n-test", "4",
                     "--n-database", "10", "--rarity", "siren=0.1"]) == 0
    m = str(corpus / "manifest.jsonl")
    assert cli.main(["build-index", "--manifest", m, "--out", str(tmp_path / "idx.jsonl")]) == 0
    assert cli.main(["build-sft", "--manifest", m, "--out", str(tmp_path / "sft"), "--n", "6"]) == 0
    capsys.readouterr()
    assert cli.main(["generate", "--checkpoint", str(root / "base"), "--prompt", "siren",
                     "--out", str(tmp_path / "g.wav")]) == 0
    assert "detected" in json.loads(capsys.readouterr().out)
    assert cli.main(["eval-feedback", "--audio", str(tmp_path / "g.wav.mel.npy"),
                     "--prompt", "siren and tone_440"]) == 0
    assert set(json.loads(capsys.readouterr().out)["missing"]) <= {"siren", "tone_440"}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"enhanced_checkpoint": str(root / "enh"), "index": str(tmp_path / "idx.jsonl"),
                               "manifest": m, "save_audio": False}))
    assert cli.main(["rag-generate", "--config", str(cfg), "--prompt", "siren", "--seed", "2"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["seed"] == 2 and rec["prompt"] == "siren"
    assert cli.main(["benchmark", "--config", str(cfg), "--n-captions", "2",
                     "--run-dir", str(tmp_path / "bench")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["hashes_unchanged"]
    pairs = tmp_path / "bench" / "pairs.jsonl"
    with open(pairs, "w") as fh:
        for line in (tmp_path / "bench" / "run_records.jsonl").read_text().splitlines():
            r = json.loads(line)
            fh.write(json.dumps({"id": r["caption_id"], "generated": r["passes"][-1]["clip_path"]}) + "\n")
    assert cli.main(["metrics", "--manifest", m, "--pairs", str(pairs), "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["n_items"] == 2


def test_cli_exit_codes(setup, tmp_path, capsys):
    root, _ = setup
    assert cli.main(["generate", "--checkpoint", str(tmp_path / "none"), "--prompt", "siren",
                     "--out", str(tmp_path / "x.wav")]) == 2
    assert cli.main(["synth-corpus", "--out", str(tmp_path / "c"), "--n-train", "10",
                     "--rarity", "siren=0.01"]) == 2
    assert cli.main(["generate", "--checkpoint", str(root / "base"), "--prompt", "theremin",
                     "--out", str(tmp_path / "x.wav")]) == 3
    assert "stage failed" in capsys.readouterr().err
