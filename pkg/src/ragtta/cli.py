"""Command line entry point: ``ragtta <command> [options]``.

Exit status: 0 success, 2 configuration error, 3 runtime stage failure.
Options given on the command line override values from ``--config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RagTTAError

log = logging.getLogger("ragtta")


def _json_out(obj, path: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


def _rarity(items: list[str] | None) -> dict[str, float]:
    out = {}
    for item in items or []:
        label, _, frac = item.partition("=")
        try:
            out[label] = float(frac)
        except ValueError:
            raise ConfigurationError(f"bad --rarity value {item!r}; expected label=fraction") from None
    return out


def cmd_synth_corpus(a):
    from .synthcorpus import build_corpus
    m = build_corpus(a.out, _rarity(a.rarity), a.n_train, a.n_test, a.n_database, a.seed,
                     duration=a.duration, max_events=a.max_events)
    _json_out({"manifest": str(Path(a.out) / "manifest.jsonl"), "records": len(m.records),
               "train_frequency": m.label_frequency("train")}, None)


def cmd_train_base(a):
    from .synthcorpus import CorpusManifest
    from .tta.train import BaseTrainConfig, smoothed, train_base
    hp = BaseTrainConfig(steps=a.steps, batch_size=a.batch_size, lr=a.lr, seed=a.seed)
    ckpt = train_base(CorpusManifest.load(a.manifest), hp)
    ckpt.save(a.out)
    losses = ckpt.history["base_losses"]
    _json_out({"checkpoint": a.out, "initial_loss": losses[0], "final_smoothed_loss": smoothed(losses)[-1]}, None)


def cmd_attach_fuser(a):
    from .fuser import attach_fuser
    from .tta.checkpoint import Checkpoint
    enhanced = attach_fuser(Checkpoint.load(a.base), a.init_scale, a.seed)
    enhanced.save(a.out)
    n = sum(w.numel() for _, w in enhanced.model.fuser_parameters())
    _json_out({"checkpoint": a.out, "fuser_parameters": n}, None)


def cmd_train_fuser(a):
    from .encoders import JointEmbedder
    from .fuser import FuserTrainConfig, self_retrieval_policy, train_fuser, validation_losses
    from .retrieval import RetrievalIndex
    from .synthcorpus import CorpusManifest
    from .tta.checkpoint import Checkpoint
    ckpt = Checkpoint.load(a.checkpoint)
    manifest = CorpusManifest.load(a.manifest)
    embedder = JointEmbedder(ckpt.vocabulary)
    policy = self_retrieval_policy(RetrievalIndex.load(a.index), embedder)
    hp = FuserTrainConfig(steps=a.steps, batch_size=a.batch_size, seed=a.seed,
                          condition_dropout=a.condition_dropout)
    if a.lr is not None:
        hp.lr = a.lr
    trained = train_fuser(ckpt, manifest, policy, hp)
    trained.save(a.out)
    with_ref, without = validation_losses(trained, manifest, policy)
    _json_out({"checkpoint": a.out, "val_loss_with_reference": with_ref,
               "val_loss_base": without}, None)


def cmd_build_index(a):
    from .encoders import JointEmbedder
    from .retrieval import ingest
    from .synthcorpus import CorpusManifest
    index = ingest(CorpusManifest.load(a.manifest), JointEmbedder(), a.split)
    index.save(a.out)
    _json_out({"index": a.out, "entries": len(index), "fingerprint": index.embedder_fingerprint}, None)


def cmd_build_sft(a):
    from .feedback import build_sft_dataset
    from .synthcorpus import CorpusManifest
    inst = build_sft_dataset(CorpusManifest.load(a.manifest), a.omission_ratio, a.seed, a.out,
                             a.n, a.split, a.duration)
    _json_out({"dataset": str(Path(a.out) / "sft.jsonl"), "instances": len(inst),
               "with_omissions": sum(i.answer != "none" for i in inst)}, None)


def _pipeline_config(a):
    from .pipeline import PipelineConfig
    cfg = PipelineConfig.load(a.config) if a.config else PipelineConfig()
    for name in ("manifest", "base_checkpoint", "enhanced_checkpoint", "index", "evaluator",
                 "evaluator_url", "evaluator_timeout", "on_evaluator_error", "k", "lam",
                 "guidance_scale", "max_iterations", "seed", "threshold", "n_captions", "run_dir"):
        value = getattr(a, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(a, "label", None):
        cfg.caption_filter = a.label
    if getattr(a, "no_rag", False):
        cfg.rag_enabled = False
    if getattr(a, "no_audio", False):
        cfg.save_audio = False
    return cfg.validate()


def cmd_generate(a):
    from .audio import write_wav
    from .synthcorpus import EventCaption, detect_events
    from .tta.checkpoint import Checkpoint
    from .tta.generate import generate
    ckpt = Checkpoint.load(a.checkpoint)
    clip = generate(ckpt, EventCaption.parse(a.prompt), a.seed, a.guidance_scale)
    write_wav(a.out, clip)
    np.save(str(a.out) + ".mel.npy", clip.mel)
    _json_out({"audio": a.out, "detected": sorted(detect_events(clip))}, None)


def cmd_rag_generate(a):
    from .audio import write_wav
    from .pipeline import RagRuntime, rag_generate
    from .synthcorpus import EventCaption
    cfg = _pipeline_config(a)
    rt = RagRuntime.from_config(cfg)
    clip, record = rag_generate(rt, EventCaption.parse(a.prompt), cfg.seed, cfg.run_dir)
    if a.out:
        write_wav(a.out, clip)
    _json_out(record.to_json(), None)


def cmd_benchmark(a):
    from .pipeline import RagRuntime, run_benchmark
    from .synthcorpus import CorpusManifest
    cfg = _pipeline_config(a)
    if not cfg.manifest:
        raise ConfigurationError("benchmark needs --manifest")
    rt = RagRuntime.from_config(cfg)
    result = run_benchmark(rt, CorpusManifest.load(cfg.manifest), cfg.run_dir)
    _json_out(result.summary(), None)


def cmd_metrics(a):
    from .audio import AudioClip, read_wav
    from .metrics import evaluate
    from .synthcorpus import CorpusManifest

    def load(p):
        p = Path(p)
        mel = Path(str(p) + ".mel.npy") if p.suffix == ".wav" else None
        clip = read_wav(p) if p.suffix == ".wav" else None
        if p.name.endswith(".mel.npy"):
            return AudioClip(np.zeros(1, np.float32), _mel=np.load(p))
        if mel is not None and mel.exists():
            return AudioClip(clip.samples, _mel=np.load(mel))
        return clip

    manifest = CorpusManifest.load(a.manifest)
    recs = {r.id: r for r in manifest.records}
    rows = [json.loads(line) for line in Path(a.pairs).read_text().splitlines() if line.strip()]
    captions, refs, gens = [], [], []
    for row in rows:
        rec = recs[row["id"]]
        captions.append(rec.caption)
        refs.append(read_wav(manifest.resolve(rec)))
        gens.append(load(Path(a.pairs).parent / row["generated"]))
    _json_out(evaluate(captions, refs, gens).to_json(), a.out)


def cmd_eval_feedback(a):
    from .audio import AudioClip, read_wav
    from .feedback import EndpointConfig, FeedbackQuery, evaluate_oracle, evaluate_remote
    p = Path(a.audio)
    clip = AudioClip(np.zeros(1, np.float32), _mel=np.load(p)) if p.name.endswith(".mel.npy") \
        else read_wav(p)
    query = FeedbackQuery(clip, a.prompt)
    if a.evaluator == "remote":
        if not a.evaluator_url:
            raise ConfigurationError("--evaluator remote needs --evaluator-url")
        report = evaluate_remote(query, EndpointConfig(a.evaluator_url, a.evaluator_timeout))
    else:
        report = evaluate_oracle(query, a.threshold)
    _json_out(report.to_json(), None)


def cmd_serve_evaluator(a):
    import uvicorn
    from .evaluator_server import create_app, oracle_responder
    uvicorn.run(create_app(oracle_responder(a.threshold)), host=a.host, port=a.port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ragtta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-corpus", help="generate the synthetic corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-test", type=int, default=300)
    s.add_argument("--n-database", type=int, default=400)
    s.add_argument("--rarity", action="append", help="label=fraction (train split), repeatable")
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--max-events", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("train-base", help="train the base text-to-audio denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("attach-fuser", help="add audio cross-attention branches to a base checkpoint")
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init-scale", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_attach_fuser)

    s = sub.add_parser("train-fuser", help="train the audio branches with the base frozen")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--condition-dropout", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_fuser)

    s = sub.add_parser("build-index", help="embed a manifest split into a retrieval index")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="database")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("build-sft", help="build the missing-event identification dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--omission-ratio", type=float, default=0.7)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--split", default="train")
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build_sft)

    s = sub.add_parser("generate", help="text-only generation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--guidance-scale", type=float, default=3.0)
    s.set_defaults(func=cmd_generate)

    def pipeline_args(s):
        s.add_argument("--config")
        s.add_argument("--manifest")
        s.add_argument("--base-checkpoint")
        s.add_argument("--enhanced-checkpoint")
        s.add_argument("--index")
        s.add_argument("--evaluator", choices=["oracle", "remote"])
        s.add_argument("--evaluator-url")
        s.add_argument("--evaluator-timeout", type=float)
        s.add_argument("--on-evaluator-error", choices=["fallback", "abort"])
        s.add_argument("--k", type=int)
        s.add_argument("--lam", "--lambda", dest="lam", type=float)
        s.add_argument("--guidance-scale", type=float)
        s.add_argument("--max-iterations", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--threshold", type=float)
        s.add_argument("--run-dir")

    s = sub.add_parser("rag-generate", help="feedback-driven retrieval-augmented generation")
    pipeline_args(s)
    s.add_argument("--prompt", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rag_generate)

    s = sub.add_parser("benchmark", help="base vs RAG metrics over the test split")
    pipeline_args(s)
    s.add_argument("--n-captions", type=int)
    s.add_argument("--label", action="append", help="only captions containing this label")
    s.add_argument("--no-rag", action="store_true", help="disable retrieval in the RAG arm")
    s.add_argument("--no-audio", action="store_true", help="store mels only, skip Griffin-Lim")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("metrics", help="FD / KL / IS / CLAP report for generated clips")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pairs", required=True,
                   help='JSONL of {"id": manifest id, "generated": path relative to this file}')
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("eval-feedback", help="list prompt events missing from a clip")
    s.add_argument("--audio", required=True, help="WAV file or .mel.npy grid")
    s.add_argument("--prompt", required=True)
    s.add_argument("--evaluator", choices=["oracle", "remote"], default="oracle")
    s.add_argument("--evaluator-url")
    s.add_argument("--evaluator-timeout", type=float, default=30.0)
    s.add_argument("--threshold", type=float, default=0.6)
    s.set_defaults(func=cmd_eval_feedback)

    s = sub.add_parser("serve-evaluator", help="serve the oracle over the remote-evaluator protocol")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--threshold", type=float, default=0.6)
    s.set_defaults(func=cmd_serve_evaluator)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (RagTTAError, OSError) as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
