import logging
import time

import httpx
import numpy as np
import pytest

from ragtta.audio import AudioClip
from ragtta.errors import EvaluatorError, RejectedInput
from ragtta.evaluator_server import BackgroundServer, create_app, oracle_responder
from ragtta.feedback import (DEFAULT_TEMPLATE, EndpointConfig, FeedbackQuery, answer_labels,
                             build_sft_dataset, clip_from_base64, evaluate_oracle, evaluate_remote,
                             render_query, score_identification, token_set_f1, wav_base64)
from ragtta.synthcorpus import EventCaption, build_corpus, synthesize_clip


def test_query_template():
    assert render_query("dog_bark and siren") == (
        "What sound events are missing from the audio compared to dog_bark and siren?")
    with pytest.raises(RejectedInput):
        render_query("siren", "no placeholder here")


def test_oracle_nothing_missing():
    clip = synthesize_clip(["dog_bark", "siren"], 1, 2.0)
    assert evaluate_oracle(FeedbackQuery(clip, "dog_bark and siren")).missing == []


def test_oracle_finds_omitted_event():
    clip = synthesize_clip(["dog_bark"], 1, 2.0)
    report = evaluate_oracle(FeedbackQuery(clip, "dog_bark and siren"))
    assert report.missing == ["siren"]
    assert 0.0 <= report.confidences["siren"] <= 1.0


def test_oracle_silence_misses_everything():
    report = evaluate_oracle(FeedbackQuery(AudioClip.silence(2.0), "tone_440, siren and dog_bark"))
    assert report.missing == ["tone_440", "siren", "dog_bark"]


def test_oracle_unparseable_prompt():
    with pytest.raises(RejectedInput):
        evaluate_oracle(FeedbackQuery(AudioClip.silence(2.0), "siren and siren"))
    with pytest.raises(RejectedInput):
        evaluate_oracle(FeedbackQuery(AudioClip.silence(2.0), "a theremin"))


def test_wav_base64_round_trip():
    clip = synthesize_clip(["chirp_up"], 4, 2.0)
    again = clip_from_base64(wav_base64(clip))
    assert again.sample_rate == clip.sample_rate
    np.testing.assert_array_equal(again.samples, clip.samples.astype(np.float32))


@pytest.fixture(scope="module")
def sft_manifest(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("sft"), {}, 200, 10, 10, seed=9, duration=2.0,
                        write_audio=False)


def test_sft_instances_match_oracle(sft_manifest):
    """Every constructed omission set is recovered exactly by the oracle."""
    instances = build_sft_dataset(sft_manifest, 0.7, seed=0, n_instances=500)
    mismatches = []
    for inst in instances:
        report = evaluate_oracle(FeedbackQuery(inst.clip, EventCaption(inst.events).prompt))
        if report.missing != list(inst.omitted):
            mismatches.append((inst.events, inst.omitted, report.missing))
    assert mismatches == []


def test_sft_answers(sft_manifest):
    instances = build_sft_dataset(sft_manifest, 0.7, seed=1, n_instances=1000)
    with_omission = sum(i.answer != "none" for i in instances)
    # 3 sigma of Binomial(1000, 0.7)
    assert abs(with_omission - 700) <= 45
    for inst in instances:
        if inst.omitted:
            assert inst.answer == ", ".join(inst.omitted)
        else:
            assert inst.answer == "none"
        assert inst.query.startswith("What sound events are missing")
    assert score_identification([i.answer for i in instances], [i.answer for i in instances]) == 100.0


def test_sft_written_to_disk(sft_manifest, tmp_path):
    build_sft_dataset(sft_manifest, 0.5, seed=2, out_dir=tmp_path, n_instances=5)
    lines = (tmp_path / "sft.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert len(list((tmp_path / "sft").glob("*.wav"))) == 5


def test_sft_rejects_bad_ratio(sft_manifest):
    with pytest.raises(RejectedInput):
        build_sft_dataset(sft_manifest, 1.5, seed=0)


def test_scoring_examples():
    assert score_identification(["siren"], ["siren"]) == 100.0
    assert score_identification(["none"], ["siren"]) == 0.0
    assert score_identification(["dog_bark"], ["dog_bark, siren"]) == pytest.approx(200 / 3)
    assert token_set_f1("none", "none") == 1.0
    assert answer_labels("a, b and c") == {"a", "b", "c"}
    with pytest.raises(RejectedInput):
        score_identification(["a"], [])


def test_custom_similarity_provider():
    exact = lambda p, r: float(p == r)  # noqa: E731
    assert score_identification(["a", "b"], ["a", "c"], exact) == 50.0


# loopback protocol tests

def _fixed(events, delay=0.0):
    def respond(req):
        if delay:
            time.sleep(delay)
        return list(events)
    return respond


@pytest.fixture
def query():
    return FeedbackQuery(synthesize_clip(["dog_bark"], 0, 2.0), "dog_bark and siren")


def test_remote_fixed_answer(query):
    with BackgroundServer(create_app(_fixed(["siren"]))) as srv:
        report = evaluate_remote(query, EndpointConfig(srv.url + "/evaluate"))
    assert report.missing == ["siren"]


def test_remote_drops_hallucinated_labels(query, caplog):
    with BackgroundServer(create_app(_fixed(["siren", "chirp_down"]))) as srv:
        with caplog.at_level(logging.WARNING):
            report = evaluate_remote(query, EndpointConfig(srv.url + "/evaluate"))
    assert report.missing == ["siren"]
    assert "chirp_down" in caplog.text


def test_remote_timeout_is_evaluator_error(query):
    with BackgroundServer(create_app(_fixed(["siren"], delay=1.0))) as srv:
        with pytest.raises(EvaluatorError, match="timed out"):
            evaluate_remote(query, EndpointConfig(srv.url + "/evaluate", timeout=0.2))


def test_remote_empty_answer_is_not_an_error(query):
    with BackgroundServer(create_app(_fixed([]))) as srv:
        assert evaluate_remote(query, EndpointConfig(srv.url + "/evaluate")).missing == []


def test_remote_malformed_reply(query):
    def handler(request):
        return httpx.Response(200, json={"events": "siren"})
    client = httpx.Client(transport=httpx.MockTransport(handler))
    with pytest.raises(EvaluatorError, match="malformed"):
        evaluate_remote(query, EndpointConfig("http://stub/evaluate"), client)


def test_remote_http_error(query):
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(EvaluatorError):
        evaluate_remote(query, EndpointConfig("http://stub/evaluate"), client)


def test_oracle_server_round_trip(query):
    with BackgroundServer(create_app(oracle_responder())) as srv:
        assert httpx.get(srv.url + "/health").json() == {"status": "ok"}
        report = evaluate_remote(query, EndpointConfig(srv.url + "/evaluate"))
        bad = httpx.post(srv.url + "/evaluate", json={"audio_wav_base64": "", "prompt": "x", "query": "y"})
    assert report.missing == ["siren"]
    assert bad.status_code == 422


def test_default_template_has_placeholder():
    assert DEFAULT_TEMPLATE.count("<target prompt>") == 1
