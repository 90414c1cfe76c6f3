"""HTTP server speaking the remote-evaluator wire protocol.

POST /evaluate with {"audio_wav_base64", "prompt", "query"} returns
{"missing_events": [...]}. The default responder runs the detector oracle,
which lets the pipeline exercise its remote path without a language model;
any callable with the same signature can stand in for a real one.
"""
from __future__ import annotations

import threading
import time
from typing import Callable

import uvicorn
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .errors import RejectedInput
from .feedback import FeedbackQuery, clip_from_base64, evaluate_oracle
from .synthcorpus import DEFAULT_THRESHOLD


class EvaluateRequest(BaseModel):
    audio_wav_base64: str
    prompt: str
    query: str


class EvaluateResponse(BaseModel):
    missing_events: list[str]


Responder = Callable[[EvaluateRequest], list[str]]


def oracle_responder(threshold: float = DEFAULT_THRESHOLD) -> Responder:
    def respond(req: EvaluateRequest) -> list[str]:
        clip = clip_from_base64(req.audio_wav_base64)
        return evaluate_oracle(FeedbackQuery(clip, req.prompt), threshold).missing
    return respond


def create_app(responder: Responder | None = None) -> FastAPI:
    responder = responder or oracle_responder()
    app = FastAPI(title="missing-event evaluator")

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest):
        try:
            return EvaluateResponse(missing_events=responder(req))
        except (RejectedInput, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/health")
    def health():
        return {"status": "ok"}

    return app


class BackgroundServer:
    """Runs an app on a local port in a daemon thread (loopback tests, CLI demos)."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        self.config = uvicorn.Config(app, host=host, port=port, log_level="warning")
        self.server = uvicorn.Server(self.config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def url(self) -> str:
        sock = self.server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "BackgroundServer":
        self.thread.start()
        deadline = time.monotonic() + 10.0
        while not self.server.started:
            if time.monotonic() > deadline or not self.thread.is_alive():
                raise RuntimeError("evaluator server failed to start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=5.0)
