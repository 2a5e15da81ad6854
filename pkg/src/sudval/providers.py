"""Deterministic offline providers and a scripted mock inference server.

These back CI runs and demos with no network or model weights: a regex-driven
extractor, a constant-verdict judge, and the hashing embedding provider, plus
a FastAPI app that serves all three behind the standard chat/embeddings wire
shapes.
"""

from __future__ import annotations

import json
import re
import time

from .corpus import CATEGORIES, SubstanceCategory
from .grounding import HashingEmbeddingProvider
from .llm_gateway import ChatRequest, ChatResponse

# The shipped prompt templates place the note between these sentinels; the
# scripted providers rely on that template property rather than guessing.
NOTE_OPEN = "<<<\n"
NOTE_CLOSE = "\n>>>"

JUDGE_SENTINEL = "Substance category under review:"


def note_from_prompt(request: ChatRequest) -> str:
    content = request.messages[-1]["content"]
    start = content.rfind(NOTE_OPEN)
    end = content.rfind(NOTE_CLOSE)
    if start == -1 or end == -1 or end <= start:
        return ""
    return content[start + len(NOTE_OPEN) : end]


class ScriptedExtractorProvider:
    """Extracts the first span matching each category's regex from the note
    text; categories with no match return null. ``hallucinations`` plants a
    fixed off-note span whenever its marker appears in the note, to script
    ungrounded outputs. Deterministic by construction."""

    def __init__(
        self,
        patterns: dict[SubstanceCategory, list[str]],
        hallucinations: list[tuple[str, SubstanceCategory, str]] | None = None,
    ):
        self.patterns = {
            category: [re.compile(p, re.IGNORECASE) for p in pattern_list]
            for category, pattern_list in patterns.items()
        }
        self.hallucinations = list(hallucinations or [])

    def complete(self, request: ChatRequest) -> ChatResponse:
        note = note_from_prompt(request)
        result: dict[str, str | None] = {}
        for category in CATEGORIES:
            match_text = None
            for regex in self.patterns.get(category, []):
                match = regex.search(note)
                if match:
                    match_text = match.group(0)
                    break
            result[category.value] = match_text
        for marker, category, text in self.hallucinations:
            if marker in note and result[category.value] is None:
                result[category.value] = text
        return ChatResponse(text=json.dumps(result))


class GoldEchoProvider:
    """Returns the gold annotation verbatim for the note it is shown
    (calibration oracle). Notes are matched by their text."""

    def __init__(self, gold_by_text: dict[str, dict[str, str]]):
        self.gold_by_text = gold_by_text

    def complete(self, request: ChatRequest) -> ChatResponse:
        note = note_from_prompt(request)
        gold = self.gold_by_text.get(note, {})
        result = {category.value: gold.get(category.value) for category in CATEGORIES}
        return ChatResponse(text=json.dumps(result))


class NullExtractorProvider:
    """Returns null for every category."""

    def complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(
            text=json.dumps({category.value: None for category in CATEGORIES})
        )


class ScriptedJudgeProvider:
    """Returns a constant verdict; with verdict="correct" the judge confirms
    every triggered extraction."""

    def __init__(self, verdict: str = "correct", correction: str | None = None):
        self.verdict = verdict
        self.correction = correction

    def complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(
            text=json.dumps(
                {"verdict": self.verdict, "correction": self.correction, "evidence": None}
            )
        )


def build_mock_inference_app(
    extractor=None,
    judge=None,
    embedder: HashingEmbeddingProvider | None = None,
    chat_failures: list[int] | None = None,
):
    """FastAPI app serving scripted chat completions and embeddings.

    One chat endpoint serves both roles: requests carrying the judge
    template's sentinel route to the judge provider. ``chat_failures`` is a
    mutable queue of HTTP status codes to emit before succeeding, for
    retry-path tests.
    """
    from fastapi import FastAPI
    from fastapi.responses import JSONResponse

    app = FastAPI(title="sudval mock inference server")
    extractor = extractor or NullExtractorProvider()
    judge = judge or ScriptedJudgeProvider()
    embedder = embedder or HashingEmbeddingProvider()
    failures = chat_failures if chat_failures is not None else []

    @app.post("/v1/chat/completions")
    async def chat(payload: dict):
        if failures:
            status = failures.pop(0)
            return JSONResponse({"error": "scripted failure"}, status_code=status)
        request = ChatRequest(
            model=payload.get("model", "mock"),
            messages=payload["messages"],
            temperature=payload.get("temperature", 0.0),
        )
        provider = (
            judge
            if JUDGE_SENTINEL in request.messages[-1]["content"]
            else extractor
        )
        response = provider.complete(request)
        return {
            "id": "mock",
            "object": "chat.completion",
            "model": payload.get("model", "mock"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": response.text},
                    "finish_reason": "stop",
                }
            ],
            "usage": {"prompt_tokens": 0, "completion_tokens": 0},
        }

    @app.post("/v1/embeddings")
    async def embeddings(payload: dict):
        batch = payload["input"]
        if isinstance(batch, str):
            batch = [batch]
        vectors = embedder.embed(batch)
        return {
            "object": "list",
            "model": payload.get("model", "mock"),
            "data": [
                {"object": "embedding", "index": i, "embedding": vector.tolist()}
                for i, vector in enumerate(vectors)
            ],
        }

    return app


class MockServer:
    """Runs a FastAPI app on a local port in a background thread."""

    def __init__(self, app, port: int = 0):
        import socket

        import uvicorn

        if port == 0:
            with socket.socket() as probe:
                probe.bind(("127.0.0.1", 0))
                port = probe.getsockname()[1]
        self.port = port
        config = uvicorn.Config(
            app, host="127.0.0.1", port=port, log_level="warning", loop="asyncio"
        )
        self._server = uvicorn.Server(config)
        import threading

        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def __enter__(self) -> "MockServer":
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("mock server did not start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)
