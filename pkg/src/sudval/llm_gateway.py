"""Prompt construction, chat-completion client, and schema-constrained parsing.

Direct vs chain-of-thought prompting, n-shot with fixed-mode example
selection, role-separated extractor/judge endpoints, and tolerant parsing of
model output into the fixed 11-key extraction schema.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Protocol

import requests

from .corpus import CATEGORIES, AnnotatedNote, ClinicalNote, SubstanceCategory
from .errors import ConfigError, SchemaError, TransportError

logger = logging.getLogger("sudval.gateway")

_TEMPLATE_PACKAGE = "sudval.data.templates"


class Reasoning(str, Enum):
    DIRECT = "direct"
    CHAIN_OF_THOUGHT = "chain_of_thought"


@dataclass(frozen=True)
class PromptStrategy:
    """n-shot count and reasoning style. The shipped default pairs
    chain-of-thought with zero shots; other pairs are allowed for experiments."""

    n_shots: int
    reasoning: Reasoning

    def __post_init__(self):
        if self.n_shots not in (0, 1, 2):
            raise ConfigError(f"n_shots must be 0, 1, or 2, got {self.n_shots}")


DEFAULT_STRATEGY = PromptStrategy(n_shots=0, reasoning=Reasoning.CHAIN_OF_THOUGHT)


@dataclass
class ChatRequest:
    model: str
    messages: list[dict]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValueError("message list must be non-empty")


@dataclass
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0
    retry_count: int = 0


@dataclass
class ExtractionResponse:
    """Parsed model output: all 11 category keys, string or None, plus the
    raw text and the count of schema deviations repaired during parsing."""

    extractions: dict[SubstanceCategory, str | None]
    raw_text: str
    schema_deviations: int = 0

    def positives(self) -> dict[SubstanceCategory, str]:
        return {c: t for c, t in self.extractions.items() if t}


def load_template(name: str, template_dir: str | Path | None = None) -> str:
    if template_dir is not None:
        return (Path(template_dir) / name).read_text(encoding="utf-8")
    return resources.files(_TEMPLATE_PACKAGE).joinpath(name).read_text(encoding="utf-8")


def extraction_schema_json() -> str:
    return json.dumps({category.value: None for category in CATEGORIES}, indent=2)


def select_examples(annotated: list[AnnotatedNote], k: int) -> list[AnnotatedNote]:
    """Fixed-mode selection: the k notes with the most labeled categories,
    ties broken by ascending note_id."""
    if k > len(annotated):
        raise ValueError(f"k={k} exceeds annotated set size {len(annotated)}")
    ranked = sorted(annotated, key=lambda a: (-a.label_count(), a.note.note_id))
    return ranked[:k]


def _render_example(example: AnnotatedNote) -> str:
    annotation = {category.value: None for category in CATEGORIES}
    for category, text in example.gold.items():
        annotation[category.value] = text
    return (
        "Example clinical note:\n<<<\n"
        + example.note.text
        + "\n>>>\nExample answer:\n"
        + json.dumps(annotation, indent=2)
        + "\n\n"
    )


def build_extraction_prompt(
    note: ClinicalNote,
    strategy: PromptStrategy,
    examples: list[AnnotatedNote],
    model: str = "extractor",
    template_dir: str | Path | None = None,
    max_tokens: int = 1024,
) -> ChatRequest:
    """Deterministic: identical (note, strategy, examples) give a
    byte-identical request."""
    if len(examples) != strategy.n_shots:
        raise ValueError(
            f"strategy requires {strategy.n_shots} examples, got {len(examples)}"
        )
    system_name = (
        "extractor_cot_system.txt"
        if strategy.reasoning is Reasoning.CHAIN_OF_THOUGHT
        else "extractor_direct_system.txt"
    )
    system = load_template(system_name, template_dir)
    user = load_template("extractor_user.txt", template_dir)
    user = user.replace("{{examples}}", "".join(_render_example(e) for e in examples))
    user = user.replace("{{note_text}}", note.text)
    user = user.replace("{{schema}}", extraction_schema_json())
    return ChatRequest(
        model=model,
        messages=[
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        temperature=0.0,
        max_tokens=max_tokens,
    )


def _first_json_object(raw: str) -> dict | None:
    decoder = json.JSONDecoder()
    index = raw.find("{")
    while index != -1:
        try:
            obj, _ = decoder.raw_decode(raw, index)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        index = raw.find("{", index + 1)
    return None


def parse_extraction_response(raw: str) -> ExtractionResponse:
    """Extract the first well-formed schema object from the raw model text,
    tolerating surrounding prose and code fences.

    Missing categories are filled with null and counted as schema deviations;
    empty strings coerce to null; non-string scalars are stringified and
    counted. No parseable object raises with the raw text attached for audit.
    """
    obj = _first_json_object(raw)
    if obj is None:
        raise SchemaError("no parseable schema object in model output", raw_text=raw)
    extractions: dict[SubstanceCategory, str | None] = {}
    deviations = 0
    for category in CATEGORIES:
        if category.value not in obj:
            deviations += 1
            extractions[category] = None
            continue
        value = obj[category.value]
        if value is None:
            extractions[category] = None
        elif isinstance(value, str):
            extractions[category] = value if value.strip() else None
        else:
            deviations += 1
            extractions[category] = str(value)
    return ExtractionResponse(
        extractions=extractions, raw_text=raw, schema_deviations=deviations
    )


def serialize_extraction_response(response: ExtractionResponse) -> str:
    return json.dumps(
        {category.value: response.extractions[category] for category in CATEGORIES}
    )


class ChatProvider(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class HttpChatProvider:
    """Chat-completions client: POST {model, messages, temperature} to the
    configured URL, read choices[0].message.content.

    Transient failures (5xx, connection errors) retry with exponential
    backoff up to the configured cap; 4xx responses raise a configuration
    error immediately.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        started = time.monotonic()
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self.session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
            else:
                if response.status_code < 400:
                    body = response.json()
                    usage = body.get("usage", {})
                    return ChatResponse(
                        text=body["choices"][0]["message"]["content"],
                        prompt_tokens=usage.get("prompt_tokens", 0),
                        completion_tokens=usage.get("completion_tokens", 0),
                        latency_s=time.monotonic() - started,
                        retry_count=attempt,
                    )
                if response.status_code < 500:
                    raise ConfigError(
                        f"chat endpoint rejected request: HTTP {response.status_code}"
                    )
                last_error = TransportError(f"HTTP {response.status_code}", retries=attempt)
            if attempt < self.max_retries:
                time.sleep(self.backoff_base * (2**attempt))
        raise TransportError(
            f"chat request failed after {self.max_retries} retries: {last_error}",
            retries=self.max_retries,
        )


class Gateway:
    """Role-separated access to the extractor and judge models.

    The two roles are independently configured and never substituted for one
    another. Every call is logged with its note_id for traceability.
    """

    def __init__(self, providers: dict[str, ChatProvider]):
        self.providers = dict(providers)

    def chat_complete(
        self, request: ChatRequest, role: str, note_id: str | None = None
    ) -> ChatResponse:
        provider = self.providers.get(role)
        if provider is None:
            raise ConfigError(f"no provider configured for role {role!r}")
        response = provider.complete(request)
        logger.info(
            "chat role=%s note_id=%s retries=%d latency=%.3fs",
            role,
            note_id,
            response.retry_count,
            response.latency_s,
        )
        return response
