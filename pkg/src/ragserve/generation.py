"""Prompt assembly and LLM completion.

The system prompt couples a fixed teaching-assistant instruction with an
openness clause chosen by the bot's 0-100 knob: 0 pins answers to the
retrieved context only, 100 places no restriction, and anything between
prefers context but allows general knowledge. Retrieved passages are
numbered ``[1..n]`` so answers can cite them.

``MockLLMClient`` gives the whole stack a deterministic, network-free
completion path: it echoes the first sentence of the top passage, which
makes grounding assertable in tests.
"""

from __future__ import annotations

import logging
import re
import time
import uuid
from dataclasses import dataclass
from typing import Protocol, Sequence

from .feedback import InteractionRecord
from .pipeline import ContextPassage, retrieve

logger = logging.getLogger(__name__)

BASE_SYSTEM_PROMPT = (
    "You are a knowledgeable and patient teaching assistant. Refer to the "
    "previous conversation when answering, and politely decline if a question "
    "is outside your knowledge. Be concise."
)
OPENNESS_CLOSED_CLAUSE = (
    "Answer ONLY from the provided context; if the context is insufficient, "
    "say you do not know."
)
OPENNESS_BLENDED_CLAUSE = (
    "Prefer the provided context; you may add general knowledge when the "
    "context is insufficient."
)
REFUSAL_TEXT = "I do not know; the provided context does not cover this question."

MAX_HISTORY_TURNS = 10

_SENTENCE_END = re.compile(r"(?<=[.!?])\s")


class LLMError(Exception):
    """Base for completion failures."""


class LLMTransportError(LLMError):
    """Endpoint unreachable or returned an unusable response."""


class LLMAuthError(LLMError):
    """Credentials rejected."""


class LLMRateLimitError(LLMError):
    """Endpoint asked us to slow down; retried with backoff."""


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    context_block: str
    history: tuple[tuple[str, str], ...]
    user_text: str
    openness: int
    passage_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class GenerationResult:
    answer_text: str
    passages_used: tuple[str, ...]
    degraded: bool
    latency_ms: int
    record_id: str = ""
    passages: tuple[ContextPassage, ...] = ()


class LLMClient(Protocol):
    model_id: str

    def complete(self, bundle: PromptBundle) -> str: ...


def openness_clause(openness: int) -> str:
    """Clause text for an openness band; empty string means unrestricted."""
    if openness == 0:
        return OPENNESS_CLOSED_CLAUSE
    if openness == 100:
        return ""
    return OPENNESS_BLENDED_CLAUSE


def build_prompt(
    query: str,
    passages: Sequence[ContextPassage],
    history: Sequence[tuple[str, str]],
    openness: int,
) -> PromptBundle:
    """Deterministically assemble the grounded prompt for one question."""
    if not 0 <= openness <= 100:
        raise ValueError("openness must be in [0, 100]")
    clause = openness_clause(openness)
    system_text = f"{BASE_SYSTEM_PROMPT} {clause}" if clause else BASE_SYSTEM_PROMPT
    lines = []
    for i, passage in enumerate(passages, start=1):
        if passage.heading:
            lines.append(f"[{i}] ({passage.heading}) {passage.body}")
        else:
            lines.append(f"[{i}] {passage.body}")
    return PromptBundle(
        system_text=system_text,
        context_block="\n".join(lines),
        history=tuple(history[-MAX_HISTORY_TURNS:]),
        user_text=query,
        openness=openness,
        passage_refs=tuple(p.chunk_ref for p in passages),
    )


def messages_from_bundle(bundle: PromptBundle) -> list[dict[str, str]]:
    """Chat-completion message array: system (with context), history, user."""
    system = bundle.system_text
    if bundle.context_block:
        system = f"{system}\n\nContext passages:\n{bundle.context_block}"
    messages = [{"role": "system", "content": system}]
    messages.extend({"role": role, "content": text} for role, text in bundle.history)
    messages.append({"role": "user", "content": bundle.user_text})
    return messages


def first_sentence(text: str) -> str:
    parts = _SENTENCE_END.split(text.strip(), maxsplit=1)
    return parts[0] if parts else ""


class MockLLMClient:
    """Deterministic completion double.

    Echoes ``[MOCK]`` plus the first sentence of the top context passage;
    with no context it refuses (openness 0) or says so. Tests assert
    grounding by checking the echo.
    """

    model_id = "mock"

    def complete(self, bundle: PromptBundle) -> str:
        if not bundle.context_block:
            if bundle.openness == 0:
                return REFUSAL_TEXT
            return "[MOCK] No reference material was provided; answering from general knowledge."
        first_line = bundle.context_block.split("\n", 1)[0]
        body = re.sub(r"^\[\d+\]\s*(\([^)]*\)\s*)?", "", first_line)
        return f"[MOCK] {first_sentence(body)}"


class OpenAIChatClient:
    """Chat-completion-compatible HTTP client (OpenAI-style JSON protocol)."""

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key: str = "",
        timeout: float = 30.0,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout)

    def complete(self, bundle: PromptBundle) -> str:
        import httpx

        payload = {"model": self.model_id, "messages": messages_from_bundle(bundle)}
        try:
            response = self._client.post(
                f"{self.base_url}/chat/completions", json=payload, headers=self._headers
            )
        except httpx.HTTPError as exc:
            raise LLMTransportError(f"completion endpoint unreachable: {exc}") from exc
        if response.status_code == 429:
            raise LLMRateLimitError("rate limited by completion endpoint")
        if response.status_code in (401, 403):
            raise LLMAuthError(f"completion endpoint rejected credentials ({response.status_code})")
        if response.status_code >= 400:
            raise LLMTransportError(f"completion endpoint returned {response.status_code}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise LLMTransportError("completion endpoint returned a malformed payload") from exc


def generate(
    bundle: PromptBundle,
    llm_client: LLMClient,
    max_attempts: int = 3,
    backoff_base: float = 0.5,
) -> GenerationResult:
    """One completion with bounded exponential backoff on rate limits."""
    start = time.perf_counter()
    for attempt in range(max_attempts):
        try:
            answer = llm_client.complete(bundle)
            break
        except LLMRateLimitError:
            if attempt == max_attempts - 1:
                raise
            delay = backoff_base * (2**attempt)
            logger.warning("rate limited; retrying in %.2fs", delay)
            time.sleep(delay)
    latency_ms = int((time.perf_counter() - start) * 1000)
    return GenerationResult(
        answer_text=answer,
        passages_used=bundle.passage_refs,
        degraded=False,
        latency_ms=latency_ms,
    )


def answer(query: str, session_id: str, bot_state) -> GenerationResult:
    """Full question-answering turn against one bot.

    Retrieves context, builds the prompt with the session's recent history,
    completes, then appends the exchange to the session and records it. On
    completion failure a failed record is still persisted before the error
    propagates, so the monitoring views see the attempt.
    """
    with bot_state.session_lock(session_id):
        history = bot_state.session_history(session_id)
        with bot_state.read_lock():
            retrieval = retrieve(
                query,
                bot_state.sparse,
                bot_state.dense,
                bot_state.embedder,
                bot_state.chunks,
                bot_state.reranker,
                bot_state.config.retrieval,
            )
        bundle = build_prompt(
            query, retrieval.passages, history, bot_state.config.openness
        )
        record_id = uuid.uuid4().hex
        try:
            result = generate(bundle, bot_state.llm)
        except LLMError as exc:
            bot_state.records.add(
                InteractionRecord.create(
                    record_id=record_id,
                    session_id=session_id,
                    bot_id=bot_state.config.bot_id,
                    question=query,
                    answer="",
                    passages_used=bundle.passage_refs,
                    error=str(exc),
                )
            )
            raise
        result = GenerationResult(
            answer_text=result.answer_text,
            passages_used=result.passages_used,
            degraded=retrieval.degraded,
            latency_ms=result.latency_ms,
            record_id=record_id,
            passages=tuple(retrieval.passages),
        )
        bot_state.append_history(session_id, query, result.answer_text)
        bot_state.records.add(
            InteractionRecord.create(
                record_id=record_id,
                session_id=session_id,
                bot_id=bot_state.config.bot_id,
                question=query,
                answer=result.answer_text,
                passages_used=bundle.passage_refs,
            )
        )
        return result
