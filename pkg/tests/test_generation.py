"""Prompt construction, mock/HTTP completion, and the answer flow."""

from __future__ import annotations

import pytest

from ragserve.corpus import Document
from ragserve.generation import (
    BASE_SYSTEM_PROMPT,
    MAX_HISTORY_TURNS,
    MockLLMClient,
    LLMRateLimitError,
    LLMTransportError,
    OPENNESS_BLENDED_CLAUSE,
    OPENNESS_CLOSED_CLAUSE,
    REFUSAL_TEXT,
    answer,
    build_prompt,
    generate,
    messages_from_bundle,
)
from ragserve.pipeline import ContextPassage
from ragserve.state import BotConfig, BotState


def passage(ref: str, body: str, heading: str = "") -> ContextPassage:
    return ContextPassage(
        chunk_ref=ref,
        heading=heading,
        body=body,
        fused_score=0.5,
        rerank_score=0.9,
        provenance=frozenset({"sparse"}),
    )


class TestBuildPrompt:
    def test_openness_zero_refusal_clause(self):
        bundle = build_prompt("q", [], [], openness=0)
        assert BASE_SYSTEM_PROMPT in bundle.system_text
        assert OPENNESS_CLOSED_CLAUSE in bundle.system_text
        assert bundle.context_block == ""

    def test_openness_hundred_no_clause(self):
        bundle = build_prompt("q", [], [], openness=100)
        assert bundle.system_text == BASE_SYSTEM_PROMPT
        assert OPENNESS_CLOSED_CLAUSE not in bundle.system_text
        assert OPENNESS_BLENDED_CLAUSE not in bundle.system_text

    @pytest.mark.parametrize("openness", [1, 50, 99])
    def test_intermediate_band(self, openness):
        bundle = build_prompt("q", [], [], openness=openness)
        assert OPENNESS_BLENDED_CLAUSE in bundle.system_text
        assert OPENNESS_CLOSED_CLAUSE not in bundle.system_text

    def test_openness_validated(self):
        with pytest.raises(ValueError):
            build_prompt("q", [], [], openness=101)

    def test_context_markers_in_rerank_order(self):
        passages = [passage("c1", "first body"), passage("c2", "second body"),
                    passage("c3", "third body")]
        bundle = build_prompt("q", passages, [], openness=0)
        lines = bundle.context_block.split("\n")
        assert lines[0] == "[1] first body"
        assert lines[1] == "[2] second body"
        assert lines[2] == "[3] third body"
        assert bundle.passage_refs == ("c1", "c2", "c3")

    def test_heading_shown_in_context(self):
        bundle = build_prompt("q", [passage("c", "body", heading="Lift")], [], 0)
        assert bundle.context_block == "[1] (Lift) body"

    def test_history_truncated_to_window(self):
        history = [("user", f"q{i}") for i in range(30)]
        bundle = build_prompt("q", [], history, openness=0)
        assert len(bundle.history) == MAX_HISTORY_TURNS
        assert bundle.history[-1] == ("user", "q29")

    def test_deterministic(self):
        passages = [passage("c1", "alpha"), passage("c2", "beta")]
        history = [("user", "hi"), ("assistant", "hello")]
        a = build_prompt("question", passages, history, 50)
        b = build_prompt("question", passages, history, 50)
        assert a == b

    def test_messages_layout(self):
        bundle = build_prompt(
            "next question",
            [passage("c", "ctx body")],
            [("user", "first"), ("assistant", "reply")],
            openness=0,
        )
        messages = messages_from_bundle(bundle)
        assert messages[0]["role"] == "system"
        assert "ctx body" in messages[0]["content"]
        assert messages[1] == {"role": "user", "content": "first"}
        assert messages[2] == {"role": "assistant", "content": "reply"}
        assert messages[-1] == {"role": "user", "content": "next question"}


class TestMockClient:
    def test_echoes_first_passage_first_sentence(self):
        bundle = build_prompt(
            "q",
            [passage("c", "Bernoulli relates pressure and velocity. More detail here.")],
            [],
            openness=0,
        )
        out = MockLLMClient().complete(bundle)
        assert out.startswith("[MOCK] Bernoulli relates pressure")
        assert "More detail" not in out

    def test_heading_not_echoed(self):
        bundle = build_prompt("q", [passage("c", "Key fact stated.", heading="Topic")], [], 0)
        assert MockLLMClient().complete(bundle) == "[MOCK] Key fact stated."

    def test_refusal_when_no_context_and_closed(self):
        bundle = build_prompt("q", [], [], openness=0)
        assert MockLLMClient().complete(bundle) == REFUSAL_TEXT

    def test_no_context_open_mode(self):
        bundle = build_prompt("q", [], [], openness=70)
        out = MockLLMClient().complete(bundle)
        assert out.startswith("[MOCK]")
        assert out != REFUSAL_TEXT


class FlakyClient:
    """Rate-limits the first N calls, then delegates to the mock."""

    model_id = "flaky"

    def __init__(self, failures: int):
        self.failures = failures
        self.calls = 0
        self._inner = MockLLMClient()

    def complete(self, bundle):
        self.calls += 1
        if self.calls <= self.failures:
            raise LLMRateLimitError("slow down")
        return self._inner.complete(bundle)


class TestGenerate:
    def test_result_fields(self):
        bundle = build_prompt("q", [passage("c1", "Fact one.")], [], 0)
        result = generate(bundle, MockLLMClient())
        assert result.answer_text == "[MOCK] Fact one."
        assert result.passages_used == ("c1",)
        assert result.latency_ms >= 0
        assert not result.degraded

    def test_rate_limit_retry_then_success(self):
        bundle = build_prompt("q", [passage("c", "Answer here.")], [], 0)
        client = FlakyClient(failures=2)
        result = generate(bundle, client, backoff_base=0.001)
        assert client.calls == 3
        assert result.answer_text == "[MOCK] Answer here."

    def test_rate_limit_exhausts_attempts(self):
        bundle = build_prompt("q", [], [], openness=0)
        client = FlakyClient(failures=5)
        with pytest.raises(LLMRateLimitError):
            generate(bundle, client, backoff_base=0.001)
        assert client.calls == 3

    def test_transport_error_not_retried(self):
        class Broken:
            model_id = "broken"

            def complete(self, bundle):
                raise LLMTransportError("down")

        with pytest.raises(LLMTransportError):
            generate(build_prompt("q", [], [], 0), Broken(), backoff_base=0.001)


class CapturingClient:
    """Stub that records every bundle it is asked to complete."""

    model_id = "capture"

    def __init__(self):
        self.bundles = []
        self._inner = MockLLMClient()

    def complete(self, bundle):
        self.bundles.append(bundle)
        return self._inner.complete(bundle)


@pytest.fixture
def bot() -> BotState:
    from ragserve.dense import HashingEmbedder

    state = BotState(
        config=BotConfig(bot_id="b1", name="FluidsTA", greeting="Hi!", openness=0),
        embedder=HashingEmbedder(dimension=64, seed=4),
        llm=CapturingClient(),
    )
    state.add_document(
        Document.create(
            "notes.txt",
            "Bernoulli relates pressure and velocity. "
            "The continuity equation conserves mass. "
            "Reynolds number predicts turbulence.",
        )
    )
    return state


class TestAnswer:
    def test_grounded_answer_and_record(self, bot):
        result = answer("bernoulli pressure velocity", "s1", bot)
        assert result.answer_text.startswith("[MOCK] Bernoulli relates pressure")
        assert result.record_id
        record = bot.records.get(result.record_id)
        assert record.question == "bernoulli pressure velocity"
        assert record.answer == result.answer_text
        assert set(record.passages_used) <= set(bot.chunks)

    def test_fresh_session_has_empty_history(self, bot):
        answer("bernoulli", "fresh", bot)
        assert bot.llm.bundles[0].history == ()

    def test_second_turn_sees_first(self, bot):
        answer("bernoulli pressure", "s2", bot)
        answer("and what about mass", "s2", bot)
        second = bot.llm.bundles[1]
        assert ("user", "bernoulli pressure") in second.history
        assert any(role == "assistant" for role, _ in second.history)

    def test_distinct_sessions_isolated(self, bot):
        answer("bernoulli", "a", bot)
        answer("reynolds", "b", bot)
        assert bot.llm.bundles[1].history == ()

    def test_passages_used_subset_of_retrieved(self, bot):
        result = answer("bernoulli pressure velocity", "s3", bot)
        bundle = bot.llm.bundles[-1]
        assert set(result.passages_used) == set(bundle.passage_refs)

    def test_llm_failure_persists_failed_record(self, bot):
        class AlwaysDown:
            model_id = "down"

            def complete(self, bundle):
                raise LLMTransportError("no route")

        bot.llm = AlwaysDown()
        with pytest.raises(LLMTransportError):
            answer("bernoulli", "s4", bot)
        failed = [r for r in bot.records.list("b1") if r.error]
        assert len(failed) == 1
        assert failed[0].answer == ""
        # the failed exchange must not pollute session history
        assert bot.session_history("s4") == []
