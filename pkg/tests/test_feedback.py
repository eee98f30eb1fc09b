"""Ratings, corrections, and the immediate index feedback loop."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from ragserve.corpus import Document, tokenize
from ragserve.dense import HashingEmbedder
from ragserve.feedback import (
    CORRECTION_SOURCE_NAME,
    InteractionRecord,
    InvalidFeedbackError,
    RecordLog,
    UnknownRecordError,
    list_interactions,
    rate,
    submit_correction,
)
from ragserve.generation import MockLLMClient, answer
from ragserve.pipeline import RetrievalConfig, hybrid_candidates
from ragserve.state import BotConfig, BotState


def record(rid: str, bot_id: str = "b1", **kw) -> InteractionRecord:
    return InteractionRecord.create(
        record_id=rid,
        session_id="s",
        bot_id=bot_id,
        question=kw.pop("question", "what is lift"),
        answer=kw.pop("answer", "an upward force"),
        **kw,
    )


@pytest.fixture
def log() -> RecordLog:
    log = RecordLog()
    log.add(record("r1"))
    return log


class TestRate:
    def test_rate_up(self, log):
        updated = rate(log, "r1", "up")
        assert updated.rating == "up"
        assert log.get("r1").rating == "up"

    def test_rate_twice_latest_wins_with_audit(self, log):
        rate(log, "r1", "up")
        updated = rate(log, "r1", "down")
        assert updated.rating == "down"
        assert len(updated.audit) == 1
        assert "up->down" in updated.audit[0]

    def test_unknown_record(self, log):
        with pytest.raises(UnknownRecordError):
            rate(log, "nope", "up")

    def test_invalid_rating(self, log):
        with pytest.raises(InvalidFeedbackError):
            rate(log, "r1", "sideways")


@pytest.fixture
def bot() -> BotState:
    state = BotState(
        config=BotConfig(bot_id="b1", name="TA", openness=0),
        embedder=HashingEmbedder(dimension=64, seed=9),
        llm=MockLLMClient(),
    )
    state.add_document(
        Document.create(
            "course.txt",
            "The syllabus covers hydrostatics and control volumes. "
            "Homework is due on fridays. Lectures happen twice weekly.",
        )
    )
    return state


class TestSubmitCorrection:
    def test_correction_retrievable_immediately(self, bot):
        question = "when is the drazzle exam scheduled"
        result = answer(question, "s1", bot)
        size_before = len(bot.chunks)

        submit_correction(
            bot.records, bot, result.record_id, "The drazzle exam is on May 5.", "prof"
        )
        assert len(bot.chunks) > size_before

        candidates = hybrid_candidates(
            question, bot.sparse, bot.dense, bot.embedder, bot.chunks, RetrievalConfig()
        )
        texts = [c.body for c in candidates]
        assert any("drazzle exam is on May 5" in t for t in texts)

    def test_correction_document_format(self, bot):
        result = answer("what is a control volume", "s1", bot)
        submit_correction(bot.records, bot, result.record_id, "A bounded region.", "ta")
        corrections = [
            d for d in bot.documents.values() if d.source_name == CORRECTION_SOURCE_NAME
        ]
        assert len(corrections) == 1
        assert corrections[0].raw_text == "Q: what is a control volume\nA: A bounded region."

    def test_record_updated(self, bot):
        result = answer("question one", "s1", bot)
        updated = submit_correction(bot.records, bot, result.record_id, "Better answer.", "prof")
        assert updated.correction == "Better answer."
        assert updated.correction_author == "prof"
        assert updated.corrected_at is not None

    def test_empty_correction_rejected(self, bot):
        result = answer("question", "s1", bot)
        with pytest.raises(InvalidFeedbackError):
            submit_correction(bot.records, bot, result.record_id, "   ")

    def test_unknown_record(self, bot):
        with pytest.raises(UnknownRecordError):
            submit_correction(bot.records, bot, "missing", "text")

    def test_two_corrections_coexist_record_keeps_latest(self, bot):
        result = answer("tricky question", "s1", bot)
        docs_before = len(bot.documents)
        submit_correction(bot.records, bot, result.record_id, "First fix.")
        submit_correction(bot.records, bot, result.record_id, "Second fix.")
        assert len(bot.documents) == docs_before + 2
        assert bot.records.get(result.record_id).correction == "Second fix."

    def test_corpus_monotone_and_parity(self, bot):
        before = set(bot.chunks)
        result = answer("anything", "s1", bot)
        submit_correction(bot.records, bot, result.record_id, "An addition.")
        assert before <= set(bot.chunks)
        assert bot.index_parity()

    def test_rank_one_under_lexical_reranker(self, bot):
        question = "how do I configure the frobulator for lab three"
        result = answer(question, "s1", bot)
        submit_correction(
            bot.records, bot, result.record_id,
            "Set the frobulator dial to seven before lab three begins.",
        )
        from ragserve.pipeline import LexicalOverlapReranker, retrieve

        out = retrieve(
            question, bot.sparse, bot.dense, bot.embedder, bot.chunks,
            LexicalOverlapReranker(), RetrievalConfig(),
        )
        top = out.passages[0]
        assert question in top.body  # the correction chunk embeds the question


def ts(hour: int) -> datetime:
    return datetime(2026, 3, 1, hour, 0, 0, tzinfo=timezone.utc)


class TestListInteractions:
    def make_log(self) -> RecordLog:
        log = RecordLog()
        for i, hour in enumerate((9, 10, 11)):
            rec = record(f"r{i}")
            object.__setattr__(rec, "created_at", ts(hour))
            log.add(rec)
        return log

    def test_empty_range(self):
        log = self.make_log()
        assert list_interactions(log, "b1", ts(1), ts(2)) == []

    def test_half_open_boundary(self):
        log = self.make_log()
        got = list_interactions(log, "b1", ts(9), ts(11))
        assert {r.record_id for r in got} == {"r0", "r1"}  # r2 at exactly `end` excluded
        got = list_interactions(log, "b1", ts(9), ts(11, ))
        assert all(r.created_at < ts(11) for r in got)

    def test_newest_first(self):
        log = self.make_log()
        got = list_interactions(log, "b1", ts(0), ts(23))
        assert [r.record_id for r in got] == ["r2", "r1", "r0"]

    def test_rated_down_filter(self):
        log = self.make_log()
        rate(log, "r1", "down")
        rate(log, "r2", "up")
        got = list_interactions(log, "b1", ts(0), ts(23), filter="rated_down")
        assert [r.record_id for r in got] == ["r1"]

    def test_uncorrected_filter(self):
        log = self.make_log()
        from dataclasses import replace

        corrected = replace(log.get("r0"), correction="fixed", corrected_at=ts(12))
        log.update(corrected)
        got = list_interactions(log, "b1", ts(0), ts(23), filter="uncorrected")
        assert {r.record_id for r in got} == {"r1", "r2"}

    def test_reversed_range_rejected(self):
        log = self.make_log()
        with pytest.raises(InvalidFeedbackError):
            list_interactions(log, "b1", ts(5), ts(4))

    def test_bad_filter(self):
        log = self.make_log()
        with pytest.raises(InvalidFeedbackError):
            list_interactions(log, "b1", ts(0), ts(23), filter="starred")
