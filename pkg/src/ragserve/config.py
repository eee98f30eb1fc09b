"""Service configuration: a small JSON file plus environment secrets.

Provider fields accept either a built-in name (``hashing``, ``mock``,
``lexical``) or an HTTP endpoint URL, so the same config shape covers both
the self-contained test setup and a real deployment.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dense import DEFAULT_DIMENSION, EmbeddingProvider, HashingEmbedder, HttpEmbeddingProvider
from .generation import MockLLMClient, OpenAIChatClient
from .pipeline import HttpCrossEncoderReranker, LexicalOverlapReranker


@dataclass
class ServiceConfig:
    data_dir: Path = Path("./ragserve-data")
    host: str = "127.0.0.1"
    port: int = 8000
    embedding_provider: str = "hashing"  # built-in name or endpoint URL
    embedding_dimension: int = DEFAULT_DIMENSION
    embedding_seed: int = 0
    llm_provider: str = "mock"  # "mock" or a chat-completion base URL
    llm_model: str = "mock"
    llm_api_key_env: str = "RAGSERVE_LLM_API_KEY"
    reranker: str = "lexical"  # "lexical" or a scoring endpoint URL
    instructor_token_env: str = "RAGSERVE_INSTRUCTOR_TOKEN"
    require_bot_key: bool = False
    max_chunk_tokens: int = 384
    request_timeout: float = 30.0

    @staticmethod
    def load(path: str | Path) -> "ServiceConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in ServiceConfig.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "data_dir" in raw:
            raw["data_dir"] = Path(raw["data_dir"])
        return ServiceConfig(**raw)

    @property
    def instructor_token(self) -> str:
        return os.environ.get(self.instructor_token_env, "")

    def build_embedder(self) -> EmbeddingProvider:
        if self.embedding_provider == "hashing":
            return HashingEmbedder(
                dimension=self.embedding_dimension, seed=self.embedding_seed
            )
        return HttpEmbeddingProvider(
            self.embedding_provider,
            dimension=self.embedding_dimension,
            timeout=self.request_timeout,
        )

    def build_llm(self):
        if self.llm_provider == "mock":
            return MockLLMClient()
        return OpenAIChatClient(
            base_url=self.llm_provider,
            model_id=self.llm_model,
            api_key=os.environ.get(self.llm_api_key_env, ""),
            timeout=self.request_timeout,
        )

    def build_reranker(self):
        if self.reranker == "lexical":
            return LexicalOverlapReranker()
        return HttpCrossEncoderReranker(self.reranker, timeout=self.request_timeout)
