"""ragserve: grounded question answering over a curated corpus.

Hybrid sparse+dense retrieval with re-ranking feeds a pluggable LLM, and
instructor corrections are folded straight back into both retrieval indexes.
"""

__version__ = "0.1.0"
