"""Multi-stage validation pipeline for LLM-based clinical information extraction."""

from .corpus import (
    CATEGORIES,
    AnnotatedNote,
    ClinicalNote,
    Corpus,
    ExtractionRecord,
    ExtractionStatus,
    OutcomeRecord,
    StructuredCode,
    SubstanceCategory,
    load_corpus,
)
from .llm_gateway import PromptStrategy, Reasoning

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "AnnotatedNote",
    "ClinicalNote",
    "Corpus",
    "ExtractionRecord",
    "ExtractionStatus",
    "OutcomeRecord",
    "PromptStrategy",
    "Reasoning",
    "StructuredCode",
    "SubstanceCategory",
    "load_corpus",
    "__version__",
]
