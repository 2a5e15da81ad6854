import json
from pathlib import Path

import pytest

from sudval.corpus import load_corpus
from sudval.grounding import HashingEmbeddingProvider
from sudval.rule_filter import default_rules


@pytest.fixture(scope="session")
def compiled_default_rules():
    return default_rules()


@pytest.fixture(scope="session")
def hashing_provider():
    return HashingEmbeddingProvider(dim=64, seed=0)


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


@pytest.fixture()
def tiny_corpus(tmp_path):
    """Three notes over two encounters/patients plus codes and outcomes."""
    notes = [
        {
            "note_id": "n1",
            "patient_id": "p1",
            "encounter_id": "e1",
            "timestamp": "2023-01-02",
            "text": "Assessment: alcohol use disorder, severe. Plan documented.",
        },
        {
            "note_id": "n2",
            "patient_id": "p1",
            "encounter_id": "e1",
            "timestamp": "2023-01-02",
            "text": "Routine follow-up. No acute concerns.",
        },
        {
            "note_id": "n3",
            "patient_id": "p2",
            "encounter_id": "e2",
            "timestamp": "2023-01-05",
            "text": "Assessment: opioid use disorder, moderate. Continue monitoring.",
        },
    ]
    codes = [
        {"encounter_id": "e1", "patient_id": "p1", "code": "F10.20", "date": "2023-01-02"},
        {"encounter_id": "e2", "patient_id": "p2", "code": "Z71.41", "date": "2023-01-05"},
    ]
    outcomes = [
        {"patient_id": "p1", "engaged": True},
        {"patient_id": "p2", "engaged": False},
    ]
    notes_path = write_jsonl(tmp_path / "notes.jsonl", notes)
    codes_path = write_jsonl(tmp_path / "codes.jsonl", codes)
    outcomes_path = write_jsonl(tmp_path / "outcomes.jsonl", outcomes)
    return load_corpus(notes_path, codes_path, outcomes_path)
