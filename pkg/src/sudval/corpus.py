"""Data model, ingestion, persistence, and encounter-level aggregation.

Notes, structured diagnosis codes, outcomes, and per-(note, category)
extraction lifecycle records. The corpus is immutable after load and safe
for concurrent reads; ingestion is single-threaded per file. Malformed
input lines are skipped and counted, never silently dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import IngestionError, UnresolvedReferenceError, ValidationError


class SubstanceCategory(str, Enum):
    """The 11 substance use disorder categories."""

    ALCOHOL = "alcohol"
    OPIOID = "opioid"
    CANNABIS = "cannabis"
    COCAINE = "cocaine"
    AMPHETAMINE = "amphetamine"
    CAFFEINE = "caffeine"
    HALLUCINOGEN = "hallucinogen"
    NICOTINE = "nicotine"
    INHALANT = "inhalant"
    OTHER_OR_UNKNOWN = "other_or_unknown"
    SEDATIVE_HYPNOTIC_ANXIOLYTIC = "sedative_hypnotic_anxiolytic"

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


CATEGORIES: tuple[SubstanceCategory, ...] = tuple(SubstanceCategory)

_DISPLAY_NAMES = {
    SubstanceCategory.ALCOHOL: "Alcohol",
    SubstanceCategory.OPIOID: "Opioid",
    SubstanceCategory.CANNABIS: "Cannabis",
    SubstanceCategory.COCAINE: "Cocaine",
    SubstanceCategory.AMPHETAMINE: "Amphetamine",
    SubstanceCategory.CAFFEINE: "Caffeine",
    SubstanceCategory.HALLUCINOGEN: "Hallucinogen",
    SubstanceCategory.NICOTINE: "Nicotine",
    SubstanceCategory.INHALANT: "Inhalant",
    SubstanceCategory.OTHER_OR_UNKNOWN: "Other or unknown",
    SubstanceCategory.SEDATIVE_HYPNOTIC_ANXIOLYTIC: "Sedative, hypnotic, or anxiolytic",
}

# Default ICD-10 prefix map. The source material states F10-F19 without the
# per-category assignment; this default is configuration, not a fact of the
# coding system (notably amphetamine <- F15 "other stimulant", and caffeine,
# which has no F-code and therefore an empty prefix set).
DEFAULT_PREFIX_MAP: dict[SubstanceCategory, tuple[str, ...]] = {
    SubstanceCategory.ALCOHOL: ("F10",),
    SubstanceCategory.OPIOID: ("F11",),
    SubstanceCategory.CANNABIS: ("F12",),
    SubstanceCategory.SEDATIVE_HYPNOTIC_ANXIOLYTIC: ("F13",),
    SubstanceCategory.COCAINE: ("F14",),
    SubstanceCategory.AMPHETAMINE: ("F15",),
    SubstanceCategory.HALLUCINOGEN: ("F16",),
    SubstanceCategory.NICOTINE: ("F17",),
    SubstanceCategory.INHALANT: ("F18",),
    SubstanceCategory.OTHER_OR_UNKNOWN: ("F19",),
    SubstanceCategory.CAFFEINE: (),
}


def validate_prefix_map(prefix_map: dict[SubstanceCategory, tuple[str, ...]]) -> None:
    """Check that every prefix maps to at most one category."""
    seen: dict[str, SubstanceCategory] = {}
    for category, prefixes in prefix_map.items():
        for prefix in prefixes:
            key = prefix.upper()
            if key in seen and seen[key] is not category:
                raise ValidationError(
                    f"prefix {prefix!r} maps to both {seen[key].value} and {category.value}"
                )
            seen[key] = category


class ExtractionStatus(str, Enum):
    """Lifecycle of one (note, category) extraction through the filter stages."""

    LLM_NEGATIVE = "llm_negative"
    RAW_POSITIVE = "raw_positive"
    RULE_FLAGGED = "rule_flagged"
    GROUNDING_FLAGGED = "grounding_flagged"
    RETAINED = "retained"


@dataclass(frozen=True)
class ClinicalNote:
    note_id: str
    patient_id: str
    encounter_id: str
    timestamp: str
    text: str


@dataclass(frozen=True)
class StructuredCode:
    encounter_id: str
    patient_id: str
    code: str
    date: str


@dataclass(frozen=True)
class OutcomeRecord:
    patient_id: str
    engaged: bool


@dataclass(frozen=True)
class AnnotatedNote:
    """A calibration note with gold extraction strings per labeled category."""

    note: ClinicalNote
    gold: dict[SubstanceCategory, str]

    def label_count(self) -> int:
        return len(self.gold)


@dataclass
class ExtractionRecord:
    note_id: str
    category: SubstanceCategory
    text: str | None
    status: ExtractionStatus
    grounding_score: float | None = None
    flag_reason: str | None = None

    def validate(self) -> None:
        positive = {
            ExtractionStatus.RULE_FLAGGED,
            ExtractionStatus.GROUNDING_FLAGGED,
            ExtractionStatus.RETAINED,
        }
        if self.status in positive and not self.text:
            raise ValidationError(
                f"{self.status.value} record for note {self.note_id} has no text"
            )
        if (self.status is ExtractionStatus.LLM_NEGATIVE) != (self.text is None):
            raise ValidationError(
                f"record for note {self.note_id}: llm_negative iff text absent"
            )
        if self.grounding_score is not None and self.status not in {
            ExtractionStatus.GROUNDING_FLAGGED,
            ExtractionStatus.RETAINED,
        }:
            raise ValidationError(
                f"record for note {self.note_id}: grounding_score on status {self.status.value}"
            )

    def to_json_dict(self) -> dict:
        # Fixed key order for diffable JSON Lines artifacts.
        return {
            "note_id": self.note_id,
            "category": self.category.value,
            "text": self.text,
            "status": self.status.value,
            "grounding_score": self.grounding_score,
            "flag_reason": self.flag_reason,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ExtractionRecord":
        return cls(
            note_id=data["note_id"],
            category=SubstanceCategory(data["category"]),
            text=data.get("text"),
            status=ExtractionStatus(data["status"]),
            grounding_score=data.get("grounding_score"),
            flag_reason=data.get("flag_reason"),
        )


@dataclass
class Corpus:
    notes: dict[str, ClinicalNote] = field(default_factory=dict)
    codes: list[StructuredCode] = field(default_factory=list)
    outcomes: dict[str, OutcomeRecord] = field(default_factory=dict)
    malformed_counts: dict[str, int] = field(default_factory=dict)

    notes_by_encounter: dict[str, list[str]] = field(default_factory=dict)
    notes_by_patient: dict[str, list[str]] = field(default_factory=dict)
    codes_by_encounter: dict[str, list[StructuredCode]] = field(default_factory=dict)

    @property
    def malformed_count(self) -> int:
        return sum(self.malformed_counts.values())

    def encounter_ids(self) -> list[str]:
        return sorted(self.notes_by_encounter)

    def patient_ids(self) -> list[str]:
        ids = set(self.notes_by_patient)
        ids.update(code.patient_id for code in self.codes)
        return sorted(ids)

    def add_note(self, note: ClinicalNote) -> None:
        if note.note_id in self.notes:
            raise ValidationError(f"duplicate note_id {note.note_id!r}")
        self.notes[note.note_id] = note
        self.notes_by_encounter.setdefault(note.encounter_id, []).append(note.note_id)
        self.notes_by_patient.setdefault(note.patient_id, []).append(note.note_id)

    def add_code(self, code: StructuredCode) -> None:
        self.codes.append(code)
        self.codes_by_encounter.setdefault(code.encounter_id, []).append(code)

    def add_outcome(self, outcome: OutcomeRecord) -> None:
        if outcome.patient_id in self.outcomes:
            raise ValidationError(
                f"duplicate outcome record for patient {outcome.patient_id!r}"
            )
        self.outcomes[outcome.patient_id] = outcome


_NOTE_KEYS = ("note_id", "patient_id", "encounter_id", "timestamp", "text")
_CODE_KEYS = ("encounter_id", "patient_id", "code", "date")
_OUTCOME_KEYS = ("patient_id", "engaged")


def _iter_jsonl(path: Path):
    try:
        with path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if line.strip():
                    yield line_no, line
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc


def load_corpus(
    notes_path: str | Path,
    codes_path: str | Path | None = None,
    outcomes_path: str | Path | None = None,
) -> Corpus:
    """Load notes/codes/outcomes JSON Lines files into an indexed corpus.

    Malformed lines (bad JSON, missing keys, empty ids) are counted per file
    in ``corpus.malformed_counts``. Duplicate note or outcome ids raise
    :class:`ValidationError` naming the id.
    """
    corpus = Corpus()
    corpus.malformed_counts["notes"] = 0
    for _, line in _iter_jsonl(Path(notes_path)):
        record = _parse_line(line, _NOTE_KEYS)
        if record is None or not record["note_id"]:
            corpus.malformed_counts["notes"] += 1
            continue
        corpus.add_note(
            ClinicalNote(
                note_id=str(record["note_id"]),
                patient_id=str(record["patient_id"]),
                encounter_id=str(record["encounter_id"]),
                timestamp=str(record["timestamp"]),
                text=str(record["text"]),
            )
        )
    if codes_path is not None:
        corpus.malformed_counts["codes"] = 0
        for _, line in _iter_jsonl(Path(codes_path)):
            record = _parse_line(line, _CODE_KEYS)
            if record is None or not record["code"]:
                corpus.malformed_counts["codes"] += 1
                continue
            corpus.add_code(
                StructuredCode(
                    encounter_id=str(record["encounter_id"]),
                    patient_id=str(record["patient_id"]),
                    code=str(record["code"]),
                    date=str(record["date"]),
                )
            )
    if outcomes_path is not None:
        corpus.malformed_counts["outcomes"] = 0
        for _, line in _iter_jsonl(Path(outcomes_path)):
            record = _parse_line(line, _OUTCOME_KEYS)
            if record is None or not isinstance(record["engaged"], bool):
                corpus.malformed_counts["outcomes"] += 1
                continue
            corpus.add_outcome(
                OutcomeRecord(patient_id=str(record["patient_id"]), engaged=record["engaged"])
            )
    return corpus


def _parse_line(line: str, required_keys: tuple[str, ...]) -> dict | None:
    try:
        record = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(record, dict):
        return None
    if any(key not in record or record[key] is None for key in required_keys):
        return None
    return record


def save_corpus(
    corpus: Corpus,
    notes_path: str | Path,
    codes_path: str | Path | None = None,
    outcomes_path: str | Path | None = None,
) -> None:
    """Serialize a corpus back to JSON Lines with stable key order."""
    with Path(notes_path).open("w", encoding="utf-8") as handle:
        for note_id in sorted(corpus.notes):
            note = corpus.notes[note_id]
            handle.write(
                json.dumps(
                    {key: getattr(note, key) for key in _NOTE_KEYS}, ensure_ascii=False
                )
                + "\n"
            )
    if codes_path is not None:
        with Path(codes_path).open("w", encoding="utf-8") as handle:
            for code in corpus.codes:
                handle.write(
                    json.dumps(
                        {key: getattr(code, key) for key in _CODE_KEYS}, ensure_ascii=False
                    )
                    + "\n"
                )
    if outcomes_path is not None:
        with Path(outcomes_path).open("w", encoding="utf-8") as handle:
            for patient_id in sorted(corpus.outcomes):
                outcome = corpus.outcomes[patient_id]
                handle.write(
                    json.dumps(
                        {key: getattr(outcome, key) for key in _OUTCOME_KEYS},
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def load_annotated(path: str | Path) -> tuple[list[AnnotatedNote], int]:
    """Load the annotated calibration set.

    One JSON object per line: the note fields plus a ``gold`` object mapping
    category value to the gold extraction string. Returns (notes, malformed).
    """
    annotated: list[AnnotatedNote] = []
    malformed = 0
    seen: set[str] = set()
    for _, line in _iter_jsonl(Path(path)):
        record = _parse_line(line, _NOTE_KEYS + ("gold",))
        if record is None or not isinstance(record["gold"], dict):
            malformed += 1
            continue
        try:
            gold = {
                SubstanceCategory(key): str(value)
                for key, value in record["gold"].items()
                if value
            }
        except ValueError:
            malformed += 1
            continue
        note_id = str(record["note_id"])
        if note_id in seen:
            raise ValidationError(f"duplicate note_id {note_id!r}")
        seen.add(note_id)
        annotated.append(
            AnnotatedNote(
                note=ClinicalNote(
                    note_id=note_id,
                    patient_id=str(record["patient_id"]),
                    encounter_id=str(record["encounter_id"]),
                    timestamp=str(record["timestamp"]),
                    text=str(record["text"]),
                ),
                gold=gold,
            )
        )
    return annotated, malformed


def write_extractions(records: list[ExtractionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")


def read_extractions(path: str | Path) -> list[ExtractionRecord]:
    records = []
    for _, line in _iter_jsonl(Path(path)):
        records.append(ExtractionRecord.from_json_dict(json.loads(line)))
    return records


def encounter_positivity(
    extractions: list[ExtractionRecord], corpus: Corpus
) -> dict[tuple[str, SubstanceCategory], bool]:
    """Encounter-level OR-aggregation of retained extractions.

    The returned map is total over corpus encounters x the 11 categories;
    an encounter with no retained record for a category maps to False.
    """
    flags: dict[tuple[str, SubstanceCategory], bool] = {
        (encounter_id, category): False
        for encounter_id in corpus.notes_by_encounter
        for category in CATEGORIES
    }
    for record in extractions:
        note = corpus.notes.get(record.note_id)
        if note is None:
            raise UnresolvedReferenceError(
                f"extraction references unknown note_id {record.note_id!r}"
            )
        if record.status is ExtractionStatus.RETAINED:
            flags[(note.encounter_id, record.category)] = True
    return flags


@dataclass
class CodePositivity:
    """Encounter-level code positivity plus the count of unmapped codes."""

    flags: dict[tuple[str, SubstanceCategory], bool]
    unmapped_count: int

    def get(self, encounter_id: str, category: SubstanceCategory) -> bool:
        return self.flags.get((encounter_id, category), False)


def code_positivity(
    codes: list[StructuredCode],
    prefix_map: dict[SubstanceCategory, tuple[str, ...]] | None = None,
) -> CodePositivity:
    """Case-insensitive prefix match of encounter codes against the category map.

    Codes matching no prefix are ignored but counted.
    """
    if prefix_map is None:
        prefix_map = DEFAULT_PREFIX_MAP
    validate_prefix_map(prefix_map)
    flags: dict[tuple[str, SubstanceCategory], bool] = {}
    unmapped = 0
    for code in codes:
        normalized = code.code.upper()
        matched = False
        for category, prefixes in prefix_map.items():
            if any(normalized.startswith(prefix.upper()) for prefix in prefixes):
                flags[(code.encounter_id, category)] = True
                matched = True
        if not matched:
            unmapped += 1
    return CodePositivity(flags=flags, unmapped_count=unmapped)
