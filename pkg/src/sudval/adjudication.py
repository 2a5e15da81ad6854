"""Judge-LLM confirmatory validation.

Computes the trigger set (extraction-positive, code-negative at the
encounter level), builds judge prompts, parses verdicts with evidence
validation, and evaluates the primary extractor against judge-referenced
extractions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import (
    CATEGORIES,
    ClinicalNote,
    CodePositivity,
    Corpus,
    ExtractionRecord,
    ExtractionStatus,
    SubstanceCategory,
)
from .errors import SchemaError
from .llm_gateway import ChatRequest, _first_json_object, load_template
from .metrics import MatchScore, macro_average, relaxed_score, strict_score

NO_DIAGNOSIS_MARKER = "no diagnosis documented"

TRUNCATION_MARKER = "[...note truncated...]"


@dataclass(frozen=True)
class TriggerCase:
    note_id: str
    encounter_id: str
    category: SubstanceCategory
    extraction_text: str

    def to_json_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "encounter_id": self.encounter_id,
            "category": self.category.value,
            "extraction_text": self.extraction_text,
        }


class VerdictLabel(str, Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"


@dataclass
class JudgeVerdict:
    note_id: str
    category: SubstanceCategory
    verdict: VerdictLabel
    correction: str | None = None
    evidence: str | None = None
    raw_text: str = ""

    def to_json_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "category": self.category.value,
            "verdict": self.verdict.value,
            "correction": self.correction,
            "evidence": self.evidence,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "JudgeVerdict":
        return cls(
            note_id=data["note_id"],
            category=SubstanceCategory(data["category"]),
            verdict=VerdictLabel(data["verdict"]),
            correction=data.get("correction"),
            evidence=data.get("evidence"),
            raw_text=data.get("raw_text", ""),
        )


def compute_triggers(
    extractions: list[ExtractionRecord],
    code_flags: CodePositivity,
    corpus: Corpus,
) -> list[TriggerCase]:
    """One case per retained (note, category) whose encounter lacks a
    matching code, ordered by (encounter_id, note_id, category)."""
    cases = []
    for record in extractions:
        if record.status is not ExtractionStatus.RETAINED:
            continue
        note = corpus.notes[record.note_id]
        if code_flags.get(note.encounter_id, record.category):
            continue
        cases.append(
            TriggerCase(
                note_id=record.note_id,
                encounter_id=note.encounter_id,
                category=record.category,
                extraction_text=record.text or "",
            )
        )
    cases.sort(key=lambda c: (c.encounter_id, c.note_id, c.category.value))
    return cases


def _truncate_note(
    text: str, best_window: tuple[int, int] | None, max_chars: int
) -> str:
    if len(text) <= max_chars:
        return text
    if best_window is not None:
        center = (best_window[0] + best_window[1]) // 2
    else:
        center = len(text) // 2
    start = max(0, min(center - max_chars // 2, len(text) - max_chars))
    end = start + max_chars
    prefix = TRUNCATION_MARKER + " " if start > 0 else ""
    suffix = " " + TRUNCATION_MARKER if end < len(text) else ""
    return prefix + text[start:end] + suffix


def build_judge_prompt(
    case: TriggerCase,
    note: ClinicalNote,
    best_window: tuple[int, int] | None = None,
    max_note_chars: int | None = None,
    model: str = "judge",
    template_dir: str | Path | None = None,
    max_tokens: int = 512,
) -> ChatRequest:
    """Full note, the extraction verbatim, and the category's DSM-style
    display name, in the fixed judge schema.

    Notes longer than the context budget are truncated around the grounding
    best window with an explicit marker.
    """
    note_text = note.text
    if max_note_chars is not None:
        note_text = _truncate_note(note_text, best_window, max_note_chars)
    system = load_template("judge_system.txt", template_dir)
    user = load_template("judge_user.txt", template_dir)
    user = user.replace("{{category}}", case.category.display_name)
    user = user.replace("{{extraction}}", case.extraction_text)
    user = user.replace("{{note_text}}", note_text)
    return ChatRequest(
        model=model,
        messages=[
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        temperature=0.0,
        max_tokens=max_tokens,
    )


def _whitespace_normalize(text: str) -> str:
    return " ".join(text.split())


def parse_judge_verdict(
    raw: str, note: ClinicalNote, case: TriggerCase
) -> tuple[JudgeVerdict, bool]:
    """Parse the judge schema and validate the evidence-substring invariant.

    Evidence not found in the note (after whitespace normalization) is
    dropped; the returned flag reports that violation so callers can count
    it. An incorrect verdict with no correction is repaired to the
    no-diagnosis marker. Unparseable output raises with the raw text kept
    for audit.
    """
    obj = _first_json_object(raw)
    if obj is None or obj.get("verdict") not in ("correct", "incorrect"):
        raise SchemaError("no parseable judge verdict", raw_text=raw)
    verdict = VerdictLabel(obj["verdict"])
    correction = obj.get("correction")
    if correction is not None and not isinstance(correction, str):
        correction = str(correction)
    if verdict is VerdictLabel.INCORRECT and not (correction and correction.strip()):
        correction = NO_DIAGNOSIS_MARKER
    if verdict is VerdictLabel.CORRECT:
        correction = None
    evidence = obj.get("evidence")
    violation = False
    if evidence is not None:
        if not isinstance(evidence, str) or _whitespace_normalize(
            evidence
        ) not in _whitespace_normalize(note.text):
            evidence = None
            violation = True
    return (
        JudgeVerdict(
            note_id=case.note_id,
            category=case.category,
            verdict=verdict,
            correction=correction,
            evidence=evidence,
            raw_text=raw,
        ),
        violation,
    )


@dataclass
class CategoryScore:
    precision_relaxed: float
    recall_relaxed: float
    f1_relaxed: float
    f1_strict: float
    instances: int

    def to_json_dict(self) -> dict:
        return {
            "precision_relaxed": self.precision_relaxed,
            "recall_relaxed": self.recall_relaxed,
            "f1_relaxed": self.f1_relaxed,
            "f1_strict": self.f1_strict,
            "instances": self.instances,
        }


@dataclass
class JudgeEvaluation:
    per_category: dict[SubstanceCategory, CategoryScore]
    overall: CategoryScore | None
    adjudicated: int
    unadjudicated: int

    def to_json_dict(self) -> dict:
        return {
            "per_category": {
                category.display_name: score.to_json_dict()
                for category, score in self.per_category.items()
            },
            "overall": self.overall.to_json_dict() if self.overall else None,
            "adjudicated": self.adjudicated,
            "unadjudicated": self.unadjudicated,
        }


def reference_text(verdict: JudgeVerdict, case: TriggerCase) -> str:
    """Judge-referenced gold: the original extraction when correct, the
    judge correction when incorrect; the no-diagnosis marker scores as an
    fp-only empty reference."""
    if verdict.verdict is VerdictLabel.CORRECT:
        return case.extraction_text
    if verdict.correction is None or verdict.correction == NO_DIAGNOSIS_MARKER:
        return ""
    return verdict.correction


def evaluate_against_judge(
    cases: list[TriggerCase], verdicts: list[JudgeVerdict]
) -> JudgeEvaluation:
    """Per-category and overall strict/relaxed scores of the primary
    extractor against judge-referenced extractions.

    Cases without a verdict are excluded as unadjudicated and counted.
    """
    by_key = {(v.note_id, v.category): v for v in verdicts}
    per_category_relaxed: dict[SubstanceCategory, list[MatchScore]] = {}
    per_category_strict: dict[SubstanceCategory, list[int]] = {}
    all_relaxed: list[MatchScore] = []
    all_strict: list[int] = []
    unadjudicated = 0
    for case in cases:
        verdict = by_key.get((case.note_id, case.category))
        if verdict is None:
            unadjudicated += 1
            continue
        reference = reference_text(verdict, case)
        relaxed = relaxed_score(reference, case.extraction_text)
        strict = strict_score(reference, case.extraction_text)
        per_category_relaxed.setdefault(case.category, []).append(relaxed)
        per_category_strict.setdefault(case.category, []).append(strict)
        all_relaxed.append(relaxed)
        all_strict.append(strict)

    def summarize(relaxed: list[MatchScore], strict: list[int]) -> CategoryScore:
        macro = macro_average(relaxed)
        return CategoryScore(
            precision_relaxed=macro.precision,
            recall_relaxed=macro.recall,
            f1_relaxed=macro.f1,
            f1_strict=sum(strict) / len(strict),
            instances=len(relaxed),
        )

    per_category = {
        category: summarize(per_category_relaxed[category], per_category_strict[category])
        for category in CATEGORIES
        if category in per_category_relaxed
    }
    overall = summarize(all_relaxed, all_strict) if all_relaxed else None
    return JudgeEvaluation(
        per_category=per_category,
        overall=overall,
        adjudicated=len(all_relaxed),
        unadjudicated=unadjudicated,
    )


def write_triggers(cases: list[TriggerCase], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for case in cases:
            handle.write(json.dumps(case.to_json_dict(), ensure_ascii=False) + "\n")


def read_triggers(path: str | Path) -> list[TriggerCase]:
    cases = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                data = json.loads(line)
                cases.append(
                    TriggerCase(
                        note_id=data["note_id"],
                        encounter_id=data["encounter_id"],
                        category=SubstanceCategory(data["category"]),
                        extraction_text=data["extraction_text"],
                    )
                )
    return cases


def write_verdicts(verdicts: list[JudgeVerdict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for verdict in verdicts:
            handle.write(json.dumps(verdict.to_json_dict(), ensure_ascii=False) + "\n")


def read_verdicts(path: str | Path) -> list[JudgeVerdict]:
    verdicts = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                verdicts.append(JudgeVerdict.from_json_dict(json.loads(line)))
    return verdicts
