"""Targeted SME review service.

Seeded sampling of triggered cases, an append-only judgment journal, SME vs
judge agreement reporting (percent agreement + Gwet's AC1), and the HTTP API
the companion UI consumes. Judge verdicts are withheld from the reviewer
until their judgment is submitted, then revealed for the reasoning-quality
rating.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .adjudication import JudgeVerdict, TriggerCase, VerdictLabel
from .corpus import CATEGORIES, Corpus, SubstanceCategory
from .errors import NotFoundError, UndefinedMetricError, ValidationError
from .metrics import AgreementTable, gwet_ac1, percent_agreement
from .sampling import seeded_shuffle


@dataclass
class ReviewCase:
    """One sampled note bundling all 11 categories: extractions where
    present, judge verdicts (hidden from the reviewer until submission),
    and grounding best windows for highlighting."""

    case_id: str
    note_id: str
    note_text: str
    extractions: dict[SubstanceCategory, str | None]
    judge_verdicts: dict[SubstanceCategory, JudgeVerdict | None]
    best_windows: dict[SubstanceCategory, tuple[int, int] | None]

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "note_id": self.note_id,
            "note_text": self.note_text,
            "extractions": {c.value: self.extractions.get(c) for c in CATEGORIES},
            "judge_verdicts": {
                c.value: (
                    self.judge_verdicts[c].to_json_dict()
                    if self.judge_verdicts.get(c)
                    else None
                )
                for c in CATEGORIES
            },
            "best_windows": {
                c.value: list(self.best_windows[c]) if self.best_windows.get(c) else None
                for c in CATEGORIES
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ReviewCase":
        return cls(
            case_id=data["case_id"],
            note_id=data["note_id"],
            note_text=data["note_text"],
            extractions={
                SubstanceCategory(k): v for k, v in data["extractions"].items()
            },
            judge_verdicts={
                SubstanceCategory(k): (JudgeVerdict.from_json_dict(v) if v else None)
                for k, v in data["judge_verdicts"].items()
            },
            best_windows={
                SubstanceCategory(k): (tuple(v) if v else None)
                for k, v in data["best_windows"].items()
            },
        )


def sample_review_cases(
    triggers: list[TriggerCase],
    n: int,
    seed: int,
    corpus: Corpus,
    extractions_by_note: dict[str, dict[SubstanceCategory, str | None]],
    verdicts: list[JudgeVerdict],
    best_windows: dict[tuple[str, SubstanceCategory], tuple[int, int]] | None = None,
) -> list[ReviewCase]:
    """Uniform seeded sample without replacement over distinct triggered
    note ids; each case bundles all 11 categories for that note."""
    note_ids = sorted({case.note_id for case in triggers})
    if n > len(note_ids):
        raise ValueError(f"sample size {n} exceeds trigger population {len(note_ids)}")
    sampled = seeded_shuffle(note_ids, seed)[:n]
    verdicts_by_key = {(v.note_id, v.category): v for v in verdicts}
    best_windows = best_windows or {}
    cases = []
    for note_id in sampled:
        note = corpus.notes[note_id]
        extractions = extractions_by_note.get(note_id, {})
        cases.append(
            ReviewCase(
                case_id=f"rc-{note_id}",
                note_id=note_id,
                note_text=note.text,
                extractions={c: extractions.get(c) for c in CATEGORIES},
                judge_verdicts={
                    c: verdicts_by_key.get((note_id, c)) for c in CATEGORIES
                },
                best_windows={
                    c: best_windows.get((note_id, c)) for c in CATEGORIES
                },
            )
        )
    return cases


@dataclass
class ReviewJudgment:
    case_id: str
    category: SubstanceCategory
    verdict: VerdictLabel
    reviewer_id: str
    corrected_text: str | None = None
    rationale: str | None = None
    judge_reasoning_quality: int | None = None
    submitted_at: str = ""
    version: int = 1

    def __post_init__(self):
        if self.judge_reasoning_quality is not None and not (
            1 <= self.judge_reasoning_quality <= 5
        ):
            raise ValidationError("judge_reasoning_quality must be in 1..5")

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "category": self.category.value,
            "verdict": self.verdict.value,
            "reviewer_id": self.reviewer_id,
            "corrected_text": self.corrected_text,
            "rationale": self.rationale,
            "judge_reasoning_quality": self.judge_reasoning_quality,
            "submitted_at": self.submitted_at,
            "version": self.version,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ReviewJudgment":
        return cls(
            case_id=data["case_id"],
            category=SubstanceCategory(data["category"]),
            verdict=VerdictLabel(data["verdict"]),
            reviewer_id=data["reviewer_id"],
            corrected_text=data.get("corrected_text"),
            rationale=data.get("rationale"),
            judge_reasoning_quality=data.get("judge_reasoning_quality"),
            submitted_at=data.get("submitted_at", ""),
            version=data.get("version", 1),
        )


class JudgmentJournal:
    """Append-only JSON Lines journal with an in-memory index.

    Resubmissions create new versions; full history is retained. A single
    lock serializes writers; reads snapshot the in-memory state.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: list[ReviewJudgment] = []
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as handle:
                for line in handle:
                    if line.strip():
                        self._entries.append(
                            ReviewJudgment.from_json_dict(json.loads(line))
                        )

    def append(self, judgment: ReviewJudgment) -> ReviewJudgment:
        with self._lock:
            prior = [
                e
                for e in self._entries
                if e.case_id == judgment.case_id
                and e.category == judgment.category
                and e.reviewer_id == judgment.reviewer_id
            ]
            judgment.version = len(prior) + 1
            if not judgment.submitted_at:
                judgment.submitted_at = datetime.now(timezone.utc).isoformat()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(
                    json.dumps(judgment.to_json_dict(), ensure_ascii=False) + "\n"
                )
            self._entries.append(judgment)
            return judgment

    def all_entries(self) -> list[ReviewJudgment]:
        with self._lock:
            return list(self._entries)

    def latest(self) -> dict[tuple[str, SubstanceCategory], ReviewJudgment]:
        """Latest version per (case, category); journal order breaks ties."""
        latest: dict[tuple[str, SubstanceCategory], ReviewJudgment] = {}
        for entry in self.all_entries():
            latest[(entry.case_id, entry.category)] = entry
        return latest


@dataclass
class AgreementCell:
    table: AgreementTable
    percent: float
    ac1: float

    def to_json_dict(self) -> dict:
        return {
            "n": self.table.n,
            "n11": self.table.n11,
            "n10": self.table.n10,
            "n01": self.table.n01,
            "n00": self.table.n00,
            "percent_agreement": self.percent,
            "ac1": self.ac1,
        }


@dataclass
class AgreementReport:
    per_category: dict[SubstanceCategory, AgreementCell]
    overall: AgreementCell
    llm_positive_subset: AgreementCell | None
    unpaired: int

    def to_json_dict(self) -> dict:
        return {
            "per_category": {
                category.display_name: cell.to_json_dict()
                for category, cell in self.per_category.items()
            },
            "overall": self.overall.to_json_dict(),
            "llm_positive_subset": (
                self.llm_positive_subset.to_json_dict()
                if self.llm_positive_subset
                else None
            ),
            "unpaired": self.unpaired,
        }


def _cell(pairs: list[tuple[bool, bool]]) -> AgreementCell:
    n11 = sum(1 for sme, judge in pairs if sme and judge)
    n10 = sum(1 for sme, judge in pairs if sme and not judge)
    n01 = sum(1 for sme, judge in pairs if not sme and judge)
    n00 = sum(1 for sme, judge in pairs if not sme and not judge)
    table = AgreementTable(n11=n11, n10=n10, n01=n01, n00=n00)
    return AgreementCell(
        table=table, percent=percent_agreement(table), ac1=gwet_ac1(table)
    )


def agreement_report(
    judgments: dict[tuple[str, SubstanceCategory], ReviewJudgment],
    cases: list[ReviewCase],
) -> AgreementReport:
    """Per-category and overall (percent agreement, AC1) between SME and judge.

    Rater A = SME (correct=True means the SME judged the extraction state
    correct), rater B = judge. Categories with no extraction carry an
    implicit judge verdict of "correct" (the judge raised no objection);
    categories with an extraction but no judge verdict cannot be paired and
    are counted as unpaired. The report also covers the subset restricted to
    categories with an extraction present (the LLM+ code-negative cases).
    """
    per_category_pairs: dict[SubstanceCategory, list[tuple[bool, bool]]] = {}
    positive_pairs: list[tuple[bool, bool]] = []
    all_pairs: list[tuple[bool, bool]] = []
    unpaired = 0
    by_case = {case.case_id: case for case in cases}
    for (case_id, category), judgment in sorted(
        judgments.items(), key=lambda item: (item[0][0], item[0][1].value)
    ):
        case = by_case.get(case_id)
        if case is None:
            unpaired += 1
            continue
        has_extraction = bool(case.extractions.get(category))
        verdict = case.judge_verdicts.get(category)
        if verdict is not None:
            judge_correct = verdict.verdict is VerdictLabel.CORRECT
        elif not has_extraction:
            judge_correct = True
        else:
            unpaired += 1
            continue
        sme_correct = judgment.verdict is VerdictLabel.CORRECT
        pair = (sme_correct, judge_correct)
        per_category_pairs.setdefault(category, []).append(pair)
        all_pairs.append(pair)
        if has_extraction:
            positive_pairs.append(pair)
    if not all_pairs:
        raise UndefinedMetricError("no paired SME/judge judgments")
    return AgreementReport(
        per_category={
            category: _cell(pairs)
            for category, pairs in per_category_pairs.items()
        },
        overall=_cell(all_pairs),
        llm_positive_subset=_cell(positive_pairs) if positive_pairs else None,
        unpaired=unpaired,
    )


def write_cases(cases: list[ReviewCase], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for case in cases:
            handle.write(json.dumps(case.to_json_dict(), ensure_ascii=False) + "\n")


def read_cases(path: str | Path) -> list[ReviewCase]:
    cases = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                cases.append(ReviewCase.from_json_dict(json.loads(line)))
    return cases


class JudgmentBody(BaseModel):
    category: str
    verdict: str
    reviewer_id: str
    corrected_text: str | None = None
    rationale: str | None = None
    judge_reasoning_quality: int | None = None


def create_app(
    cases: list[ReviewCase],
    journal: JudgmentJournal,
    static_dir: str | Path | None = None,
    shared_secret: str | None = None,
):
    """FastAPI app exposing the review API and the companion UI's static
    bundle at /. A shared-secret header is the only gate when configured."""
    app = FastAPI(title="sudval review service")
    by_case = {case.case_id: case for case in cases}

    def check_secret(request: Request) -> None:
        if shared_secret and request.headers.get("x-review-token") != shared_secret:
            raise HTTPException(status_code=401, detail="missing or bad review token")

    def public_case(case: ReviewCase, judged: set[SubstanceCategory]) -> dict:
        data = case.to_json_dict()
        # Blind review: the judge's verdicts stay hidden until submission.
        del data["judge_verdicts"]
        data["judged_categories"] = sorted(c.value for c in judged)
        return data

    @app.get("/api/review/next")
    def next_case(request: Request, reviewer: str):
        check_secret(request)
        judged_by_reviewer: dict[str, set[SubstanceCategory]] = {}
        for entry in journal.all_entries():
            if entry.reviewer_id == reviewer:
                judged_by_reviewer.setdefault(entry.case_id, set()).add(entry.category)
        for case in cases:
            judged = judged_by_reviewer.get(case.case_id, set())
            if len(judged) < len(CATEGORIES):
                return JSONResponse(public_case(case, judged))
        return JSONResponse({"done": True, "case_id": None})

    @app.post("/api/review/{case_id}")
    def submit(request: Request, case_id: str, body: JudgmentBody):
        check_secret(request)
        case = by_case.get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id}")
        try:
            category = SubstanceCategory(body.category)
            verdict = VerdictLabel(body.verdict)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        stored = journal.append(
            ReviewJudgment(
                case_id=case_id,
                category=category,
                verdict=verdict,
                reviewer_id=body.reviewer_id,
                corrected_text=body.corrected_text,
                rationale=body.rationale,
                judge_reasoning_quality=body.judge_reasoning_quality,
            )
        )
        judge_verdict = case.judge_verdicts.get(category)
        return {
            "stored": stored.to_json_dict(),
            # The reveal: judge verdict and reasoning, for the quality rating.
            "judge_verdict": judge_verdict.to_json_dict() if judge_verdict else None,
        }

    @app.get("/api/review/progress")
    def progress(request: Request):
        check_secret(request)
        latest = journal.latest()
        judged_cases = {case_id for case_id, _ in latest}
        complete = sum(
            1
            for case in cases
            if all((case.case_id, category) in latest for category in CATEGORIES)
        )
        return {
            "total_cases": len(cases),
            "cases_started": len(judged_cases & set(by_case)),
            "cases_complete": complete,
            "judgments": len(journal.all_entries()),
        }

    @app.get("/api/agreement")
    def agreement(request: Request):
        check_secret(request)
        try:
            report = agreement_report(journal.latest(), cases)
        except UndefinedMetricError:
            return {"pairs": 0, "status": "no judgments yet"}
        return report.to_json_dict()

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index():
            return (
                "<html><body><h1>sudval review service</h1>"
                "<p>UI bundle not built; the JSON API under /api is live.</p>"
                "</body></html>"
            )

    return app
