"""Prompt-calibration harness.

Runs each prompting strategy over the annotated set, scores every (gold,
generated) pair with strict/relaxed metrics, macro-averages, and selects the
deployment strategy by relaxed F1 (ties: fewer shots, then direct before
chain-of-thought).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .corpus import CATEGORIES, AnnotatedNote
from .errors import SchemaError, SudvalError
from .llm_gateway import (
    Gateway,
    PromptStrategy,
    Reasoning,
    build_extraction_prompt,
    parse_extraction_response,
    select_examples,
)
from .metrics import MatchScore, macro_average, relaxed_score, strict_score

logger = logging.getLogger("sudval.calibration")


@dataclass
class CalibrationRow:
    reasoning: Reasoning
    n_shots: int
    precision_relaxed: float
    recall_relaxed: float
    f1_relaxed: float
    f1_strict: float
    instances: int = 0

    def to_json_dict(self) -> dict:
        return {
            "reasoning": self.reasoning.value,
            "n_shots": self.n_shots,
            "precision_relaxed": self.precision_relaxed,
            "recall_relaxed": self.recall_relaxed,
            "f1_relaxed": self.f1_relaxed,
            "f1_strict": self.f1_strict,
            "instances": self.instances,
        }


@dataclass
class CalibrationReport:
    rows: list[CalibrationRow]
    selected: PromptStrategy

    def to_json_dict(self) -> dict:
        return {
            "rows": [row.to_json_dict() for row in self.rows],
            "selected": {
                "n_shots": self.selected.n_shots,
                "reasoning": self.selected.reasoning.value,
            },
        }


_REASONING_ORDER = {Reasoning.DIRECT: 0, Reasoning.CHAIN_OF_THOUGHT: 1}


def select_strategy(rows: list[CalibrationRow]) -> PromptStrategy:
    """Argmax relaxed F1; ties broken by lower n_shots, then direct first.

    Stable under row reordering.
    """
    if not rows:
        raise ValueError("no calibration rows to select from")
    best = min(
        rows, key=lambda r: (-r.f1_relaxed, r.n_shots, _REASONING_ORDER[r.reasoning])
    )
    return PromptStrategy(n_shots=best.n_shots, reasoning=best.reasoning)


def score_pairs(
    gold: dict, generated: dict
) -> tuple[list[MatchScore], list[int]]:
    """Build the per-category scoring instances for one note.

    A (note, category) pair is scored iff gold has a label for it OR the
    model produced a non-empty extraction; hallucinated categories score as
    fp-only instances with f1 = 0.
    """
    relaxed, strict = [], []
    for category in CATEGORIES:
        gold_text = gold.get(category)
        generated_text = generated.get(category)
        if not gold_text and not generated_text:
            continue
        relaxed.append(relaxed_score(gold_text or "", generated_text or ""))
        strict.append(strict_score(gold_text or "", generated_text or ""))
    return relaxed, strict


def run_calibration(
    annotated: list[AnnotatedNote],
    strategies: list[PromptStrategy],
    gateway: Gateway,
    model: str = "extractor",
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 25,
    template_dir: str | Path | None = None,
) -> CalibrationReport:
    """Extract on every annotated note per strategy and report Table-2-style rows.

    Notes used as in-context examples for a strategy are excluded from that
    strategy's scoring pool. Extraction results checkpoint every
    ``checkpoint_every`` notes so an interrupted run resumes; a gateway
    failure propagates after flushing the checkpoint.
    """
    if not annotated:
        raise ValueError("annotated set is empty")
    rows = []
    for strategy in strategies:
        examples = select_examples(annotated, strategy.n_shots)
        example_ids = {example.note.note_id for example in examples}
        pool = [note for note in annotated if note.note.note_id not in example_ids]

        checkpoint_path = None
        completed: dict[str, dict] = {}
        if checkpoint_dir is not None:
            name = f"calibration_{strategy.reasoning.value}_{strategy.n_shots}.jsonl"
            checkpoint_path = Path(checkpoint_dir) / name
            completed = _load_checkpoint(checkpoint_path)

        pending: list[str] = []
        try:
            for annotated_note in pool:
                note_id = annotated_note.note.note_id
                if note_id in completed:
                    continue
                request = build_extraction_prompt(
                    annotated_note.note, strategy, examples, model=model,
                    template_dir=template_dir,
                )
                response = gateway.chat_complete(request, role="extractor", note_id=note_id)
                try:
                    parsed = parse_extraction_response(response.text)
                    generated = {
                        category.value: text
                        for category, text in parsed.extractions.items()
                    }
                except SchemaError:
                    logger.warning("unparseable extraction for note %s", note_id)
                    generated = {category.value: None for category in CATEGORIES}
                completed[note_id] = generated
                pending.append(note_id)
                if checkpoint_path is not None and len(pending) >= checkpoint_every:
                    _append_checkpoint(checkpoint_path, completed, pending)
                    pending = []
        except SudvalError:
            if checkpoint_path is not None and pending:
                _append_checkpoint(checkpoint_path, completed, pending)
            raise
        if checkpoint_path is not None and pending:
            _append_checkpoint(checkpoint_path, completed, pending)

        relaxed_scores: list[MatchScore] = []
        strict_scores: list[int] = []
        for annotated_note in pool:
            gold = {c.value: t for c, t in annotated_note.gold.items()}
            generated = completed[annotated_note.note.note_id]
            relaxed, strict = score_pairs(gold, generated)
            relaxed_scores.extend(relaxed)
            strict_scores.extend(strict)
        if relaxed_scores:
            macro = macro_average(relaxed_scores)
            f1_strict = sum(strict_scores) / len(strict_scores)
        else:
            macro = MatchScore(0.0, 0.0, 0.0, 0, 0, 0)
            f1_strict = 0.0
        rows.append(
            CalibrationRow(
                reasoning=strategy.reasoning,
                n_shots=strategy.n_shots,
                precision_relaxed=macro.precision,
                recall_relaxed=macro.recall,
                f1_relaxed=macro.f1,
                f1_strict=f1_strict,
                instances=len(relaxed_scores),
            )
        )
    return CalibrationReport(rows=rows, selected=select_strategy(rows))


def _load_checkpoint(path: Path) -> dict[str, dict]:
    completed: dict[str, dict] = {}
    if path.exists():
        with path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    record = json.loads(line)
                    completed[record["note_id"]] = record["extractions"]
    return completed


def _append_checkpoint(path: Path, completed: dict[str, dict], note_ids: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        for note_id in note_ids:
            handle.write(
                json.dumps(
                    {"note_id": note_id, "extractions": completed[note_id]},
                    ensure_ascii=False,
                )
                + "\n"
            )
