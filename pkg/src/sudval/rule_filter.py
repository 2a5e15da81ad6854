"""Post-extraction rule-based plausibility filtering.

Configurable inclusion/exclusion phrase patterns applied to the concise
extraction spans only, never to full notes. An extraction passes iff at
least one inclusion pattern matches and no exclusion pattern matches;
exclusion wins when both match.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import PatternCompileError

_DATA_PACKAGE = "sudval.data"


@dataclass(frozen=True)
class PhraseRuleSet:
    inclusion: tuple[str, ...]
    exclusion: tuple[str, ...]
    case_insensitive: bool = True
    # Optional anchoring for the very broad substring patterns ("ud\s*",
    # "do\s*"); off by default to apply the shipped patterns verbatim.
    word_boundary: bool = False


class RuleOutcome(str, Enum):
    PASS = "pass"
    FLAGGED = "flagged"


@dataclass
class RuleDecision:
    outcome: RuleOutcome
    matched_inclusion: str | None
    matched_exclusions: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CompiledRules:
    """Immutable, shareable compiled pattern lists (pattern string, regex)."""

    inclusion: tuple[tuple[str, re.Pattern], ...]
    exclusion: tuple[tuple[str, re.Pattern], ...]


def compile_rules(ruleset: PhraseRuleSet) -> CompiledRules:
    """Compile every pattern; an invalid pattern raises naming it."""
    flags = re.IGNORECASE if ruleset.case_insensitive else 0

    def compile_all(patterns: tuple[str, ...]) -> tuple[tuple[str, re.Pattern], ...]:
        compiled = []
        for pattern in patterns:
            source = rf"\b(?:{pattern})\b" if ruleset.word_boundary else pattern
            try:
                compiled.append((pattern, re.compile(source, flags)))
            except re.error as exc:
                raise PatternCompileError(pattern, str(exc)) from exc
        return tuple(compiled)

    return CompiledRules(
        inclusion=compile_all(ruleset.inclusion),
        exclusion=compile_all(ruleset.exclusion),
    )


def apply_rules(extraction_text: str, rules: CompiledRules) -> RuleDecision:
    """Pass iff >=1 inclusion matches and 0 exclusions match.

    All matched exclusion patterns are recorded for audit. Callers must not
    route llm_negative records here.
    """
    if not extraction_text:
        raise ValueError("apply_rules requires a non-empty extraction text")
    matched_inclusion = None
    for pattern, regex in rules.inclusion:
        if regex.search(extraction_text):
            matched_inclusion = pattern
            break
    matched_exclusions = [
        pattern for pattern, regex in rules.exclusion if regex.search(extraction_text)
    ]
    if matched_inclusion is not None and not matched_exclusions:
        outcome = RuleOutcome.PASS
    else:
        outcome = RuleOutcome.FLAGGED
    return RuleDecision(
        outcome=outcome,
        matched_inclusion=matched_inclusion,
        matched_exclusions=matched_exclusions,
    )


def load_lexicon(path: str | Path | None = None) -> tuple[str, ...]:
    """Read the substance lexicon: one term per line, '#' comments skipped."""
    if path is None:
        text = resources.files(_DATA_PACKAGE).joinpath("substance_lexicon.txt").read_text(
            encoding="utf-8"
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    terms = []
    for line in text.splitlines():
        term = line.strip()
        if term and not term.startswith("#"):
            terms.append(term)
    return tuple(terms)


def load_ruleset(
    path: str | Path | None = None,
    lexicon_path: str | Path | None = None,
    word_boundary: bool = False,
) -> PhraseRuleSet:
    """Load a ruleset JSON file, appending the substance lexicon (escaped)
    to the inclusion list. With no path, the shipped default set is used.
    """
    if path is None:
        raw = resources.files(_DATA_PACKAGE).joinpath("rules.json").read_text(
            encoding="utf-8"
        )
    else:
        raw = Path(path).read_text(encoding="utf-8")
    data = json.loads(raw)
    inclusion = list(data["inclusion"])
    inclusion.extend(re.escape(term) for term in load_lexicon(lexicon_path))
    return PhraseRuleSet(
        inclusion=tuple(inclusion),
        exclusion=tuple(data["exclusion"]),
        case_insensitive=bool(data.get("case_insensitive", True)),
        word_boundary=word_boundary,
    )


def default_rules() -> CompiledRules:
    return compile_rules(load_ruleset())
