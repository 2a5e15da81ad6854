"""Stage orchestration.

Runs the stages in order (extract, filter, ground, concord, adjudicate,
sample_review, agreement, predict), each reading its predecessor's JSON
Lines artifact and writing its own. A manifest records stage versions, the
config hash, and counts; completed stages are skipped on rerun, so an
interrupted run resumes from the last completed artifact. Artifacts carry no
wall-clock state: identical config implies byte-identical artifacts under
deterministic providers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import adjudication, review
from .corpus import (
    CATEGORIES,
    Corpus,
    DEFAULT_PREFIX_MAP,
    ExtractionRecord,
    ExtractionStatus,
    SubstanceCategory,
    code_positivity,
    encounter_positivity,
    load_annotated,
    load_corpus,
    read_extractions,
    write_extractions,
)
from .errors import ConfigError, SchemaError, StageError, SudvalError
from .grounding import (
    HashingEmbeddingProvider,
    HttpEmbeddingProvider,
    grounding_score,
)
from .llm_gateway import (
    Gateway,
    HttpChatProvider,
    PromptStrategy,
    Reasoning,
    build_extraction_prompt,
    parse_extraction_response,
    select_examples,
)
from .providers import (
    NullExtractorProvider,
    ScriptedExtractorProvider,
    ScriptedJudgeProvider,
)
from .rule_filter import apply_rules, compile_rules, load_ruleset
from .validity import (
    CohortKind,
    DEFAULT_LAMBDA_GRID,
    FEATURE_SETS,
    build_cohorts,
    evaluate_predictors,
)

logger = logging.getLogger("sudval.pipeline")

STAGES = (
    "extract",
    "filter",
    "ground",
    "concord",
    "adjudicate",
    "sample_review",
    "agreement",
    "predict",
)

STAGE_VERSIONS = {stage: 1 for stage in STAGES}

DEFAULT_SWEEP = (0.50, 0.55, 0.60, 0.65, 0.70)

_ENV_OVERRIDES = {
    "SUDVAL_EXTRACTOR_ENDPOINT": ("extractor", "endpoint"),
    "SUDVAL_EXTRACTOR_API_KEY": ("extractor", "api_key"),
    "SUDVAL_JUDGE_ENDPOINT": ("judge", "endpoint"),
    "SUDVAL_JUDGE_API_KEY": ("judge", "api_key"),
    "SUDVAL_EMBEDDINGS_ENDPOINT": ("embeddings", "endpoint"),
    "SUDVAL_EMBEDDINGS_API_KEY": ("embeddings", "api_key"),
}


@dataclass
class PipelineConfig:
    raw: dict

    notes_path: Path = field(init=False)
    codes_path: Path = field(init=False)
    run_dir: Path = field(init=False)

    def __post_init__(self):
        paths = self.raw.get("paths", {})
        for key in ("notes", "codes", "run_dir"):
            if key not in paths:
                raise ConfigError(f"config paths.{key} is required")
        self.notes_path = Path(paths["notes"])
        self.codes_path = Path(paths["codes"])
        self.run_dir = Path(paths["run_dir"])
        for name, path in (("notes", self.notes_path), ("codes", self.codes_path)):
            if not path.exists():
                raise ConfigError(f"paths.{name} does not exist: {path}")
        for optional in ("outcomes", "annotated", "rules", "lexicon"):
            value = paths.get(optional)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"paths.{optional} does not exist: {value}")
        threshold = self.grounding_threshold
        for value in [threshold, *self.grounding_sweep]:
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"grounding threshold {value} outside [-1, 1]")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1: {self.split_ratios}")
        self.strategy  # validates n_shots

    @property
    def outcomes_path(self) -> Path | None:
        value = self.raw.get("paths", {}).get("outcomes")
        return Path(value) if value else None

    @property
    def annotated_path(self) -> Path | None:
        value = self.raw.get("paths", {}).get("annotated")
        return Path(value) if value else None

    @property
    def rules_path(self) -> Path | None:
        value = self.raw.get("paths", {}).get("rules")
        return Path(value) if value else None

    @property
    def lexicon_path(self) -> Path | None:
        value = self.raw.get("paths", {}).get("lexicon")
        return Path(value) if value else None

    @property
    def strategy(self) -> PromptStrategy:
        spec = self.raw.get("strategy", {})
        return PromptStrategy(
            n_shots=int(spec.get("n_shots", 0)),
            reasoning=Reasoning(spec.get("reasoning", "chain_of_thought")),
        )

    @property
    def grounding_threshold(self) -> float:
        return float(self.raw.get("grounding", {}).get("threshold", 0.65))

    @property
    def grounding_sweep(self) -> list[float]:
        return [
            float(t)
            for t in self.raw.get("grounding", {}).get("sweep", list(DEFAULT_SWEEP))
        ]

    @property
    def grounding_stride(self) -> int:
        return int(self.raw.get("grounding", {}).get("stride", 1))

    @property
    def grounding_batch_size(self) -> int:
        return int(self.raw.get("grounding", {}).get("batch_size", 256))

    @property
    def judge_context_chars(self) -> int | None:
        value = self.raw.get("judge_context_chars")
        return int(value) if value else None

    @property
    def review_sample_size(self) -> int:
        return int(self.raw.get("review", {}).get("sample_size", 100))

    @property
    def review_seed(self) -> int:
        return int(self.raw.get("review", {}).get("seed", 13))

    @property
    def scripted_reviewer(self) -> str | None:
        return self.raw.get("review", {}).get("scripted_reviewer")

    @property
    def judgments_path(self) -> Path | None:
        value = self.raw.get("review", {}).get("judgments_path")
        return Path(value) if value else None

    @property
    def target_category(self) -> SubstanceCategory:
        return SubstanceCategory(
            self.raw.get("predict", {}).get("target_category", "alcohol")
        )

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        ratios = self.raw.get("predict", {}).get("split", [0.70, 0.10, 0.20])
        return tuple(float(r) for r in ratios)

    @property
    def predict_seed(self) -> int:
        return int(self.raw.get("predict", {}).get("seed", 7))

    @property
    def lambda_grid(self) -> list[float]:
        return [
            float(v)
            for v in self.raw.get("predict", {}).get(
                "lambda_grid", list(DEFAULT_LAMBDA_GRID)
            )
        ]

    @property
    def feature_sets(self) -> tuple[str, ...]:
        return tuple(
            self.raw.get("predict", {}).get("feature_sets", list(FEATURE_SETS))
        )

    @property
    def predict_cohorts(self) -> list[CohortKind]:
        kinds = self.raw.get("predict", {}).get(
            "cohorts", ["full", "concordant", "narrative_only"]
        )
        return [CohortKind(kind) for kind in kinds]


def load_config(path: str | Path, env: dict | None = None) -> PipelineConfig:
    """Read the JSON config file; environment variables override
    endpoint/key fields."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    env = dict(os.environ if env is None else env)
    for variable, (section, key) in _ENV_OVERRIDES.items():
        if env.get(variable):
            raw.setdefault(section, {})[key] = env[variable]
    return PipelineConfig(raw=raw)


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.raw, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _dump_json(data, path: Path) -> None:
    path.write_text(
        json.dumps(data, sort_keys=True, ensure_ascii=False, indent=1) + "\n",
        encoding="utf-8",
    )


def _chat_provider(spec: dict, role: str):
    kind = spec.get("kind", "http")
    if kind == "http":
        if not spec.get("endpoint"):
            raise ConfigError(f"{role} provider requires an endpoint")
        return HttpChatProvider(
            endpoint=spec["endpoint"],
            api_key=spec.get("api_key"),
            max_retries=int(spec.get("max_retries", 3)),
            backoff_base=float(spec.get("backoff_base", 0.25)),
        )
    if kind == "scripted_extractor":
        patterns = {
            SubstanceCategory(category): list(pattern_list)
            for category, pattern_list in spec.get("patterns", {}).items()
        }
        hallucinations = [
            (entry["marker"], SubstanceCategory(entry["category"]), entry["text"])
            for entry in spec.get("hallucinations", [])
        ]
        return ScriptedExtractorProvider(patterns, hallucinations)
    if kind == "null_extractor":
        return NullExtractorProvider()
    if kind == "scripted_judge":
        return ScriptedJudgeProvider(
            verdict=spec.get("verdict", "correct"), correction=spec.get("correction")
        )
    raise ConfigError(f"unknown {role} provider kind {kind!r}")


def build_gateway(config: PipelineConfig) -> Gateway:
    return Gateway(
        {
            "extractor": _chat_provider(config.raw.get("extractor", {}), "extractor"),
            "judge": _chat_provider(config.raw.get("judge", {}), "judge"),
        }
    )


def build_embedding_provider(config: PipelineConfig):
    spec = config.raw.get("embeddings", {})
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbeddingProvider(
            dim=int(spec.get("dim", 64)), seed=int(spec.get("seed", 0))
        )
    if kind == "http":
        if not spec.get("endpoint"):
            raise ConfigError("embeddings provider requires an endpoint")
        return HttpEmbeddingProvider(
            endpoint=spec["endpoint"],
            model=spec.get("model", "embedding"),
            api_key=spec.get("api_key"),
        )
    raise ConfigError(f"unknown embeddings provider kind {kind!r}")


class Manifest:
    def __init__(self, run_dir: Path, expected_hash: str):
        self.path = run_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
            if self.data.get("config_hash") != expected_hash:
                raise ConfigError(
                    "run directory was produced by a different config "
                    f"(hash {self.data.get('config_hash')!r} != {expected_hash!r})"
                )
        else:
            self.data = {"config_hash": expected_hash, "stages": {}}

    def is_done(self, stage: str) -> bool:
        return self.data["stages"].get(stage, {}).get("status") == "done"

    def mark(self, stage: str, status: str, counts: dict | None = None) -> None:
        self.data["stages"][stage] = {
            "status": status,
            "version": STAGE_VERSIONS[stage],
            "counts": counts or {},
        }
        self.path.write_text(
            json.dumps(self.data, sort_keys=True, ensure_ascii=False, indent=1) + "\n",
            encoding="utf-8",
        )


def run_pipeline(config: PipelineConfig) -> Path:
    """Run all stages, skipping the ones the manifest already marks done.

    A stage failure preserves the partial run, marks the stage failed in the
    manifest, and raises StageError.
    """
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        lock_fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("run", f"run directory is locked by another run: {lock}")
    os.close(lock_fd)
    try:
        manifest = Manifest(run_dir, config_hash(config))
        corpus = load_corpus(
            config.notes_path, config.codes_path, config.outcomes_path
        )
        context = {"corpus": corpus}
        for stage in STAGES:
            if manifest.is_done(stage):
                logger.info("stage %s already done, skipping", stage)
                continue
            runner = _STAGE_RUNNERS[stage]
            try:
                counts = runner(config, run_dir, context)
            except SudvalError as exc:
                manifest.mark(stage, "failed")
                raise StageError(stage, str(exc)) from exc
            manifest.mark(stage, "done", counts)
        return run_dir
    finally:
        lock.unlink(missing_ok=True)


def _load_examples(config: PipelineConfig):
    if config.strategy.n_shots == 0:
        return []
    if config.annotated_path is None:
        raise ConfigError("strategy.n_shots > 0 requires paths.annotated")
    annotated, _ = load_annotated(config.annotated_path)
    return select_examples(annotated, config.strategy.n_shots)


def _stage_extract(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    corpus: Corpus = context["corpus"]
    gateway = build_gateway(config)
    examples = _load_examples(config)
    records: list[ExtractionRecord] = []
    schema_errors = 0
    positives = 0
    for note_id in sorted(corpus.notes):
        note = corpus.notes[note_id]
        request = build_extraction_prompt(note, config.strategy, examples)
        response = gateway.chat_complete(request, role="extractor", note_id=note_id)
        try:
            parsed = parse_extraction_response(response.text)
            extractions = parsed.extractions
        except SchemaError:
            schema_errors += 1
            extractions = {category: None for category in CATEGORIES}
        for category in CATEGORIES:
            text = extractions[category]
            if text:
                records.append(
                    ExtractionRecord(
                        note_id, category, text, ExtractionStatus.RAW_POSITIVE
                    )
                )
                positives += 1
            else:
                records.append(
                    ExtractionRecord(
                        note_id, category, None, ExtractionStatus.LLM_NEGATIVE
                    )
                )
    write_extractions(records, run_dir / "extractions_raw.jsonl")
    return {
        "notes": len(corpus.notes),
        "records": len(records),
        "llm_positive": positives,
        "schema_errors": schema_errors,
        "malformed_input_lines": corpus.malformed_counts,
    }


def _stage_filter(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    records = read_extractions(run_dir / "extractions_raw.jsonl")
    rules = compile_rules(load_ruleset(config.rules_path, config.lexicon_path))
    flagged = 0
    for record in records:
        if record.status is not ExtractionStatus.RAW_POSITIVE:
            continue
        decision = apply_rules(record.text, rules)
        if decision.outcome.value == "flagged":
            record.status = ExtractionStatus.RULE_FLAGGED
            if decision.matched_exclusions:
                record.flag_reason = "exclusion:" + ",".join(
                    decision.matched_exclusions
                )
            else:
                record.flag_reason = "no_inclusion_match"
            flagged += 1
    write_extractions(records, run_dir / "extractions_filtered.jsonl")
    return {"rule_flagged": flagged}


def _stage_ground(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    corpus: Corpus = context["corpus"]
    records = read_extractions(run_dir / "extractions_filtered.jsonl")
    provider = build_embedding_provider(config)
    threshold = config.grounding_threshold
    sweep = config.grounding_sweep
    sweep_counts = {
        category.value: {f"{t:.2f}": 0 for t in sweep} for category in CATEGORIES
    }
    results_lines = []
    flagged = 0
    for record in records:
        if record.status is not ExtractionStatus.RAW_POSITIVE:
            continue
        note = corpus.notes[record.note_id]
        result = grounding_score(
            record.text,
            note.text,
            provider,
            stride=config.grounding_stride,
            batch_size=config.grounding_batch_size,
            note_id=record.note_id,
            category=record.category,
        )
        for t in sweep:
            if result.score < t:
                sweep_counts[record.category.value][f"{t:.2f}"] += 1
        if result.score < threshold:
            record.status = ExtractionStatus.GROUNDING_FLAGGED
            record.flag_reason = f"grounding_score<{threshold}"
            flagged += 1
        else:
            record.status = ExtractionStatus.RETAINED
        record.grounding_score = result.score
        results_lines.append(
            {
                "note_id": record.note_id,
                "category": record.category.value,
                "score": result.score,
                "best_window": list(result.best_window),
                "threshold_used": threshold,
            }
        )
    write_extractions(records, run_dir / "extractions_grounded.jsonl")
    with (run_dir / "grounding_results.jsonl").open("w", encoding="utf-8") as handle:
        for line in results_lines:
            handle.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
    _dump_json(
        {"threshold": threshold, "sweep": sweep, "counts": sweep_counts},
        run_dir / "grounding_sweep.json",
    )
    _dump_json(accounting_report(run_dir, config), run_dir / "accounting.json")
    return {"grounding_flagged": flagged, "scored": len(results_lines)}


def _stage_concord(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    corpus: Corpus = context["corpus"]
    records = read_extractions(run_dir / "extractions_grounded.jsonl")
    llm_flags = encounter_positivity(records, corpus)
    code_flags = code_positivity(corpus.codes)
    context["code_flags"] = code_flags
    encounters = corpus.encounter_ids()
    per_category = {}
    for category in CATEGORIES:
        agree = sum(
            1
            for encounter_id in encounters
            if llm_flags[(encounter_id, category)]
            == code_flags.get(encounter_id, category)
        )
        per_category[category.display_name] = {
            "agreement_rate": agree / len(encounters) if encounters else 0.0,
            "encounters": len(encounters),
        }
    report = {
        "per_category": per_category,
        "unmapped_codes": code_flags.unmapped_count,
    }
    _dump_json(report, run_dir / "concordance.json")
    return {"encounters": len(encounters), "unmapped_codes": code_flags.unmapped_count}


def _stage_adjudicate(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    corpus: Corpus = context["corpus"]
    records = read_extractions(run_dir / "extractions_grounded.jsonl")
    code_flags = context.get("code_flags") or code_positivity(corpus.codes)
    gateway = build_gateway(config)
    best_windows = _read_best_windows(run_dir)
    cases = adjudication.compute_triggers(records, code_flags, corpus)
    adjudication.write_triggers(cases, run_dir / "triggers.jsonl")
    verdicts = []
    failures = []
    evidence_violations = 0
    for case in cases:
        note = corpus.notes[case.note_id]
        request = adjudication.build_judge_prompt(
            case,
            note,
            best_window=best_windows.get((case.note_id, case.category)),
            max_note_chars=config.judge_context_chars,
        )
        response = gateway.chat_complete(request, role="judge", note_id=case.note_id)
        try:
            verdict, violation = adjudication.parse_judge_verdict(
                response.text, note, case
            )
        except SchemaError as exc:
            failures.append(
                {
                    "note_id": case.note_id,
                    "category": case.category.value,
                    "raw_text": exc.raw_text,
                }
            )
            continue
        evidence_violations += int(violation)
        verdicts.append(verdict)
    adjudication.write_verdicts(verdicts, run_dir / "verdicts.jsonl")
    with (run_dir / "judge_failures.jsonl").open("w", encoding="utf-8") as handle:
        for failure in failures:
            handle.write(json.dumps(failure, sort_keys=True, ensure_ascii=False) + "\n")
    evaluation = adjudication.evaluate_against_judge(cases, verdicts)
    report = evaluation.to_json_dict()
    report["evidence_violations"] = evidence_violations
    _dump_json(report, run_dir / "judge_eval.json")
    return {
        "triggers": len(cases),
        "adjudicated": evaluation.adjudicated,
        "unadjudicated": evaluation.unadjudicated,
        "evidence_violations": evidence_violations,
    }


def _read_best_windows(run_dir: Path) -> dict:
    best_windows = {}
    path = run_dir / "grounding_results.jsonl"
    if path.exists():
        with path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    data = json.loads(line)
                    best_windows[
                        (data["note_id"], SubstanceCategory(data["category"]))
                    ] = tuple(data["best_window"])
    return best_windows


def _stage_sample_review(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    corpus: Corpus = context["corpus"]
    records = read_extractions(run_dir / "extractions_grounded.jsonl")
    cases = adjudication.read_triggers(run_dir / "triggers.jsonl")
    verdicts = adjudication.read_verdicts(run_dir / "verdicts.jsonl")
    population = len({case.note_id for case in cases})
    n = min(config.review_sample_size, population)
    extractions_by_note: dict[str, dict[SubstanceCategory, str | None]] = {}
    for record in records:
        if record.status is ExtractionStatus.RETAINED:
            extractions_by_note.setdefault(record.note_id, {})[record.category] = (
                record.text
            )
    sample = review.sample_review_cases(
        cases,
        n,
        config.review_seed,
        corpus,
        extractions_by_note,
        verdicts,
        best_windows=_read_best_windows(run_dir),
    )
    review.write_cases(sample, run_dir / "review_sample.jsonl")
    return {"population": population, "sampled": n}


def _stage_agreement(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    cases = review.read_cases(run_dir / "review_sample.jsonl")
    if config.scripted_reviewer == "agree_with_judge":
        journal_path = run_dir / "scripted_judgments.jsonl"
        journal_path.unlink(missing_ok=True)
        journal = review.JudgmentJournal(journal_path)
        for case in cases:
            for category in CATEGORIES:
                verdict = case.judge_verdicts.get(category)
                journal.append(
                    review.ReviewJudgment(
                        case_id=case.case_id,
                        category=category,
                        verdict=(
                            verdict.verdict
                            if verdict is not None
                            else adjudication.VerdictLabel.CORRECT
                        ),
                        reviewer_id="scripted",
                        submitted_at="1970-01-01T00:00:00+00:00",
                    )
                )
    elif config.judgments_path is not None and config.judgments_path.exists():
        journal = review.JudgmentJournal(config.judgments_path)
    else:
        _dump_json({"pairs": 0, "status": "pending human review"}, run_dir / "agreement.json")
        return {"pairs": 0}
    try:
        report = review.agreement_report(journal.latest(), cases)
    except SudvalError:
        _dump_json({"pairs": 0, "status": "no paired judgments"}, run_dir / "agreement.json")
        return {"pairs": 0}
    _dump_json(report.to_json_dict(), run_dir / "agreement.json")
    return {"pairs": report.overall.table.n, "unpaired": report.unpaired}


def _stage_predict(config: PipelineConfig, run_dir: Path, context: dict) -> dict:
    corpus: Corpus = context["corpus"]
    records = read_extractions(run_dir / "extractions_grounded.jsonl")
    full, concordant, narrative_only = build_cohorts(
        corpus, records, config.target_category
    )
    by_kind = {
        CohortKind.FULL: full,
        CohortKind.CONCORDANT: concordant,
        CohortKind.NARRATIVE_ONLY: narrative_only,
    }
    reports = {}
    for kind in config.predict_cohorts:
        report = evaluate_predictors(
            corpus,
            records,
            by_kind[kind],
            feature_sets=config.feature_sets,
            ratios=config.split_ratios,
            seed=config.predict_seed,
            lam_grid=config.lambda_grid,
        )
        reports[kind.value] = report.to_json_dict()
    _dump_json(reports, run_dir / "predict_report.json")
    return {
        kind.value: {"n_patients": len(by_kind[kind].patient_ids)}
        for kind in config.predict_cohorts
    }


_STAGE_RUNNERS = {
    "extract": _stage_extract,
    "filter": _stage_filter,
    "ground": _stage_ground,
    "concord": _stage_concord,
    "adjudicate": _stage_adjudicate,
    "sample_review": _stage_sample_review,
    "agreement": _stage_agreement,
    "predict": _stage_predict,
}


@dataclass
class StageCounts:
    """Per-category accounting row for the filter stages."""

    category: SubstanceCategory
    pre_filter_llm_positive: int
    rule_flagged: int
    grounding_flagged: dict[str, int]
    post_filter_retained: int

    def identity_holds(self, operating_threshold: float) -> bool:
        key = f"{operating_threshold:.2f}"
        return (
            self.pre_filter_llm_positive
            == self.rule_flagged
            + self.grounding_flagged.get(key, 0)
            + self.post_filter_retained
        )


def stage_counts_from_records(
    raw: list[ExtractionRecord],
    final: list[ExtractionRecord],
    sweep_counts: dict[str, dict[str, int]],
) -> list[StageCounts]:
    rows = []
    for category in CATEGORIES:
        pre = sum(
            1
            for record in raw
            if record.category is category
            and record.status is not ExtractionStatus.LLM_NEGATIVE
        )
        rule_flagged = sum(
            1
            for record in final
            if record.category is category
            and record.status is ExtractionStatus.RULE_FLAGGED
        )
        retained = sum(
            1
            for record in final
            if record.category is category
            and record.status is ExtractionStatus.RETAINED
        )
        rows.append(
            StageCounts(
                category=category,
                pre_filter_llm_positive=pre,
                rule_flagged=rule_flagged,
                grounding_flagged=dict(sweep_counts.get(category.value, {})),
                post_filter_retained=retained,
            )
        )
    return rows


def accounting_report(run_dir: str | Path, config: PipelineConfig) -> dict:
    """Per-category table in the standard column order plus the overall
    removed fraction at the operating threshold.

    The accounting identity (pre = rule + grounding@threshold + retained) is
    checked per category, exact integer equality.
    """
    run_dir = Path(run_dir)
    raw_path = run_dir / "extractions_raw.jsonl"
    final_path = run_dir / "extractions_grounded.jsonl"
    sweep_path = run_dir / "grounding_sweep.json"
    if not (raw_path.exists() and final_path.exists() and sweep_path.exists()):
        raise StageError("report", "filter stages incomplete: artifacts missing")
    raw = read_extractions(raw_path)
    final = read_extractions(final_path)
    sweep_data = json.loads(sweep_path.read_text(encoding="utf-8"))
    rows = stage_counts_from_records(raw, final, sweep_data["counts"])
    threshold = config.grounding_threshold
    key = f"{threshold:.2f}"
    total_pre = sum(row.pre_filter_llm_positive for row in rows)
    total_removed = sum(
        row.rule_flagged + row.grounding_flagged.get(key, 0) for row in rows
    )
    return {
        "operating_threshold": threshold,
        "columns": [
            "pre_filter_llm_positive",
            "rule_flagged",
            *[f"grounding_flagged@{t:.2f}" for t in sweep_data["sweep"]],
            "post_filter_retained",
        ],
        "per_category": {
            row.category.display_name: {
                "pre_filter_llm_positive": row.pre_filter_llm_positive,
                "rule_flagged": row.rule_flagged,
                "grounding_flagged": row.grounding_flagged,
                "post_filter_retained": row.post_filter_retained,
                "identity_holds": row.identity_holds(threshold),
            }
            for row in rows
        },
        "overall_removed_fraction": (
            total_removed / total_pre if total_pre else 0.0
        ),
    }
