"""Command-line interface.

Subcommands mirror the pipeline stages plus ingest, calibrate, review
serve/sample, agreement, and report. Exit codes: 0 success, 2 configuration
error, 3 stage failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline as pipeline_mod
from . import review as review_mod
from .calibration import run_calibration
from .corpus import load_annotated, load_corpus
from .errors import ConfigError, StageError, SudvalError
from .llm_gateway import PromptStrategy, Reasoning
from .pipeline import PipelineConfig, load_config, run_pipeline


@click.group()
@click.option("--verbose", is_flag=True, help="Enable info-level logging.")
def cli(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)


@cli.command()
@click.option("--notes", required=True, type=click.Path(exists=True))
@click.option("--codes", type=click.Path(exists=True))
@click.option("--outcomes", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Write the ingestion summary JSON here.")
def ingest(notes, codes, outcomes, out):
    """Validate corpus files and report record/malformed counts."""
    corpus = load_corpus(notes, codes, outcomes)
    summary = {
        "notes": len(corpus.notes),
        "codes": len(corpus.codes),
        "outcomes": len(corpus.outcomes),
        "patients": len(corpus.patient_ids()),
        "encounters": len(corpus.notes_by_encounter),
        "malformed": corpus.malformed_counts,
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    click.echo(text)


def _parse_strategies(spec: str) -> list[PromptStrategy]:
    # "direct:0,direct:1,direct:2,chain_of_thought:0"
    strategies = []
    for part in spec.split(","):
        reasoning, _, shots = part.strip().partition(":")
        strategies.append(
            PromptStrategy(n_shots=int(shots or 0), reasoning=Reasoning(reasoning))
        )
    return strategies


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--annotated", required=True, type=click.Path(exists=True))
@click.option(
    "--strategies",
    default="direct:0,direct:1,direct:2,chain_of_thought:0",
    show_default=True,
)
@click.option("--out", required=True, type=click.Path())
def calibrate(config_path, annotated, strategies, out):
    """Run prompt calibration over the annotated set and select a strategy."""
    config = load_config(config_path)
    notes, malformed = load_annotated(annotated)
    gateway = pipeline_mod.build_gateway(config)
    report = run_calibration(
        notes,
        _parse_strategies(strategies),
        gateway,
        checkpoint_dir=Path(out).parent,
    )
    data = report.to_json_dict()
    data["malformed_annotated_lines"] = malformed
    Path(out).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", "utf-8")
    click.echo(
        f"selected strategy: {report.selected.reasoning.value} "
        f"n_shots={report.selected.n_shots}"
    )


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run(config_path):
    """Run every pipeline stage in order, resuming past completed stages."""
    config = load_config(config_path)
    run_dir = run_pipeline(config)
    click.echo(f"run complete: {run_dir}")


def _stage_command(name: str, help_text: str):
    @cli.command(name=name, help=help_text)
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True))
    def _command(config_path):
        config = load_config(config_path)
        _run_single_stage(config, name if name != "filter" else "filter")

    return _command


def _run_single_stage(config: PipelineConfig, stage: str) -> None:
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = pipeline_mod.Manifest(run_dir, pipeline_mod.config_hash(config))
    corpus = load_corpus(config.notes_path, config.codes_path, config.outcomes_path)
    context = {"corpus": corpus}
    try:
        counts = pipeline_mod._STAGE_RUNNERS[stage](config, run_dir, context)
    except SudvalError as exc:
        manifest.mark(stage, "failed")
        raise StageError(stage, str(exc)) from exc
    manifest.mark(stage, "done", counts)
    click.echo(f"stage {stage} done: {json.dumps(counts, sort_keys=True)}")


_stage_command("extract", "Run LLM extraction over the corpus.")
_stage_command("filter", "Apply rule-based filtering to raw extractions.")
_stage_command("ground", "Score semantic grounding and apply the threshold.")
_stage_command("concord", "Compare encounter-level extraction vs code positivity.")
_stage_command("adjudicate", "Send triggered cases to the judge model.")
_stage_command("agreement", "Compute SME vs judge agreement from judgments.")
_stage_command("predict", "Evaluate predictive validity across cohorts.")


@cli.group()
def review():
    """SME review sampling and the annotation service."""


@review.command("sample")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def review_sample(config_path):
    config = load_config(config_path)
    _run_single_stage(config, "sample_review")


@review.command("serve")
@click.option("--sample", "sample_path", required=True, type=click.Path(exists=True))
@click.option("--journal", "journal_path", required=True, type=click.Path())
@click.option("--port", default=8800, show_default=True)
@click.option("--static-dir", type=click.Path(), default=None,
              help="UI bundle directory (defaults to frontend/dist when present).")
@click.option("--secret", default=None, help="Shared-secret header value (X-Review-Token).")
def review_serve(sample_path, journal_path, port, static_dir, secret):
    """Serve the review API and UI for a sampled case file."""
    import uvicorn

    cases = review_mod.read_cases(sample_path)
    journal = review_mod.JudgmentJournal(journal_path)
    if static_dir is None:
        default_dir = Path("frontend") / "dist"
        static_dir = str(default_dir) if default_dir.is_dir() else None
    app = review_mod.create_app(
        cases, journal, static_dir=static_dir, shared_secret=secret
    )
    uvicorn.run(app, host="127.0.0.1", port=port)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Also write the accounting JSON here.")
def report(config_path, out):
    """Emit the per-category stage-accounting table."""
    config = load_config(config_path)
    data = pipeline_mod.accounting_report(config.run_dir, config)
    text = json.dumps(data, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    click.echo(text)


def main() -> int:
    try:
        cli.main(standalone_mode=False)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except StageError as exc:
        click.echo(f"stage failure: {exc}", err=True)
        return 3
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        return 130
    except SudvalError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
