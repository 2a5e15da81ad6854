import json

import pytest
from fastapi.testclient import TestClient

from sudval.adjudication import JudgeVerdict, TriggerCase, VerdictLabel
from sudval.corpus import CATEGORIES, SubstanceCategory, load_corpus
from sudval.errors import UndefinedMetricError
from sudval.metrics import AgreementTable, gwet_ac1
from sudval.review import (
    JudgmentJournal,
    ReviewCase,
    ReviewJudgment,
    agreement_report,
    create_app,
    read_cases,
    sample_review_cases,
    write_cases,
)
from conftest import write_jsonl


def make_population(n_notes=40):
    """Corpus + triggers + verdicts for sampling tests."""
    rows = [
        {
            "note_id": f"n{i:03d}",
            "patient_id": f"p{i:03d}",
            "encounter_id": f"e{i:03d}",
            "timestamp": "2023-01-01",
            "text": f"Assessment: alcohol use disorder, severe. Note {i}.",
        }
        for i in range(n_notes)
    ]
    return rows


@pytest.fixture()
def population(tmp_path):
    rows = make_population()
    notes_path = write_jsonl(tmp_path / "notes.jsonl", rows)
    corpus = load_corpus(notes_path)
    triggers = [
        TriggerCase(
            note_id=row["note_id"],
            encounter_id=row["encounter_id"],
            category=SubstanceCategory.ALCOHOL,
            extraction_text="alcohol use disorder, severe",
        )
        for row in rows
    ]
    verdicts = [
        JudgeVerdict(
            note_id=row["note_id"],
            category=SubstanceCategory.ALCOHOL,
            verdict=VerdictLabel.CORRECT,
        )
        for row in rows
    ]
    extractions_by_note = {
        row["note_id"]: {SubstanceCategory.ALCOHOL: "alcohol use disorder, severe"}
        for row in rows
    }
    return corpus, triggers, verdicts, extractions_by_note


class TestSampling:
    def test_same_seed_identical(self, population):
        corpus, triggers, verdicts, extractions = population
        a = sample_review_cases(triggers, 10, 7, corpus, extractions, verdicts)
        b = sample_review_cases(triggers, 10, 7, corpus, extractions, verdicts)
        assert [c.case_id for c in a] == [c.case_id for c in b]

    def test_full_population_in_shuffle_order(self, population):
        corpus, triggers, verdicts, extractions = population
        sample = sample_review_cases(triggers, 40, 7, corpus, extractions, verdicts)
        assert len(sample) == 40
        assert {c.note_id for c in sample} == {t.note_id for t in triggers}

    def test_different_seeds_differ(self, population):
        corpus, triggers, verdicts, extractions = population
        a = sample_review_cases(triggers, 10, 1, corpus, extractions, verdicts)
        b = sample_review_cases(triggers, 10, 2, corpus, extractions, verdicts)
        assert [c.note_id for c in a] != [c.note_id for c in b]

    def test_sample_within_trigger_population(self, population):
        corpus, triggers, verdicts, extractions = population
        sample = sample_review_cases(triggers, 15, 3, corpus, extractions, verdicts)
        trigger_notes = {t.note_id for t in triggers}
        assert all(c.note_id in trigger_notes for c in sample)

    def test_n_too_large(self, population):
        corpus, triggers, verdicts, extractions = population
        with pytest.raises(ValueError):
            sample_review_cases(triggers, 41, 7, corpus, extractions, verdicts)

    def test_case_bundles_all_categories(self, population):
        corpus, triggers, verdicts, extractions = population
        case = sample_review_cases(triggers, 1, 7, corpus, extractions, verdicts)[0]
        assert set(case.extractions) == set(CATEGORIES)
        assert case.extractions[SubstanceCategory.ALCOHOL] is not None
        assert case.extractions[SubstanceCategory.OPIOID] is None

    def test_cases_round_trip(self, population, tmp_path):
        corpus, triggers, verdicts, extractions = population
        sample = sample_review_cases(triggers, 5, 7, corpus, extractions, verdicts)
        write_cases(sample, tmp_path / "cases.jsonl")
        again = read_cases(tmp_path / "cases.jsonl")
        assert [c.case_id for c in again] == [c.case_id for c in sample]
        assert again[0].extractions == sample[0].extractions


class TestJournal:
    def judgment(self, verdict=VerdictLabel.CORRECT, case_id="rc-1"):
        return ReviewJudgment(
            case_id=case_id,
            category=SubstanceCategory.ALCOHOL,
            verdict=verdict,
            reviewer_id="sme",
        )

    def test_first_judgment_version_one(self, tmp_path):
        journal = JudgmentJournal(tmp_path / "j.jsonl")
        stored = journal.append(self.judgment())
        assert stored.version == 1
        assert stored.submitted_at

    def test_resubmission_appends_version_two_and_keeps_history(self, tmp_path):
        journal = JudgmentJournal(tmp_path / "j.jsonl")
        journal.append(self.judgment(VerdictLabel.CORRECT))
        second = journal.append(self.judgment(VerdictLabel.INCORRECT))
        assert second.version == 2
        lines = (tmp_path / "j.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        latest = journal.latest()[("rc-1", SubstanceCategory.ALCOHOL)]
        assert latest.verdict is VerdictLabel.INCORRECT

    def test_journal_reloads_from_disk(self, tmp_path):
        path = tmp_path / "j.jsonl"
        JudgmentJournal(path).append(self.judgment())
        reloaded = JudgmentJournal(path)
        assert reloaded.append(self.judgment()).version == 2

    def test_quality_rating_bounds(self):
        with pytest.raises(Exception):
            ReviewJudgment(
                case_id="c",
                category=SubstanceCategory.ALCOHOL,
                verdict=VerdictLabel.CORRECT,
                reviewer_id="r",
                judge_reasoning_quality=9,
            )


def build_cases(n=10, judge_incorrect=()):
    cases = []
    for i in range(n):
        case_id = f"rc-n{i:03d}"
        verdict = (
            VerdictLabel.INCORRECT if i in judge_incorrect else VerdictLabel.CORRECT
        )
        cases.append(
            ReviewCase(
                case_id=case_id,
                note_id=f"n{i:03d}",
                note_text=f"note {i}",
                extractions={
                    c: ("aud" if c is SubstanceCategory.ALCOHOL else None)
                    for c in CATEGORIES
                },
                judge_verdicts={
                    c: (
                        JudgeVerdict(f"n{i:03d}", c, verdict)
                        if c is SubstanceCategory.ALCOHOL
                        else None
                    )
                    for c in CATEGORIES
                },
                best_windows={c: None for c in CATEGORIES},
            )
        )
    return cases


def judge_all(journal_or_dict, cases, sme_incorrect=()):
    judgments = {}
    for i, case in enumerate(cases):
        for category in CATEGORIES:
            verdict = VerdictLabel.CORRECT
            if category is SubstanceCategory.ALCOHOL and i in sme_incorrect:
                verdict = VerdictLabel.INCORRECT
            judgments[(case.case_id, category)] = ReviewJudgment(
                case_id=case.case_id,
                category=category,
                verdict=verdict,
                reviewer_id="sme",
            )
    return judgments


class TestAgreementReport:
    def test_perfect_concordance(self):
        cases = build_cases(10)
        report = agreement_report(judge_all(None, cases), cases)
        assert report.overall.percent == 1.0
        assert report.overall.ac1 == 1.0
        assert report.llm_positive_subset.percent == 1.0

    def test_skewed_fixture_matches_closed_form(self):
        # 100 alcohol pairs: judge incorrect on 0..4 (SME correct there: n01?),
        # constructed to land on the n11=90,n10=5,n01=3,n00=2 table.
        cases = build_cases(100, judge_incorrect=range(5))
        # SME incorrect on 5 pairs: overlap of 2 with judge-incorrect -> n00=2,
        # 3 SME-only -> n10=3... build explicitly instead:
        judgments = judge_all(None, cases, sme_incorrect=[0, 1, 5, 6, 7, 8, 9])
        # judge incorrect: cases 0-4; SME incorrect: 0,1 (both incorrect -> n00=2),
        # judge-only incorrect: 2,3,4 -> n10=3 (SME correct, judge incorrect),
        # SME-only incorrect: 5..9 -> n01=5 (SME incorrect, judge correct),
        # both correct: remaining 90 -> n11=90.
        report = agreement_report(judgments, cases)
        subset = report.llm_positive_subset
        assert subset.table == AgreementTable(n11=90, n10=3, n01=5, n00=2)
        assert subset.percent == pytest.approx(0.92)
        assert subset.ac1 == pytest.approx(
            gwet_ac1(AgreementTable(n11=90, n10=3, n01=5, n00=2)), abs=1e-12
        )
        assert subset.ac1 == pytest.approx(0.9098, abs=1e-4)

    def test_no_extraction_categories_pair_as_implicit_correct(self):
        cases = build_cases(3)
        report = agreement_report(judge_all(None, cases), cases)
        assert report.overall.table.n == 3 * len(CATEGORIES)
        assert report.llm_positive_subset.table.n == 3

    def test_latest_version_wins_and_noop_resubmission_stable(self, tmp_path):
        cases = build_cases(4)
        journal = JudgmentJournal(tmp_path / "j.jsonl")
        for case in cases:
            for category in CATEGORIES:
                journal.append(
                    ReviewJudgment(
                        case_id=case.case_id,
                        category=category,
                        verdict=VerdictLabel.CORRECT,
                        reviewer_id="sme",
                    )
                )
        before = agreement_report(journal.latest(), cases)
        journal.append(
            ReviewJudgment(
                case_id=cases[0].case_id,
                category=SubstanceCategory.ALCOHOL,
                verdict=VerdictLabel.CORRECT,
                reviewer_id="sme",
            )
        )
        after = agreement_report(journal.latest(), cases)
        assert before.overall.table == after.overall.table

    def test_no_pairs_errors(self):
        with pytest.raises(UndefinedMetricError):
            agreement_report({}, build_cases(1))


@pytest.fixture()
def client(tmp_path):
    cases = build_cases(2)
    journal = JudgmentJournal(tmp_path / "journal.jsonl")
    app = create_app(cases, journal)
    return TestClient(app), cases, journal


class TestHttpApi:
    def test_next_case_hides_judge_verdicts(self, client):
        test_client, cases, _ = client
        response = test_client.get("/api/review/next", params={"reviewer": "sme"})
        assert response.status_code == 200
        body = response.json()
        assert body["case_id"] == cases[0].case_id
        assert "judge_verdicts" not in body
        assert body["judged_categories"] == []

    def test_submit_reveals_judge_verdict_and_versions(self, client):
        test_client, cases, _ = client
        payload = {
            "category": "alcohol",
            "verdict": "correct",
            "reviewer_id": "sme",
        }
        response = test_client.post(f"/api/review/{cases[0].case_id}", json=payload)
        assert response.status_code == 200
        body = response.json()
        assert body["stored"]["version"] == 1
        assert body["judge_verdict"]["verdict"] == "correct"
        again = test_client.post(f"/api/review/{cases[0].case_id}", json=payload)
        assert again.json()["stored"]["version"] == 2

    def test_submit_unknown_case_404(self, client):
        test_client, _, _ = client
        response = test_client.post(
            "/api/review/rc-ghost",
            json={"category": "alcohol", "verdict": "correct", "reviewer_id": "sme"},
        )
        assert response.status_code == 404

    def test_progress_counts(self, client):
        test_client, cases, _ = client
        for category in CATEGORIES:
            test_client.post(
                f"/api/review/{cases[0].case_id}",
                json={
                    "category": category.value,
                    "verdict": "correct",
                    "reviewer_id": "sme",
                },
            )
        progress = test_client.get("/api/review/progress").json()
        assert progress["total_cases"] == 2
        assert progress["cases_complete"] == 1
        next_case = test_client.get(
            "/api/review/next", params={"reviewer": "sme"}
        ).json()
        assert next_case["case_id"] == cases[1].case_id

    def test_agreement_endpoint_matches_library(self, client):
        test_client, cases, journal = client
        for case in cases:
            for category in CATEGORIES:
                test_client.post(
                    f"/api/review/{case.case_id}",
                    json={
                        "category": category.value,
                        "verdict": "correct",
                        "reviewer_id": "sme",
                    },
                )
        via_http = test_client.get("/api/agreement").json()
        direct = agreement_report(journal.latest(), cases).to_json_dict()
        assert via_http == json.loads(json.dumps(direct))

    def test_agreement_before_any_judgments(self, client):
        test_client, _, _ = client
        body = test_client.get("/api/agreement").json()
        assert body["pairs"] == 0

    def test_shared_secret_gate(self, tmp_path):
        cases = build_cases(1)
        journal = JudgmentJournal(tmp_path / "j2.jsonl")
        app = create_app(cases, journal, shared_secret="hunter2")
        test_client = TestClient(app)
        denied = test_client.get("/api/review/next", params={"reviewer": "sme"})
        assert denied.status_code == 401
        allowed = test_client.get(
            "/api/review/next",
            params={"reviewer": "sme"},
            headers={"X-Review-Token": "hunter2"},
        )
        assert allowed.status_code == 200

    def test_root_placeholder_without_ui_bundle(self, client):
        test_client, _, _ = client
        response = test_client.get("/")
        assert response.status_code == 200
        assert "review service" in response.text

    def test_static_dir_served_when_present(self, tmp_path):
        static = tmp_path / "dist"
        static.mkdir()
        (static / "index.html").write_text("<html><body>UI</body></html>")
        app = create_app(
            build_cases(1), JudgmentJournal(tmp_path / "j3.jsonl"), static_dir=static
        )
        response = TestClient(app).get("/")
        assert response.status_code == 200
        assert "UI" in response.text
