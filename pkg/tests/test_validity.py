import math

import numpy as np
import pytest

from sudval.corpus import (
    ClinicalNote,
    Corpus,
    ExtractionRecord,
    ExtractionStatus,
    OutcomeRecord,
    StructuredCode,
    SubstanceCategory,
)
from sudval.errors import ConfigError, UndefinedMetricError, ValidationError
from sudval.metrics import roc_auc
from sudval.validity import (
    CohortKind,
    FeatureMatrix,
    build_cohorts,
    combine_features,
    evaluate_predictors,
    icd_features,
    logistic_loss_grad,
    patient_documents,
    patient_split,
    predict_proba,
    tfidf_fit,
    tfidf_transform,
    train_logreg,
    train_logreg_grid,
)


def small_corpus():
    corpus = Corpus()
    for i, (patient, code) in enumerate(
        [("pa", "F10.20"), ("pb", None), ("pc", None)]
    ):
        corpus.add_note(
            ClinicalNote(f"n{i}", patient, f"e{i}", "2023-01-01", "note text")
        )
        if code:
            corpus.add_code(StructuredCode(f"e{i}", patient, code, "2023-01-01"))
    return corpus


class TestBuildCohorts:
    def test_classification(self):
        corpus = small_corpus()
        extractions = [
            ExtractionRecord("n0", SubstanceCategory.ALCOHOL, "aud", ExtractionStatus.RETAINED),
            ExtractionRecord("n1", SubstanceCategory.ALCOHOL, "aud", ExtractionStatus.RETAINED),
        ]
        full, concordant, narrative = build_cohorts(
            corpus, extractions, SubstanceCategory.ALCOHOL
        )
        assert set(full.patient_ids) == {"pa", "pb", "pc"}
        assert concordant.patient_ids == ("pa",)  # code + extraction
        assert narrative.patient_ids == ("pb",)  # extraction only
        assert "pc" not in concordant.patient_ids + narrative.patient_ids

    def test_concordant_and_narrative_disjoint(self):
        corpus = small_corpus()
        extractions = [
            ExtractionRecord("n0", SubstanceCategory.ALCOHOL, "aud", ExtractionStatus.RETAINED),
        ]
        _, concordant, narrative = build_cohorts(
            corpus, extractions, SubstanceCategory.ALCOHOL
        )
        assert not set(concordant.patient_ids) & set(narrative.patient_ids)

    def test_flagged_extractions_do_not_count(self):
        corpus = small_corpus()
        extractions = [
            ExtractionRecord(
                "n1", SubstanceCategory.ALCOHOL, "x", ExtractionStatus.GROUNDING_FLAGGED, 0.1
            )
        ]
        _, concordant, narrative = build_cohorts(
            corpus, extractions, SubstanceCategory.ALCOHOL
        )
        assert narrative.patient_ids == ()


class TestPatientSplit:
    def test_sizes_100(self):
        train, val, test = patient_split([f"p{i}" for i in range(100)], seed=3)
        assert (len(train), len(val), len(test)) == (70, 10, 20)

    def test_determinism(self):
        ids = [f"p{i}" for i in range(57)]
        assert patient_split(ids, seed=9) == patient_split(ids, seed=9)

    def test_three_patients_largest_remainder(self):
        train, val, test = patient_split(["a", "b", "c"], seed=1)
        assert (len(train), len(val), len(test)) == (2, 0, 1)

    def test_disjoint_exhaustive(self):
        ids = [f"p{i}" for i in range(123)]
        train, val, test = patient_split(ids, seed=5)
        assert sorted(train + val + test) == sorted(ids)
        assert len(set(train) & set(val)) == 0
        assert len(set(val) & set(test)) == 0
        assert len(set(train) & set(test)) == 0

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            patient_split(["a"], ratios=(0.5, 0.2, 0.2), seed=0)


class TestTfidf:
    def test_idf_formula(self):
        model = tfidf_fit(["alcohol use disorder", "opioid use disorder"], min_df=1)
        by_token = {t: model.idf[i] for t, i in model.vocabulary.items()}
        assert by_token["use"] == pytest.approx(1.0)
        assert by_token["disorder"] == pytest.approx(1.0)
        assert by_token["alcohol"] == pytest.approx(math.log(3 / 2) + 1, abs=1e-9)

    def test_min_df_2_drops_singletons(self):
        model = tfidf_fit(["alcohol use disorder", "opioid use disorder"])
        assert set(model.vocabulary) == {"use", "disorder"}

    def test_oov_doc_is_zero_row(self):
        model = tfidf_fit(["alcohol use disorder", "alcohol use disorder"])
        matrix = tfidf_transform(["quetiapine taper"], model)
        assert np.all(matrix == 0.0)

    def test_duplicate_docs_identical_rows(self):
        model = tfidf_fit(["a b c", "a b d"], min_df=1)
        matrix = tfidf_transform(["a b", "a b"], model)
        assert np.array_equal(matrix[0], matrix[1])

    def test_rows_l2_normalized(self):
        model = tfidf_fit(["alcohol use disorder", "opioid use disorder"], min_df=1)
        matrix = tfidf_transform(["alcohol use use disorder"], model)
        assert np.linalg.norm(matrix[0]) == pytest.approx(1.0)

    def test_transform_never_alters_fitted_state(self):
        model = tfidf_fit(["alcohol use disorder", "opioid use disorder"])
        frozen = model.state_hash()
        tfidf_transform(["novel validation words everywhere"], model)
        assert model.state_hash() == frozen

    def test_empty_training_corpus(self):
        with pytest.raises(ValidationError):
            tfidf_fit([])


class TestIcdFeatures:
    def test_prefix_columns(self):
        codes = [
            StructuredCode("e1", "p1", "F10.20", "2023-01-01"),
            StructuredCode("e2", "p1", "F17.210", "2023-01-02"),
        ]
        features = icd_features(["p1", "p2"], codes)
        row = dict(zip(features.feature_names, features.X[0]))
        assert row["icd:F10"] == 1.0 and row["icd:F17"] == 1.0
        assert sum(features.X[0]) == 2.0
        assert np.all(features.X[1] == 0.0)

    def test_short_code_unmapped(self):
        codes = [StructuredCode("e1", "p1", "F1", "2023-01-01")]
        features = icd_features(["p1"], codes)
        assert np.all(features.X == 0.0)
        assert features.unmapped_count == 1

    def test_combine_disjoint_names(self):
        a = icd_features(["p1"], [])
        b = FeatureMatrix(["p1"], ["tfidf:x"], np.ones((1, 1)), "llm_tfidf")
        combined = combine_features(a, b)
        assert combined.X.shape == (1, 11)
        bad = FeatureMatrix(["p1"], ["icd:F10"], np.ones((1, 1)), "llm_tfidf")
        with pytest.raises(ValidationError):
            combine_features(a, bad)


def numeric_gradient(X, y, w, b, lam, h=1e-6):
    grad_w = np.zeros_like(w)
    for j in range(len(w)):
        w_plus, w_minus = w.copy(), w.copy()
        w_plus[j] += h
        w_minus[j] -= h
        loss_plus, _, _ = logistic_loss_grad(X, y, w_plus, b, lam)
        loss_minus, _, _ = logistic_loss_grad(X, y, w_minus, b, lam)
        grad_w[j] = (loss_plus - loss_minus) / (2 * h)
    loss_plus, _, _ = logistic_loss_grad(X, y, w, b + h, lam)
    loss_minus, _, _ = logistic_loss_grad(X, y, w, b - h, lam)
    return grad_w, (loss_plus - loss_minus) / (2 * h)


class TestLogreg:
    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, d = rng.integers(4, 30), rng.integers(1, 6)
            X = rng.normal(size=(n, d))
            y = rng.integers(0, 2, size=n).astype(float)
            w = rng.normal(size=d)
            b = float(rng.normal())
            lam = float(rng.uniform(0, 0.5))
            _, grad_w, grad_b = logistic_loss_grad(X, y, w, b, lam)
            num_w, num_b = numeric_gradient(X, y, w, b, lam)
            analytic = np.append(grad_w, grad_b)
            numeric = np.append(num_w, num_b)
            rel = np.linalg.norm(analytic - numeric) / max(
                np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12
            )
            assert rel < 1e-5

    def test_separable_1d_reaches_training_auc_one(self):
        X = np.array([[-2.0], [-1.5], [-1.0], [1.0], [1.5], [2.0]])
        y = np.array([0, 0, 0, 1, 1, 1], dtype=float)
        model = train_logreg(X, y, lam=1e-4)
        scores = predict_proba(model, X)
        assert roc_auc(scores.tolist(), [bool(v) for v in y]).auc == 1.0

    def test_single_class_train_rejected(self):
        with pytest.raises(ValidationError):
            train_logreg(np.zeros((4, 2)), np.ones(4), lam=0.1)

    def test_permuted_labels_auc_near_half(self):
        rng = np.random.default_rng(17)
        n = 2000
        X = rng.normal(size=(n, 8))
        y = (X[:, 0] + rng.normal(size=n) > 0).astype(float)
        y = y[rng.permutation(n)]  # break any association
        train_idx = np.arange(0, 1400)
        val_idx = np.arange(1400, 2000)
        model, val_aucs = train_logreg_grid(
            X[train_idx], y[train_idx], X[val_idx], y[val_idx], [1e-3, 1e-1]
        )
        for auc in val_aucs.values():
            assert 0.40 <= auc <= 0.60

    def test_planted_signal_reaches_095(self):
        rng = np.random.default_rng(23)
        n = 2000
        y = rng.integers(0, 2, size=n).astype(float)
        X = np.column_stack(
            [
                rng.normal(loc=2.4 * y - 1.2, scale=0.5),
                rng.normal(size=n),
            ]
        )
        split = 1600
        model = train_logreg(X[:split], y[:split], lam=1e-3)
        scores = predict_proba(model, X[split:])
        auc = roc_auc(scores.tolist(), [bool(v) for v in y[split:]]).auc
        assert auc >= 0.95

    def test_large_lambda_shrinks_weights_to_zero(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(200, 3))
        y = (X[:, 0] > 0).astype(float)
        model = train_logreg(X, y, lam=1e8)
        assert np.linalg.norm(model.weights) < 1e-6
        scores = predict_proba(model, X)
        assert scores.max() - scores.min() < 1e-6
        # Under the all-ties convention, exactly constant scores give 0.5.
        rounded = np.round(scores, 6)
        assert roc_auc(rounded.tolist(), [bool(v) for v in y]).auc == 0.5

    def test_grid_selects_by_validation_auc(self):
        rng = np.random.default_rng(9)
        n = 600
        y = rng.integers(0, 2, size=n).astype(float)
        X = np.column_stack([rng.normal(loc=1.5 * y, scale=0.8), rng.normal(size=n)])
        model, val_aucs = train_logreg_grid(
            X[:400], y[:400], X[400:], y[400:], [1e-4, 1e-2, 1e8]
        )
        assert val_aucs[model.lam] == max(val_aucs.values())
        # First max wins on exact ties.
        first_best = next(
            lam for lam, auc in val_aucs.items() if auc == max(val_aucs.values())
        )
        assert model.lam == first_best

    def test_combined_at_least_max_single_minus_tolerance(self):
        rng = np.random.default_rng(31)
        n = 1500
        y = rng.integers(0, 2, size=n).astype(float)
        icd = (rng.random(n) < np.where(y == 1, 0.75, 0.25)).astype(float)
        text = rng.normal(loc=1.4 * y - 0.7, scale=0.9)
        X_icd = icd[:, None]
        X_text = text[:, None]
        X_combined = np.column_stack([icd, text])
        split = 1100
        aucs = {}
        for name, X in (("icd", X_icd), ("text", X_text), ("combined", X_combined)):
            model = train_logreg(X[:split], y[:split], lam=1e-3)
            scores = predict_proba(model, X[split:])
            aucs[name] = roc_auc(scores.tolist(), [bool(v) for v in y[split:]]).auc
        assert aucs["combined"] >= max(aucs["icd"], aucs["text"]) - 0.02


def build_validity_corpus(n_patients=240, seed=5):
    """Patients with codes, retained extraction docs, and outcomes carrying
    independent signal from both sources."""
    rng = np.random.default_rng(seed)
    corpus = Corpus()
    extractions = []
    for i in range(n_patients):
        patient = f"p{i:03d}"
        encounter = f"e{i:03d}"
        note_id = f"n{i:03d}"
        corpus.add_note(
            ClinicalNote(note_id, patient, encounter, "2023-01-01", "note body")
        )
        engaged = bool(rng.random() < 0.45)
        has_code = rng.random() < (0.7 if engaged else 0.3)
        has_extraction = rng.random() < (0.75 if engaged else 0.3)
        if has_code:
            corpus.add_code(StructuredCode(encounter, patient, "F10.20", "2023-01-01"))
        if has_extraction:
            severity = "severe" if engaged and rng.random() < 0.8 else "mild"
            extractions.append(
                ExtractionRecord(
                    note_id,
                    SubstanceCategory.ALCOHOL,
                    f"alcohol use disorder {severity}",
                    ExtractionStatus.RETAINED,
                )
            )
        corpus.add_outcome(OutcomeRecord(patient, engaged))
    return corpus, extractions


class TestEvaluatePredictors:
    def test_full_cohort_all_feature_sets(self):
        corpus, extractions = build_validity_corpus()
        full, _, _ = build_cohorts(corpus, extractions, SubstanceCategory.ALCOHOL)
        report = evaluate_predictors(
            corpus, extractions, full, seed=2, lam_grid=[1e-3, 1e-1]
        )
        assert set(report.results) == {"icd_binary", "llm_tfidf", "combined"}
        assert sum(report.split_sizes) == len(full.patient_ids)
        for result in report.results.values():
            assert 0.0 <= result.auc <= 1.0
            assert result.roc.points[0] == (0.0, 0.0)
            assert result.roc.points[-1] == (1.0, 1.0)
        assert report.results["icd_binary"].auc > 0.55  # planted code signal

    def test_narrative_only_icd_column_is_structurally_half(self):
        corpus, extractions = build_validity_corpus()
        _, _, narrative = build_cohorts(corpus, extractions, SubstanceCategory.ALCOHOL)
        assert len(narrative.patient_ids) > 30
        # Definitional: no narrative-only patient carries a target-category code.
        features = icd_features(
            list(narrative.patient_ids), corpus.codes, prefixes=("F10",)
        )
        assert np.all(features.X == 0.0)
        report = evaluate_predictors(
            corpus,
            extractions,
            narrative,
            feature_sets=("icd_binary",),
            seed=2,
            lam_grid=[1e-2],
        )
        assert report.results["icd_binary"].auc == 0.5

    def test_patient_documents_concatenate_deterministically(self):
        corpus, extractions = build_validity_corpus(n_patients=30)
        patients = [f"p{i:03d}" for i in range(30)]
        docs_a = patient_documents(corpus, extractions, patients)
        docs_b = patient_documents(corpus, list(reversed(extractions)), patients)
        assert docs_a == docs_b

    def test_degenerate_test_labels_rejected(self):
        corpus = Corpus()
        extractions = []
        for i in range(10):
            patient = f"p{i}"
            corpus.add_note(ClinicalNote(f"n{i}", patient, f"e{i}", "2023", "x"))
            corpus.add_outcome(OutcomeRecord(patient, True))
        full, _, _ = build_cohorts(corpus, extractions, SubstanceCategory.ALCOHOL)
        with pytest.raises(UndefinedMetricError):
            evaluate_predictors(corpus, extractions, full, feature_sets=("icd_binary",))
