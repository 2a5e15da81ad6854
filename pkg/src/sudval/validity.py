"""External predictive-validity assessment.

Cohort construction (full / concordant / narrative-only), binary ICD
indicator and TF-IDF feature encoding, patient-level splitting, from-scratch
logistic regression (full-batch gradient descent with backtracking line
search), and ROC/AUC comparison across predictor sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import (
    Corpus,
    DEFAULT_PREFIX_MAP,
    ExtractionRecord,
    ExtractionStatus,
    StructuredCode,
    SubstanceCategory,
)
from .errors import ConfigError, UndefinedMetricError, ValidationError
from .metrics import RocCurve, normalize_tokens, roc_auc
from .sampling import seeded_shuffle

ICD_PREFIXES = tuple(f"F1{i}" for i in range(10))


class CohortKind(str, Enum):
    FULL = "full"
    CONCORDANT = "concordant"
    NARRATIVE_ONLY = "narrative_only"


@dataclass(frozen=True)
class CohortSpec:
    kind: CohortKind
    target_category: SubstanceCategory | None
    patient_ids: tuple[str, ...]


def build_cohorts(
    corpus: Corpus,
    extractions: list[ExtractionRecord],
    target_category: SubstanceCategory,
    prefix_map: dict[SubstanceCategory, tuple[str, ...]] | None = None,
) -> tuple[CohortSpec, CohortSpec, CohortSpec]:
    """Patient-level stratification for the target category.

    code-positive = any code on any of the patient's encounters matches the
    category; LLM-positive = any retained extraction; concordant = both;
    narrative-only = LLM-positive without a code; full = all patients.
    """
    prefixes = (prefix_map or DEFAULT_PREFIX_MAP)[target_category]
    code_positive: set[str] = set()
    for code in corpus.codes:
        if any(code.code.upper().startswith(p.upper()) for p in prefixes):
            code_positive.add(code.patient_id)
    llm_positive: set[str] = set()
    for record in extractions:
        if (
            record.status is ExtractionStatus.RETAINED
            and record.category is target_category
        ):
            llm_positive.add(corpus.notes[record.note_id].patient_id)
    all_patients = tuple(corpus.patient_ids())
    concordant = tuple(sorted(llm_positive & code_positive))
    narrative_only = tuple(sorted(llm_positive - code_positive))
    return (
        CohortSpec(CohortKind.FULL, None, all_patients),
        CohortSpec(CohortKind.CONCORDANT, target_category, concordant),
        CohortSpec(CohortKind.NARRATIVE_ONLY, target_category, narrative_only),
    )


def patient_split(
    patient_ids: list[str],
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
) -> tuple[list[str], list[str], list[str]]:
    """Disjoint, exhaustive, seeded-shuffle partition with largest-remainder
    rounding of the split sizes."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    shuffled = seeded_shuffle(sorted(patient_ids), seed)
    n = len(shuffled)
    quotas = [ratio * n for ratio in ratios]
    sizes = [int(q) for q in quotas]
    remainders = sorted(
        range(3), key=lambda i: (quotas[i] - sizes[i], -i), reverse=True
    )
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1
    train = shuffled[: sizes[0]]
    val = shuffled[sizes[0] : sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1] :]
    return train, val, test


@dataclass
class TfidfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    min_df: int

    def state_hash(self) -> int:
        return hash(
            (tuple(sorted(self.vocabulary.items())), self.idf.tobytes(), self.min_df)
        )


def tfidf_fit(train_docs: list[str], min_df: int = 2) -> TfidfModel:
    """Fit vocabulary and idf on the training split only.

    idf = ln((1+N)/(1+df)) + 1; tokens below min_df are dropped.
    """
    if not train_docs:
        raise ValidationError("cannot fit TF-IDF on an empty training corpus")
    n = len(train_docs)
    df: dict[str, int] = {}
    for doc in train_docs:
        for token in set(normalize_tokens(doc)):
            df[token] = df.get(token, 0) + 1
    vocabulary = {
        token: index
        for index, token in enumerate(sorted(t for t, c in df.items() if c >= min_df))
    }
    idf = np.zeros(len(vocabulary), dtype=np.float64)
    for token, index in vocabulary.items():
        idf[index] = np.log((1 + n) / (1 + df[token])) + 1.0
    return TfidfModel(vocabulary=vocabulary, idf=idf, min_df=min_df)


def tfidf_transform(docs: list[str], model: TfidfModel) -> np.ndarray:
    """Raw-count tf times idf, rows L2-normalized; out-of-vocabulary tokens
    ignored; all-OOV docs stay zero rows."""
    matrix = np.zeros((len(docs), len(model.vocabulary)), dtype=np.float64)
    for row, doc in enumerate(docs):
        for token, count in normalize_tokens(doc).items():
            index = model.vocabulary.get(token)
            if index is not None:
                matrix[row, index] = count * model.idf[index]
    norms = np.linalg.norm(matrix, axis=1)
    nonzero = norms > 0
    matrix[nonzero] = matrix[nonzero] / norms[nonzero, None]
    return matrix


@dataclass
class FeatureMatrix:
    patient_ids: list[str]
    feature_names: list[str]
    X: np.ndarray
    feature_set: str
    unmapped_count: int = 0

    def rows_for(self, patient_ids: list[str]) -> np.ndarray:
        index = {pid: i for i, pid in enumerate(self.patient_ids)}
        return self.X[[index[pid] for pid in patient_ids]]


def icd_features(
    patients: list[str],
    codes: list[StructuredCode],
    prefixes: tuple[str, ...] = ICD_PREFIXES,
) -> FeatureMatrix:
    """Binary indicator per ICD prefix column: 1 iff any code on any of the
    patient's encounters starts with the prefix (exact 3-character prefixes;
    shorter codes match nothing and are counted unmapped)."""
    index = {pid: i for i, pid in enumerate(patients)}
    X = np.zeros((len(patients), len(prefixes)), dtype=np.float64)
    unmapped = 0
    for code in codes:
        row = index.get(code.patient_id)
        if row is None:
            continue
        normalized = code.code.upper()
        matched = False
        for column, prefix in enumerate(prefixes):
            if normalized.startswith(prefix.upper()):
                X[row, column] = 1.0
                matched = True
        if not matched:
            unmapped += 1
    return FeatureMatrix(
        patient_ids=list(patients),
        feature_names=[f"icd:{p}" for p in prefixes],
        X=X,
        feature_set="icd_binary",
        unmapped_count=unmapped,
    )


def patient_documents(
    corpus: Corpus,
    extractions: list[ExtractionRecord],
    patients: list[str],
    categories: tuple[SubstanceCategory, ...] | None = None,
) -> list[str]:
    """One concatenated document per patient from retained extraction spans,
    in deterministic (note_id, category) order."""
    spans: dict[str, list[tuple[str, str, str]]] = {pid: [] for pid in patients}
    for record in extractions:
        if record.status is not ExtractionStatus.RETAINED:
            continue
        if categories is not None and record.category not in categories:
            continue
        patient_id = corpus.notes[record.note_id].patient_id
        if patient_id in spans:
            spans[patient_id].append(
                (record.note_id, record.category.value, record.text or "")
            )
    return [
        " ".join(text for _, _, text in sorted(spans[pid]))
        for pid in patients
    ]


def combine_features(a: FeatureMatrix, b: FeatureMatrix) -> FeatureMatrix:
    """Column concatenation; names must already be disjoint."""
    if a.patient_ids != b.patient_ids:
        raise ValidationError("feature matrices cover different patients")
    overlap = set(a.feature_names) & set(b.feature_names)
    if overlap:
        raise ValidationError(f"overlapping feature names: {sorted(overlap)[:5]}")
    return FeatureMatrix(
        patient_ids=list(a.patient_ids),
        feature_names=a.feature_names + b.feature_names,
        X=np.hstack([a.X, b.X]),
        feature_set="combined",
    )


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    lam: float
    iterations: int
    final_loss: float
    seed: int
    converged: bool


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Overflow-safe in both tails.
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    expz = np.exp(z[~positive])
    out[~positive] = expz / (1.0 + expz)
    return out


def logistic_loss_grad(
    X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float
) -> tuple[float, np.ndarray, float]:
    """Mean logistic loss + lam/2 * ||w||^2 and its analytic gradient.

    Bias is unregularized. Stable softplus avoids overflow for large |z|.
    """
    z = X @ w + b
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(softplus - y * z) + 0.5 * lam * np.dot(w, w))
    residual = _sigmoid(z) - y
    grad_w = X.T @ residual / len(y) + lam * w
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def train_logreg(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    seed: int = 0,
    max_iter: int = 10_000,
    tol: float = 1e-6,
) -> LogisticModel:
    """Full-batch gradient descent with backtracking (Armijo) line search,
    zero initialization; converges when the gradient infinity-norm drops
    below tol."""
    y = np.asarray(y, dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise ValidationError("training labels contain a single class")
    w = np.zeros(X.shape[1], dtype=np.float64)
    b = 0.0
    loss, grad_w, grad_b = logistic_loss_grad(X, y, w, b, lam)
    iterations = 0
    converged = False
    step = 1.0
    for iterations in range(1, max_iter + 1):
        grad_norm = max(
            float(np.max(np.abs(grad_w))) if grad_w.size else 0.0, abs(grad_b)
        )
        if grad_norm < tol:
            converged = True
            break
        grad_sq = float(np.dot(grad_w, grad_w)) + grad_b**2
        t = step
        while True:
            w_new = w - t * grad_w
            b_new = b - t * grad_b
            loss_new, grad_w_new, grad_b_new = logistic_loss_grad(X, y, w_new, b_new, lam)
            if loss_new <= loss - 1e-4 * t * grad_sq or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 and loss_new >= loss:
            converged = True  # no descent direction left at machine precision
            break
        w, b, loss, grad_w, grad_b = w_new, b_new, loss_new, grad_w_new, grad_b_new
        step = min(t * 2.0, 1e4)  # warm-start the next line search
    return LogisticModel(
        weights=w,
        bias=b,
        lam=lam,
        iterations=iterations,
        final_loss=loss,
        seed=seed,
        converged=converged,
    )


def predict_proba(model: LogisticModel, X: np.ndarray) -> np.ndarray:
    return _sigmoid(X @ model.weights + model.bias)


def train_logreg_grid(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    lam_grid: list[float],
    seed: int = 0,
) -> tuple[LogisticModel, dict[float, float]]:
    """Fit each lambda on train, select by validation AUC (first max wins)."""
    if not lam_grid:
        raise ConfigError("empty lambda grid")
    val_aucs: dict[float, float] = {}
    best: LogisticModel | None = None
    best_auc = -np.inf
    for lam in lam_grid:
        model = train_logreg(X_train, y_train, lam, seed=seed)
        scores = predict_proba(model, X_val)
        auc = roc_auc(scores.tolist(), [bool(v) for v in y_val]).auc
        val_aucs[lam] = auc
        if auc > best_auc:
            best_auc = auc
            best = model
    assert best is not None
    return best, val_aucs


DEFAULT_LAMBDA_GRID = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]

FEATURE_SETS = ("icd_binary", "llm_tfidf", "combined")


@dataclass
class PredictorResult:
    feature_set: str
    auc: float
    roc: RocCurve
    lam: float
    val_aucs: dict[float, float]

    def to_json_dict(self) -> dict:
        return {
            "feature_set": self.feature_set,
            "auc": self.auc,
            "lambda": self.lam,
            "val_aucs": {str(k): v for k, v in self.val_aucs.items()},
            "roc_points": [list(p) for p in self.roc.points],
        }


@dataclass
class PredictReport:
    cohort: CohortKind
    target_category: SubstanceCategory | None
    n_patients: int
    split_sizes: tuple[int, int, int]
    results: dict[str, PredictorResult]

    def to_json_dict(self) -> dict:
        return {
            "cohort": self.cohort.value,
            "target_category": (
                self.target_category.value if self.target_category else None
            ),
            "n_patients": self.n_patients,
            "split_sizes": list(self.split_sizes),
            "results": {
                name: result.to_json_dict() for name, result in self.results.items()
            },
        }


def evaluate_predictors(
    corpus: Corpus,
    extractions: list[ExtractionRecord],
    cohort: CohortSpec,
    feature_sets: tuple[str, ...] = FEATURE_SETS,
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
    lam_grid: list[float] | None = None,
    prefix_map: dict[SubstanceCategory, tuple[str, ...]] | None = None,
) -> PredictReport:
    """Fit on train, select lambda on validation, report test AUC and ROC
    points per predictor set.

    The full cohort uses all categories jointly (10 ICD prefix columns,
    TF-IDF over per-patient documents across categories); restricted cohorts
    use the target category only. Patients with no outcome record count as
    not engaged.
    """
    lam_grid = lam_grid or list(DEFAULT_LAMBDA_GRID)
    patients = list(cohort.patient_ids)
    if not patients:
        raise ValidationError(f"cohort {cohort.kind.value} is empty")
    outcome = {
        pid: (corpus.outcomes[pid].engaged if pid in corpus.outcomes else False)
        for pid in patients
    }
    train, val, test = patient_split(patients, ratios, seed)
    y = {pid: 1.0 if outcome[pid] else 0.0 for pid in patients}
    y_train = np.array([y[p] for p in train])
    y_val = np.array([y[p] for p in val])
    y_test = np.array([y[p] for p in test])
    if len(set(y_test.tolist())) < 2:
        raise UndefinedMetricError("test labels are single-class")

    if cohort.kind is CohortKind.FULL:
        prefixes = ICD_PREFIXES
        categories = None
    else:
        assert cohort.target_category is not None
        prefixes = (prefix_map or DEFAULT_PREFIX_MAP)[cohort.target_category]
        categories = (cohort.target_category,)

    matrices: dict[str, FeatureMatrix] = {}
    if {"icd_binary", "combined"} & set(feature_sets):
        matrices["icd_binary"] = icd_features(patients, corpus.codes, prefixes)
    if {"llm_tfidf", "combined"} & set(feature_sets):
        docs = patient_documents(corpus, extractions, patients, categories)
        docs_by_pid = dict(zip(patients, docs))
        model = tfidf_fit([docs_by_pid[p] for p in train])
        tfidf = tfidf_transform(docs, model)
        matrices["llm_tfidf"] = FeatureMatrix(
            patient_ids=list(patients),
            feature_names=[
                f"tfidf:{t}"
                for t, _ in sorted(model.vocabulary.items(), key=lambda kv: kv[1])
            ],
            X=tfidf,
            feature_set="llm_tfidf",
        )
    if "combined" in feature_sets:
        matrices["combined"] = combine_features(
            matrices["icd_binary"], matrices["llm_tfidf"]
        )

    results: dict[str, PredictorResult] = {}
    for name in feature_sets:
        features = matrices[name]
        model, val_aucs = train_logreg_grid(
            features.rows_for(train),
            y_train,
            features.rows_for(val),
            y_val,
            lam_grid,
            seed=seed,
        )
        scores = predict_proba(model, features.rows_for(test))
        curve = roc_auc(scores.tolist(), [bool(v) for v in y_test])
        results[name] = PredictorResult(
            feature_set=name,
            auc=curve.auc,
            roc=curve,
            lam=model.lam,
            val_aucs=val_aucs,
        )
    return PredictReport(
        cohort=cohort.kind,
        target_category=cohort.target_category,
        n_patients=len(patients),
        split_sizes=(len(train), len(val), len(test)),
        results=results,
    )


def roc_points_csv(report: PredictReport, path: str | Path) -> None:
    """Optional CSV export of ROC points for plotting."""
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write("feature_set,fpr,tpr\n")
        for name, result in report.results.items():
            for fpr, tpr in result.roc.points:
                handle.write(f"{name},{fpr},{tpr}\n")
