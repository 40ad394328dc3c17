"""Out-of-fold stacking: fold assignment, OOF assembly with missing-fold
imputation, column-group averaging, robust (Huber) meta-regression with
cross-validated scoring, grouped test prediction, and the final weighted
blend.

Row alignment is always by explicit example id, never by file order.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateCell,
    InputError,
    LengthMismatch,
    MissingPrediction,
    NoFoldsAvailable,
    NonConvergence,
    SingularSystem,
    TooFewExamples,
    UnknownColumn,
)
from .util import atomic_write_text

# Default blend weights for extra full-train models; the denominator is
# 1 + sum(weights) = 1.6046 with the defaults below.
DEFAULT_BLEND_WEIGHTS = (0.2552, 0.1747, 0.1747)


# --- seeded shuffling -------------------------------------------------------

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Xoshiro256StarStar:
    """xoshiro256** seeded through splitmix64; stable across platforms."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        self.s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            self.s.append(word)

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & _MASK64

    def next_u64(self) -> int:
        s = self.s
        result = (self._rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = self._rotl(s[3], 45)
        return result

    def shuffle(self, items: list) -> None:
        """Fisher-Yates; the modulo bias is negligible at these sizes."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass
class FoldSpec:
    n_folds: int = 24
    validation_folds: tuple[int, ...] = (0, 1, 2, 3)
    seed: int = 0

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        bad = [f for f in self.validation_folds if not 0 <= f < self.n_folds]
        if bad:
            raise ValueError(f"validation folds outside [0, {self.n_folds}): {bad}")


def assign_folds(n_examples: int, spec: FoldSpec, sizes=None) -> np.ndarray:
    """Fold id per example: seeded uniform shuffle then contiguous chunks
    whose sizes differ by at most one.

    With ``sizes`` given, examples are instead ordered by size (shuffled
    within ties) and dealt round-robin, stratifying every fold across the
    size range.
    """
    if n_examples < spec.n_folds:
        raise TooFewExamples(f"{n_examples} examples for {spec.n_folds} folds")
    order = list(range(n_examples))
    Xoshiro256StarStar(spec.seed).shuffle(order)
    folds = np.zeros(n_examples, dtype=np.int64)
    if sizes is not None:
        if len(sizes) != n_examples:
            raise LengthMismatch(f"{len(sizes)} sizes for {n_examples} examples")
        by_size = sorted(order, key=lambda i: sizes[i])
        for position, example in enumerate(by_size):
            folds[example] = position % spec.n_folds
        return folds
    base, remainder = divmod(n_examples, spec.n_folds)
    start = 0
    for fold in range(spec.n_folds):
        size = base + (1 if fold < remainder else 0)
        for example in order[start : start + size]:
            folds[example] = fold
        start += size
    return folds


# --- prediction tables -----------------------------------------------------


@dataclass
class PredictionTable:
    """Aligned (example id x model) predictions with optional per-row fold
    and split labels. Grouped-away columns stay in ``provenance``."""

    ids: np.ndarray
    columns: dict[str, np.ndarray]
    fold: np.ndarray | None = None
    split: list[str] | None = None
    provenance: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(set(self.ids.tolist())) != self.ids.size:
            raise DuplicateCell("duplicate example ids in table")
        for name, values in self.columns.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (self.ids.size,):
                raise LengthMismatch(f"column {name!r} has {values.shape}, ids {self.ids.size}")
            self.columns[name] = values

    def matrix(self, column_order: list[str] | None = None) -> np.ndarray:
        names = list(self.columns) if column_order is None else column_order
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise UnknownColumn(f"columns not in table: {missing}")
        return np.column_stack([self.columns[n] for n in names])


def average_columns(table: PredictionTable, group: list[str], new_name: str) -> PredictionTable:
    """Replace a group of columns by their arithmetic row-mean."""
    missing = [name for name in group if name not in table.columns]
    if missing:
        raise UnknownColumn(f"cannot average unknown columns: {missing}")
    columns: dict[str, np.ndarray] = {}
    inserted = False
    for name, values in table.columns.items():
        if name in group:
            if not inserted:
                columns[new_name] = np.mean([table.columns[g] for g in group], axis=0)
                inserted = True
            continue
        columns[name] = values
    provenance = dict(table.provenance)
    provenance[new_name] = list(group)
    return PredictionTable(table.ids, columns, table.fold, table.split, provenance)


def load_prediction_csv(path) -> dict[int, float]:
    """Read an `id,prediction` CSV into an id-keyed dict."""
    out: dict[int, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "prediction"]:
            raise InputError(f"{path}: expected header 'id,prediction', got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise InputError(f"{path}:{row_no}: expected 2 fields, got {len(row)}")
            try:
                example = int(row[0])
                value = float(row[1])
            except ValueError:
                raise InputError(f"{path}:{row_no}: bad id/prediction {row}") from None
            if example in out:
                raise DuplicateCell(f"{path}:{row_no}: duplicate id {example}")
            out[example] = value
    return out


def write_prediction_csv(path, ids, values) -> None:
    ids = np.asarray(ids)
    values = np.asarray(values, dtype=np.float64)
    if ids.shape != values.shape:
        raise LengthMismatch(f"{ids.shape} ids vs {values.shape} predictions")
    lines = ["id,prediction"]
    lines += [f"{int(i)},{repr(float(v))}" for i, v in zip(ids, values)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_labeled_csv(path, value_name: str) -> dict[int, float]:
    """Read an `id,<value_name>` CSV (fold assignments, targets)."""
    out: dict[int, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", value_name]:
            raise InputError(f"{path}: expected header 'id,{value_name}', got {header}")
        for row in reader:
            if not row:
                continue
            if int(row[0]) in out:
                raise DuplicateCell(f"{path}: duplicate id {row[0]}")
            out[int(row[0])] = float(row[1])
    return out


# --- imputation and OOF assembly ------------------------------------------


def impute_missing_fold(per_fold: dict[int, dict[int, float]],
                        validation_folds,
                        rows_for_fold: dict[int, list[int]]) -> dict[int, dict[int, float]]:
    """Fill missing fold checkpoints with the per-row mean of the available
    checkpoints' predictions on those rows.

    ``per_fold`` maps fold id to that checkpoint's id->prediction map;
    existing cells are never altered. ``rows_for_fold`` lists the ids a
    missing fold must cover (its validation rows for OOF tables, the whole
    test split for test tables).
    """
    available = {f: table for f, table in per_fold.items() if f in set(validation_folds)}
    if not available:
        raise NoFoldsAvailable(f"no checkpoints among validation folds {tuple(validation_folds)}")
    completed = {f: dict(table) for f, table in per_fold.items()}
    for fold in validation_folds:
        if fold in completed:
            continue
        filled: dict[int, float] = {}
        for example in rows_for_fold[fold]:
            values = []
            for source_fold, table in sorted(available.items()):
                if example not in table:
                    raise MissingPrediction(
                        f"fold {source_fold} checkpoint lacks id {example}, "
                        f"needed to impute fold {fold}"
                    )
                values.append(table[example])
            filled[example] = float(np.mean(values))
        completed[fold] = filled
    return completed


def assemble_oof(models: dict[str, dict[int, dict[int, float]]],
                 fold_of_id: dict[int, int],
                 validation_folds,
                 targets: dict[int, float]) -> tuple[PredictionTable, np.ndarray]:
    """Build the meta-training table: rows are the validation folds'
    examples in ascending id order, one column per model, each cell taken
    from the checkpoint matching the row's fold. Returns (table, y)."""
    validation_folds = list(validation_folds)
    row_ids = sorted(i for i, f in fold_of_id.items() if f in set(validation_folds))
    if not row_ids:
        raise MissingPrediction("no examples fall in the validation folds")
    columns: dict[str, np.ndarray] = {}
    for name, per_fold in models.items():
        values = np.empty(len(row_ids))
        for r, example in enumerate(row_ids):
            fold = fold_of_id[example]
            table = per_fold.get(fold)
            if table is None or example not in table:
                raise MissingPrediction(f"model {name!r}: no prediction for id {example} (fold {fold})")
            values[r] = table[example]
        columns[name] = values
    y = np.empty(len(row_ids))
    for r, example in enumerate(row_ids):
        if example not in targets:
            raise MissingPrediction(f"no target for id {example}")
        y[r] = targets[example]
    fold_labels = np.asarray([fold_of_id[i] for i in row_ids], dtype=np.int64)
    table = PredictionTable(np.asarray(row_ids, dtype=np.int64), columns,
                            fold=fold_labels, split=["valid-fold"] * len(row_ids))
    return table, y


# --- Huber meta-regression ---------------------------------------------------


@dataclass
class MetaModel:
    weights: np.ndarray
    intercept: float
    scale: float
    epsilon: float
    fold: int | None = None
    columns: list[str] | None = None

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.weights.size:
            raise LengthMismatch(f"X has shape {X.shape}, model expects {self.weights.size} columns")
        return X @ self.weights + self.intercept


def _solve_scale(residuals: np.ndarray, epsilon: float, scale: float) -> float:
    # Fixed point of n * s^2 = sum(min(r^2, (eps*s)^2)); Huber's concomitant
    # scale condition mean(min((r/s)^2, eps^2)) = 1.
    n = residuals.size
    r2 = residuals * residuals
    for _ in range(100):
        new_sq = float(np.minimum(r2, (epsilon * scale) ** 2).sum() / n)
        new = math.sqrt(new_sq)
        if abs(new - scale) <= 1e-14 * max(1.0, scale):
            return new
        scale = new
    return scale


def fit_huber(X, y, epsilon: float = 1.35, ridge: float = 1e-4,
              max_iter: int = 200, tol: float = 1e-8) -> MetaModel:
    """Huber regression with jointly estimated (concomitant) scale, solved
    by iteratively reweighted least squares with a ridge penalty on the
    weights (never the intercept)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise LengthMismatch(f"X {X.shape} incompatible with y {y.shape}")
    n, p = X.shape
    if n < p:
        raise SingularSystem(f"{n} rows for {p} columns")
    design = np.column_stack([X, np.ones(n)])
    if np.linalg.matrix_rank(design) < p + 1:
        raise SingularSystem("design matrix (with intercept) is rank deficient")
    penalty = ridge * np.diag(np.r_[np.ones(p), 0.0])

    def weighted_solve(sample_weights: np.ndarray) -> np.ndarray:
        lhs = design.T @ (design * sample_weights[:, None]) + penalty
        rhs = design.T @ (sample_weights * y)
        try:
            return np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise SingularSystem("weighted normal equations are singular") from None

    theta = weighted_solve(np.ones(n))
    residuals = y - design @ theta
    scale = max(float(np.sqrt(np.mean(residuals**2))), 1e-12)
    scale = max(_solve_scale(residuals, epsilon, scale), 1e-12)
    delta = math.inf
    for _iteration in range(max_iter):
        t = np.abs(residuals) / scale
        weights = np.where(t <= epsilon, 1.0, epsilon / np.maximum(t, 1e-300))
        new_theta = weighted_solve(weights)
        residuals = y - design @ new_theta
        new_scale = max(_solve_scale(residuals, epsilon, scale), 1e-12)
        delta = max(float(np.max(np.abs(new_theta - theta))), abs(new_scale - scale))
        theta, scale = new_theta, new_scale
        if delta < tol:
            break
    else:
        raise NonConvergence(f"IRLS: {max_iter} iterations, last delta {delta:.3e}")
    return MetaModel(weights=theta[:p], intercept=float(theta[p]),
                     scale=scale, epsilon=epsilon)


@dataclass
class CrossValResult:
    fold_mae: dict[int, float]
    mean_mae: float
    models: dict[int, MetaModel]


def cross_validate_meta(X, y, fold_labels, epsilon: float = 1.35,
                        ridge: float = 1e-4) -> CrossValResult:
    """Leave-one-validation-fold-out metric: fit on the other folds' rows,
    score MAE on the held-out fold; also returns the per-fold models used
    later for grouped test prediction."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fold_labels = np.asarray(fold_labels, dtype=np.int64)
    fold_mae: dict[int, float] = {}
    models: dict[int, MetaModel] = {}
    for fold in sorted(set(fold_labels.tolist())):
        held = fold_labels == fold
        model = fit_huber(X[~held], y[~held], epsilon=epsilon, ridge=ridge)
        model.fold = int(fold)
        models[int(fold)] = model
        fold_mae[int(fold)] = float(np.mean(np.abs(model.predict(X[held]) - y[held])))
    return CrossValResult(fold_mae, float(np.mean(list(fold_mae.values()))), models)


def predict_test(test_matrices: dict[int, np.ndarray],
                 meta_models: dict[int, MetaModel]) -> np.ndarray:
    """Apply each fold's meta model to that fold group's test matrix and
    average the per-fold outputs."""
    if set(test_matrices) != set(meta_models):
        raise MissingPrediction(
            f"folds with test data {sorted(test_matrices)} != folds with models {sorted(meta_models)}"
        )
    outputs = [meta_models[fold].predict(test_matrices[fold]) for fold in sorted(test_matrices)]
    lengths = {len(o) for o in outputs}
    if len(lengths) != 1:
        raise LengthMismatch(f"per-fold test predictions differ in length: {sorted(lengths)}")
    return np.mean(outputs, axis=0)


# --- final blend ---------------------------------------------------------


@dataclass
class BlendSpec:
    """Extra full-train predictions folded into the ensemble output with
    weight w each; the ensemble itself has implicit weight 1."""

    weights: tuple[float, ...] = DEFAULT_BLEND_WEIGHTS

    def __post_init__(self):
        if not all(math.isfinite(w) for w in self.weights):
            raise ValueError("blend weights must be finite")
        if 1.0 + sum(self.weights) <= 0:
            raise ValueError("blend denominator 1 + sum(weights) must be positive")


def blend_full_train(ensemble, extras: list, spec: BlendSpec) -> np.ndarray:
    """(ensemble + sum_i w_i * extra_i) / (1 + sum_i w_i)."""
    ensemble = np.asarray(ensemble, dtype=np.float64)
    if len(extras) != len(spec.weights):
        raise LengthMismatch(f"{len(extras)} extra vectors for {len(spec.weights)} weights")
    total = ensemble.copy()
    for w, extra in zip(spec.weights, extras):
        extra = np.asarray(extra, dtype=np.float64)
        if extra.shape != ensemble.shape:
            raise LengthMismatch(f"extra shape {extra.shape} != ensemble {ensemble.shape}")
        total += w * extra
    return total / (1.0 + sum(spec.weights))


def blend_weights_from_table(weights_by_fold: dict[int, dict[str, float]],
                             dirichlet_column: str, group_column: str) -> tuple[float, float, float]:
    """Recompute the blend weights from a fitted weights table: the average
    weight of the Dirichlet column, and one third of the average weight of
    the grouped-average column (used twice)."""
    dirichlet = float(np.mean([w[dirichlet_column] for w in weights_by_fold.values()]))
    third = float(np.mean([w[group_column] for w in weights_by_fold.values()])) / 3.0
    return (dirichlet, third, third)


# --- manifest-driven pipeline -------------------------------------------------

MANIFEST_SCHEMA_VERSION = 1


@dataclass
class ModelEntry:
    name: str
    oof_files: dict[int, str]
    test_files: dict[int, str]


@dataclass
class StackManifest:
    validation_folds: tuple[int, ...]
    fold_file: str
    target_file: str
    models: list[ModelEntry]
    column_groups: list[tuple[str, list[str]]]
    epsilon: float = 1.35
    ridge: float = 1e-4


def load_manifest(path) -> StackManifest:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported manifest schema {doc.get('schema_version')}")
    try:
        models = [
            ModelEntry(
                name=m["name"],
                oof_files={int(k): v for k, v in m["oof"].items()},
                test_files={int(k): v for k, v in m.get("test", {}).items()},
            )
            for m in doc["models"]
        ]
        manifest = StackManifest(
            validation_folds=tuple(doc["validation_folds"]),
            fold_file=doc["fold_file"],
            target_file=doc["target_file"],
            models=models,
            column_groups=[(g["name"], list(g["members"])) for g in doc.get("column_groups", [])],
            epsilon=float(doc.get("epsilon", 1.35)),
            ridge=float(doc.get("ridge", 1e-4)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed manifest ({exc})") from None
    names = [m.name for m in manifest.models]
    if len(set(names)) != len(names):
        raise InputError(f"{path}: duplicate model names")
    return manifest


@dataclass
class StackResult:
    oof_table: PredictionTable
    feature_columns: list[str]
    cv: CrossValResult
    test_ids: np.ndarray | None
    test_predictions: np.ndarray | None
    weights_by_fold: dict[int, dict[str, float]]


def _apply_groups(table: PredictionTable, groups) -> PredictionTable:
    for new_name, members in groups:
        table = average_columns(table, members, new_name)
    return table


def run_stacking(manifest: StackManifest, base_dir=".") -> StackResult:
    """Execute the whole pipeline described by a manifest."""

    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(base_dir, rel)

    fold_of_id = {i: int(f) for i, f in load_labeled_csv(resolve(manifest.fold_file), "fold").items()}
    targets = load_labeled_csv(resolve(manifest.target_file), "target")
    validation_folds = list(manifest.validation_folds)
    rows_for_fold = {
        f: sorted(i for i, fold in fold_of_id.items() if fold == f) for f in validation_folds
    }

    oof_models: dict[str, dict[int, dict[int, float]]] = {}
    for entry in manifest.models:
        per_fold = {f: load_prediction_csv(resolve(p)) for f, p in entry.oof_files.items()}
        oof_models[entry.name] = impute_missing_fold(per_fold, validation_folds, rows_for_fold)

    oof_table, y = assemble_oof(oof_models, fold_of_id, validation_folds, targets)
    oof_table = _apply_groups(oof_table, manifest.column_groups)
    feature_columns = list(oof_table.columns)
    X = oof_table.matrix(feature_columns)
    cv = cross_validate_meta(X, y, oof_table.fold, epsilon=manifest.epsilon, ridge=manifest.ridge)
    for fold, model in cv.models.items():
        model.columns = feature_columns
    weights_by_fold = {
        fold: {col: float(w) for col, w in zip(feature_columns, model.weights)}
        for fold, model in cv.models.items()
    }

    test_ids = None
    test_predictions = None
    if all(entry.test_files for entry in manifest.models):
        all_ids: set[int] = set()
        raw_test: dict[str, dict[int, dict[int, float]]] = {}
        for entry in manifest.models:
            raw_test[entry.name] = {f: load_prediction_csv(resolve(p)) for f, p in entry.test_files.items()}
            for table in raw_test[entry.name].values():
                all_ids.update(table)
        test_ids = np.asarray(sorted(all_ids), dtype=np.int64)
        test_rows = {f: test_ids.tolist() for f in validation_folds}
        completed_test = {
            name: impute_missing_fold(per_fold, validation_folds, test_rows)
            for name, per_fold in raw_test.items()
        }
        test_matrices: dict[int, np.ndarray] = {}
        for fold in validation_folds:
            columns: dict[str, np.ndarray] = {}
            for entry in manifest.models:
                table = completed_test[entry.name][fold]
                try:
                    columns[entry.name] = np.asarray([table[i] for i in test_ids])
                except KeyError as exc:
                    raise MissingPrediction(
                        f"model {entry.name!r} fold {fold}: no test prediction for id {exc}"
                    ) from None
            fold_table = PredictionTable(test_ids, columns, split=["test"] * test_ids.size)
            fold_table = _apply_groups(fold_table, manifest.column_groups)
            test_matrices[fold] = fold_table.matrix(feature_columns)
        test_predictions = predict_test(test_matrices, cv.models)

    return StackResult(oof_table, feature_columns, cv, test_ids, test_predictions, weights_by_fold)


def stack_report(result: StackResult, manifest: StackManifest) -> dict:
    """JSON-ready report: per-fold weights table plus OOF MAE summary."""
    folds = sorted(result.cv.models)
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "columns": result.feature_columns,
        "folds": folds,
        "weights": {str(f): result.weights_by_fold[f] for f in folds},
        "intercept": {str(f): result.cv.models[f].intercept for f in folds},
        "scale": {str(f): result.cv.models[f].scale for f in folds},
        "fold_mae": {str(f): result.cv.fold_mae[f] for f in folds},
        "mean_oof_mae": result.cv.mean_mae,
        "epsilon": manifest.epsilon,
        "ridge": manifest.ridge,
    }
