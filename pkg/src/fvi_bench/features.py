"""Feature maps for the linear-in-features regression model.

The workhorse is a set of radial basis function features (unnormalized
Gaussians, one per center, with a shared per-dimension lengthscale).  The
module also provides a k-means + median-heuristic featurizer for tabular
data, an import path for externally computed feature matrices, and a
numerical injectivity certificate: a subset of inputs whose feature vectors
are linearly independent, certifying that distinct weight vectors produce
distinct functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import qr as _scipy_qr

from .errors import (
    DimensionMismatchError,
    NonFiniteValueError,
    ParseError,
    UnknownInputError,
)

RANK_RTOL = 1e-8  # singular values below RANK_RTOL * sigma_max count as zero


@dataclass(frozen=True)
class RbfFeatureMap:
    """x -> exp(-0.5 * sum_d ((x_d - c_d) / ell_d)^2), one feature per center."""

    centers: np.ndarray  # (k, d)
    lengthscales: np.ndarray  # (d,), shared across centers

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        lengthscales = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        if centers.shape[0] < 1 or centers.shape[1] < 1:
            raise ValueError("need at least one center and one input dimension")
        if lengthscales.shape[0] != centers.shape[1]:
            raise DimensionMismatchError(
                f"lengthscales must have length {centers.shape[1]}, got {lengthscales.shape[0]}"
            )
        if np.any(lengthscales <= 0.0):
            raise ValueError("lengthscales must be strictly positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "lengthscales", lengthscales)

    @property
    def num_features(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return evaluate(self, inputs).values


@dataclass(frozen=True)
class FeatureMatrix:
    """Feature values with the inputs they were evaluated at; values[i, j] is
    feature j at input row i."""

    values: np.ndarray  # (n, k)
    source_inputs: np.ndarray  # (n, d)

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        inputs = np.atleast_2d(np.asarray(self.source_inputs, dtype=float))
        if values.shape[0] != inputs.shape[0]:
            raise DimensionMismatchError(
                f"{values.shape[0]} feature rows for {inputs.shape[0]} input rows"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "source_inputs", inputs)


def evaluate(feature_map: RbfFeatureMap, inputs: np.ndarray) -> FeatureMatrix:
    """Evaluate the RBF features at each input row."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, 1)
    if inputs.shape[1] != feature_map.input_dim:
        raise DimensionMismatchError(
            f"inputs have dimension {inputs.shape[1]}, centers have {feature_map.input_dim}"
        )
    scaled_x = inputs / feature_map.lengthscales
    scaled_c = feature_map.centers / feature_map.lengthscales
    sq_dists = (
        np.sum(scaled_x**2, axis=1)[:, None]
        - 2.0 * scaled_x @ scaled_c.T
        + np.sum(scaled_c**2, axis=1)[None, :]
    )
    values = np.exp(-0.5 * np.maximum(sq_dists, 0.0))
    return FeatureMatrix(values, inputs)


@dataclass(frozen=True)
class InjectivityCertificate:
    certified_rank: int
    witness_subset: np.ndarray | None  # indices into the candidate points, or None


def injectivity_certificate(
    feature_map: RbfFeatureMap, candidate_points: np.ndarray
) -> InjectivityCertificate:
    """Numerical rank of the candidate feature matrix, plus a witness.

    If the rank equals the number of features k, returns k candidate indices
    whose feature vectors are linearly independent (greedy pivoted QR
    selection), certifying the weight-to-function map injective.
    """
    feat = evaluate(feature_map, candidate_points).values
    singular_values = np.linalg.svd(feat, compute_uv=False)
    cutoff = RANK_RTOL * (singular_values[0] if singular_values.size else 0.0)
    rank = int(np.sum(singular_values > cutoff))
    if rank < feature_map.num_features:
        return InjectivityCertificate(rank, None)
    # Columns of feat.T are candidate feature vectors; pivoted QR picks a
    # well-conditioned spanning subset greedily.
    _, _, pivots = _scipy_qr(feat.T, mode="economic", pivoting=True)
    witness = np.sort(pivots[: feature_map.num_features])
    return InjectivityCertificate(rank, witness)


def independent_rows(matrix: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Indices of a maximal linearly independent subset of rows (pivoted QR),
    in ascending order."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return np.arange(0)
    _, r, pivots = _scipy_qr(matrix.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return np.arange(0)
    rank = int(np.sum(diag > rtol * diag[0]))
    return np.sort(pivots[:rank])


@dataclass(frozen=True)
class PrecomputedFeatureMap:
    """Feature map backed by a stored (inputs, values) table.

    Evaluation looks rows up by exact match against the stored inputs, which
    is the contract for externally computed features: they are only defined
    at the inputs they were computed for.
    """

    inputs: np.ndarray  # (n, d)
    values: np.ndarray  # (n, k)

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def __call__(self, query: np.ndarray) -> np.ndarray:
        query = np.atleast_2d(np.asarray(query, dtype=float))
        if query.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"query dimension {query.shape[1]} != stored {self.input_dim}"
            )
        index = {row.tobytes(): i for i, row in enumerate(np.ascontiguousarray(self.inputs))}
        rows = np.empty(query.shape[0], dtype=int)
        for i, row in enumerate(np.ascontiguousarray(query)):
            key = row.tobytes()
            if key not in index:
                raise UnknownInputError(
                    f"input row {i} was not among the precomputed feature inputs"
                )
            rows[i] = index[key]
        return self.values[rows]


def _read_numeric_csv(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ParseError(
                    f"{path}: expected {width} columns, got {len(cells)}", row=line_no
                )
            parsed = []
            for col_no, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: cell {cell!r} is not numeric", row=line_no, column=col_no
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NonFiniteValueError(
            f"{path}: non-finite value at row {bad[0] + 1}, column {bad[1] + 1}"
        )
    return values


def save_features(
    feature_matrix: FeatureMatrix, path: str | Path, inputs_path: str | Path | None = None
):
    """Write feature values (and inputs alongside) in the plain CSV schema."""
    path = Path(path)
    if inputs_path is None:
        inputs_path = path.with_suffix(".inputs.csv")
    np.savetxt(path, feature_matrix.values, delimiter=",", fmt="%.17g")
    np.savetxt(inputs_path, feature_matrix.source_inputs, delimiter=",", fmt="%.17g")


def load_features(
    path: str | Path, inputs_path: str | Path | None = None
) -> tuple[FeatureMatrix, PrecomputedFeatureMap]:
    """Load a feature matrix from CSV, with a lookup-backed map stub.

    The inputs CSV defaults to ``<path>.inputs.csv`` alongside; if absent,
    rows are indexed by position (inputs = row indices).
    """
    path = Path(path)
    values = _read_numeric_csv(path)
    if inputs_path is None:
        inputs_path = path.with_suffix(".inputs.csv")
    inputs_path = Path(inputs_path)
    if inputs_path.exists():
        inputs = _read_numeric_csv(inputs_path)
        if inputs.shape[0] != values.shape[0]:
            raise ParseError(
                f"{inputs_path}: {inputs.shape[0]} input rows for {values.shape[0]} feature rows"
            )
    else:
        inputs = np.arange(values.shape[0], dtype=float).reshape(-1, 1)
    matrix = FeatureMatrix(values, inputs)
    return matrix, PrecomputedFeatureMap(matrix.source_inputs, matrix.values)


def median_heuristic_lengthscales(
    inputs: np.ndarray, *, max_points: int = 1000, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Per-dimension median absolute pairwise difference; 1.0 for constant dims."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    n = inputs.shape[0]
    if n > max_points:
        rng = rng or np.random.default_rng(0)
        inputs = inputs[rng.choice(n, size=max_points, replace=False)]
    scales = np.empty(inputs.shape[1])
    iu = np.triu_indices(inputs.shape[0], k=1)
    for dim in range(inputs.shape[1]):
        diffs = np.abs(inputs[:, dim, None] - inputs[None, :, dim])[iu]
        median = float(np.median(diffs)) if diffs.size else 0.0
        scales[dim] = median if median > 0.0 else 1.0
    return scales


def fit_rbf_featurizer(
    inputs: np.ndarray, num_centers: int = 100, rng: np.random.Generator | None = None
) -> RbfFeatureMap:
    """RBF featurizer for tabular data: k-means centers on the inputs plus
    per-dimension median-heuristic lengthscales."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    rng = rng or np.random.default_rng(0)
    num_centers = min(num_centers, inputs.shape[0])
    centers, _ = kmeans2(inputs, num_centers, minit="++", rng=rng)
    return RbfFeatureMap(centers, median_heuristic_lengthscales(inputs, rng=rng))
