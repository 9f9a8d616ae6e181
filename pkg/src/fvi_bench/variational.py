"""Variational families, training objectives, and their analytic oracles.

Families are Gaussians over the regression weights: full covariance
(lower-triangular factor) or fully factorized (positive scales).  During
optimization both live in an unconstrained parameter vector where scale
magnitudes are log-transformed:

    full: [mean (k) | log diag of L (k) | strict lower triangle of L]
    ffg:  [mean (k) | log scales (k)]

Objectives maximize the evidence lower bound with one of four KL terms:
the exact weight-space KL, the marginal KL at a fixed measurement set, the
marginal KL at a freshly sampled measurement set each step, or the same with
the spectral score estimator supplying the KL gradient.

The marginal KL between pushforwards at measurement rows B is evaluated by
rotating onto an orthonormal basis V of the row space of B (after whitening
by the prior factor): the divergence reduces to a weight-space Gaussian KL
in the projected coordinates, which is algebraically identical to the
textbook trace/log-det expression built from (B B^T)^{-1} but avoids
squaring the condition number of B.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .blr import BlrModel, Dataset
from .errors import (
    DegenerateMarginalError,
    DimensionMismatchError,
    InvalidBoxError,
)
from .features import independent_rows
from .gaussian import CovKind, GaussianDist, cholesky_psd, diagonal_gaussian, full_gaussian
from .ssge import SsgeConfig, kl_gradient_estimate

_log = logging.getLogger(__name__)


class Family(enum.Enum):
    FULL = "full"
    FFG = "ffg"


@dataclass(frozen=True)
class VariationalState:
    """Parameters of the Gaussian approximate posterior over weights."""

    family: Family
    mean: np.ndarray
    scale: np.ndarray  # full: (k, k) lower-triangular factor; ffg: (k,) scales

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        scale = np.asarray(self.scale, dtype=float)
        k = mean.shape[0]
        if self.family is Family.FULL:
            if scale.shape != (k, k):
                raise DimensionMismatchError(f"scale must be ({k}, {k}), got {scale.shape}")
            if np.any(np.triu(scale, 1) != 0.0):
                raise ValueError("full-family scale must be lower triangular")
            if np.any(np.diag(scale) <= 0.0):
                raise ValueError("full-family scale needs a strictly positive diagonal")
        else:
            if scale.shape != (k,):
                raise DimensionMismatchError(f"scale must be ({k},), got {scale.shape}")
            if np.any(scale <= 0.0):
                raise ValueError("ffg scales must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_full(self) -> bool:
        return self.family is Family.FULL

    def cov_matrix(self) -> np.ndarray:
        if self.is_full:
            return self.scale @ self.scale.T
        return np.diag(self.scale**2)

    def to_gaussian(self) -> GaussianDist:
        if self.is_full:
            return full_gaussian(self.mean, self.cov_matrix())
        return diagonal_gaussian(self.mean, self.scale**2)

    def apply_scale(self, eps: np.ndarray) -> np.ndarray:
        """Map standard-normal rows through the scale factor (reparameterization)."""
        if self.is_full:
            return eps @ self.scale.T
        return eps * self.scale

    # --- unconstrained parameter vector -------------------------------------

    @staticmethod
    def num_params(family: Family, k: int) -> int:
        return 2 * k + (k * (k - 1)) // 2 if family is Family.FULL else 2 * k

    def params(self) -> np.ndarray:
        k = self.dim
        if self.is_full:
            lower = self.scale[np.tril_indices(k, -1)]
            return np.concatenate([self.mean, np.log(np.diag(self.scale)), lower])
        return np.concatenate([self.mean, np.log(self.scale)])

    def with_params(self, vec: np.ndarray) -> "VariationalState":
        k = self.dim
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params(self.family, k),):
            raise DimensionMismatchError(
                f"expected {self.num_params(self.family, k)} parameters, got {vec.shape}"
            )
        mean = vec[:k]
        if self.is_full:
            lower = np.zeros((k, k))
            lower[np.diag_indices(k)] = np.exp(vec[k : 2 * k])
            lower[np.tril_indices(k, -1)] = vec[2 * k :]
            return VariationalState(Family.FULL, mean, lower)
        return VariationalState(Family.FFG, mean, np.exp(vec[k : 2 * k]))

    def pack_grad(self, grad_mean: np.ndarray, grad_scale: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. (mean, natural scale) into parameter space."""
        k = self.dim
        if self.is_full:
            diag = np.diag(grad_scale) * np.diag(self.scale)
            return np.concatenate([grad_mean, diag, grad_scale[np.tril_indices(k, -1)]])
        return np.concatenate([grad_mean, grad_scale * self.scale])

    @staticmethod
    def prior_state(family: Family, k: int) -> "VariationalState":
        scale = np.eye(k) if family is Family.FULL else np.ones(k)
        return VariationalState(family, np.zeros(k), scale)


# --- measurement sets --------------------------------------------------------


class Provenance(enum.Enum):
    FROM_DATA = "data"
    UNIFORM_BOX = "box"


@dataclass(frozen=True)
class MeasurementSet:
    """Finite index set at which marginals are compared."""

    points: np.ndarray  # (m, d)
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if points.shape[0] < 1:
            raise ValueError("a measurement set needs at least one point")
        if not np.all(np.isfinite(points)):
            raise ValueError("measurement points must be finite")
        if len(self.provenance) != points.shape[0]:
            raise DimensionMismatchError("one provenance tag per point required")
        object.__setattr__(self, "points", points)

    @property
    def size(self) -> int:
        return self.points.shape[0]


def measurement_set_from_points(points: np.ndarray) -> MeasurementSet:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return MeasurementSet(points, (Provenance.UNIFORM_BOX,) * points.shape[0])


@dataclass(frozen=True)
class MeasurementPolicy:
    """How measurement sets are drawn: part from the data, part from a box."""

    total_size: int
    data_fraction: float
    box: np.ndarray  # (d, 2) rows of (lo, hi)
    resample_each_step: bool = True

    def __post_init__(self):
        if self.total_size < 1:
            raise ValueError("total_size must be >= 1")
        if not 0.0 <= self.data_fraction <= 1.0:
            raise ValueError("data_fraction must be in [0, 1]")
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        if box.shape[1] != 2:
            raise InvalidBoxError(f"box must be (d, 2), got {box.shape}")
        if np.any(box[:, 0] >= box[:, 1]):
            raise InvalidBoxError("box must satisfy lo < hi in every dimension")
        object.__setattr__(self, "box", box)


def box_from_inputs(inputs: np.ndarray, pad: float = 0.5) -> np.ndarray:
    """Bounding box of the rows; zero-width dimensions are padded by ``pad``."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    lo, hi = inputs.min(axis=0), inputs.max(axis=0)
    degenerate = lo >= hi
    lo = np.where(degenerate, lo - pad, lo)
    hi = np.where(degenerate, hi + pad, hi)
    return np.column_stack([lo, hi])


def sample_measurement_set(
    policy: MeasurementPolicy, data: Dataset | None, rng: np.random.Generator
) -> MeasurementSet:
    """floor(m * data_fraction) training inputs plus uniform box points."""
    num_data = math.floor(policy.total_size * policy.data_fraction)
    num_box = policy.total_size - num_data
    pieces, tags = [], []
    if num_data > 0:
        if data is None:
            raise ValueError("data_fraction > 0 requires a dataset")
        replace = num_data > data.size
        idx = rng.choice(data.size, size=num_data, replace=replace)
        pieces.append(data.inputs[idx])
        tags += [Provenance.FROM_DATA] * num_data
    if num_box > 0:
        lo, hi = policy.box[:, 0], policy.box[:, 1]
        pieces.append(rng.uniform(lo, hi, size=(num_box, policy.box.shape[0])))
        tags += [Provenance.UNIFORM_BOX] * num_box
    return MeasurementSet(np.vstack(pieces), tuple(tags))


# --- closed-form objective terms ---------------------------------------------


def _ell_terms(
    state: VariationalState,
    phi: np.ndarray,
    targets: np.ndarray,
    noise_variance: float,
    scale_factor: float,
) -> tuple[float, np.ndarray]:
    n_batch = phi.shape[0]
    residual = targets - phi @ state.mean
    gram = phi.T @ phi
    if state.is_full:
        half = gram @ state.scale
        trace = float(np.sum(state.scale * half))
        grad_scale = -scale_factor / noise_variance * np.tril(half)
    else:
        gram_diag = np.einsum("ii->i", gram)
        trace = float(np.sum(gram_diag * state.scale**2))
        grad_scale = -scale_factor / noise_variance * gram_diag * state.scale
    value = scale_factor * (
        -0.5 * n_batch * math.log(2.0 * math.pi * noise_variance)
        - 0.5 / noise_variance * (float(residual @ residual) + trace)
    )
    grad_mean = scale_factor / noise_variance * (phi.T @ residual)
    return value, state.pack_grad(grad_mean, grad_scale)


def expected_log_likelihood(
    state: VariationalState,
    model: BlrModel,
    data: Dataset,
    minibatch: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Closed-form E_q[log likelihood] and its gradient.

    With a minibatch, the term is rescaled by n/|batch| so it stays an
    unbiased estimate of the full-data value.
    """
    phi = model.features(data.inputs)
    targets = data.targets
    scale_factor = 1.0
    if minibatch is not None:
        minibatch = np.asarray(minibatch, dtype=int)
        if minibatch.size == 0 or minibatch.min() < 0 or minibatch.max() >= data.size:
            raise DimensionMismatchError("minibatch indices out of range")
        phi, targets = phi[minibatch], targets[minibatch]
        scale_factor = data.size / minibatch.size
    return _ell_terms(state, phi, targets, model.noise_variance, scale_factor)


def exact_kl(state: VariationalState, model: BlrModel) -> tuple[float, np.ndarray]:
    """Weight-space KL(q, prior) and its gradient."""
    k = state.dim
    if model.num_features != k:
        raise DimensionMismatchError(f"state has {k} weights, model has {model.num_features}")
    if model.has_standard_prior():
        mean_term = float(state.mean @ state.mean)
        grad_mean = state.mean.copy()
        if state.is_full:
            diag = np.diag(state.scale)
            value = 0.5 * (
                mean_term + float(np.sum(state.scale**2)) - k - 2.0 * float(np.sum(np.log(diag)))
            )
            grad_scale = state.scale - np.diag(1.0 / diag)
        else:
            value = 0.5 * (
                mean_term
                + float(np.sum(state.scale**2))
                - k
                - 2.0 * float(np.sum(np.log(state.scale)))
            )
            grad_scale = state.scale - 1.0 / state.scale
        return value, state.pack_grad(grad_mean, grad_scale)
    prior_chol = cholesky_psd(model.prior.cov_matrix(), what="prior covariance").matrix
    delta = state.mean - model.prior.mean
    white_delta = solve_triangular(prior_chol, delta, lower=True)
    grad_mean = solve_triangular(prior_chol.T, white_delta, lower=False)
    log_det_prior = 2.0 * float(np.sum(np.log(np.diag(prior_chol))))
    if state.is_full:
        white_scale = solve_triangular(prior_chol, state.scale, lower=True)
        trace = float(np.sum(white_scale**2))
        log_det_q = 2.0 * float(np.sum(np.log(np.diag(state.scale))))
        grad_scale = np.tril(
            solve_triangular(prior_chol.T, white_scale, lower=False)
        ) - np.diag(1.0 / np.diag(state.scale))
    else:
        precision = cho_solve((prior_chol, True), np.eye(k))
        trace = float(np.sum(np.diag(precision) * state.scale**2))
        log_det_q = 2.0 * float(np.sum(np.log(state.scale)))
        grad_scale = np.diag(precision) * state.scale - 1.0 / state.scale
    value = 0.5 * (
        trace + float(white_delta @ white_delta) - k + log_det_prior - log_det_q
    )
    return value, state.pack_grad(grad_mean, grad_scale)


class MarginalKl:
    """KL between variational and prior pushforwards at a measurement set.

    Dependent feature rows are dropped up front (pivoted QR), matching the
    assumption that the retained rows are linearly independent; the count is
    exposed as ``rows_dropped``.
    """

    def __init__(self, model: BlrModel, measurement_set: MeasurementSet):
        feature_rows = model.features(measurement_set.points)
        self.jitter_events = 0
        if model.has_standard_prior():
            whitened = feature_rows
        else:
            chol = cholesky_psd(model.prior.cov_matrix(), what="prior covariance")
            self.jitter_events += int(chol.jitter_used > 0.0)
            whitened = feature_rows @ chol.matrix
        kept = independent_rows(whitened)
        if kept.size == 0:
            raise DegenerateMarginalError("no linearly independent measurement rows")
        self.rows_kept = kept
        self.rows_dropped = feature_rows.shape[0] - kept.size
        if self.rows_dropped:
            _log.debug(
                "dropped %d linearly dependent measurement rows", self.rows_dropped
            )
        self.size = int(kept.size)
        _, _, v_rows = np.linalg.svd(whitened[kept], full_matrices=False)
        if model.has_standard_prior():
            self._transform = v_rows  # (m, k), orthonormal rows
        else:
            self._transform = solve_triangular(chol.matrix.T, v_rows.T, lower=False).T
        self._prior_mean = (
            model.prior.mean if not model.has_standard_prior() else np.zeros(feature_rows.shape[1])
        )

    @property
    def projection(self) -> np.ndarray:
        """Projection onto the span of the retained feature rows (weight space)."""
        return self._transform.T @ self._transform

    def value_and_grad(self, state: VariationalState) -> tuple[float, np.ndarray]:
        transform = self._transform
        shifted = transform @ (state.mean - self._prior_mean)
        if state.is_full:
            rotated_scale = transform @ state.scale  # (m, k)
        else:
            rotated_scale = transform * state.scale
        marginal_cov = rotated_scale @ rotated_scale.T
        try:
            lower = np.linalg.cholesky(marginal_cov)
        except np.linalg.LinAlgError:
            raise DegenerateMarginalError(
                "variational marginal is rank-deficient on the retained rows"
            ) from None
        trace = float(np.sum(rotated_scale**2))
        log_det = 2.0 * float(np.sum(np.log(np.diag(lower))))
        value = 0.5 * (float(shifted @ shifted) + trace - self.size - log_det)
        grad_mean = transform.T @ shifted
        solved = cho_solve((lower, True), rotated_scale)  # (m, k) = H^{-1} (T scale)
        if state.is_full:
            grad_scale = np.tril(transform.T @ (rotated_scale - solved))
        else:
            grad_scale = np.einsum("ai,ai->i", transform, rotated_scale - solved)
        return value, state.pack_grad(grad_mean, grad_scale)

    def value(self, state: VariationalState) -> float:
        return self.value_and_grad(state)[0]


def marginal_kl(
    state: VariationalState, model: BlrModel, measurement_set: MeasurementSet
) -> tuple[float, np.ndarray]:
    """KL(Q_A, P_A) between pushforward marginals, with gradient."""
    return MarginalKl(model, measurement_set).value_and_grad(state)


def fixed_a_optimal_mean(
    model: BlrModel, data: Dataset, measurement_set: MeasurementSet | None
) -> np.ndarray:
    """Stationary mean of the fixed-measurement-set objective, in closed form.

    Passing ``None`` drops the projection term entirely, which recovers the
    minimum-norm maximum-likelihood solution (the projection with a square
    full-rank feature matrix recovers MAP inference).
    """
    if not model.has_standard_prior():
        raise ValueError("closed-form optimal mean assumes the standard-normal prior")
    phi = model.features(data.inputs)
    gram = phi.T @ phi
    if measurement_set is None:
        projection = np.zeros_like(gram)
    else:
        projection = MarginalKl(model, measurement_set).projection
    # rcond matches the package-wide numerical-rank tolerance: directions the
    # data cannot identify are resolved to the minimum-norm solution rather
    # than amplified by roundoff-scale eigenvalues.
    return np.linalg.pinv(gram + model.noise_variance * projection, rcond=1e-8) @ (
        phi.T @ data.targets
    )


# --- objective kinds and the per-step engine ----------------------------------


@dataclass(frozen=True)
class Exact:
    """Maximize the ELBO with the exact weight-space KL."""


@dataclass(frozen=True)
class FixedA:
    """Marginal KL at a measurement set fixed for the whole run."""

    measurement_set: MeasurementSet


@dataclass(frozen=True)
class RandA:
    """Marginal KL at a measurement set resampled from the policy each step
    (a one-sample Monte Carlo estimate of the expected marginal KL)."""

    policy: MeasurementPolicy


@dataclass(frozen=True)
class Ssge:
    """Like RandA, but the KL gradient comes from the spectral score
    estimator; the reported KL value stays the closed form for logging."""

    policy: MeasurementPolicy
    config: SsgeConfig = field(default_factory=SsgeConfig)


ObjectiveKind = Exact | FixedA | RandA | Ssge


@dataclass(frozen=True)
class ObjectiveEval:
    """One objective evaluation: the ELBO estimate, its two terms, and the
    gradient in unconstrained parameter space."""

    elbo_estimate: float
    expected_ll: float
    kl_term: float
    grad: np.ndarray
    rows_dropped: int = 0
    jitter_events: int = 0


class MinibatchSchedule:
    """Without-replacement batches, reshuffled at every epoch boundary."""

    def __init__(self, data_size: int, batch_size: int):
        if not 1 <= batch_size <= data_size:
            raise ValueError("batch size must be in [1, data size]")
        self.data_size = data_size
        self.batch_size = batch_size
        self._order: np.ndarray | None = None
        self._cursor = 0

    def next_batch(self, rng: np.random.Generator) -> np.ndarray:
        if self._order is None or self._cursor >= self.data_size:
            self._order = rng.permutation(self.data_size)
            self._cursor = 0
        batch = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


class Objective:
    """Bundles an objective kind with a model and dataset for a training run.

    Feature matrices and Gram products are computed once; measurement sets
    are sampled per step where the kind calls for it.
    """

    def __init__(
        self,
        kind: ObjectiveKind,
        model: BlrModel,
        data: Dataset,
        minibatch_size: int | None = None,
    ):
        self.kind = kind
        self.model = model
        self.data = data
        self._phi = model.features(data.inputs)
        self._schedule = (
            MinibatchSchedule(data.size, minibatch_size) if minibatch_size else None
        )
        self._fixed_marginal = (
            MarginalKl(model, kind.measurement_set) if isinstance(kind, FixedA) else None
        )
        self._cached_marginal: tuple[MarginalKl, MeasurementSet] | None = None

    def _marginal_for_step(self, rng: np.random.Generator) -> tuple[MarginalKl, MeasurementSet]:
        policy = self.kind.policy
        if not policy.resample_each_step and self._cached_marginal is not None:
            return self._cached_marginal
        drawn = sample_measurement_set(policy, self.data, rng)
        prepared = (MarginalKl(self.model, drawn), drawn)
        if not policy.resample_each_step:
            self._cached_marginal = prepared
        return prepared

    def value_and_grad(
        self, state: VariationalState, rng: np.random.Generator, step: int = 0
    ) -> ObjectiveEval:
        batch = self._schedule.next_batch(rng) if self._schedule is not None else None
        phi = self._phi if batch is None else self._phi[batch]
        targets = self.data.targets if batch is None else self.data.targets[batch]
        scale_factor = 1.0 if batch is None else self.data.size / batch.size
        ell, ell_grad = _ell_terms(
            state, phi, targets, self.model.noise_variance, scale_factor
        )
        rows_dropped = jitter_events = 0
        if isinstance(self.kind, Exact):
            kl, kl_grad = exact_kl(state, self.model)
        elif isinstance(self.kind, FixedA):
            kl, kl_grad = self._fixed_marginal.value_and_grad(state)
            rows_dropped = self._fixed_marginal.rows_dropped
            jitter_events = self._fixed_marginal.jitter_events
        elif isinstance(self.kind, RandA):
            op, _ = self._marginal_for_step(rng)
            kl, kl_grad = op.value_and_grad(state)
            rows_dropped, jitter_events = op.rows_dropped, op.jitter_events
        elif isinstance(self.kind, Ssge):
            op, drawn = self._marginal_for_step(rng)
            kl = op.value(state)
            kl_grad = kl_gradient_estimate(state, self.model, drawn, self.kind.config, rng)
            rows_dropped, jitter_events = op.rows_dropped, op.jitter_events
        else:
            raise TypeError(f"unknown objective kind {type(self.kind).__name__}")
        return ObjectiveEval(ell - kl, ell, kl, ell_grad - kl_grad, rows_dropped, jitter_events)


def objective_value_and_grad(
    kind: ObjectiveKind,
    state: VariationalState,
    model: BlrModel,
    data: Dataset,
    rng: np.random.Generator,
    step: int = 0,
) -> ObjectiveEval:
    """One-off objective evaluation (training runs should reuse an Objective)."""
    return Objective(kind, model, data).value_and_grad(state, rng, step)
