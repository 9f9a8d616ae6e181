import numpy as np

from fvi_bench import gaussian


def random_spd_matrix(rng: np.random.Generator, n: int, *, min_eig: float = 0.1) -> np.ndarray:
    """Random symmetric positive definite matrix with eigenvalues >= min_eig."""
    a = rng.standard_normal((n, n))
    return a @ a.T + min_eig * np.eye(n)


def random_full_gaussian(rng: np.random.Generator, n: int) -> gaussian.GaussianDist:
    return gaussian.full_gaussian(rng.standard_normal(n), random_spd_matrix(rng, n))


def random_diagonal_gaussian(rng: np.random.Generator, n: int) -> gaussian.GaussianDist:
    return gaussian.diagonal_gaussian(rng.standard_normal(n), rng.uniform(0.2, 3.0, n))
