"""Exponential-family natural parameters and matrix reshaping operators.

Every message passed on the factor graph is a natural-parameter vector of
either a multivariate Gaussian (in a vec- or vech-based sufficient-statistic
basis) or an inverse chi-squared density.  This module provides those
representations, the mappings between natural parameters and conventional
moments, and the vec/vech/duplication-matrix algebra that relates the two
Gaussian bases.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

# Relative eigenvalue floor below which a precision matrix is treated as
# numerically singular rather than pseudo-invertible.
_PRECISION_RTOL = 1e-10


class DegenerateMessageError(ValueError):
    """An accumulated natural-parameter vector does not define a proper density."""


def vec(a: np.ndarray) -> np.ndarray:
    """Stack the columns of a matrix into a single vector."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"vec expects a matrix, got ndim={a.ndim}")
    return a.reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Invert :func:`vec`.  Defaults to a square reshape."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if rows is None and cols is None:
        d = int(round(np.sqrt(v.size)))
        if d * d != v.size:
            raise ValueError(f"length {v.size} is not a perfect square")
        rows = cols = d
    elif rows is None or cols is None:
        raise ValueError("give both rows and cols, or neither")
    if rows * cols != v.size:
        raise ValueError(f"cannot reshape length {v.size} to {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def vech(a: np.ndarray) -> np.ndarray:
    """Stack the columns of the lower triangle (diagonal included) of a square matrix."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"vech expects a square matrix, got shape {a.shape}")
    d = a.shape[0]
    return np.concatenate([a[j:, j] for j in range(d)])


def _vech_index(i: int, j: int, d: int) -> int:
    # Position of entry (i, j), i >= j, in the column-wise lower-triangle stacking.
    return j * d - (j * (j - 1)) // 2 + (i - j)


@lru_cache(maxsize=None)
def duplication_matrix(d: int) -> np.ndarray:
    """D_d of order ``d``: D_d vech(A) = vec(A) for symmetric A."""
    if d < 1:
        raise ValueError("d must be >= 1")
    out = np.zeros((d * d, d * (d + 1) // 2))
    for j in range(d):
        for i in range(d):
            out[i + j * d, _vech_index(max(i, j), min(i, j), d)] = 1.0
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def moore_penrose_duplication(d: int) -> np.ndarray:
    """Moore-Penrose inverse of D_d: maps vec(A) back to vech(A) for symmetric A."""
    dup = duplication_matrix(d)
    # D'D is diagonal with entries 1 (diagonal positions) or 2, so this is exact.
    out = dup.T / np.diag(dup.T @ dup)[:, None]
    out.setflags(write=False)
    return out


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose to absorb round-off asymmetry."""
    return 0.5 * (a + a.T)


def invert_spd(matrix: np.ndarray, context: str = "matrix") -> np.ndarray:
    """Invert a symmetric positive definite matrix.

    Uses a Cholesky factorization and falls back to a pseudo-inverse when the
    factorization fails but the spectrum is still numerically positive.  Raises
    :class:`DegenerateMessageError` when the smallest eigenvalue is below
    ``1e-10`` times the largest.
    """
    matrix = symmetrize(np.asarray(matrix, dtype=float))
    try:
        cho = linalg.cho_factor(matrix, lower=True, check_finite=False)
        return symmetrize(linalg.cho_solve(cho, np.eye(matrix.shape[0]), check_finite=False))
    except linalg.LinAlgError:
        pass
    eigvals = linalg.eigvalsh(matrix)
    if eigvals[0] <= _PRECISION_RTOL * max(eigvals[-1], 0.0):
        raise DegenerateMessageError(
            f"{context} is not positive definite "
            f"(eigenvalue range [{eigvals[0]:.3e}, {eigvals[-1]:.3e}])"
        )
    return symmetrize(linalg.pinvh(matrix))


@dataclass(frozen=True)
class GaussianVecParams:
    """Gaussian natural parameters against sufficient statistics (x, vec(xx'))."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta1", np.asarray(self.eta1, dtype=float).reshape(-1))
        object.__setattr__(self, "eta2", np.asarray(self.eta2, dtype=float).reshape(-1))
        d = self.eta1.size
        if self.eta2.size != d * d:
            raise ValueError(f"eta2 has length {self.eta2.size}, expected {d * d}")

    @property
    def dim(self) -> int:
        return self.eta1.size

    def __add__(self, other: "GaussianVecParams") -> "GaussianVecParams":
        if not isinstance(other, GaussianVecParams):
            return NotImplemented
        return GaussianVecParams(self.eta1 + other.eta1, self.eta2 + other.eta2)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta1, self.eta2])


@dataclass(frozen=True)
class GaussianVechParams:
    """Gaussian natural parameters against sufficient statistics (x, vech(xx'))."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta1", np.asarray(self.eta1, dtype=float).reshape(-1))
        object.__setattr__(self, "eta2", np.asarray(self.eta2, dtype=float).reshape(-1))
        d = self.eta1.size
        if self.eta2.size != d * (d + 1) // 2:
            raise ValueError(f"eta2 has length {self.eta2.size}, expected {d * (d + 1) // 2}")

    @property
    def dim(self) -> int:
        return self.eta1.size

    def __add__(self, other: "GaussianVechParams") -> "GaussianVechParams":
        if not isinstance(other, GaussianVechParams):
            return NotImplemented
        return GaussianVechParams(self.eta1 + other.eta1, self.eta2 + other.eta2)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta1, self.eta2])


@dataclass(frozen=True)
class InvChiSqParams:
    """Inverse chi-squared natural parameters against sufficient statistics (log x, 1/x)."""

    eta1: float
    eta2: float

    def __post_init__(self):
        object.__setattr__(self, "eta1", float(self.eta1))
        object.__setattr__(self, "eta2", float(self.eta2))

    def __add__(self, other: "InvChiSqParams") -> "InvChiSqParams":
        if not isinstance(other, InvChiSqParams):
            return NotImplemented
        return InvChiSqParams(self.eta1 + other.eta1, self.eta2 + other.eta2)

    def as_vector(self) -> np.ndarray:
        return np.array([self.eta1, self.eta2])

    def is_proper(self) -> bool:
        """Whether these parameters define a normalizable density (shape and scale > 0)."""
        return self.eta1 < -1.0 and self.eta2 < 0.0


NaturalParams = GaussianVecParams | GaussianVechParams | InvChiSqParams


def gaussian_moments_to_vec(mean: np.ndarray, cov: np.ndarray) -> GaussianVecParams:
    """Map (mean, covariance) to vec-basis natural parameters."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    prec = invert_spd(cov, context="covariance")
    return GaussianVecParams(prec @ mean, -0.5 * vec(prec))


def gaussian_vec_to_moments(params: GaussianVecParams) -> tuple[np.ndarray, np.ndarray]:
    """Map vec-basis natural parameters back to (mean, covariance)."""
    prec = -2.0 * unvec(params.eta2)
    cov = invert_spd(prec, context="vec-basis precision")
    return cov @ params.eta1, cov


def gaussian_moments_to_vech(mean: np.ndarray, cov: np.ndarray) -> GaussianVechParams:
    """Map (mean, covariance) to vech-basis natural parameters."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    prec = invert_spd(cov, context="covariance")
    d = mean.size
    return GaussianVechParams(prec @ mean, duplication_matrix(d).T @ (-0.5 * vec(prec)))


def gaussian_vech_to_moments(params: GaussianVechParams) -> tuple[np.ndarray, np.ndarray]:
    """Map vech-basis natural parameters back to (mean, covariance)."""
    d = params.dim
    prec = -2.0 * unvec(moore_penrose_duplication(d).T @ params.eta2)
    cov = invert_spd(prec, context="vech-basis precision")
    return cov @ params.eta1, cov


def vec_to_vech_params(params: GaussianVecParams) -> GaussianVechParams:
    """Re-express vec-basis Gaussian parameters in the vech basis."""
    return GaussianVechParams(params.eta1, duplication_matrix(params.dim).T @ params.eta2)


def vech_to_vec_params(params: GaussianVechParams) -> GaussianVecParams:
    """Re-express vech-basis Gaussian parameters in the vec basis."""
    return GaussianVecParams(params.eta1, moore_penrose_duplication(params.dim).T @ params.eta2)


def invchisq_from_shape_scale(shape: float, scale: float) -> InvChiSqParams:
    """Natural parameters of an inverse chi-squared density with given shape and scale."""
    if shape <= 0 or scale <= 0:
        raise ValueError("shape and scale must be positive")
    return InvChiSqParams(-0.5 * (shape + 2.0), -0.5 * scale)


def invchisq_to_shape_scale(params: InvChiSqParams) -> tuple[float, float]:
    """Recover (shape, scale) from inverse chi-squared natural parameters."""
    if not params.is_proper():
        raise DegenerateMessageError(
            f"improper inverse chi-squared parameters ({params.eta1}, {params.eta2})"
        )
    return -2.0 * params.eta1 - 2.0, -2.0 * params.eta2


def invchisq_mean_reciprocal(params: InvChiSqParams) -> float:
    """E(1/x) under the inverse chi-squared density with the given natural parameters.

    Equals shape/scale; computed directly as (eta1 + 1)/eta2.
    """
    if params.eta2 == 0.0:
        raise DegenerateMessageError("inverse chi-squared parameters with eta2 = 0")
    return (params.eta1 + 1.0) / params.eta2
