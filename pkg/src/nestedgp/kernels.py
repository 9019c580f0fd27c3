"""Exponentiated quadratic and linear covariance functions.

Both kernels expose the Gram matrix, its diagonal and reverse-mode
gradients. Hyperparameter gradients are returned with respect to the
log-transformed values (log variance, log lengthscales), which is the
representation the optimizer works in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, NonPositiveHyperparameter

EQ = "eq"
LINEAR = "linear"
FAMILIES = (EQ, LINEAR)

_ALIASES = {
    "eq": EQ,
    "rbf": EQ,
    "exponentiated_quadratic": EQ,
    "exponentiatedquadratic": EQ,
    "linear": LINEAR,
}


def family_name(name: str) -> str:
    try:
        return _ALIASES[name.lower().replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown kernel family {name!r}") from None


@dataclass(frozen=True)
class KernelSpec:
    """Covariance family plus positive hyperparameters.

    ``lengthscales`` holds one entry per input dimension (ARD). With
    ``tied=True`` all entries must be equal and are optimized as a single
    parameter. Linear kernels carry lengthscales only to record the input
    dimension; they do not enter the covariance.
    """

    family: str
    variance: float
    lengthscales: np.ndarray = field(default_factory=lambda: np.ones(1))
    tied: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", family_name(self.family))
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance > 0:
            raise NonPositiveHyperparameter(f"kernel variance must be > 0, got {self.variance}")
        if ls.size == 0 or not np.all(ls > 0):
            raise NonPositiveHyperparameter(f"lengthscales must be > 0, got {ls}")
        if self.tied and not np.all(ls == ls[0]):
            raise ValueError("tied lengthscales must all be equal")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size

    def with_params(self, variance=None, lengthscales=None) -> "KernelSpec":
        return replace(
            self,
            variance=self.variance if variance is None else variance,
            lengthscales=self.lengthscales if lengthscales is None else lengthscales,
        )


def eq(variance=1.0, lengthscales=(1.0,), tied=False) -> KernelSpec:
    return KernelSpec(EQ, variance, np.asarray(lengthscales, dtype=float), tied)


def linear(variance=1.0, input_dim=1) -> KernelSpec:
    return KernelSpec(LINEAR, variance, np.ones(input_dim))


def _check(k: KernelSpec, *arrays):
    for A in arrays:
        if A.ndim != 2 or A.shape[1] != k.input_dim:
            raise DimensionMismatch(
                f"points of shape {A.shape} do not match kernel input dimension {k.input_dim}"
            )


def gram(k: KernelSpec, X: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    X2 = X if X2 is None else np.asarray(X2, dtype=float)
    _check(k, X, X2)
    if k.family == EQ:
        diff = (X[:, None, :] - X2[None, :, :]) / k.lengthscales
        return k.variance * np.exp(-0.5 * np.einsum("ijq,ijq->ij", diff, diff))
    return k.variance * (X @ X2.T)


def gram_diag(k: KernelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    _check(k, X)
    if k.family == EQ:
        return np.full(X.shape[0], k.variance)
    return k.variance * np.einsum("nq,nq->n", X, X)


@dataclass
class KernelGrads:
    """Gradients of a scalar objective with respect to kernel inputs.

    ``log_variance`` and ``log_lengthscales`` are in log-space;
    ``log_lengthscales`` is always per-dimension (tying is handled by the
    parameter packer).
    """

    log_variance: float
    log_lengthscales: np.ndarray
    X: np.ndarray
    X2: np.ndarray


def gram_gradients(k: KernelSpec, X, X2, upstream) -> KernelGrads:
    """Reverse-mode gradients of ``sum(upstream * gram(k, X, X2))``."""
    X = np.asarray(X, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    U = np.asarray(upstream, dtype=float)
    _check(k, X, X2)
    if U.shape != (X.shape[0], X2.shape[0]):
        raise DimensionMismatch(f"upstream shape {U.shape} does not match gram shape")
    K = gram(k, X, X2)
    G = U * K
    if k.family == EQ:
        ls2 = k.lengthscales**2
        diff = X[:, None, :] - X2[None, :, :]
        g_ls = np.einsum("ij,ijq->q", G, diff**2) / ls2
        gX = -np.einsum("ij,ijq->iq", G, diff) / ls2
        gX2 = np.einsum("ij,ijq->jq", G, diff) / ls2
        return KernelGrads(float(G.sum()), g_ls, gX, gX2)
    return KernelGrads(
        float(G.sum()),
        np.zeros(k.input_dim),
        k.variance * U @ X2,
        k.variance * U.T @ X,
    )


def gram_diag_gradients(k: KernelSpec, X, upstream) -> KernelGrads:
    X = np.asarray(X, dtype=float)
    u = np.asarray(upstream, dtype=float)
    d = gram_diag(k, X)
    if k.family == EQ:
        return KernelGrads(float(u @ d), np.zeros(k.input_dim), np.zeros_like(X), np.zeros_like(X))
    gX = 2.0 * k.variance * u[:, None] * X
    return KernelGrads(float(u @ d), np.zeros(k.input_dim), gX, np.zeros_like(X))
