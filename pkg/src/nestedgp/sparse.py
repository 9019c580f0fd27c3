"""Single-layer sparse GP: variational layer, bounds and the exact-GP oracle.

Output columns share one inducing covariance ``S = L L^T``; every term
that involves ``S`` therefore picks up a factor of the output dimension.
Trace penalties use the ``1 / (2 sigma^2)`` coefficient throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch
from .kernels import KernelSpec, gram, gram_diag
from .linalg import SpdMatrix, cholesky_with_jitter, log_det, tri_solve

LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class VariationalLayer:
    """One sparse GP layer with ``q(u_d) = N(M[:, d], L L^T)``."""

    Z: np.ndarray
    M: np.ndarray
    L: np.ndarray
    noise_var: float
    kernel: KernelSpec

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        M = np.asarray(self.M, dtype=float)
        if M.ndim == 1:
            M = M[:, None]
        L = np.tril(np.asarray(self.L, dtype=float))
        m = Z.shape[0]
        if m < 1:
            raise DimensionMismatch("a layer needs at least one inducing input")
        if Z.shape[1] != self.kernel.input_dim:
            raise DimensionMismatch(f"Z has {Z.shape[1]} columns, kernel expects {self.kernel.input_dim}")
        if M.shape[0] != m or L.shape != (m, m):
            raise DimensionMismatch(f"M {M.shape} / L {L.shape} inconsistent with m={m}")
        if not self.noise_var > 0:
            raise ValueError(f"noise variance must be > 0, got {self.noise_var}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def output_dim(self) -> int:
        return self.M.shape[1]

    @property
    def S(self) -> np.ndarray:
        return self.L @ self.L.T

    def kuu(self) -> SpdMatrix:
        return cholesky_with_jitter(gram(self.kernel, self.Z))

    def replace(self, **kw) -> "VariationalLayer":
        return replace(self, **kw)


@dataclass(frozen=True)
class TcvReport:
    trace_sigma: float
    per_datum: np.ndarray


@dataclass(frozen=True)
class SviReport:
    """Uncollapsed bound with its terms; ``total = likelihood - trace - kl - tcv``."""

    total: float
    likelihood: float
    trace: float
    kl: float
    tcv: float
    per_datum: np.ndarray


def _check_xy(layer, X, Y=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != layer.input_dim:
        raise DimensionMismatch(f"X has {X.shape[1]} columns, layer expects {layer.input_dim}")
    if Y is None:
        return X, None
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (X.shape[0], layer.output_dim):
        raise DimensionMismatch(f"Y {Y.shape} does not match X rows {X.shape[0]} / outputs {layer.output_dim}")
    return X, Y


def _projections(layer, X, Kuu=None):
    Kuu = layer.kuu() if Kuu is None else Kuu
    Kuf = gram(layer.kernel, layer.Z, X)
    V = tri_solve(Kuu.chol, Kuf)  # Lk^{-1} K_uf
    return Kuu, Kuf, V


def tcv(layer: VariationalLayer, X) -> TcvReport:
    """Diagonal of ``K_ff - K_fu K_uu^{-1} K_uf`` without forming it."""
    X, _ = _check_xy(layer, X)
    _, _, V = _projections(layer, X)
    per = gram_diag(layer.kernel, X) - np.einsum("mn,mn->n", V, V)
    return TcvReport(float(per.sum()), per)


def _gauss_loglik_rows(Y, mean, noise_var):
    D = Y.shape[1]
    return -0.5 * D * (LOG2PI + np.log(noise_var)) - 0.5 * ((Y - mean) ** 2).sum(1) / noise_var


def conditional_bound(layer: VariationalLayer, X, Y) -> float:
    """Bound on ``log p(Y | u = M)``: Gaussian fit at the inducing mean minus the TCV penalty."""
    X, Y = _check_xy(layer, X, Y)
    Kuu, Kuf, _ = _projections(layer, X)
    mean = Kuf.T @ Kuu.solve(layer.M)
    t = tcv(layer, X)
    return float(_gauss_loglik_rows(Y, mean, layer.noise_var).sum()
                 - 0.5 * layer.output_dim * t.trace_sigma / layer.noise_var)


def collapsed_bound(layer: VariationalLayer, X, Y) -> float:
    """Collapsed bound with ``q(u)`` integrated out; O(n m^2), ignores M and L."""
    X, Y = _check_xy(layer, X, Y)
    n, D = Y.shape
    s2 = layer.noise_var
    Kuu, Kuf, V = _projections(layer, X)
    A = V / np.sqrt(s2)
    B = cholesky_with_jitter(np.eye(layer.m) + A @ A.T)
    c = tri_solve(B.chol, A @ Y) / np.sqrt(s2)
    logdet = n * np.log(s2) + log_det(B)
    quad = ((Y**2).sum() - (c**2).sum() * s2) / s2
    lml = -0.5 * (n * D * LOG2PI + D * logdet + quad)
    trace_sigma = float(gram_diag(layer.kernel, X).sum() - (V**2).sum())
    return float(lml - 0.5 * D * trace_sigma / s2)


def kl_gaussian(M, L, Kuu: SpdMatrix) -> float:
    """Sum over output columns of ``KL(N(M[:, d], L L^T) || N(0, Kuu))``."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    L = np.tril(np.asarray(L, dtype=float))
    m, D = M.shape
    if L.shape != (m, m) or Kuu.dim != m:
        raise DimensionMismatch("KL arguments have inconsistent sizes")
    W = tri_solve(Kuu.chol, L)
    a = tri_solve(Kuu.chol, M)
    logdet_S = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    kl = 0.5 * (D * ((W**2).sum() - m + log_det(Kuu) - logdet_S) + (a**2).sum())
    return float(kl)


def svi_bound(layer: VariationalLayer, X, Y) -> SviReport:
    """Uncollapsed bound with explicit ``q(u)``; data terms factorize over rows."""
    X, Y = _check_xy(layer, X, Y)
    D = layer.output_dim
    s2 = layer.noise_var
    Kuu, Kuf, V = _projections(layer, X)
    mean = Kuf.T @ Kuu.solve(layer.M)
    lik_rows = _gauss_loglik_rows(Y, mean, s2)
    # per-row tr(S K^-1 k_u k_u^T K^-1) = || L^T K^-1 k_u ||^2
    W = layer.L.T @ Kuu.solve(Kuf)
    trace_rows = 0.5 * D * np.einsum("mn,mn->n", W, W) / s2
    tcv_rows = 0.5 * D * (gram_diag(layer.kernel, X) - np.einsum("mn,mn->n", V, V)) / s2
    kl = kl_gaussian(layer.M, layer.L, Kuu)
    per = lik_rows - trace_rows - tcv_rows
    lik, tr, tc = float(lik_rows.sum()), float(trace_rows.sum()), float(tcv_rows.sum())
    return SviReport(float(per.sum() - kl), lik, tr, kl, tc, per)


def optimal_q(layer: VariationalLayer, X, Y) -> VariationalLayer:
    """Return ``layer`` with the ``q(u)`` that maximizes :func:`svi_bound`.

    ``S* = K (K + K_uf K_fu / s2)^{-1} K`` and ``M* = S* K^{-1} K_uf Y / s2``;
    at this point the uncollapsed bound equals :func:`collapsed_bound`.
    """
    X, Y = _check_xy(layer, X, Y)
    s2 = layer.noise_var
    Kuu, Kuf, _ = _projections(layer, X)
    K = Kuu.values + Kuu.jitter_applied * np.eye(layer.m)
    Lam = cholesky_with_jitter(K + Kuf @ Kuf.T / s2)
    S = K @ Lam.solve(K)
    M = K @ Lam.solve(Kuf @ Y) / s2
    L = cholesky_with_jitter(0.5 * (S + S.T)).chol
    return layer.replace(M=M, L=L)


MAX_EXACT_N = 2000


def exact_gp_lml(kernel: KernelSpec, noise_var: float, X, Y) -> float:
    """Exact log marginal likelihood, O(n^3); a test oracle only."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, D = Y.shape
    if n > MAX_EXACT_N:
        raise ValueError(f"exact GP oracle limited to n <= {MAX_EXACT_N}, got {n}")
    C = cholesky_with_jitter(gram(kernel, X) + noise_var * np.eye(n))
    a = tri_solve(C.chol, Y)
    return float(-0.5 * (n * D * LOG2PI + D * log_det(C) + (a**2).sum()))
