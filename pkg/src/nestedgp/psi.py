"""Kernel expectations under diagonal Gaussian inputs.

For inputs ``h_n ~ N(mu_n, diag(s_n))`` and inducing inputs ``Z``:

    psi0[n]      = E[k(h_n, h_n)]
    Psi1[n, j]   = E[k(h_n, z_j)]
    Phi[n, j, l] = E[k(z_j, h_n) k(h_n, z_l)]

EQ closed forms (per input dimension q, then multiplied over q):

    Psi1: alpha * sqrt(l2 / (l2 + s)) * exp(-(mu - z)^2 / (2 (l2 + s)))
    Phi:  alpha^2 * exp(-(z_j - z_l)^2 / (4 l2))
                  * sqrt(l2 / (l2 + 2 s)) * exp(-(mu - zbar)^2 / (l2 + 2 s))

with ``zbar`` the midpoint of ``z_j`` and ``z_l``. The Phi form follows
from ``k(h, z_j) k(h, z_l) = alpha^2 exp(-(z_j - z_l)^2 / 4l2) exp(-(h - zbar)^2 / l2)``.
Both are certified against :func:`monte_carlo_psi` in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .kernels import EQ, KernelSpec, gram, gram_diag

PER_DATUM = "per-datum"
SUMMED = "summed"


@dataclass(frozen=True)
class GaussianMessage:
    """Independent per-datum Gaussians with diagonal covariance."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if mu.shape != s.shape:
            raise DimensionMismatch(f"means {mu.shape} and variances {s.shape} differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(s))):
            raise ValueError("message has non-finite entries")
        if np.any(s < 0):
            raise ValueError("message variances must be non-negative")
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", s)

    @classmethod
    def deterministic(cls, X) -> "GaussianMessage":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X, np.zeros_like(X))

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def Q(self) -> int:
        return self.means.shape[1]

    @property
    def is_deterministic(self) -> bool:
        return not np.any(self.variances)

    def rows(self, idx) -> "GaussianMessage":
        return GaussianMessage(self.means[idx], self.variances[idx])


@dataclass(frozen=True)
class PsiStats:
    """Kernel expectations under a Gaussian message.

    ``psi0`` (n,) and ``Psi1`` (n, m) are always per datum. ``Phi`` is
    (n, m, m) in PER_DATUM mode and the (m, m) sum over rows in SUMMED mode.
    """

    psi0: np.ndarray
    Psi1: np.ndarray
    Phi: np.ndarray
    mode: str = PER_DATUM

    def summed(self) -> "PsiStats":
        if self.mode == SUMMED:
            return self
        return PsiStats(self.psi0, self.Psi1, self.Phi.sum(0), SUMMED)


def _check(k: KernelSpec, Z: np.ndarray, q: GaussianMessage):
    if Z.ndim != 2 or Z.shape[1] != k.input_dim or q.Q != k.input_dim:
        raise DimensionMismatch(
            f"kernel dim {k.input_dim}, Z {Z.shape}, message dim {q.Q} disagree"
        )


def compute_psi(k: KernelSpec, Z, q: GaussianMessage, mode: str = PER_DATUM) -> PsiStats:
    Z = np.asarray(Z, dtype=float)
    _check(k, Z, q)
    mu, s = q.means, q.variances
    if q.is_deterministic:
        psi0 = gram_diag(k, mu)
        Psi1 = gram(k, mu, Z)
        Phi = Psi1[:, :, None] * Psi1[:, None, :]
    elif k.family == EQ:
        psi0 = np.full(q.n, k.variance)
        Psi1, Phi = _eq_psi(k, Z, mu, s)
    else:
        a = k.variance
        psi0 = a * ((mu**2).sum(1) + s.sum(1))
        Psi1 = a * mu @ Z.T
        ZM = mu @ Z.T
        Phi = a**2 * (ZM[:, :, None] * ZM[:, None, :] + np.einsum("jq,nq,lq->njl", Z, s, Z))
    stats = PsiStats(psi0, Psi1, Phi, PER_DATUM)
    return stats.summed() if mode == SUMMED else stats


def _eq_psi(k, Z, mu, s):
    n, m = mu.shape[0], Z.shape[0]
    log_p1 = np.full((n, m), np.log(k.variance))
    log_phi = np.full((n, m, m), 2.0 * np.log(k.variance))
    for qd, ls in enumerate(k.lengthscales):
        l2 = ls * ls
        z = Z[:, qd]
        d = l2 + s[:, qd]
        r = mu[:, qd, None] - z[None, :]
        log_p1 += 0.5 * np.log(l2 / d)[:, None] - r**2 / (2.0 * d[:, None])
        e = l2 + 2.0 * s[:, qd]
        zbar = 0.5 * (z[:, None] + z[None, :])
        delta = z[:, None] - z[None, :]
        w = mu[:, qd, None, None] - zbar[None]
        log_phi += (
            -(delta**2)[None] / (4.0 * l2)
            + 0.5 * np.log(l2 / e)[:, None, None]
            - w**2 / e[:, None, None]
        )
    return np.exp(log_p1), np.exp(log_phi)


@dataclass
class PsiGrads:
    log_variance: float
    log_lengthscales: np.ndarray
    Z: np.ndarray
    means: np.ndarray
    variances: np.ndarray


def psi_gradients(k: KernelSpec, Z, q: GaussianMessage, g_psi0, g_Psi1, g_Phi, stats=None) -> PsiGrads:
    """Reverse-mode gradients of ``<g_psi0, psi0> + <g_Psi1, Psi1> + <g_Phi, Phi>``.

    ``g_Phi`` may be per-datum (n, m, m) or a single (m, m) adjoint for the
    summed statistic.
    """
    Z = np.asarray(Z, dtype=float)
    _check(k, Z, q)
    n, m = q.n, Z.shape[0]
    g_psi0 = np.asarray(g_psi0, dtype=float)
    g_Psi1 = np.asarray(g_Psi1, dtype=float)
    g_Phi = np.asarray(g_Phi, dtype=float)
    if g_Phi.shape == (m, m):
        g_Phi = np.broadcast_to(g_Phi, (n, m, m))
    if g_psi0.shape != (n,) or g_Psi1.shape != (n, m) or g_Phi.shape != (n, m, m):
        raise DimensionMismatch("adjoint shapes do not match the statistics")
    if stats is None or stats.mode != PER_DATUM:
        stats = compute_psi(k, Z, q)
    if k.family == EQ:
        return _eq_grads(k, Z, q, g_psi0, g_Psi1, g_Phi, stats)
    return _linear_grads(k, Z, q, g_psi0, g_Psi1, g_Phi)


def _eq_grads(k, Z, q, g_psi0, g_Psi1, g_Phi, stats):
    mu, s = q.means, q.variances
    G1 = g_Psi1 * stats.Psi1
    GP = g_Phi * stats.Phi
    g_logvar = float(g_psi0.sum() * k.variance + G1.sum() + 2.0 * GP.sum())
    Q = k.input_dim
    g_ls = np.zeros(Q)
    gZ = np.zeros_like(Z)
    gmu = np.zeros_like(mu)
    gs = np.zeros_like(s)
    for qd, ls in enumerate(k.lengthscales):
        l2 = ls * ls
        z = Z[:, qd]
        d = (l2 + s[:, qd])[:, None]
        r = mu[:, qd, None] - z[None, :]
        rd = r / d
        gmu[:, qd] -= (G1 * rd).sum(1)
        gZ[:, qd] += (G1 * rd).sum(0)
        common = -0.5 / d + 0.5 * rd**2
        gs[:, qd] += (G1 * common).sum(1)
        g_l2 = (G1 * (0.5 / l2 + common)).sum()

        e = (l2 + 2.0 * s[:, qd])[:, None, None]
        zbar = 0.5 * (z[:, None] + z[None, :])
        delta = z[:, None] - z[None, :]
        w = mu[:, qd, None, None] - zbar[None]
        we = w / e
        gmu[:, qd] += (GP * (-2.0 * we)).sum((1, 2))
        gs[:, qd] += (GP * (-1.0 / e + 2.0 * we**2)).sum((1, 2))
        g_l2 += (GP * ((delta**2)[None] / (4.0 * l2 * l2) + 0.5 / l2 - 0.5 / e + we**2)).sum()
        # d/dz_j gets -delta/(2 l2) + w/e; d/dz_l gets +delta/(2 l2) + w/e
        first = GP * (-delta[None] / (2.0 * l2) + we)
        second = GP * (delta[None] / (2.0 * l2) + we)
        gZ[:, qd] += first.sum((0, 2)) + second.sum((0, 1))
        g_ls[qd] = g_l2 * 2.0 * l2
    return PsiGrads(g_logvar, g_ls, gZ, gmu, gs)


def _linear_grads(k, Z, q, g_psi0, g_Psi1, g_Phi):
    a = k.variance
    mu, s = q.means, q.variances
    psi0 = a * ((mu**2).sum(1) + s.sum(1))
    Psi1 = a * mu @ Z.T
    ZM = mu @ Z.T
    C_Phi = ZM[:, :, None] * ZM[:, None, :] + np.einsum("jq,nq,lq->njl", Z, s, Z)
    g_logvar = float(g_psi0 @ psi0 + (g_Psi1 * Psi1).sum() + 2.0 * a * a * (g_Phi * C_Phi).sum())

    gmu = 2.0 * a * g_psi0[:, None] * mu + a * g_Psi1 @ Z
    gs = a * np.broadcast_to(g_psi0[:, None], s.shape).copy()
    gZ = a * g_Psi1.T @ mu

    Gsym = g_Phi + np.swapaxes(g_Phi, 1, 2)
    # Phi_n = a^2 Z C_n Z^T with C_n = mu_n mu_n^T + diag(s_n)
    GZ = np.einsum("njl,lq->njq", Gsym, Z)
    gmu += a * a * np.einsum("njq,nj->nq", GZ, ZM)
    gs += 0.5 * a * a * np.einsum("njq,jq->nq", GZ, Z)
    gZ += a * a * (np.einsum("njq,nq,np->jp", GZ, mu, mu) + np.einsum("njq,nq->jq", GZ, s))
    return PsiGrads(g_logvar, np.zeros(k.input_dim), gZ, gmu, gs)


def monte_carlo_psi(k: KernelSpec, Z, q: GaussianMessage, samples: int = 200_000, seed=0,
                    block: int = 20_000):
    """Sample estimates of the psi statistics and their standard errors.

    Returns ``(stats, stderr)`` where ``stderr`` is a :class:`PsiStats` of
    per-entry standard errors. Rows with zero input variance are evaluated
    at the mean directly, so they match :func:`compute_psi` exactly.
    """
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    Z = np.asarray(Z, dtype=float)
    _check(k, Z, q)
    rng = np.random.default_rng(seed)
    n, m = q.n, Z.shape[0]
    psi0 = np.zeros(n)
    Psi1 = np.zeros((n, m))
    Phi = np.zeros((n, m, m))
    se0, se1, sePhi = np.zeros(n), np.zeros((n, m)), np.zeros((n, m, m))
    for i in range(n):
        mu, s = q.means[i], q.variances[i]
        if not np.any(s):
            det = compute_psi(k, Z, GaussianMessage.deterministic(mu[None]))
            psi0[i], Psi1[i], Phi[i] = det.psi0[0], det.Psi1[0], det.Phi[0]
            continue
        acc = [_Moments(), _Moments(), _Moments()]
        left = samples
        while left > 0:
            b = min(block, left)
            left -= b
            h = mu + np.sqrt(s) * rng.standard_normal((b, q.Q))
            kh = gram(k, h, Z)
            acc[0].add(gram_diag(k, h))
            acc[1].add(kh)
            acc[2].add(kh[:, :, None] * kh[:, None, :])
        (psi0[i], se0[i]), (Psi1[i], se1[i]), (Phi[i], sePhi[i]) = (a.result() for a in acc)
    return PsiStats(psi0, Psi1, Phi), PsiStats(se0, se1, sePhi)


class _Moments:
    """Streaming mean and standard error, shifted by the first block mean."""

    def __init__(self):
        self.count = 0
        self.shift = None

    def add(self, x):
        if self.shift is None:
            self.shift = x.mean(0)
            self.s1 = np.zeros_like(self.shift)
            self.s2 = np.zeros_like(self.shift)
        d = x - self.shift
        self.s1 = self.s1 + d.sum(0)
        self.s2 = self.s2 + (d * d).sum(0)
        self.count += x.shape[0]

    def result(self):
        c = self.count
        m1 = self.s1 / c
        var = np.maximum(self.s2 / c - m1 * m1, 0.0) * c / (c - 1)
        return self.shift + m1, np.sqrt(var / c)
