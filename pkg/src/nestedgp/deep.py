"""Deep GP stack, Gaussian message propagation and the nested bound.

Per layer, with ``Ki = K_uu^{-1}``, ``A = Ki M``, ``B = Ki S Ki`` and psi
statistics ``(psi0, P, Phi)`` of the incoming message, the per-datum pieces
are

    t1[n]    = tr(Ki Phi_n)          t2[n] = tr(B Phi_n)
    t3[n, d] = a_d^T Phi_n a_d       v[n]  = p_n^T B p_n
    mean     = P A
    var      = s2 + psi0 - t1 + t2 + t3 - mean^2

and the bound collects, with ``c = 1 / (2 s2)`` and ``D`` output columns,

    compression  c D (psi0 - t1)
    propagation  c (D t2 + sum_d t3 - D v - sum_d mean^2)      (stochastic input only)
    likelihood   sum_d log N(y_d | mean_d, s2) - c D v         (last layer only)

The ``- c D v`` piece is the ``tr(S K^-1 Psi^T Psi K^-1)`` term of the
uncollapsed single-layer bound; keeping it makes a one-layer stack
reproduce :func:`nestedgp.sparse.svi_bound`. The layer-1 input is
deterministic, where the propagation term vanishes identically and the
compression term is the first-layer total conditional variance.

Every data-dependent term is a sum over rows, so evaluation is split into a
shared per-layer preparation, independent row-chunk passes, and one shared
reverse step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, EmptyBatch, InvalidLayerIndex
from .kernels import gram_gradients
from .linalg import log_det
from .psi import GaussianMessage, compute_psi, psi_gradients
from .sparse import LOG2PI, VariationalLayer

REGRESSION = "regression"
AUTOENCODER = "autoencoder"
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class DeepGpModel:
    layers: tuple
    mode: str = REGRESSION

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DimensionMismatch("a model needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.output_dim != b.input_dim:
                raise DimensionMismatch(
                    f"layer output dim {a.output_dim} does not feed input dim {b.input_dim}"
                )
        if self.mode not in (REGRESSION, AUTOENCODER):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == AUTOENCODER and layers[0].input_dim != layers[-1].output_dim:
            raise DimensionMismatch("autoencoder input and output dimensions must agree")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim


@dataclass(frozen=True)
class BoundReport:
    """Nested bound split into its terms.

    ``total = likelihood_term - sum(kl_terms) - sum(compression_terms)
    - sum(propagation_terms)``; ``per_datum_partials`` sums to the
    data-dependent part (everything except KL).
    """

    total: float
    likelihood_term: float
    kl_terms: np.ndarray
    compression_terms: np.ndarray
    propagation_terms: np.ndarray
    per_datum_partials: np.ndarray
    clamp_count: int = 0

    @property
    def data_term(self) -> float:
        return float(self.total + self.kl_terms.sum())


# -- shared per-layer quantities ------------------------------------------------


@dataclass
class _Shared:
    layer: VariationalLayer
    Kuu: object
    Ki: np.ndarray
    A: np.ndarray
    S: np.ndarray
    B: np.ndarray
    kl: float
    include_kl: bool = True
    Mw: np.ndarray | None = None
    Lw: np.ndarray | None = None


def _prepare(model: DeepGpModel, include_kl: bool = True) -> list:
    out = []
    for layer in model.layers:
        Kuu = layer.kuu()
        Ki = Kuu.inverse()
        A = Kuu.solve(layer.M)
        S = layer.S
        B = Ki @ S @ Ki
        B = 0.5 * (B + B.T)
        D, m = layer.output_dim, layer.m
        kl = 0.0
        if include_kl:
            logdet_S = 2.0 * np.sum(np.log(np.abs(np.diag(layer.L))))
            kl = 0.5 * (D * (np.sum(Ki * S) - m + log_det(Kuu) - logdet_S) + np.sum(layer.M * A))
        # whitened factors C^-1 M and C^-1 L keep the forward traces accurate
        # to ~eps * sqrt(cond K) instead of ~eps * cond K
        Mw = _tri(Kuu.chol, layer.M)
        Lw = _tri(Kuu.chol, layer.L)
        out.append(_Shared(layer, Kuu, Ki, A, S, B, float(kl), include_kl, Mw, Lw))
    return out


def _tri(C, B):
    return sla.solve_triangular(C, B, lower=True, check_finite=False)


# -- one layer on a block of rows ----------------------------------------------


@dataclass
class _LayerPass:
    q_in: GaussianMessage
    stats: object
    mean: np.ndarray
    var_raw: np.ndarray
    t3: np.ndarray
    v: np.ndarray
    comp_rows: np.ndarray
    prop_rows: np.ndarray
    lik_rows: np.ndarray | None
    stochastic_input: bool
    resid: np.ndarray | None = None


def _layer_forward(sh: _Shared, q_in: GaussianMessage, Y=None) -> _LayerPass:
    layer = sh.layer
    stats = compute_psi(layer.kernel, layer.Z, q_in)
    P, Phi, psi0 = stats.Psi1, stats.Phi, stats.psi0
    D = layer.output_dim
    s2 = layer.noise_var
    c = 0.5 / s2
    C = sh.Kuu.chol
    n, m = P.shape
    Pw = _tri(C, P.T).T
    # C^-1 Phi_n C^-T for every row, as two batched triangular solves
    half = _tri(C, Phi.transpose(1, 0, 2).reshape(m, n * m)).reshape(m, n, m)
    Phiw = _tri(C, half.transpose(2, 1, 0).reshape(m, n * m)).reshape(m, n, m).transpose(1, 2, 0)
    mean = Pw @ sh.Mw
    t1 = np.einsum("njj->n", Phiw)
    LwtPhi = np.einsum("jk,njl->nkl", sh.Lw, Phiw)
    t2 = np.einsum("nkl,lk->n", LwtPhi, sh.Lw)
    t3 = np.einsum("njl,jd,ld->nd", Phiw, sh.Mw, sh.Mw)
    v = ((Pw @ sh.Lw) ** 2).sum(1)
    var_raw = s2 + (psi0 - t1)[:, None] + t2[:, None] + t3 - mean**2
    comp_rows = c * D * (psi0 - t1)
    stochastic = not q_in.is_deterministic
    if stochastic:
        prop_rows = c * (D * t2 + t3.sum(1) - D * v - (mean**2).sum(1))
    else:
        prop_rows = np.zeros(q_in.n)
    lik_rows = resid = None
    if Y is not None:
        resid = Y - mean
        lik_rows = -0.5 * D * (LOG2PI + np.log(s2)) - c * (resid**2).sum(1) - c * D * v
    return _LayerPass(q_in, stats, mean, var_raw, t3, v, comp_rows, prop_rows, lik_rows,
                      stochastic, resid)


def _clamp(var_raw):
    clamped = var_raw < VARIANCE_FLOOR
    return np.where(clamped, VARIANCE_FLOOR, var_raw), int(clamped.sum())


def propagate_message(layer: VariationalLayer, q_in: GaussianMessage, return_clamps=False):
    """Moment-matched diagonal Gaussian output of ``layer`` for input ``q_in``.

    Output variances include the layer noise and are floored at 1e-12; the
    number of floored entries is returned when ``return_clamps`` is set.
    """
    if q_in.Q != layer.input_dim:
        raise DimensionMismatch(f"message dim {q_in.Q} != layer input dim {layer.input_dim}")
    sh = _prepare(DeepGpModel((layer,)))[0]
    lp = _layer_forward(sh, q_in)
    var, clamps = _clamp(lp.var_raw)
    out = GaussianMessage(lp.mean, var)
    return (out, clamps) if return_clamps else out


def layer_penalties(layer: VariationalLayer, q_in: GaussianMessage):
    """Compression and propagation penalties of ``layer`` for input ``q_in``.

    These are the per-layer terms the nested bound subtracts; propagation is
    zero for a deterministic input.
    """
    if q_in.Q != layer.input_dim:
        raise DimensionMismatch(f"message dim {q_in.Q} != layer input dim {layer.input_dim}")
    sh = _prepare(DeepGpModel((layer,)), include_kl=False)[0]
    lp = _layer_forward(sh, q_in)
    return float(lp.comp_rows.sum()), float(lp.prop_rows.sum())


# -- chunk pass -------------------------------------------------------------------


@dataclass
class _ChunkResult:
    rows: np.ndarray
    lik_rows: np.ndarray
    comp: list
    prop: list
    clamps: int
    grads: list | None = None


def _chunk_forward(shared, X, Y):
    q = GaussianMessage.deterministic(X)
    passes = []
    clamps = 0
    last = len(shared) - 1
    for i, sh in enumerate(shared):
        lp = _layer_forward(sh, q, Y if i == last else None)
        passes.append(lp)
        if i < last:
            var, c = _clamp(lp.var_raw)
            clamps += c
            q = GaussianMessage(lp.mean, var)
    return passes, clamps


def _chunk_backward(shared, passes, scale):
    """Adjoints of ``scale * data terms`` w.r.t. the shared per-layer quantities."""
    grads = [None] * len(shared)
    g_mean_out = g_var_out = None
    last = len(shared) - 1
    for i in range(last, -1, -1):
        sh, lp = shared[i], passes[i]
        layer = sh.layer
        D = layer.output_dim
        s2 = layer.noise_var
        c = 0.5 / s2
        n = lp.q_in.n
        P, Phi, psi0 = lp.stats.Psi1, lp.stats.Phi, lp.stats.psi0
        prop = 1.0 if lp.stochastic_input else 0.0
        final = i == last
        if final:
            gs = np.zeros((n, D))
            g_mean = scale * lp.resid / s2
        else:
            gs = np.where(lp.var_raw < VARIANCE_FLOOR, 0.0, g_var_out)
            g_mean = g_mean_out.copy()
        gs_sum = gs.sum(1)
        g_psi0 = -scale * c * D + gs_sum
        g_t1 = scale * c * D - gs_sum
        g_t2 = -scale * c * D * prop + gs_sum
        g_t3 = -scale * c * prop + gs
        g_v = np.full(n, scale * c * D * (prop - (1.0 if final else 0.0)))
        g_mean += scale * 2.0 * c * prop * lp.mean - 2.0 * gs * lp.mean

        # d(-c x)/ds2 = c x / s2 for every c-weighted penalty
        g_s2 = (lp.comp_rows.sum() + lp.prop_rows.sum()) * scale / s2 + gs.sum()
        if final:
            g_s2 += scale * (c * ((lp.resid**2).sum() + D * lp.v.sum()) / s2 - 0.5 * D * n / s2)

        g_Phi = (g_t1[:, None, None] * sh.Ki + g_t2[:, None, None] * sh.B
                 + np.einsum("nd,jd,ld->njl", g_t3, sh.A, sh.A))
        g_Ki = np.einsum("n,njl->jl", g_t1, Phi)
        g_B = np.einsum("n,njl->jl", g_t2, Phi) + P.T @ (g_v[:, None] * P)
        g_A = 2.0 * np.einsum("njl,ld,nd->jd", Phi, sh.A, g_t3) + P.T @ g_mean
        g_P = 2.0 * g_v[:, None] * (P @ sh.B) + g_mean @ sh.A.T
        pg = psi_gradients(layer.kernel, layer.Z, lp.q_in, g_psi0, g_P, g_Phi, lp.stats)
        grads[i] = {
            "Ki": g_Ki, "B": g_B, "A": g_A, "s2": float(g_s2),
            "log_variance": pg.log_variance, "log_lengthscales": pg.log_lengthscales, "Z": pg.Z,
        }
        g_mean_out, g_var_out = pg.means, pg.variances
    return grads


def _eval_chunk(shared, X, Y, rows, scale, want_grad):
    passes, clamps = _chunk_forward(shared, X[rows], Y[rows])
    res = _ChunkResult(
        rows=rows,
        lik_rows=scale * passes[-1].lik_rows,
        comp=[scale * lp.comp_rows for lp in passes],
        prop=[scale * lp.prop_rows for lp in passes],
        clamps=clamps,
    )
    if want_grad:
        res.grads = _chunk_backward(shared, passes, scale)
    return res


def _through_jitter(Kuu, g_K):
    """Chain through the jitter ``rung * mean(diag K)``, which moves with K."""
    scale = float(np.mean(np.diag(Kuu.values)))
    if Kuu.jitter_applied == 0.0 or scale <= 0.0:
        return g_K
    rung = Kuu.jitter_applied / scale
    return g_K + (rung / Kuu.dim) * np.trace(g_K) * np.eye(Kuu.dim)


def _shared_backward(shared, g_data):
    """Combine reduced data adjoints with the KL terms into parameter gradients.

    Returns one dict per layer with keys ``log_variance``, ``log_lengthscales``
    (per dimension), ``Z``, ``M``, ``L`` (lower-triangular, w.r.t. raw entries)
    and ``log_noise``.
    """
    out = []
    for sh, g in zip(shared, g_data):
        layer = sh.layer
        D = layer.output_dim
        Ki, S, M, L = sh.Ki, sh.S, layer.M, layer.L
        g_Ki = g["Ki"] + g["A"] @ M.T + g["B"] @ Ki @ S + S @ Ki @ g["B"]
        g_M = Ki @ g["A"]
        g_S = Ki @ g["B"] @ Ki
        if sh.include_kl:
            g_Ki = g_Ki - 0.5 * D * S - 0.5 * M @ M.T
            g_M = g_M - sh.A
            g_S = g_S - 0.5 * D * Ki
        g_K = -Ki @ g_Ki @ Ki
        if sh.include_kl:
            g_K = g_K - 0.5 * D * Ki
        g_K = _through_jitter(sh.Kuu, g_K)
        g_L = np.tril((g_S + g_S.T) @ L)
        if sh.include_kl:
            g_L[np.diag_indices_from(g_L)] += D / np.diag(L)
        kg = gram_gradients(layer.kernel, layer.Z, layer.Z, g_K)
        out.append({
            "log_variance": g["log_variance"] + kg.log_variance,
            "log_lengthscales": g["log_lengthscales"] + kg.log_lengthscales,
            "Z": g["Z"] + kg.X + kg.X2,
            "M": g_M,
            "L": g_L,
            "log_noise": g["s2"] * layer.noise_var,
        })
    return out


def _sum_grads(results):
    total = None
    for r in results:
        if total is None:
            total = [dict(g) for g in r.grads]
            continue
        for acc, g in zip(total, r.grads):
            for key, val in g.items():
                acc[key] = acc[key] + val
    return total


def _assemble(model, shared, results, n_rows):
    depth = model.depth
    per = np.zeros(n_rows)
    lik = 0.0
    comp = np.zeros(depth)
    prop = np.zeros(depth)
    clamps = 0
    offset = 0
    for r in results:
        rows_part = r.lik_rows - sum(r.comp) - sum(r.prop)
        per[offset:offset + len(rows_part)] = rows_part
        offset += len(rows_part)
        lik += r.lik_rows.sum()
        for i in range(depth):
            comp[i] += r.comp[i].sum()
            prop[i] += r.prop[i].sum()
        clamps += r.clamps
    kl = np.array([sh.kl for sh in shared])
    total = lik - kl.sum() - comp.sum() - prop[1:].sum()
    return BoundReport(float(total), float(lik), kl, comp, prop[1:], per, clamps)


def _data_arrays(model, X, Y):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if model.mode == AUTOENCODER and X is None:
        X = Y
    if X is None:
        raise DimensionMismatch("regression mode requires inputs X")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape != (Y.shape[0], model.input_dim) or Y.shape[1] != model.output_dim:
        raise DimensionMismatch(
            f"data X {X.shape}, Y {Y.shape} do not fit model dims {model.input_dim} -> {model.output_dim}"
        )
    return X, Y


def evaluate(model: DeepGpModel, X, Y, chunks: Sequence[np.ndarray] | None = None,
             scale: float = 1.0, want_grad: bool = False,
             mapper: Callable = map, include_kl: bool = True):
    """Evaluate the (optionally scaled) nested bound over row chunks.

    ``chunks`` are index arrays whose concatenation lists the rows used;
    chunk results are reduced in the given order. Returns ``(report, grads)``
    with ``grads`` None unless requested.
    """
    X, Y = _data_arrays(model, X, Y)
    if chunks is None:
        chunks = [np.arange(Y.shape[0])]
    chunks = [np.asarray(c, dtype=int) for c in chunks]
    shared = _prepare(model, include_kl)
    results = list(mapper(lambda rows: _eval_chunk(shared, X, Y, rows, scale, want_grad), chunks))
    report = _assemble(model, shared, results, sum(len(c) for c in chunks))
    grads = _shared_backward(shared, _sum_grads(results)) if want_grad else None
    return report, grads


def deep_bound(model: DeepGpModel, X, Y) -> BoundReport:
    """Nested variational compression bound on ``log p(Y | X)``.

    In autoencoder mode ``X`` may be None, in which case ``Y`` is also the input.
    """
    return evaluate(model, X, Y)[0]


def deep_bound_minibatch(model: DeepGpModel, batch_indices, X, Y, n_total=None) -> BoundReport:
    """Unbiased minibatch estimate: data terms scaled by ``n_total / |batch|``, KL unscaled."""
    idx = np.asarray(batch_indices, dtype=int).ravel()
    X, Y = _data_arrays(model, X, Y)
    if idx.size == 0:
        raise EmptyBatch("minibatch is empty")
    if idx.min() < 0 or idx.max() >= Y.shape[0]:
        raise IndexError("batch index out of range")
    n_total = Y.shape[0] if n_total is None else n_total
    return evaluate(model, X, Y, [idx], scale=n_total / idx.size)[0]


def _forward_messages(model, q, upto):
    for layer in model.layers[:upto]:
        q = propagate_message(layer, q)
    return q


def predict(model: DeepGpModel, X_star) -> GaussianMessage:
    """Predictive means and variances (layer noise included) at ``X_star``."""
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    if X_star.shape[1] != model.input_dim:
        raise DimensionMismatch(f"X_star has {X_star.shape[1]} columns, model expects {model.input_dim}")
    return _forward_messages(model, GaussianMessage.deterministic(X_star), model.depth)


def encode(model: DeepGpModel, Y, layer: int = 1) -> GaussianMessage:
    """Latent message after ``layer`` layers (1-based) for autoencoder data ``Y``."""
    if model.mode != AUTOENCODER:
        raise ValueError("encode requires an autoencoder-mode model")
    if not 1 <= layer <= model.depth:
        raise InvalidLayerIndex(f"layer index must lie in 1..{model.depth}, got {layer}")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return _forward_messages(model, GaussianMessage.deterministic(Y), layer)
