"""Maximizing the bound: L-BFGS, per-coordinate adaptive SGD and initialization."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .deep import AUTOENCODER, REGRESSION, DeepGpModel, propagate_message
from .errors import NonFiniteObjective
from .linalg import cholesky_with_jitter
from .params import ParameterVector, fixed_mask_for, pack, unpack, value_and_grad
from .psi import GaussianMessage
from .sparse import VariationalLayer

log = logging.getLogger(__name__)

LBFGS = "lbfgs"
SGD = "sgd-adaptive"


@dataclass
class OptimizerConfig:
    method: str = LBFGS
    max_iters: int = 1000
    history_size: int = 10
    step_size: float = 0.01
    decay: float = 0.9
    batch_size: int | None = None
    grad_tolerance: float = 1e-5
    objective_tolerance: float = 1e-9
    seed: int = 0
    wolfe_c2: float = 0.9

    def __post_init__(self):
        if self.method not in (LBFGS, SGD):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.max_iters < 1 or self.history_size < 1:
            raise ValueError("max_iters and history_size must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 1e-4 < self.wolfe_c2 < 1.0:
            raise ValueError("wolfe_c2 must lie in (1e-4, 1)")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")


@dataclass
class TraceRecord:
    iteration: int
    objective: float
    grad_norm: float
    seconds: float
    batch: int | None = None


@dataclass
class OptimizeResult:
    model: DeepGpModel
    trace: list
    reason: str
    objective: float
    line_search_failed: bool = False
    nonfinite: bool = False
    extra: dict = field(default_factory=dict)


def write_trace_csv(trace, path, timing=False):
    """Write the trace; wall-clock seconds only with ``timing`` so files stay reproducible."""
    with_batch = any(r.batch is not None for r in trace)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["iteration", "objective", "grad_norm"] + (["seconds"] if timing else [])
        w.writerow(header + (["batch"] if with_batch else []))
        for r in trace:
            row = [r.iteration, repr(r.objective), repr(r.grad_norm)]
            row += [f"{r.seconds:.6f}"] if timing else []
            w.writerow(row + ([r.batch] if with_batch else []))


# -- line search ----------------------------------------------------------------


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a, b], safeguarded to the interior."""
    lo, hi = min(a, b), max(a, b)
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc >= 0 and np.isfinite(disc):
        d2 = np.sign(b - a) * np.sqrt(disc)
        denom = gb - ga + 2.0 * d2
        if denom != 0:
            x = b - (b - a) * (gb + d2 - d1) / denom
            if lo + 0.1 * (hi - lo) <= x <= hi - 0.1 * (hi - lo):
                return x
    return 0.5 * (a + b)


def wolfe_line_search(phi, f0, g0, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=30):
    """Strong Wolfe line search on ``phi(alpha) -> (f, dphi, payload)``.

    Non-finite trial values are treated as overshooting. Returns
    ``(alpha, f, payload)`` or None.
    """
    evals = 0
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    best = None

    def zoom(lo, flo, glo, hi, fhi, ghi):
        nonlocal evals
        while evals < max_evals:
            if np.isfinite(fhi) and np.isfinite(ghi):
                aj = _cubic_min(lo, flo, glo, hi, fhi, ghi)
            else:
                aj = 0.5 * (lo + hi)
            fj, gj, pj = phi(aj)
            evals += 1
            if not np.isfinite(fj) or fj > f0 + c1 * aj * g0 or fj >= flo:
                hi, fhi, ghi = aj, fj, gj
            else:
                if abs(gj) <= -c2 * g0:
                    return aj, fj, pj
                if gj * (hi - lo) >= 0:
                    hi, fhi, ghi = lo, flo, glo
                lo, flo, glo = aj, fj, gj
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        # settle for any Armijo point found
        if lo > 0 and flo <= f0 + c1 * lo * g0:
            return lo, flo, None
        return None

    while evals < max_evals:
        fa, ga, pa = phi(a)
        evals += 1
        if not np.isfinite(fa) or fa > f0 + c1 * a * g0 or (evals > 1 and fa >= f_prev):
            res = zoom(a_prev, f_prev, g_prev, a, fa, ga)
            break
        if abs(ga) <= -c2 * g0:
            return a, fa, pa
        if ga >= 0:
            res = zoom(a, fa, ga, a_prev, f_prev, g_prev)
            break
        a_prev, f_prev, g_prev = a, fa, ga
        best = (a, fa, pa)
        a = 2.0 * a
    else:
        return best
    if res is not None and res[2] is None:
        fa, ga, pa = phi(res[0])
        return res[0], fa, pa
    return res


def lbfgs_minimize(fg, x0, mask=None, max_iters=1000, history_size=10,
                   grad_tolerance=1e-5, objective_tolerance=1e-9, callback=None,
                   wolfe=(1e-4, 0.9)):
    """Minimize ``fg(x) -> (f, g)`` with L-BFGS.

    Returns ``(x, f, g, reason, flags)``; accepted iterates never increase f.
    """
    x = np.asarray(x0, dtype=float).copy()
    mask = np.zeros(x.size, bool) if mask is None else np.asarray(mask, bool)
    f, g = fg(x)
    g = np.where(mask, 0.0, g)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective("objective is not finite at the starting point")
    S, Yh = [], []
    flags = {"line_search_failed": False, "nonfinite": False}
    reason = "max_iters"
    if np.max(np.abs(g), initial=0.0) <= grad_tolerance:
        return x, f, g, "gradient", flags
    for it in range(1, max_iters + 1):
        d = _two_loop(g, S, Yh)
        gd = g @ d
        if not gd < 0:
            S.clear(), Yh.clear()
            d, gd = -g, -(g @ g)
        alpha0 = 1.0 if S else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12))

        def phi(a, d=d):
            xt = x + a * d
            try:
                ft, gt = fg(xt)
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                return np.inf, np.inf, None
            if not np.isfinite(ft) or not np.all(np.isfinite(gt)):
                return np.inf, np.inf, None
            gt = np.where(mask, 0.0, gt)
            return ft, gt @ d, (xt, gt)

        res = wolfe_line_search(phi, f, gd, alpha0, *wolfe)
        if res is None and S:
            S.clear(), Yh.clear()
            d = -g
            res = wolfe_line_search(lambda a: phi(a, d), f, -(g @ g),
                                    min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12)), *wolfe)
        if res is None or res[2] is None:
            flags["line_search_failed"] = True
            reason = "line_search_failure"
            break
        _, f_new, (x_new, g_new) = res
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s), Yh.append(y)
            if len(S) > history_size:
                S.pop(0), Yh.pop(0)
        f_old = f
        x, f, g = x_new, f_new, g_new
        if callback is not None:
            callback(it, f, g)
        if np.max(np.abs(g), initial=0.0) <= grad_tolerance:
            reason = "gradient"
            break
        if abs(f_old - f) <= objective_tolerance * max(1.0, abs(f)):
            reason = "objective"
            break
    return x, f, g, reason, flags


def _two_loop(g, S, Yh):
    q = -g.copy()
    if not S:
        return q
    alphas = []
    for s, y in zip(reversed(S), reversed(Yh)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    q *= (S[-1] @ Yh[-1]) / (Yh[-1] @ Yh[-1])
    for (s, y), (rho, a) in zip(zip(S, Yh), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


# -- bound maximization -----------------------------------------------------------


def maximize(model, data, config: OptimizerConfig | None = None, objective: str = "deep_bound",
             fixed=None, mapper=map, chunks=None) -> OptimizeResult:
    """Maximize ``objective`` over all free parameters of ``model``.

    ``fixed`` lists roles or ``(layer, role)`` pairs held constant.
    """
    config = config or OptimizerConfig()
    pv0 = pack(model)
    layout = pv0.layout
    mask = fixed_mask_for(layout, fixed)
    start = time.perf_counter()
    if config.method == LBFGS:
        return _run_lbfgs(pv0, layout, mask, data, config, objective, mapper, chunks, start)
    return _run_sgd(pv0, layout, mask, data, config, start)


def _run_lbfgs(pv0, layout, mask, data, config, objective, mapper, chunks, start):
    trace = []

    def fg(x):
        model = unpack(ParameterVector(x, layout))
        val, g = value_and_grad(objective, model, data, chunks=chunks, mapper=mapper, fixed_mask=mask)
        return -val, -g.values

    def callback(it, f, g):
        trace.append(TraceRecord(it, float(-f), float(np.linalg.norm(g)), time.perf_counter() - start))

    f0, g0 = fg(pv0.values)
    trace.append(TraceRecord(0, float(-f0), float(np.linalg.norm(g0)), time.perf_counter() - start))
    x, f, g, reason, flags = lbfgs_minimize(
        fg, pv0.values, mask, config.max_iters, config.history_size,
        config.grad_tolerance, config.objective_tolerance, callback, (1e-4, config.wolfe_c2),
    )
    log.info("lbfgs stopped after %d iterations: %s (bound %.6g)", len(trace) - 1, reason, -f)
    return OptimizeResult(unpack(ParameterVector(x, layout)), trace, reason, float(-f),
                          flags["line_search_failed"], flags["nonfinite"])


def batch_schedule(n: int, batch_size: int, seed: int):
    """Endless reproducible sequence of ``(batch_id, indices)``; reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    batch_id = 0
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield batch_id, np.sort(perm[lo:lo + batch_size])
            batch_id += 1


def _run_sgd(pv0, layout, mask, data, config, start):
    X, Y = data
    n = np.asarray(Y).shape[0]
    bs = config.batch_size or n
    if bs > n:
        raise ValueError(f"batch_size {bs} exceeds the {n} data points")
    x = pv0.values.copy()
    acc = np.zeros_like(x)
    trace = []
    reason = "max_iters"
    nonfinite = False
    schedule = batch_schedule(n, bs, config.seed)
    value = np.nan
    for it in range(1, config.max_iters + 1):
        batch_id, idx = next(schedule)
        try:
            value, g = value_and_grad("deep_bound_minibatch", unpack(ParameterVector(x, layout)),
                                      data, batch=idx, n_total=n, fixed_mask=mask)
            grad = g.values
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            value, grad = np.nan, None
        if not np.isfinite(value) or grad is None or not np.all(np.isfinite(grad)):
            nonfinite = True
            reason = "non_finite"
            break
        acc = config.decay * acc + (1.0 - config.decay) * grad**2
        x = x + config.step_size * grad / (np.sqrt(acc) + 1e-8)
        trace.append(TraceRecord(it, float(value), float(np.linalg.norm(grad)),
                                 time.perf_counter() - start, batch_id))
    # on a non-finite step x still holds the last finite state
    return OptimizeResult(unpack(ParameterVector(x, layout)), trace, reason,
                          float(trace[-1].objective) if trace else float("nan"), False, nonfinite)


# -- initialization ---------------------------------------------------------------


@dataclass
class LayerSpec:
    """Architecture entry: kernel family, inducing count and output dimension.

    ``output_dim`` may be None for the last layer, where it is taken from the data.
    """

    kernel: str = "eq"
    m: int = 10
    output_dim: int | None = None
    tied: bool = False


def kmeanspp_subset(H, m, rng) -> np.ndarray:
    """Select ``m`` distinct rows of ``H`` by k-means++ (D^2) seeding."""
    n = H.shape[0]
    if m > n:
        raise ValueError(f"cannot select {m} inducing inputs from {n} points")
    chosen = [int(rng.integers(n))]
    d2 = ((H - H[chosen[0]]) ** 2).sum(1)
    while len(chosen) < m:
        w = d2.copy()
        w[chosen] = 0.0
        if w.sum() > 0:
            j = int(rng.choice(n, p=w / w.sum()))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            j = int(rng.choice(free))
        chosen.append(j)
        d2 = np.minimum(d2, ((H - H[j]) ** 2).sum(1))
    return H[np.array(chosen)].copy()


def _projection(H, q_out, rng):
    """Centred principal-direction map of H to q_out standardized columns."""
    Hc = H - H.mean(0)
    _, sv, Vt = np.linalg.svd(Hc, full_matrices=False)
    W = Vt[sv > 1e-12 * max(sv.max(initial=0.0), 1e-300)].T
    if W.shape[1] < q_out:
        W = np.hstack([W, rng.standard_normal((H.shape[1], q_out - W.shape[1]))])
    W = W[:, :q_out]
    proj = Hc @ W
    sd = proj.std(0)
    sd[sd == 0] = 1.0
    return lambda A: ((A - H.mean(0)) @ W) / sd


def initialize(X, Y, architecture, seed=0, mode=REGRESSION) -> DeepGpModel:
    """Data-driven starting point for training.

    Hidden layers start as a smooth standardized principal-direction map of
    their inputs (so the initial forward pass is informative); the last
    layer starts at ``M = 0``.
    """
    rng = np.random.default_rng(seed)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    H = Y if mode == AUTOENCODER else np.atleast_2d(np.asarray(X, dtype=float))
    y_var = float(np.mean(Y.var(0)))
    if y_var < 1e-6:
        warnings.warn("output variance is ~0; flooring last-layer variance at 1e-6")
        y_var = max(y_var, 1e-6)
    specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in architecture]
    layers = []
    q = GaussianMessage.deterministic(H)
    for i, spec in enumerate(specs):
        last = i == len(specs) - 1
        H = q.means
        q_in = H.shape[1]
        q_out = Y.shape[1] if last else spec.output_dim
        if q_out is None:
            raise ValueError(f"hidden layer {i} needs an output_dim")
        if last and spec.output_dim not in (None, Y.shape[1]):
            raise ValueError("last layer output_dim must match the data")
        Z = kmeanspp_subset(H, spec.m, rng)
        sd = H.std(0)
        if np.any(sd == 0):
            warnings.warn(f"layer {i} has a constant input column; its lengthscale is set to 1")
        ls = np.where(sd > 0, sd, 1.0)
        if spec.tied:
            ls = np.full(q_in, float(np.mean(ls)))
        variance = y_var if last else 1.0
        if kernels.family_name(spec.kernel) == kernels.EQ:
            kern = kernels.KernelSpec(kernels.EQ, variance, ls, spec.tied)
        else:
            kern = kernels.linear(variance, q_in)
        Kuu = kernels.gram(kern, Z)
        chol = cholesky_with_jitter(Kuu).chol
        if last:
            M = np.zeros((spec.m, q_out))
            noise = 0.1 * y_var
        else:
            # ridge fit so K^-1 M stays moderate when K is badly conditioned
            h = _projection(H, q_out, rng)(Z)
            M = Kuu @ np.linalg.solve(Kuu + 1e-2 * variance * np.eye(spec.m), h)
            noise = 1e-2
        L = 0.1 * chol
        layer = VariationalLayer(Z, M, L, noise, kern)
        layers.append(layer)
        if not last:
            q = propagate_message(layer, q)
    return DeepGpModel(tuple(layers), mode)
