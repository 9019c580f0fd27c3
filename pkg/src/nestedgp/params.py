"""Flat unconstrained parameter vectors, gradients and finite-difference checks.

Positive quantities (kernel variance, lengthscales, noise variances and the
diagonal of each ``L``) are stored as logs; everything else is stored raw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import deep, sparse
from .deep import DeepGpModel
from .errors import LayoutMismatch
from .kernels import EQ, KernelSpec
from .sparse import VariationalLayer

ROLES = ("kernel-variance-log", "lengthscales-log", "Z", "M", "L-packed", "noise-var-log")
OBJECTIVES = ("svi_bound", "deep_bound", "deep_bound_minibatch", "collapsed_bound", "conditional_bound")


@dataclass(frozen=True)
class Segment:
    layer: int
    role: str
    start: int
    size: int


@dataclass(frozen=True)
class LayerShape:
    family: str
    tied: bool
    m: int
    input_dim: int
    output_dim: int


@dataclass(frozen=True)
class Layout:
    segments: tuple
    layers: tuple
    mode: str

    @property
    def size(self) -> int:
        last = self.segments[-1]
        return last.start + last.size

    def segment(self, layer: int, role: str) -> Segment | None:
        for seg in self.segments:
            if seg.layer == layer and seg.role == role:
                return seg
        return None

    def slice(self, layer: int, role: str) -> slice:
        seg = self.segment(layer, role)
        if seg is None:
            return slice(0, 0)
        return slice(seg.start, seg.start + seg.size)


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: Layout
    fixed_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.fixed_mask is None:
            self.fixed_mask = np.zeros(self.values.size, dtype=bool)
        if self.values.size != self.layout.size or self.fixed_mask.size != self.layout.size:
            raise LayoutMismatch(f"vector of size {self.values.size} vs layout size {self.layout.size}")

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=float).copy(), self.layout, self.fixed_mask.copy())

    def __getitem__(self, key):
        layer, role = key
        return self.values[self.layout.slice(layer, role)]


def _as_model(model) -> DeepGpModel:
    if isinstance(model, VariationalLayer):
        return DeepGpModel((model,))
    return model


def _n_ls(kernel: KernelSpec) -> int:
    if kernel.family != EQ:
        return 0
    return 1 if kernel.tied else kernel.input_dim


def layout_of(model) -> Layout:
    model = _as_model(model)
    segs, shapes = [], []
    pos = 0
    for i, layer in enumerate(model.layers):
        m, qi, qo = layer.m, layer.input_dim, layer.output_dim
        sizes = (1, _n_ls(layer.kernel), m * qi, m * qo, m * (m + 1) // 2, 1)
        for role, size in zip(ROLES, sizes):
            if size:
                segs.append(Segment(i, role, pos, size))
                pos += size
        shapes.append(LayerShape(layer.kernel.family, layer.kernel.tied, m, qi, qo))
    return Layout(tuple(segs), tuple(shapes), model.mode)


def fixed_mask_for(layout: Layout, fixed) -> np.ndarray:
    """Boolean mask from an iterable of roles or ``(layer, role)`` pairs."""
    mask = np.zeros(layout.size, dtype=bool)
    for item in fixed or ():
        for seg in layout.segments:
            if item == seg.role or item == (seg.layer, seg.role):
                mask[seg.start:seg.start + seg.size] = True
    return mask


def pack(model, fixed=None) -> ParameterVector:
    model = _as_model(model)
    layout = layout_of(model)
    vals = np.empty(layout.size)
    for i, layer in enumerate(model.layers):
        k = layer.kernel
        vals[layout.slice(i, "kernel-variance-log")] = np.log(k.variance)
        if _n_ls(k):
            ls = k.lengthscales[:1] if k.tied else k.lengthscales
            vals[layout.slice(i, "lengthscales-log")] = np.log(ls)
        vals[layout.slice(i, "Z")] = layer.Z.ravel()
        vals[layout.slice(i, "M")] = layer.M.ravel()
        L = layer.L.copy()
        d = np.diag_indices(layer.m)
        L[d] = np.log(L[d])
        vals[layout.slice(i, "L-packed")] = L[np.tril_indices(layer.m)]
        vals[layout.slice(i, "noise-var-log")] = np.log(layer.noise_var)
    return ParameterVector(vals, layout, fixed_mask_for(layout, fixed))


def unpack(pv: ParameterVector, layout: Layout | None = None) -> DeepGpModel:
    if layout is not None and layout != pv.layout:
        raise LayoutMismatch("parameter vector layout does not match the requested layout")
    lay = pv.layout
    if pv.values.size != lay.size:
        raise LayoutMismatch(f"vector of size {pv.values.size} vs layout size {lay.size}")
    v = pv.values
    layers = []
    for i, sh in enumerate(lay.layers):
        variance = float(np.exp(v[lay.slice(i, "kernel-variance-log")][0]))
        if sh.family == EQ:
            ls = np.exp(v[lay.slice(i, "lengthscales-log")])
            if sh.tied:
                ls = np.full(sh.input_dim, ls[0])
        else:
            ls = np.ones(sh.input_dim)
        kernel = KernelSpec(sh.family, variance, ls, sh.tied)
        Z = v[lay.slice(i, "Z")].reshape(sh.m, sh.input_dim)
        M = v[lay.slice(i, "M")].reshape(sh.m, sh.output_dim)
        L = np.zeros((sh.m, sh.m))
        L[np.tril_indices(sh.m)] = v[lay.slice(i, "L-packed")]
        d = np.diag_indices(sh.m)
        L[d] = np.exp(L[d])
        noise = float(np.exp(v[lay.slice(i, "noise-var-log")][0]))
        layers.append(VariationalLayer(Z.copy(), M.copy(), L, noise, kernel))
    return DeepGpModel(tuple(layers), lay.mode)


def _flatten_grads(model: DeepGpModel, layout: Layout, grads) -> np.ndarray:
    out = np.zeros(layout.size)
    for i, (layer, g) in enumerate(zip(model.layers, grads)):
        out[layout.slice(i, "kernel-variance-log")] = g["log_variance"]
        if _n_ls(layer.kernel):
            gl = g["log_lengthscales"]
            out[layout.slice(i, "lengthscales-log")] = [gl.sum()] if layer.kernel.tied else gl
        out[layout.slice(i, "Z")] = g["Z"].ravel()
        out[layout.slice(i, "M")] = g["M"].ravel()
        gL = g["L"].copy()
        d = np.diag_indices(layer.m)
        gL[d] *= np.diag(layer.L)  # chain through exp on the diagonal
        out[layout.slice(i, "L-packed")] = gL[np.tril_indices(layer.m)]
        out[layout.slice(i, "noise-var-log")] = g["log_noise"]
    return out


def objective_value(objective: str, model, data, batch=None, n_total=None) -> float:
    """Plain (gradient-free) evaluation of a named objective."""
    X, Y = data
    model = _as_model(model)
    if objective == "deep_bound":
        return deep.deep_bound(model, X, Y).total
    if objective == "deep_bound_minibatch":
        return deep.deep_bound_minibatch(model, batch, X, Y, n_total).total
    _single_layer(model, objective)
    layer = model.layers[0]
    if objective == "svi_bound":
        return sparse.svi_bound(layer, X, Y).total
    if objective == "collapsed_bound":
        return sparse.collapsed_bound(layer, X, Y)
    if objective == "conditional_bound":
        return sparse.conditional_bound(layer, X, Y)
    raise ValueError(f"unknown objective {objective!r}")


def _single_layer(model, objective):
    if model.depth != 1:
        raise ValueError(f"{objective} is defined for single-layer models only")


def value_and_grad(objective: str, model, data, *, batch=None, n_total=None,
                   chunks=None, mapper: Callable = map, fixed_mask=None):
    """Objective value and its gradient in the packed unconstrained coordinates.

    Returns ``(value, ParameterVector)``; entries under ``fixed_mask`` are zeroed.
    """
    X, Y = data
    model = _as_model(model)
    layout = layout_of(model)
    if objective in ("deep_bound", "svi_bound"):
        if objective == "svi_bound":
            _single_layer(model, objective)
        report, grads = deep.evaluate(model, X, Y, chunks, want_grad=True, mapper=mapper)
        value = report.total
    elif objective == "deep_bound_minibatch":
        idx = np.asarray(batch, dtype=int).ravel()
        if idx.size == 0:
            raise deep.EmptyBatch("minibatch is empty")
        n = np.asarray(Y).shape[0] if n_total is None else n_total
        report, grads = deep.evaluate(model, X, Y, [idx], scale=n / idx.size, want_grad=True)
        value = report.total
    elif objective == "conditional_bound":
        _single_layer(model, objective)
        L0 = np.zeros_like(model.layers[0].L)
        flat = DeepGpModel((model.layers[0].replace(L=L0),), model.mode)
        report, grads = deep.evaluate(flat, X, Y, chunks, want_grad=True, mapper=mapper, include_kl=False)
        value = report.total
        grads[0]["L"] = np.zeros_like(L0)
    elif objective == "collapsed_bound":
        _single_layer(model, objective)
        layer = model.layers[0]
        best = sparse.optimal_q(layer, X, Y)
        # envelope theorem: at the optimal q(u) the uncollapsed gradient
        # w.r.t. the remaining parameters equals the collapsed gradient
        _, grads = deep.evaluate(DeepGpModel((best,), model.mode), X, Y, chunks,
                                 want_grad=True, mapper=mapper)
        grads[0]["M"] = np.zeros_like(layer.M)
        grads[0]["L"] = np.zeros_like(layer.L)
        value = sparse.collapsed_bound(layer, X, Y)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    g = _flatten_grads(model, layout, grads)
    mask = np.zeros(layout.size, dtype=bool) if fixed_mask is None else np.asarray(fixed_mask, bool)
    g[mask] = 0.0
    return float(value), ParameterVector(g, layout, mask.copy())


@dataclass
class FdReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    worst: float
    failing: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.failing.size == 0


def relative_errors(analytic, numeric, f_scale) -> np.ndarray:
    """Per-coordinate relative error with a floor of ``1e-5 * max(1, |f|)``.

    The floor keeps coordinates whose true gradient is ~0 from being judged
    on central-difference round-off alone.
    """
    a = np.asarray(analytic, float)
    b = np.asarray(numeric, float)
    floor = 1e-5 * max(1.0, abs(f_scale))
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _central(f, theta, i, h):
    tp = theta.copy()
    tm = theta.copy()
    tp[i] += h
    tm[i] -= h
    return (f(tp) - f(tm)) / (2.0 * h)


def finite_difference_check(objective, model, data=None, step=None, tolerance=1e-4,
                            grad_fn=None, richardson=False, **kwargs) -> FdReport:
    """Compare analytic gradients with central differences in unconstrained space.

    ``objective`` is either a name from :data:`OBJECTIVES` (then ``model`` is a
    model and ``data`` is ``(X, Y)``) or a callable ``f(theta) -> float`` with
    ``model`` the point ``theta`` and ``grad_fn(theta)`` its claimed gradient.
    ``step`` defaults to ``1e-6 * max(1, |theta_i|)``. With ``richardson``
    the central differences at ``h`` and ``h/2`` are combined to cancel the
    ``h^2`` error term, which allows larger steps on noisy objectives.
    """
    if step is not None and not step > 0:
        raise ValueError(f"finite-difference step must be > 0, got {step}")
    if callable(objective):
        theta = np.asarray(model, dtype=float)
        f = objective
        analytic = np.asarray(grad_fn(theta), dtype=float)
        mask = np.zeros(theta.size, dtype=bool)
    else:
        pv = pack(model)
        theta = pv.values
        layout = pv.layout
        batch, n_total = kwargs.get("batch"), kwargs.get("n_total")

        def f(t):
            return objective_value(objective, unpack(ParameterVector(t, layout)), data, batch, n_total)

        if grad_fn is None:
            _, g = value_and_grad(objective, model, data, batch=batch, n_total=n_total,
                                  fixed_mask=kwargs.get("fixed_mask"))
            analytic, mask = g.values, g.fixed_mask
        else:
            analytic = np.asarray(grad_fn(theta), dtype=float)
            mask = np.zeros(theta.size, dtype=bool)
    f0 = f(theta)
    numeric = np.zeros(theta.size)
    for i in range(theta.size):
        if mask[i]:
            continue
        h = (1e-6 if step is None else step) * max(1.0, abs(theta[i]))
        numeric[i] = _central(f, theta, i, h)
        if richardson:
            numeric[i] = (4.0 * _central(f, theta, i, h / 2) - numeric[i]) / 3.0
    rel = relative_errors(analytic, numeric, f0)
    rel[mask] = 0.0
    failing = np.flatnonzero(rel > tolerance)
    return FdReport(analytic, numeric, rel, float(rel.max(initial=0.0)), failing, tolerance)
