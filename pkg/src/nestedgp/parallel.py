"""Chunked map-reduce evaluation of the bound and its gradient.

Rows are split into contiguous chunks, each chunk runs the forward and
reverse pass independently on a worker thread, and the partial results are
reduced in ascending chunk order so repeated runs are bit-identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import deep
from .errors import InvalidPlan
from .params import value_and_grad

WORKERS_ENV = "DEEPGP_WORKERS"


@dataclass(frozen=True)
class ChunkPlan:
    n: int
    chunk_count: int
    boundaries: tuple

    def __post_init__(self):
        b = self.boundaries
        if self.chunk_count < 1 or len(b) != self.chunk_count + 1:
            raise InvalidPlan(f"bad chunk count {self.chunk_count} for boundaries {b}")
        if b[0] != 0 or b[-1] != self.n or any(x >= y for x, y in zip(b[:-1], b[1:])):
            raise InvalidPlan(f"boundaries {b} do not partition [0, {self.n})")

    @classmethod
    def even(cls, n: int, chunk_count: int) -> "ChunkPlan":
        if chunk_count < 1 or chunk_count > n:
            raise InvalidPlan(f"cannot split {n} rows into {chunk_count} non-empty chunks")
        edges = np.linspace(0, n, chunk_count + 1).round().astype(int)
        return cls(n, chunk_count, tuple(int(e) for e in edges))

    def chunks(self) -> list:
        b = self.boundaries
        return [np.arange(b[i], b[i + 1]) for i in range(self.chunk_count)]


def resolve_workers(flag: int | None = None) -> int:
    """CLI flag, then $DEEPGP_WORKERS, then the number of available cores."""
    if flag:
        return max(1, int(flag))
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class OrderedPool:
    """Ordered ``map`` over a thread pool; the first failure cancels pending work."""

    def __init__(self, workers: int | None = None):
        self.workers = resolve_workers(workers)

    def __call__(self, fn, items):
        items = list(items)
        if self.workers == 1 or len(items) == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as ex:
            futures = [ex.submit(fn, x) for x in items]
            out = []
            try:
                for f in futures:
                    out.append(f.result())
            except BaseException:
                for f in futures:
                    f.cancel()
                raise
            return out


def _check(plan: ChunkPlan, data):
    n = np.asarray(data[1]).shape[0]
    if plan.n != n:
        raise InvalidPlan(f"plan covers {plan.n} rows but data has {n}")


def map_reduce_bound(model, data, plan: ChunkPlan, workers: int | None = None) -> deep.BoundReport:
    _check(plan, data)
    X, Y = data
    return deep.evaluate(model, X, Y, plan.chunks(), mapper=OrderedPool(workers))[0]


def map_reduce_grad(model, data, plan: ChunkPlan, workers: int | None = None):
    """Gradient of the deep bound as a :class:`~nestedgp.params.ParameterVector`."""
    _check(plan, data)
    _, g = value_and_grad("deep_bound", model, data, chunks=plan.chunks(), mapper=OrderedPool(workers))
    return g
