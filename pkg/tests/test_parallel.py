import numpy as np
import pytest

from conftest import random_model
from nestedgp.deep import deep_bound
from nestedgp.errors import InvalidPlan
from nestedgp.params import value_and_grad
from nestedgp.parallel import WORKERS_ENV, ChunkPlan, OrderedPool, map_reduce_bound, map_reduce_grad, resolve_workers


@pytest.fixture
def problem():
    rng = np.random.default_rng(7)
    model = random_model(rng, (2, 2, 1), (4, 4))
    X, Y = rng.standard_normal((23, 2)), rng.standard_normal((23, 1))
    return model, (X, Y)


def test_plan_validation():
    assert ChunkPlan.even(10, 3).boundaries == (0, 3, 7, 10)
    for args in ((10, 2, (0, 5)), (10, 2, (1, 5, 10)), (10, 2, (0, 5, 9)), (10, 2, (0, 5, 5)), (10, 0, (0,))):
        with pytest.raises(InvalidPlan):
            ChunkPlan(*args)
    with pytest.raises(InvalidPlan):
        ChunkPlan.even(3, 4)


def test_plan_must_cover_data(problem):
    model, data = problem
    with pytest.raises(InvalidPlan):
        map_reduce_bound(model, data, ChunkPlan.even(22, 2))


@pytest.mark.parametrize("count", range(1, 9))
def test_chunked_matches_serial(problem, count):
    model, data = problem
    serial = deep_bound(model, *data).total
    _, g_serial = value_and_grad("deep_bound", model, data)
    plan = ChunkPlan.even(23, count)
    rep = map_reduce_bound(model, data, plan, workers=4)
    g = map_reduce_grad(model, data, plan, workers=4)
    assert abs(rep.total - serial) <= 1e-12 * abs(serial)
    err = np.max(np.abs(g.values - g_serial.values)) / np.max(np.abs(g_serial.values))
    assert err <= 1e-12
    if count == 1:
        assert rep.total == serial
        np.testing.assert_array_equal(g.values, g_serial.values)


def test_deterministic_across_runs(problem):
    model, data = problem
    plan = ChunkPlan.even(23, 5)
    a = [map_reduce_bound(model, data, plan, workers=3).total for _ in range(5)]
    g = [map_reduce_grad(model, data, plan, workers=3).values for _ in range(3)]
    assert len(set(a)) == 1
    for x in g[1:]:
        np.testing.assert_array_equal(x, g[0])


def test_worker_count_does_not_change_result(problem):
    model, data = problem
    plan = ChunkPlan.even(23, 4)
    vals = {map_reduce_bound(model, data, plan, workers=w).total for w in (1, 2, 4)}
    assert len(vals) == 1


def test_worker_resolution(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert resolve_workers() == 3
    assert resolve_workers(5) == 5
    monkeypatch.delenv(WORKERS_ENV)
    assert resolve_workers() >= 1


def test_pool_propagates_errors_and_keeps_order():
    pool = OrderedPool(3)
    assert pool(lambda x: x * x, range(10)) == [x * x for x in range(10)]

    def boom(x):
        if x == 4:
            raise ZeroDivisionError("chunk 4")
        return x

    with pytest.raises(ZeroDivisionError, match="chunk 4"):
        pool(boom, range(8))
