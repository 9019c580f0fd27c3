import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nestedgp import kernels
from nestedgp.deep import DeepGpModel
from nestedgp.sparse import VariationalLayer

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def random_kernel(rng, family, q_in):
    if family == kernels.LINEAR:
        return kernels.linear(rng.uniform(0.5, 2.0), q_in)
    return kernels.eq(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0, q_in))


def random_layer(rng, q_in, q_out, m, family="eq", noise=None):
    """Random layer; linear layers need ``m <= q_in`` for a nonsingular K_uu."""
    L = np.tril(0.3 * rng.standard_normal((m, m)), -1) + np.diag(rng.uniform(0.2, 1.0, m))
    return VariationalLayer(
        rng.standard_normal((m, q_in)),
        rng.standard_normal((m, q_out)),
        L,
        rng.uniform(0.1, 0.5) if noise is None else noise,
        random_kernel(rng, family, q_in),
    )


def random_model(rng, dims, ms, families=None, mode="regression"):
    """``dims`` lists layer widths from input to output, e.g. ``(1, 2, 1)``."""
    families = families or ["eq"] * len(ms)
    layers = tuple(random_layer(rng, dims[i], dims[i + 1], ms[i], families[i]) for i in range(len(ms)))
    return DeepGpModel(layers, mode)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
