import numpy as np
import pytest

from feedbackpf.models import DynamicsModel, GaussianInitial, build_linear_model


@pytest.fixture
def scalar_linear():
    return build_linear_model([[-0.5]], [[1.0]], [0.0], [[1.0]])


def scalar_model(drift, observation, mean=0.0, var=1.0, **kw):
    return DynamicsModel(1, 1, drift, observation, initial_density=GaussianInitial([mean], [[var]]), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
