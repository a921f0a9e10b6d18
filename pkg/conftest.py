import logging

import numpy as np
import pytest

from src.geometry import TableConfig
from src.dynamics import BilliardDynamics
from src.observables import ObservableContext, build_observable
from src.oracle import ChainDynamics, lazy_walk, marked_lazy_walk, sticky_lazy_walk

logging.basicConfig(level=logging.INFO, format="[%(levelname)s] [%(module)s] %(message)s")

# Two disks, finite horizon: rows of radius 0.4 at integers, radius 0.2 at half-integers.
DEFAULT_TRIPLES = [(0.0, 0.0, 0.4), (0.5, 0.5, 0.2)]
TEST_HORIZON = 3.0


@pytest.fixture
def table():
    return TableConfig.from_triples(DEFAULT_TRIPLES)


@pytest.fixture
def bounded_table(table):
    return table.with_horizon(TEST_HORIZON)


@pytest.fixture
def billiard(bounded_table):
    return BilliardDynamics(bounded_table)


@pytest.fixture
def context(bounded_table):
    return ObservableContext(table=bounded_table)


@pytest.fixture
def g0(context):
    return build_observable({"kind": "g0"}, context)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def lazy():
    return lazy_walk()


@pytest.fixture
def sticky():
    return sticky_lazy_walk(0.5)


@pytest.fixture
def marked():
    return marked_lazy_walk()


@pytest.fixture
def lazy_dynamics(lazy):
    return ChainDynamics(lazy)
