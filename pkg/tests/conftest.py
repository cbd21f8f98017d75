import numpy as np
import pytest

import blockpd as bp
from blockpd.oracles import quadratic_reference


@pytest.fixture(scope="session")
def bench_instance():
    """10-block, m=40, q=60 inconsistent strongly convex instance shared by
    the equivalence, rate and certificate tests."""
    return bp.make_random_inconsistent_ls(
        seed=2024, d=10, dims=4, q=60, noise=0.6, mu=1.0, rank_deficiency=4
    )


@pytest.fixture(scope="session")
def bench_reference(bench_instance):
    return quadratic_reference(bench_instance)


@pytest.fixture(scope="session")
def two_block_instance():
    """Small strongly convex instance with an enumerable sampling for the
    exhaustive-expectation tests."""
    return bp.make_random_inconsistent_ls(
        seed=11, d=2, dims=3, q=9, noise=0.4, mu=1.0, rank_deficiency=2
    )


@pytest.fixture(scope="session")
def two_block_reference(two_block_instance):
    return quadratic_reference(two_block_instance)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
