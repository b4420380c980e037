import numpy as np
from hypothesis import given, settings, strategies as st

from qbsde.rng import BLOCK, bridge_uniforms, brownian_increments, derive_seed


def test_increment_statistics():
    dW = brownian_increments(5, 4000, 8, 2, 0.25)
    assert dW.shape == (4000, 8, 2)
    assert abs(dW.mean()) < 4 * 0.5 / np.sqrt(dW.size)
    assert abs(dW.var() / 0.25 - 1) < 0.02


def test_threads_do_not_change_numbers():
    a = brownian_increments(11, 3 * BLOCK + 17, 5, 1, 0.1, threads=1)
    b = brownian_increments(11, 3 * BLOCK + 17, 5, 1, 0.1, threads=4)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(p=st.integers(1, 2500), n=st.integers(1, 12), extra=st.integers(0, 9))
def test_prefix_property(p, n, extra):
    """Fewer paths or a shorter horizon see the same noise (common random numbers)."""
    big = brownian_increments(2, p + 300, n + extra, 1, 0.5)
    small = brownian_increments(2, p, n, 1, 0.5)
    assert np.array_equal(small, big[:p, :n])
    u_big = bridge_uniforms(2, p + 300, n + extra)
    assert np.array_equal(bridge_uniforms(2, p, n), u_big[:p, :n])


def test_bridge_uniforms_independent_of_increments():
    u = bridge_uniforms(0, 2048, 4)
    assert u.min() >= 0 and u.max() < 1
    dW = brownian_increments(0, 2048, 4, 1, 1.0)[..., 0]
    assert abs(np.corrcoef(u.ravel(), dW.ravel())[0, 1]) < 0.05


def test_derive_seed_distinct():
    seeds = {derive_seed(1, i) for i in range(100)}
    assert len(seeds) == 100
    assert derive_seed(1, 0) == derive_seed(1, 0)
