import numpy as np
from hypothesis import given, strategies as st

from cascadevol import rng


def test_block_rng_is_deterministic():
    a = rng.block_rng(7, 3).standard_normal(10)
    b = rng.block_rng(7, 3).standard_normal(10)
    np.testing.assert_array_equal(a, b)


def test_blocks_are_independent_streams():
    a = rng.block_rng(7, 0).standard_normal(1000)
    b = rng.block_rng(7, 1).standard_normal(1000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_stage_seed_differs_per_stage():
    assert rng.stage_seed(1, "simulate") != rng.stage_seed(1, "fp-solve")
    assert rng.stage_seed(1, "simulate") == rng.stage_seed(1, "simulate")


@given(st.integers(0, 10_000), st.integers(1, 700))
def test_blocks_cover_range(n, size):
    got = [(s, e) for _, s, e in rng.blocks(n, size)]
    covered = np.concatenate([np.arange(s, e) for s, e in got]) if got else np.array([])
    np.testing.assert_array_equal(covered, np.arange(n))
