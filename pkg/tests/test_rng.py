import numpy as np
import pytest
from hypothesis import given, strategies as st

from rdmeflow.rng import derive_seed, make_rng, mix64

# frozen so that a change to the derivation is caught; (0, 0) is the first published SplitMix64 output
FROZEN = {
    (0, 0): 0xE220A8397B1DCDAF,
    (42, 7): 0x272404A0A3926552,
    (2**64 - 1, 123456): 0x888BFB50DC87A2D2,
}


def test_mix64_known_values():
    # SplitMix64 output for state increments of GAMMA starting at 0 (published sequence)
    gamma = 0x9E3779B97F4A7C15
    assert mix64(gamma) == 0xE220A8397B1DCDAF
    assert mix64(2 * gamma % 2**64) == 0x6E789E6AA1B965F4


@pytest.mark.parametrize("args,expected", FROZEN.items())
def test_derive_seed_frozen(args, expected):
    assert derive_seed(*args) == expected


def test_no_collisions_over_a_million_indices():
    seen = {derive_seed(12345, i) for i in range(10**6)}
    assert len(seen) == 10**6


def test_different_bases_differ():
    rng = np.random.default_rng(0)
    pairs = rng.integers(0, 2**63, size=(10**4, 3), dtype=np.int64)
    same = sum(derive_seed(int(a), int(i)) == derive_seed(int(b), int(i)) for a, b, i in pairs if a != b)
    assert same == 0


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_in_range(base, index):
    assert 0 <= derive_seed(base, index) < 2**64


def test_negative_rejected():
    with pytest.raises(ValueError):
        derive_seed(-1, 0)


def test_make_rng_reproducible():
    a, b = make_rng(99), make_rng(99)
    assert np.array_equal(a.random(5), b.random(5))
    assert not np.array_equal(make_rng(100).random(5), make_rng(99).random(5))
