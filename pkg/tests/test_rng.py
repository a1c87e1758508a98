"""Determinism and distribution sanity for the seeded generator."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sassl.rng import Xoshiro256, derive_seed, splitmix64


class TestSplitmix:
    def test_known_sequence_is_stable(self):
        # frozen reference values; a change here means every seeded
        # artifact in the project changes
        v0, s1 = splitmix64(0)
        v1, _ = splitmix64(s1)
        assert v0 == 0xE220A8397B1DCDAF
        assert v1 == 0x6E789E6AA1B965F4

    def test_streams_from_different_seeds_differ(self):
        a, _ = splitmix64(1)
        b, _ = splitmix64(2)
        assert a != b


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)

    def test_order_sensitive(self):
        assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)

    @given(st.integers(min_value=0, max_value=2**64 - 1),
           st.integers(min_value=0, max_value=2**64 - 1))
    def test_result_is_u64(self, a, b):
        s = derive_seed(a, b)
        assert 0 <= s < 2**64


class TestXoshiro:
    def test_same_seed_same_stream(self):
        a = Xoshiro256(42)
        b = Xoshiro256(42)
        assert [a.next_u64() for _ in range(50)] == [b.next_u64() for _ in range(50)]

    def test_random_in_unit_interval(self):
        rng = Xoshiro256(3)
        xs = [rng.random() for _ in range(2000)]
        assert all(0.0 <= x < 1.0 for x in xs)
        assert abs(np.mean(xs) - 0.5) < 0.05

    def test_uniform_range(self):
        rng = Xoshiro256(4)
        xs = [rng.uniform(-2.0, 5.0) for _ in range(500)]
        assert all(-2.0 <= x < 5.0 for x in xs)

    def test_randbelow_bounds_and_coverage(self):
        rng = Xoshiro256(5)
        xs = [rng.randbelow(7) for _ in range(700)]
        assert set(xs) == set(range(7))

    def test_randint_inclusive(self):
        rng = Xoshiro256(6)
        xs = [rng.randint(3, 5) for _ in range(200)]
        assert set(xs) == {3, 4, 5}

    def test_normal_moments(self):
        rng = Xoshiro256(7)
        xs = np.array([rng.normal() for _ in range(4000)])
        assert abs(xs.mean()) < 0.1
        assert abs(xs.std() - 1.0) < 0.1

    def test_permutation_is_permutation(self):
        rng = Xoshiro256(8)
        p = rng.permutation(20)
        assert sorted(p) == list(range(20))

    def test_shuffle_preserves_elements(self):
        rng = Xoshiro256(9)
        xs = list(range(15))
        rng.shuffle(xs)
        assert sorted(xs) == list(range(15))

    def test_zero_seed_stream_not_degenerate(self):
        rng = Xoshiro256(0)
        xs = {rng.next_u64() for _ in range(10)}
        assert len(xs) == 10
        assert 0 not in xs or len(xs) > 1

    @pytest.mark.parametrize("n", [1, 2, 10])
    def test_randbelow_never_reaches_n(self, n):
        rng = Xoshiro256(11)
        assert all(rng.randbelow(n) < n for _ in range(300))
