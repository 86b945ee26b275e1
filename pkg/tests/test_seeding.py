import numpy as np
import pytest

from carinfer import seeding


def splitmix64_reference(master, index):
    # written from the published SplitMix64 constants, independent of the library
    m = (1 << 64) - 1
    z = (master + (index + 1) * 0x9E3779B97F4A7C15) & m
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def test_known_values():
    # SplitMix64 seeded with 0 starts 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4
    assert seeding.derive_rep_seed(0, 0) == 0xE220A8397B1DCDAF
    assert seeding.derive_rep_seed(0, 1) == 0x6E789E6AA1B965F4
    for master, idx in [(1, 0), (12345, 678), ((1 << 64) - 1, 10**9)]:
        assert seeding.derive_rep_seed(master, idx) == splitmix64_reference(master, idx)


def test_same_inputs_same_seed():
    assert seeding.derive_rep_seed(42, 7) == seeding.derive_rep_seed(42, 7)


def test_different_masters_differ():
    assert seeding.derive_rep_seed(1, 0) != seeding.derive_rep_seed(2, 0)


def test_no_collisions_first_million():
    seeds = seeding.derive_rep_seeds(20190101, np.arange(1_000_001))
    assert np.unique(seeds).size == seeds.size


def test_vectorised_matches_scalar():
    idx = np.array([0, 1, 2, 999, 123456])
    vec = seeding.derive_rep_seeds(77, idx)
    assert [int(v) for v in vec] == [seeding.derive_rep_seed(77, int(i)) for i in idx]


def test_invalid_inputs():
    with pytest.raises(ValueError):
        seeding.derive_rep_seed(0, -1)
    with pytest.raises(ValueError):
        seeding.derive_rep_seed(-1, 0)
    with pytest.raises(ValueError):
        seeding.derive_rep_seed(1 << 64, 0)


def test_replication_streams_are_distinct_and_reproducible():
    a = [g.random(4) for g in seeding.replication_streams(5, 3)]
    b = [g.random(4) for g in seeding.replication_streams(5, 3)]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert not np.array_equal(a[0], a[1]) and not np.array_equal(a[1], a[2])


def test_entropy_seed_range():
    s = seeding.entropy_seed()
    assert 0 <= s < (1 << 63)
