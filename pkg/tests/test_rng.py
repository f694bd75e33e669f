"""Determinism and distribution sanity for the splitmix64 streams."""

import numpy as np

from sasrecllm.rng import RngStream


def test_same_seed_same_sequence():
    a = RngStream(42)
    b = RngStream(42)
    assert np.array_equal(a.uniform((100,)), b.uniform((100,)))
    assert np.array_equal(a.normal((51,)), b.normal((51,)))
    assert np.array_equal(a.randint(0, 7, (20,)), b.randint(0, 7, (20,)))
    assert np.array_equal(a.permutation(33), b.permutation(33))


def test_different_seeds_differ():
    assert not np.array_equal(RngStream(1).uniform((64,)), RngStream(2).uniform((64,)))


def test_spawn_is_deterministic_and_independent():
    root = RngStream(7)
    c1 = root.spawn("dropout")
    c2 = RngStream(7).spawn("dropout")
    other = RngStream(7).spawn("init")
    x1, x2, x3 = c1.uniform((32,)), c2.uniform((32,)), other.uniform((32,))
    assert np.array_equal(x1, x2)
    assert not np.array_equal(x1, x3)
    # spawning does not consume draws from the parent
    assert np.array_equal(root.uniform((8,)), RngStream(7).uniform((8,)))


def test_uniform_range_and_mean():
    x = RngStream(3).uniform((100_000,))
    assert x.min() >= 0.0 and x.max() < 1.0
    assert abs(x.mean() - 0.5) < 0.01


def test_normal_moments():
    x = RngStream(5).normal((100_000,), mean=2.0, std=3.0)
    assert abs(x.mean() - 2.0) < 0.05
    assert abs(x.std() - 3.0) < 0.05


def test_randint_bounds_and_coverage():
    x = RngStream(11).randint(5, 9, (10_000,))
    assert set(np.unique(x)) == {5, 6, 7, 8}


def test_permutation_is_a_permutation():
    p = RngStream(13).permutation(500)
    assert sorted(p.tolist()) == list(range(500))
