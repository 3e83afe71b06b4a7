import numpy as np
import pytest

from hagmil.rng import Xoshiro256, splitmix64

MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


def _reference(seed, n):
    """Straight-line integer xoshiro256** seeded by SplitMix64."""
    sm, s = seed, []
    for _ in range(4):
        sm, z = splitmix64(sm)
        s.append(z)
    out = []
    for _ in range(n):
        out.append(_rotl((s[1] * 5) & MASK, 7) * 9 & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
    return out


def test_splitmix_known_value():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_matches_reference(seed):
    assert [int(x) for x in Xoshiro256(seed).next_u64(20)] == _reference(seed, 20)


def test_doubles_and_integers():
    g = Xoshiro256(3)
    words = _reference(3, 5)
    np.testing.assert_array_equal(g.random(5), [(w >> 11) * 2.0**-53 for w in words])
    x = Xoshiro256(4).integers(10, 10000)
    assert x.min() == 0 and x.max() == 9
    assert isinstance(Xoshiro256(4).integers(10), int)
    with pytest.raises(ValueError):
        g.integers(0)


def test_normals_reasonable_and_deterministic():
    a = Xoshiro256(7).normal(20001)
    np.testing.assert_array_equal(a, Xoshiro256(7).normal(20001))
    assert abs(a.mean()) < 0.03 and abs(a.std() - 1) < 0.03


def test_permutation_and_streams():
    p = Xoshiro256(9).permutation(50)
    assert sorted(p) == list(range(50))
    g = Xoshiro256(9)
    before = g.state()
    c1, c2 = g.spawn(1), g.spawn(2)
    assert g.state() == before
    assert c1.state() != c2.state() and g.spawn(1).state() == c1.state()
    f = g.fork()
    assert g.state() != before and f.state() != c1.state()
