import itertools

import numpy as np
import pytest

from kvcompress.cka import SimilarityMatrix
from kvcompress.errors import ValidationError
from kvcompress.headgroup import (
    greedy_group,
    identity_grouping,
    permute_heads,
    unpermute_outputs,
)


def sim(values):
    v = np.asarray(values, dtype=np.float64)
    return SimilarityMatrix(h=v.shape[0], values=v)


def all_pairings(heads):
    """Every way to split an even-size set into unordered pairs."""
    heads = list(heads)
    if not heads:
        yield []
        return
    first = heads[0]
    for i in range(1, len(heads)):
        pair = (first, heads[i])
        rest = heads[1:i] + heads[i + 1 :]
        for tail in all_pairings(rest):
            yield [pair] + tail


class TestGreedyGroup:
    def test_known_example_matches_exhaustive_oracle(self):
        s = sim([
            [1, 0.9, 0.1, 0.2],
            [0.9, 1, 0.15, 0.1],
            [0.1, 0.15, 1, 0.8],
            [0.2, 0.1, 0.8, 1],
        ])
        g = greedy_group(s, 2)
        assert g.groups == [[0, 1], [2, 3]]
        # oracle: enumerate all pairings, greedy must match the best one
        best = max(
            all_pairings(range(4)),
            key=lambda pairs: sum(s.values[i, j] for i, j in pairs),
        )
        assert [sorted(gr) for gr in g.groups] == [sorted(p) for p in best]

    def test_single_group(self, rng):
        v = rng.uniform(0, 1, (4, 4))
        v = (v + v.T) / 2
        np.fill_diagonal(v, 1.0)
        g = greedy_group(sim(v), 4)
        assert len(g.groups) == 1
        assert sorted(g.groups[0]) == [0, 1, 2, 3]

    def test_group_size_one_is_identity(self, rng):
        g = greedy_group(sim(np.eye(4)), 1)
        assert g.groups == [[0], [1], [2], [3]]
        assert g.permutation == [0, 1, 2, 3]

    def test_indivisible_rejected(self):
        with pytest.raises(ValidationError):
            greedy_group(sim(np.eye(4)), 3)

    def test_partition_and_roundtrip_invariants(self, rng):
        for _ in range(20):
            h = int(rng.choice([4, 6, 8]))
            size = int(rng.choice([s for s in (1, 2, h // 2, h) if h % s == 0]))
            v = rng.uniform(0, 1, (h, h))
            v = (v + v.T) / 2
            np.fill_diagonal(v, 1.0)
            g = greedy_group(sim(v), size)
            assert sorted(g.permutation) == list(range(h))
            assert [g.permutation[g.inverse_permutation[i]] for i in range(h)] == list(range(h))
            assert [x for gr in g.groups for x in gr] == g.permutation

    def test_deterministic(self, rng):
        v = rng.uniform(0, 1, (8, 8))
        v = (v + v.T) / 2
        np.fill_diagonal(v, 1.0)
        assert greedy_group(sim(v), 2).groups == greedy_group(sim(v), 2).groups


class TestPermutations:
    def test_identity_permutation(self, rng):
        w = rng.normal(0, 1, (8, 8))
        g = identity_grouping(4, 2)
        assert np.array_equal(permute_heads(w, g, 2), w)

    def test_swap_heads(self, rng):
        from kvcompress.headgroup import HeadGrouping

        w = rng.normal(0, 1, (8, 8))
        g = HeadGrouping(group_size=2, groups=[[1, 0], [2, 3]])
        out = permute_heads(w, g, 2)
        assert np.array_equal(out[:, 0:2], w[:, 2:4])
        assert np.array_equal(out[:, 2:4], w[:, 0:2])
        assert np.array_equal(out[:, 4:], w[:, 4:])

    def test_random_roundtrip_bit_exact(self, rng):
        from kvcompress.headgroup import HeadGrouping

        for _ in range(10):
            w = rng.normal(0, 1, (10, 12))
            perm = list(rng.permutation(6))
            g = HeadGrouping(group_size=3, groups=[perm[:3], perm[3:]])
            assert np.array_equal(unpermute_outputs(permute_heads(w, g, 2), g, 2), w)

    def test_shape_mismatch(self, rng):
        g = identity_grouping(4, 2)
        with pytest.raises(ValidationError):
            permute_heads(rng.normal(0, 1, (8, 6)), g, 2)
        with pytest.raises(ValidationError):
            unpermute_outputs(rng.normal(0, 1, (8, 6)), g, 2)

    def test_bad_partition_rejected(self):
        from kvcompress.headgroup import HeadGrouping

        with pytest.raises(ValidationError):
            HeadGrouping(group_size=2, groups=[[0, 1], [1, 2]])
