"""Why head order matters before grouped low-rank factorization.

Constructs a key projection whose similar heads sit far apart, then
compares grouped SVD error with and without similarity-based reordering.
"""

import numpy as np

from kvcompress import ModelSpec
from kvcompress.cka import head_similarity
from kvcompress.headgroup import greedy_group, identity_grouping
from kvcompress.keycomp import compress_key, reconstruction_error

rng = np.random.default_rng(0)
spec = ModelSpec(d_model=32, n_layers=1, n_heads=4, n_kv_heads=4, d_head=8)

# heads 0 and 2 are near-duplicates; so are heads 1 and 3
base_a = rng.normal(0, 1, (32, 8))
base_b = rng.normal(0, 1, (32, 8))
w_k = np.concatenate([
    base_a,
    base_b,
    base_a + 0.02 * rng.normal(0, 1, (32, 8)),
    base_b + 0.02 * rng.normal(0, 1, (32, 8)),
], axis=1)

sim = head_similarity(w_k, spec.d_head)
print("pairwise head similarity:")
print(np.array_str(sim.values, precision=3, suppress_small=True))

grouping = greedy_group(sim, group_size=2)
print(f"\nsimilarity-ordered groups: {grouping.groups}")
print(f"adjacent-order groups:     {identity_grouping(4, 2).groups}")

ranks = [spec.d_head] * 2  # keep half of each group's width
greedy = compress_key(w_k, spec, sim, ranks, group_size=2)
ident = compress_key(w_k, spec, sim, ranks, group_size=2,
                     grouping=identity_grouping(4, 2))
e_g = reconstruction_error(greedy, w_k)
e_i = reconstruction_error(ident, w_k)
print(f"\nsquared reconstruction error, reordered: {e_g:.6f}")
print(f"squared reconstruction error, adjacent:  {e_i:.6f}")
print(f"improvement: {100 * (e_i - e_g) / e_i:.1f}%")
