"""Similarity-driven head reordering and grouping.

Similar heads are permuted next to each other so that each SVD group
shares representational structure; the inverse permutation restores the
original head order on the output side at decode time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cka import SimilarityMatrix
from .errors import ValidationError


@dataclass
class HeadGrouping:
    """Partition of heads into equal-size groups plus the column permutation.

    ``permutation[p]`` is the original head index placed at new position p;
    it equals the concatenation of ``groups``.
    """

    group_size: int
    groups: list[list[int]]
    permutation: list[int] = field(init=False)
    inverse_permutation: list[int] = field(init=False)

    def __post_init__(self):
        perm = [head for group in self.groups for head in group]
        h = len(perm)
        if sorted(perm) != list(range(h)):
            raise ValidationError("groups must partition the head set exactly")
        if any(len(g) != self.group_size for g in self.groups):
            raise ValidationError("all groups must have length group_size")
        inv = [0] * h
        for new_pos, orig in enumerate(perm):
            inv[orig] = new_pos
        self.permutation = perm
        self.inverse_permutation = inv

    @property
    def n_heads(self) -> int:
        return len(self.permutation)

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def identity_grouping(n_heads: int, group_size: int) -> HeadGrouping:
    """Contiguous groups in original head order (no reordering)."""
    if n_heads % group_size != 0:
        raise ValidationError(f"{n_heads} heads not divisible by group size {group_size}")
    groups = [
        list(range(j * group_size, (j + 1) * group_size))
        for j in range(n_heads // group_size)
    ]
    return HeadGrouping(group_size=group_size, groups=groups)


def greedy_group(s: SimilarityMatrix, group_size: int) -> HeadGrouping:
    """Greedy grouping: seed each group with the most similar unassigned
    pair, then assign remaining heads (ascending index) to the non-full
    group whose members have the highest mean similarity to them.

    Ties break lexicographically on (i, j) for seeding and on group
    index for assignment, so the result is deterministic.
    """
    h = s.h
    if group_size < 1 or h % group_size != 0:
        raise ValidationError(f"{h} heads not divisible by group size {group_size}")
    if group_size == 1:
        return HeadGrouping(group_size=1, groups=[[i] for i in range(h)])

    sim = s.values
    g = h // group_size
    assigned = [False] * h

    # Seed all g groups with disjoint high-similarity pairs.
    pairs = sorted(
        ((i, j) for i in range(h) for j in range(i + 1, h)),
        key=lambda ij: (-sim[ij[0], ij[1]], ij[0], ij[1]),
    )
    groups: list[list[int]] = []
    for i, j in pairs:
        if len(groups) == g:
            break
        if not assigned[i] and not assigned[j]:
            groups.append([i, j])
            assigned[i] = assigned[j] = True

    # Fill: each remaining head goes to the non-full group it is most
    # similar to on average.
    for head in range(h):
        if assigned[head]:
            continue
        best, best_mean = None, -np.inf
        for gi, members in enumerate(groups):
            if len(members) >= group_size:
                continue
            mean = float(np.mean([sim[head, m] for m in members]))
            if mean > best_mean:
                best, best_mean = gi, mean
        groups[best].append(head)
        assigned[head] = True

    return HeadGrouping(group_size=group_size, groups=groups)


def _block_index(order, d_h: int) -> np.ndarray:
    return np.concatenate([np.arange(p * d_h, (p + 1) * d_h) for p in order])


def permute_heads(w: np.ndarray, g: HeadGrouping, d_h: int) -> np.ndarray:
    """Reorder the per-head column blocks of ``w`` so block at new
    position p is the original block ``permutation[p]``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[1] != g.n_heads * d_h:
        raise ValidationError(f"width {w.shape[1]} != {g.n_heads} heads x {d_h}")
    return w[:, _block_index(g.permutation, d_h)]


def unpermute_outputs(y_heads: np.ndarray, g: HeadGrouping, d_h: int) -> np.ndarray:
    """Exact inverse of :func:`permute_heads` on column blocks."""
    y_heads = np.asarray(y_heads, dtype=np.float64)
    if y_heads.shape[1] != g.n_heads * d_h:
        raise ValidationError(f"width {y_heads.shape[1]} != {g.n_heads} heads x {d_h}")
    return y_heads[:, _block_index(g.inverse_permutation, d_h)]
