"""Key-projection compression: head reordering + grouped low-rank SVD.

Keys must be reconstructed before rotary position encoding at decode
time, so the right factors are kept explicitly (never fused away).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cka import SimilarityMatrix
from .errors import ValidationError
from .headgroup import HeadGrouping, greedy_group, permute_heads, unpermute_outputs
from .linalg import LowRankPair, svd, truncate, whitened_truncate
from .tensorio import ModelSpec


@dataclass
class CompressedKey:
    """Per-layer Key factors: one low-rank pair per head group, plus the
    permutation that maps cached (reordered) head blocks back to the
    model's original order."""

    grouping: HeadGrouping
    factors: list[LowRankPair]
    ranks: list[int]
    d_head: int

    def __post_init__(self):
        if len(self.factors) != self.grouping.n_groups:
            raise ValidationError("one factor pair required per group")
        full = self.grouping.n_heads * self.d_head
        if sum(self.ranks) > full:
            raise ValidationError(f"total key rank {sum(self.ranks)} exceeds width {full}")
        for pair, r in zip(self.factors, self.ranks):
            if pair.rank != r:
                raise ValidationError("factor rank disagrees with declared rank")

    @property
    def cache_width(self) -> int:
        """Latent width cached per token for this layer's keys."""
        return sum(self.ranks)


def compress_key(
    w_k: np.ndarray,
    spec: ModelSpec,
    sim: SimilarityMatrix,
    rank_per_group: list[int],
    x: np.ndarray | None = None,
    whiten: bool = False,
    group_size: int = 4,
    ridge: float = 0.0,
    grouping: HeadGrouping | None = None,
) -> CompressedKey:
    """Permute heads by greedy similarity grouping, then factor each
    group's concatenated block to its allotted rank.

    A precomputed ``grouping`` overrides the greedy one (used for
    identity-order baselines in ablations).
    """
    w_k = np.asarray(w_k, dtype=np.float64)
    h, d_h = spec.n_kv_heads, spec.d_head
    if sim.h != h:
        raise ValidationError(f"similarity matrix is {sim.h}x{sim.h}, expected {h}")
    if w_k.shape != (spec.d_model, h * d_h):
        raise ValidationError(f"w_k shape {w_k.shape} inconsistent with spec")
    if grouping is None:
        grouping = greedy_group(sim, group_size)
    s = grouping.group_size
    g = grouping.n_groups
    if len(rank_per_group) != g:
        raise ValidationError(f"{len(rank_per_group)} ranks given for {g} groups")
    for r in rank_per_group:
        if not 1 <= r <= s * d_h:
            raise ValidationError(f"group rank {r} out of range [1, {s * d_h}]")

    wp = permute_heads(w_k, grouping, d_h)
    factors = []
    for j, r in enumerate(rank_per_group):
        block = wp[:, j * s * d_h : (j + 1) * s * d_h]
        if whiten and x is not None:
            factors.append(whitened_truncate(block, x, r, ridge))
        else:
            factors.append(truncate(svd(block), r))
    return CompressedKey(
        grouping=grouping, factors=factors, ranks=list(rank_per_group), d_head=d_h
    )


def key_latents(ck: CompressedKey, x: np.ndarray) -> list[np.ndarray]:
    """Project activations to the per-group latents that get cached."""
    return [x @ pair.l for pair in ck.factors]


def reconstruct_keys(ck: CompressedKey, z_groups: list[np.ndarray]) -> np.ndarray:
    """Expand per-group latents to full key rows in original head order."""
    if len(z_groups) != len(ck.factors):
        raise ValidationError("one latent matrix required per group")
    blocks = []
    for z, pair in zip(z_groups, ck.factors):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != pair.rank:
            raise ValidationError(
                f"latent shape {z.shape} incompatible with rank {pair.rank}"
            )
        blocks.append(z @ pair.r_factor)
    permuted = (
        np.concatenate(blocks, axis=1)
        if blocks[0].shape[0] > 0
        else np.zeros((0, ck.grouping.n_heads * ck.d_head))
    )
    return unpermute_outputs(permuted, ck.grouping, ck.d_head)


def reconstruction_error(ck: CompressedKey, w_k: np.ndarray) -> float:
    """Squared Frobenius error of the compressed Key projection."""
    w_k = np.asarray(w_k, dtype=np.float64)
    approx = reconstruct_keys(ck, key_latents(ck, np.eye(w_k.shape[0])))
    return float(np.sum((approx - w_k) ** 2))
