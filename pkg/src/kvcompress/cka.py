"""Centered Kernel Alignment similarity between attention heads.

Linear-kernel CKA: Grams are centered with H = I - (1/n) 11^T and the
score is HSIC(a,b) / sqrt(HSIC(a,a) HSIC(b,b)). Computed via centered
features, which is algebraically identical to centering the Grams but
O(n d^2) instead of O(n^2 d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError


@dataclass
class SimilarityMatrix:
    """Symmetric h x h head-similarity matrix with unit diagonal."""

    h: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.h, self.h):
            raise ValidationError(f"similarity matrix shape {v.shape} != ({self.h}, {self.h})")
        self.values = v


def _centered_cross_hsic(a_c: np.ndarray, b_c: np.ndarray) -> float:
    # tr(G~a G~b) == |A_c^T B_c|_F^2 for column-centered A_c, B_c
    return float(np.sum((a_c.T @ b_c) ** 2))


def cka_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Linear CKA between two representation matrices sharing row count."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError("representations must be 2-D")
    if a.shape[0] != b.shape[0]:
        raise ValidationError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValidationError("need at least 2 samples")
    a_c = a - a.mean(axis=0)
    b_c = b - b.mean(axis=0)
    hsic_aa = _centered_cross_hsic(a_c, a_c)
    hsic_bb = _centered_cross_hsic(b_c, b_c)
    if hsic_aa == 0.0 or hsic_bb == 0.0:
        raise NumericError("degenerate representation (zero centered Gram)")
    return _centered_cross_hsic(a_c, b_c) / np.sqrt(hsic_aa * hsic_bb)


def head_similarity(
    w_k: np.ndarray,
    d_h: int,
    mode: str = "weights",
    x: np.ndarray | None = None,
) -> SimilarityMatrix:
    """Pairwise CKA between the per-head column blocks of a projection.

    mode="weights": each head's representation is its d_model x d_h
    weight block directly (rows as samples). mode="activations": the
    head's projected activations ``x @ block``.
    """
    w_k = np.asarray(w_k, dtype=np.float64)
    if w_k.ndim != 2 or w_k.shape[1] % d_h != 0:
        raise ValidationError(f"columns {w_k.shape} not divisible by head dim {d_h}")
    if mode not in ("weights", "activations"):
        raise ValidationError(f"unknown similarity mode {mode!r}")
    if mode == "activations":
        if x is None:
            raise ValidationError("activation mode requires calibration activations")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != w_k.shape[0]:
            raise ValidationError("activation columns must match projection rows")
    h = w_k.shape[1] // d_h
    reps = []
    for i in range(h):
        block = w_k[:, i * d_h : (i + 1) * d_h]
        reps.append(block if mode == "weights" else x @ block)
    values = np.eye(h)
    for i in range(h):
        for j in range(i + 1, h):
            values[i, j] = values[j, i] = cka_similarity(reps[i], reps[j])
    return SimilarityMatrix(h=h, values=values)
