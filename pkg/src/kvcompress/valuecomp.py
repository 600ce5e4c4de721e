"""Value-projection compression: SVD, offline calibration, matrix fusion.

The Value projection is factored whole (no grouping), its factors are
refined against calibration activations by closed-form alternating
least squares, and the right factor is folded into the output
projection so decode never reconstructs full value rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .linalg import LowRankPair, ridge_solve, svd, truncate, whitened_truncate
from .tensorio import ModelSpec


@dataclass
class CompressedValue:
    """Per-layer Value factors. ``fused_w_o`` stacks one r x d_model block
    per query head: block h is ``R_v[:, kv(h) slice] @ W_o[h slice, :]``
    with kv(h) the kv head serving query head h. ``r_v_factor`` may be
    None in shipped artifacts (inference needs only l_v + fused blocks)."""

    l_v: np.ndarray
    r_v_factor: np.ndarray | None
    fused_w_o: np.ndarray
    rank: int

    def __post_init__(self):
        if self.l_v.shape[1] != self.rank:
            raise ValidationError("l_v rank disagrees with declared rank")

    def fused_block(self, head: int) -> np.ndarray:
        return self.fused_w_o[head * self.rank : (head + 1) * self.rank, :]


def svd_value(
    w_v: np.ndarray,
    r_v: int,
    x: np.ndarray | None = None,
    whiten: bool = False,
    ridge: float = 0.0,
) -> LowRankPair:
    """Rank-r_v factorization of the full Value projection."""
    w_v = np.asarray(w_v, dtype=np.float64)
    if not 1 <= r_v <= min(w_v.shape):
        raise ValidationError(f"value rank {r_v} out of range for shape {w_v.shape}")
    if whiten and x is not None:
        return whitened_truncate(w_v, x, r_v, ridge)
    return truncate(svd(w_v), r_v)


def activation_error(
    l: np.ndarray, r: np.ndarray, w: np.ndarray, x: np.ndarray
) -> float:
    """Squared activation-space approximation error |x (l r - w)|_F^2."""
    l, r, w, x = (np.asarray(m, dtype=np.float64) for m in (l, r, w, x))
    if l.shape[1] != r.shape[0] or l.shape[0] != w.shape[0] or r.shape[1] != w.shape[1]:
        raise ValidationError("factor/weight shapes inconsistent")
    if x.shape[1] != w.shape[0]:
        raise ValidationError("activation columns must match weight rows")
    return float(np.sum((x @ (l @ r - w)) ** 2))


def update_left(
    l: np.ndarray, r: np.ndarray, w: np.ndarray, x: np.ndarray, ridge: float = 0.0
) -> np.ndarray:
    """Half-step: replace ``l`` by the minimizer of |x (l r - w)|_F^2.

    The stationarity condition is G (l r - w) r^T = 0 with G the
    activation Gram; l = w r^T (r r^T)^-1 satisfies it for any G, so the
    Gram cancels regardless of its conditioning.
    """
    r = np.asarray(r, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    a = r @ r.T
    return ridge_solve(a, r @ w.T, ridge).T


def update_right(
    l: np.ndarray, r: np.ndarray, w: np.ndarray, x: np.ndarray, ridge: float = 0.0
) -> np.ndarray:
    """Half-step: replace ``r`` by the minimizer of |x (l r - w)|_F^2,
    i.e. r = (l^T G l)^-1 l^T G w with G = x^T x retained. Dropping G
    here would leave a nonzero activation-error gradient whenever the
    calibration Gram is anisotropic."""
    l = np.asarray(l, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    xl = x @ l
    return ridge_solve(xl.T @ xl, xl.T @ (x @ w), ridge)


def calibrate(
    l: np.ndarray,
    r: np.ndarray,
    w: np.ndarray,
    x: np.ndarray,
    iters: int = 1,
    ridge: float = 0.0,
) -> LowRankPair:
    """Alternating closed-form refinement of a low-rank pair against
    calibration activations. Each half-step is an exact least-squares
    minimizer, so the activation error is non-increasing throughout."""
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    l = np.asarray(l, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    for _ in range(iters):
        l = update_left(l, r, w, x, ridge)
        r = update_right(l, r, w, x, ridge)
    return LowRankPair(l=l, r_factor=r)


def fuse(r_v_factor: np.ndarray, w_o: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Fold the Value right factor into the output projection.

    Under grouped-query sharing, query head h consumes kv head
    ``h // (n_heads / n_kv_heads)``; the fused block for head h is the
    kv head's r x d_head slice of R_v times head h's d_head x d_model
    slice of W_o. Blocks are stacked to (n_heads * r) x d_model.
    """
    r_v_factor = np.asarray(r_v_factor, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    d_h = spec.d_head
    if r_v_factor.shape[1] != spec.kv_width:
        raise ValidationError(
            f"r_v_factor width {r_v_factor.shape[1]} != kv width {spec.kv_width}"
        )
    if w_o.shape[0] != spec.n_heads * d_h:
        raise ValidationError(f"w_o rows {w_o.shape[0]} != {spec.n_heads * d_h}")
    share = spec.n_heads // spec.n_kv_heads
    blocks = []
    for h in range(spec.n_heads):
        kv = h // share
        r_block = r_v_factor[:, kv * d_h : (kv + 1) * d_h]
        o_block = w_o[h * d_h : (h + 1) * d_h, :]
        blocks.append(r_block @ o_block)
    return np.concatenate(blocks, axis=0)


def compress_value(
    w_v: np.ndarray,
    w_o: np.ndarray,
    spec: ModelSpec,
    r_v: int,
    x: np.ndarray | None = None,
    whiten: bool = False,
    calibrate_iters: int = 1,
    ridge: float = 0.0,
) -> CompressedValue:
    """Full Value pipeline: SVD, optional offline calibration, fusion."""
    pair = svd_value(w_v, r_v, x=x, whiten=whiten, ridge=ridge)
    if calibrate_iters > 0 and x is not None:
        pair = calibrate(pair.l, pair.r_factor, w_v, x, iters=calibrate_iters, ridge=ridge)
    fused = fuse(pair.r_factor, w_o, spec)
    return CompressedValue(l_v=pair.l, r_v_factor=pair.r_factor, fused_w_o=fused, rank=r_v)
