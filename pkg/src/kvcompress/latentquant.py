"""Per-token latent quantization with a randomized Hadamard transform.

Each cached latent row is sign-flipped by a seeded random diagonal,
rotated by an orthonormal Walsh-Hadamard transform, then affine-quantized
to 3 or 4 bits with a per-token min/max scale. Codes are packed
little-endian, LSB-first within each byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def hadamard(v: np.ndarray) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform of a power-of-two vector.

    Self-inverse: applying it twice returns the input.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if n < 1 or n & (n - 1) != 0:
        raise ValidationError(f"length {n} is not a power of two")
    out = v.copy()
    step = 1
    while step < n:
        shaped = out.reshape(-1, 2 * step)
        a = shaped[:, :step].copy()
        b = shaped[:, step:].copy()
        shaped[:, :step] = a + b
        shaped[:, step:] = a - b
        step *= 2
    return out / np.sqrt(n)


def sign_vector(seed: int, n: int) -> np.ndarray:
    """Deterministic +/-1 diagonal from a seed."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def pack_codes(codes: np.ndarray, bitwidth: int) -> bytes:
    """Pack integer codes LSB-first into bytes."""
    bits = np.zeros(len(codes) * bitwidth, dtype=np.uint8)
    for b in range(bitwidth):
        bits[b::bitwidth] = (codes >> b) & 1
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_codes(data: bytes, bitwidth: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bits = bits[: count * bitwidth].reshape(count, bitwidth)
    codes = np.zeros(count, dtype=np.int64)
    for b in range(bitwidth):
        codes |= bits[:, b].astype(np.int64) << b
    return codes


@dataclass
class QuantizedLatent:
    """One token's quantized latent row.

    ``scale == 0`` is the zero-range sentinel: every transformed entry
    equals ``offset`` and dequantization is exact.
    """

    bitwidth: int
    scale: float
    offset: float
    codes: bytes
    seed: int
    rank: int
    padded_rank: int


def quantize_token(v: np.ndarray, bitwidth: int, seed: int = 0) -> QuantizedLatent:
    """Transform and affine-quantize one latent row.

    The row is zero-padded to the next power of two, sign-randomized,
    Hadamard-rotated, then quantized with per-token min/max; the max-abs
    dequantization error in the transformed domain is <= scale/2.
    """
    if bitwidth not in (3, 4):
        raise ValidationError(f"bitwidth must be 3 or 4, got {bitwidth}")
    v = np.asarray(v, dtype=np.float64).ravel()
    r = v.shape[0]
    if r < 1:
        raise ValidationError("empty latent")
    r_hat = _next_pow2(r)
    padded = np.zeros(r_hat)
    padded[:r] = v
    u = hadamard(sign_vector(seed, r_hat) * padded)
    lo, hi = float(u.min()), float(u.max())
    levels = (1 << bitwidth) - 1
    if hi == lo:
        return QuantizedLatent(
            bitwidth=bitwidth, scale=0.0, offset=lo, codes=b"",
            seed=seed, rank=r, padded_rank=r_hat,
        )
    scale = (hi - lo) / levels
    codes = np.clip(np.round((u - lo) / scale), 0, levels).astype(np.int64)
    return QuantizedLatent(
        bitwidth=bitwidth, scale=scale, offset=lo,
        codes=pack_codes(codes, bitwidth), seed=seed, rank=r, padded_rank=r_hat,
    )


def dequantize_token(q: QuantizedLatent) -> np.ndarray:
    """Invert the transform and drop the padding."""
    if q.scale == 0.0:
        u = np.full(q.padded_rank, q.offset)
    else:
        codes = unpack_codes(q.codes, q.bitwidth, q.padded_rank)
        u = codes.astype(np.float64) * q.scale + q.offset
    padded = sign_vector(q.seed, q.padded_rank) * hadamard(u)
    return padded[:q.rank]
