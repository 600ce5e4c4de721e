"""Desk-scale decoder-only attention engine with RoPE and grouped-query
attention, runnable against either full or compressed latent KV caches.

The toy architecture is a pre-norm, attention-only decoder stack
(RMS normalization, residual connections, no MLP), which isolates
exactly the computation the KV cache feeds.

RoPE convention: interleaved pairs (x_{2i}, x_{2i+1}) within each head
are rotated by angle ``p * theta^(-2i/d_head)`` at position p.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .keycomp import CompressedKey, key_latents, reconstruct_keys
from .latentquant import QuantizedLatent, dequantize_token, quantize_token
from .tensorio import CalibrationSet, LayerWeights, ModelSpec, save_model
from .valuecomp import CompressedValue

_NORM_EPS = 1e-6


@dataclass
class ToyModel:
    spec: ModelSpec
    layers: list[LayerWeights]
    embedding: np.ndarray
    head: np.ndarray
    attn_norms: list[np.ndarray]
    final_norm: np.ndarray

    def __post_init__(self):
        s = self.spec
        if len(self.layers) != s.n_layers or len(self.attn_norms) != s.n_layers:
            raise ValidationError("layer count mismatch")
        if self.embedding.shape != (s.vocab_size, s.d_model):
            raise ValidationError("embedding shape inconsistent with spec")
        if self.head.shape != (s.d_model, s.vocab_size):
            raise ValidationError("output head shape inconsistent with spec")
        for lw in self.layers:
            lw.validate(s)


def random_toy_model(spec: ModelSpec, seed: int, weight_scale: float | None = None) -> ToyModel:
    """Seeded random model; projection scale defaults to 1/sqrt(d_model)."""
    rng = np.random.default_rng(seed)
    d = spec.d_model
    scale = weight_scale if weight_scale is not None else 1.0 / np.sqrt(d)
    layers = []
    for _ in range(spec.n_layers):
        layers.append(LayerWeights(
            w_q=rng.normal(0, scale, (d, spec.n_heads * spec.d_head)),
            w_k=rng.normal(0, scale, (d, spec.kv_width)),
            w_v=rng.normal(0, scale, (d, spec.kv_width)),
            w_o=rng.normal(0, scale, (spec.n_heads * spec.d_head, d)),
        ))
    return ToyModel(
        spec=spec,
        layers=layers,
        embedding=rng.normal(0, 1.0, (spec.vocab_size, d)),
        head=rng.normal(0, scale, (d, spec.vocab_size)),
        attn_norms=[np.ones(d) for _ in range(spec.n_layers)],
        final_norm=np.ones(d),
    )


def save_toy_model(model: ToyModel, manifest_path) -> None:
    extras = {"embedding": model.embedding, "head": model.head,
              "final_norm": model.final_norm}
    for i, g in enumerate(model.attn_norms):
        extras[f"layers.{i}.attn_norm"] = g
    save_model(model.spec, model.layers, manifest_path, extra_tensors=extras)


def load_toy_model(manifest_path) -> ToyModel:
    from .tensorio import load_model, read_manifest

    spec, layers = load_model(manifest_path)
    _, tensors = read_manifest(manifest_path)
    try:
        return ToyModel(
            spec=spec,
            layers=layers,
            embedding=tensors["embedding"],
            head=tensors["head"],
            attn_norms=[tensors[f"layers.{i}.attn_norm"] for i in range(spec.n_layers)],
            final_norm=tensors["final_norm"],
        )
    except KeyError as e:
        raise ValidationError(f"model manifest lacks engine tensor {e}") from None


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return x / scale * gain


def rope_rotate(heads: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate interleaved pairs of each head vector by position-dependent
    angles. ``heads`` is (t, n_heads, d_head); position 0 is the identity."""
    t, n, d_h = heads.shape
    if d_h % 2 != 0:
        raise ValidationError("rotary embedding needs an even head dimension")
    half = d_h // 2
    freqs = theta ** (-2.0 * np.arange(half) / d_h)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    cos, sin = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
    even, odd = heads[..., 0::2], heads[..., 1::2]
    out = np.empty_like(heads)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _split_heads(flat: np.ndarray, n: int, d_h: int) -> np.ndarray:
    return flat.reshape(flat.shape[0], n, d_h)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tokens(spec: ModelSpec, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] == 0:
        raise ValidationError("token sequence must be non-empty and 1-D")
    if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
        raise ValidationError("token id out of vocabulary")
    return tokens


def attention_reference(
    model: ToyModel, tokens, capture_activations: bool = False
) -> np.ndarray | tuple[np.ndarray, list[np.ndarray]]:
    """Causal multi-head attention forward pass with the full KV cache."""
    spec = model.spec
    tokens = _check_tokens(spec, tokens)
    t = tokens.shape[0]
    d_h = spec.d_head
    share = spec.n_heads // spec.n_kv_heads
    positions = np.arange(t)
    causal = np.tril(np.ones((t, t), dtype=bool))
    x = model.embedding[tokens]
    captured = []
    for lw, gain in zip(model.layers, model.attn_norms):
        a = rms_norm(x, gain)
        if capture_activations:
            captured.append(a.copy())
        q = rope_rotate(_split_heads(a @ lw.w_q, spec.n_heads, d_h), positions, spec.rope_theta)
        k = rope_rotate(_split_heads(a @ lw.w_k, spec.n_kv_heads, d_h), positions, spec.rope_theta)
        v = _split_heads(a @ lw.w_v, spec.n_kv_heads, d_h)
        out = np.zeros_like(x)
        for h in range(spec.n_heads):
            kv = h // share
            scores = q[:, h, :] @ k[:, kv, :].T / np.sqrt(d_h)
            scores = np.where(causal, scores, -np.inf)
            ctx = _softmax_rows(scores) @ v[:, kv, :]
            out += ctx @ lw.w_o[h * d_h : (h + 1) * d_h, :]
        x = x + out
    logits = rms_norm(x, model.final_norm) @ model.head
    if capture_activations:
        return logits, captured
    return logits


def collect_activations(model: ToyModel, tokens, provenance: str = "engine") -> CalibrationSet:
    """Capture per-layer post-norm attention inputs (the x of every
    projection this package calibrates against)."""
    tokens = _check_tokens(model.spec, tokens)
    _, captured = attention_reference(model, tokens, capture_activations=True)
    return CalibrationSet(
        activations=captured,
        token_count=int(tokens.shape[0]),
        provenance=provenance,
        tokens=[int(t) for t in tokens],
    )


def sequence_loss(model: ToyModel, tokens) -> float:
    """Mean next-token cross-entropy over the sequence."""
    tokens = _check_tokens(model.spec, tokens)
    if tokens.shape[0] < 2:
        raise ValidationError("loss needs at least 2 tokens")
    logits = attention_reference(model, tokens)[:-1]
    targets = tokens[1:]
    m = logits.max(axis=1)
    logz = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    picked = logits[np.arange(len(targets)), targets]
    return float(np.mean(logz - picked))


# ---------------------------------------------------------------------------
# latent cache


class LatentCache:
    """Per-session store of per-token Key-group latents and Value latents
    for every layer, optionally quantized per token."""

    def __init__(
        self,
        key_widths: list[list[int]],
        value_widths: list[int],
        quant_bits: int | None = None,
        quant_seed: int = 0,
    ):
        self.key_widths = key_widths
        self.value_widths = value_widths
        self.quant_bits = quant_bits
        self.quant_seed = quant_seed
        self.tokens = 0
        n_layers = len(key_widths)
        # raw rows (unquantized) or QuantizedLatent per token
        self._keys: list[list[list]] = [[[] for _ in ws] for ws in key_widths]
        self._values: list[list] = [[] for _ in range(n_layers)]

    def _store(self, rows: np.ndarray) -> list:
        if self.quant_bits is None:
            return [rows[i] for i in range(rows.shape[0])]
        return [
            quantize_token(rows[i], self.quant_bits, self.quant_seed)
            for i in range(rows.shape[0])
        ]

    def _fetch(self, stored: list, width: int) -> np.ndarray:
        if not stored:
            return np.zeros((0, width))
        if self.quant_bits is None:
            return np.stack(stored)
        return np.stack([dequantize_token(q) for q in stored])

    def append(self, layer: int, z_groups: list[np.ndarray], z_v: np.ndarray) -> None:
        for j, z in enumerate(z_groups):
            self._keys[layer][j].extend(self._store(z))
        self._values[layer].extend(self._store(z_v))
        if layer == len(self._values) - 1:
            self.tokens += z_v.shape[0]

    def key_latents(self, layer: int) -> list[np.ndarray]:
        return [
            self._fetch(stored, w)
            for stored, w in zip(self._keys[layer], self.key_widths[layer])
        ]

    def value_latents(self, layer: int) -> np.ndarray:
        return self._fetch(self._values[layer], self.value_widths[layer])

    @property
    def width_per_token(self) -> int:
        return sum(sum(ws) for ws in self.key_widths) + sum(self.value_widths)

    def nbytes(self, elem_size: int = 8) -> int:
        """Cache footprint: tokens x total latent width x element size.
        Quantized storage counts packed code bytes plus a per-row
        (scale, offset) float pair."""
        if self.quant_bits is None:
            return self.tokens * self.width_per_token * elem_size
        total = 0
        widths = [w for ws in self.key_widths for w in ws]
        widths += list(self.value_widths)
        for w in widths:
            padded = 1
            while padded < w:
                padded *= 2
            total += self.tokens * ((padded * self.quant_bits + 7) // 8 + 2 * elem_size)
        return total


def cache_width_per_token(artifacts: list[tuple[CompressedKey, CompressedValue]]) -> int:
    """Total latent width cached per token across layers."""
    return sum(ck.cache_width + cv.rank for ck, cv in artifacts)


def compression_ratio(
    spec: ModelSpec, artifacts: list[tuple[CompressedKey, CompressedValue]]
) -> float:
    """1 - kept/original over the full per-token KV width."""
    original = 2 * spec.kv_width * len(artifacts)
    return 1.0 - cache_width_per_token(artifacts) / original


# ---------------------------------------------------------------------------
# compressed forward pass


def attention_compressed(
    model: ToyModel,
    artifacts: list[tuple[CompressedKey, CompressedValue]],
    tokens,
    mode: str = "fused",
    quant_bits: int | None = None,
    quant_seed: int = 0,
    prefill_len: int | None = None,
    return_cache: bool = False,
):
    """Forward pass against the compressed latent cache.

    Keys: per-group latents are cached; every step reconstructs the
    cached keys to full head rows, restores original head order, and
    applies RoPE post-reconstruction. Values: latents feed the per-head
    fused output blocks directly (mode="fused"), or are expanded through
    the retained right factor and the original w_o (mode="explicit").

    ``prefill_len`` processes that many tokens as one batch and the rest
    one by one; results are identical either way.
    """
    spec = model.spec
    tokens = _check_tokens(spec, tokens)
    if len(artifacts) != spec.n_layers:
        raise ValidationError("artifact count != layer count")
    if mode not in ("fused", "explicit"):
        raise ValidationError(f"unknown mode {mode!r}")
    if mode == "explicit" and any(cv.r_v_factor is None for _, cv in artifacts):
        raise ValidationError("explicit mode requires retained value right factors")
    t = tokens.shape[0]
    if prefill_len is None:
        prefill_len = t
    if not 1 <= prefill_len <= t:
        raise ValidationError("prefill_len out of range")

    cache = LatentCache(
        key_widths=[list(ck.ranks) for ck, _ in artifacts],
        value_widths=[cv.rank for _, cv in artifacts],
        quant_bits=quant_bits,
        quant_seed=quant_seed,
    )
    d_h = spec.d_head
    share = spec.n_heads // spec.n_kv_heads
    logits_rows = []

    def process_chunk(chunk_tokens: np.ndarray, pos0: int) -> None:
        m = chunk_tokens.shape[0]
        positions = np.arange(pos0, pos0 + m)
        x = model.embedding[chunk_tokens]
        for li, ((ck, cv), lw, gain) in enumerate(
            zip(artifacts, model.layers, model.attn_norms)
        ):
            a = rms_norm(x, gain)
            cache.append(li, key_latents(ck, a), a @ cv.l_v)

            total = pos0 + m
            all_pos = np.arange(total)
            k_full = reconstruct_keys(ck, cache.key_latents(li))
            k = rope_rotate(_split_heads(k_full, spec.n_kv_heads, d_h), all_pos, spec.rope_theta)
            z_v = cache.value_latents(li)

            q = rope_rotate(_split_heads(a @ lw.w_q, spec.n_heads, d_h), positions, spec.rope_theta)
            causal = positions[:, None] >= all_pos[None, :]
            out = np.zeros_like(x)
            for h in range(spec.n_heads):
                kv = h // share
                scores = q[:, h, :] @ k[:, kv, :].T / np.sqrt(d_h)
                scores = np.where(causal, scores, -np.inf)
                probs = _softmax_rows(scores)
                if mode == "fused":
                    out += (probs @ z_v) @ cv.fused_block(h)
                else:
                    v_rows = z_v @ cv.r_v_factor[:, kv * d_h : (kv + 1) * d_h]
                    out += (probs @ v_rows) @ lw.w_o[h * d_h : (h + 1) * d_h, :]
            x = x + out
        logits_rows.append(rms_norm(x, model.final_norm) @ model.head)

    process_chunk(tokens[:prefill_len], 0)
    for i in range(prefill_len, t):
        process_chunk(tokens[i : i + 1], i)
    logits = np.concatenate(logits_rows, axis=0)
    if return_cache:
        return logits, cache
    return logits


def fidelity_report(reference_logits: np.ndarray, compressed_logits: np.ndarray) -> dict:
    """Scalar fidelity summary between two logit matrices."""
    a = np.asarray(reference_logits, dtype=np.float64)
    b = np.asarray(compressed_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"logit shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    ref_norm = np.linalg.norm(a)
    fa, fb = a[-1], b[-1]
    denom = np.linalg.norm(fa) * np.linalg.norm(fb)
    cosine = float(fa @ fb / denom) if denom > 0 else 1.0
    return {
        "max_abs_err": float(np.max(np.abs(diff))),
        "frobenius_rel_err": float(np.linalg.norm(diff) / ref_norm) if ref_norm > 0 else 0.0,
        "final_token_cosine": cosine,
    }
