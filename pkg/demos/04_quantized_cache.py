"""Quantizing the latent cache: memory versus fidelity.

Runs the same compressed model with an unquantized, 4-bit, and 3-bit
latent cache and reports the memory footprint and output fidelity of
each. Latents pass through a randomized orthonormal transform before
per-token affine quantization, which flattens outliers.
"""

import numpy as np

from kvcompress import ModelSpec
from kvcompress.cka import head_similarity
from kvcompress.engine import (
    attention_compressed,
    attention_reference,
    collect_activations,
    fidelity_report,
    random_toy_model,
)
from kvcompress.keycomp import compress_key
from kvcompress.valuecomp import compress_value

spec = ModelSpec(d_model=32, n_layers=2, n_heads=4, n_kv_heads=4, d_head=8,
                 vocab_size=64)
model = random_toy_model(spec, seed=3)
rng = np.random.default_rng(0)
tokens = rng.integers(0, 64, 64)
calib = collect_activations(model, tokens)

artifacts = []
for li, lw in enumerate(model.layers):
    x = calib.activations[li]
    sim = head_similarity(lw.w_k, spec.d_head)
    ck = compress_key(lw.w_k, spec, sim, [12, 12], x=x, whiten=True, group_size=2)
    cv = compress_value(lw.w_v, lw.w_o, spec, 24, x=x, whiten=True, calibrate_iters=1)
    artifacts.append((ck, cv))

ref = attention_reference(model, tokens)
baseline_bytes = len(tokens) * 2 * spec.kv_width * spec.n_layers * 8
print(f"uncompressed cache: {baseline_bytes} bytes for {len(tokens)} tokens\n")
print(f"{'cache':<12}{'bytes':>8}{'of baseline':>14}{'final cosine':>14}")
for label, bits in (("float64", None), ("4-bit", 4), ("3-bit", 3)):
    comp, cache = attention_compressed(model, artifacts, tokens,
                                       quant_bits=bits, return_cache=True)
    report = fidelity_report(ref, comp)
    nbytes = cache.nbytes()
    print(f"{label:<12}{nbytes:>8}{nbytes / baseline_bytes:>13.1%}"
          f"{report['final_token_cosine']:>14.6f}")
