import numpy as np
import pytest

from kvcompress import ModelSpec
from kvcompress.engine import random_toy_model
from kvcompress.tensorio import LayerWeights


def make_spec(d_model=32, n_layers=2, n_heads=4, n_kv_heads=4, vocab=50, theta=10000.0):
    return ModelSpec(
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        n_kv_heads=n_kv_heads,
        d_head=d_model // n_heads,
        rope_theta=theta,
        vocab_size=vocab,
    )


def make_model(seed=0, **kw):
    return random_toy_model(make_spec(**kw), seed)


def duplicate_head_wk(rng, d_model, n_heads, d_h, noise=0.0):
    """Key projection whose heads come in duplicate pairs scattered across
    positions: head i and head i + n_heads//2 share a block."""
    half = n_heads // 2
    bases = [rng.normal(0, 1, (d_model, d_h)) for _ in range(half)]
    blocks = [None] * n_heads
    for i, base in enumerate(bases):
        blocks[i] = base
        blocks[i + half] = base + (noise * rng.normal(0, 1, base.shape) if noise else 0.0)
    return np.concatenate(blocks, axis=1)


def duplicate_head_model(seed, d_model=32, n_heads=4, n_layers=2, vocab=50, noise=0.0):
    """Random toy model whose per-layer w_k has scattered duplicate head pairs."""
    rng = np.random.default_rng(seed)
    model = make_model(seed=seed, d_model=d_model, n_heads=n_heads,
                       n_kv_heads=n_heads, n_layers=n_layers, vocab=vocab)
    d_h = model.spec.d_head
    scale = 1.0 / np.sqrt(d_model)
    for lw in model.layers:
        lw.w_k = scale * duplicate_head_wk(rng, d_model, n_heads, d_h, noise=noise)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


def record_criterion(number, name, ok):
    ACCEPTANCE_RESULTS[number] = (name, bool(ok))
    print(f"criterion {number:02d} {name}: {'PASS' if ok else 'FAIL'}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, ok = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(
            f"criterion {number:02d} {name}: {'PASS' if ok else 'FAIL'}"
        )
