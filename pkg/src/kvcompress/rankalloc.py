"""Layer-importance estimation and rank allocation.

Importance is a diagonal empirical Fisher score per projection (mean
squared loss gradient, summed over entries), estimated by central
finite differences on the toy engine. Ranks are then drawn from one
pooled latent-width budget in proportion to the scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensorio import ModelSpec


@dataclass
class FisherScores:
    """Per-layer {key_score, value_score}, all finite and non-negative."""

    key_scores: list[float]
    value_scores: list[float]
    method: str = "finite_difference"
    token_count: int = 0

    def __post_init__(self):
        if len(self.key_scores) != len(self.value_scores):
            raise ValidationError("key/value score lists must have equal length")
        for s in (*self.key_scores, *self.value_scores):
            if not np.isfinite(s) or s < 0:
                raise ValidationError(f"score {s} must be finite and non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.key_scores)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "token_count": self.token_count,
            "layers": [
                {"key_score": k, "value_score": v}
                for k, v in zip(self.key_scores, self.value_scores)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FisherScores":
        layers = d["layers"]
        return cls(
            key_scores=[float(e["key_score"]) for e in layers],
            value_scores=[float(e["value_score"]) for e in layers],
            method=d.get("method", "external"),
            token_count=int(d.get("token_count", 0)),
        )


def save_scores(scores: FisherScores, path) -> None:
    Path(path).write_text(json.dumps(scores.to_dict(), indent=1))


def load_scores(path) -> FisherScores:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"score file not found: {path}")
    try:
        return FisherScores.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValidationError(f"malformed score file: {e}") from None


def _fd_matrix_score(
    model, tokens, matrix: np.ndarray, epsilon: float, n_samples: int, rng: np.random.Generator
) -> float:
    """Mean squared central-difference loss gradient over a sampled entry
    set, scaled up to the full matrix (sum-over-entries semantics)."""
    from .engine import sequence_loss

    total = matrix.size
    n = min(n_samples, total)
    flat_idx = rng.choice(total, size=n, replace=False)
    sq = 0.0
    flat = matrix.reshape(-1)
    for idx in flat_idx:
        orig = flat[idx]
        flat[idx] = orig + epsilon
        up = sequence_loss(model, tokens)
        flat[idx] = orig - epsilon
        down = sequence_loss(model, tokens)
        flat[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValidationError("non-finite loss during Fisher estimation")
        grad = (up - down) / (2.0 * epsilon)
        sq += grad * grad
    return sq / n * total


def fisher_scores(
    model,
    tokens=None,
    method: str = "finite_difference",
    score_file=None,
    epsilon: float = 1e-3,
    n_samples: int = 32,
    seed: int = 0,
) -> FisherScores:
    """Estimate (or load) per-layer Key/Value projection importance.

    finite_difference: perturb a seeded subsample of each projection's
    entries, square the central-difference loss gradients, and
    extrapolate to the full matrix. external: read a score file.
    """
    if method == "external":
        if score_file is None:
            raise ValidationError("external method requires a score file")
        return load_scores(score_file)
    if method != "finite_difference":
        raise ValidationError(f"unknown Fisher method {method!r}")
    if tokens is None:
        raise ValidationError("finite_difference method requires calibration tokens")
    tokens = np.asarray(tokens, dtype=np.int64)
    rng = np.random.default_rng(seed)
    key_scores, value_scores = [], []
    for lw in model.layers:
        key_scores.append(_fd_matrix_score(model, tokens, lw.w_k, epsilon, n_samples, rng))
        value_scores.append(_fd_matrix_score(model, tokens, lw.w_v, epsilon, n_samples, rng))
    return FisherScores(
        key_scores=key_scores,
        value_scores=value_scores,
        method="finite_difference",
        token_count=int(tokens.shape[0]),
    )


@dataclass
class RankAllocation:
    """Per-layer key rank per group and value rank, plus the realized
    compression ratio."""

    key_rank_per_group: list[int]
    value_rank: list[int]
    achieved_ratio: float

    def to_dict(self) -> dict:
        return {
            "key_rank_per_group": self.key_rank_per_group,
            "value_rank": self.value_rank,
            "achieved_ratio": self.achieved_ratio,
        }


def allocate(
    scores: FisherScores,
    spec: ModelSpec,
    target_ratio: float,
    group_size: int = 4,
    r_min: int = 1,
) -> RankAllocation:
    """Split one pooled kept-width budget across all K/V entries in
    proportion to Fisher scores.

    Budget B = round((1 - target_ratio) * total original KV width).
    Key widths move in quanta of g (equal per-group split); value widths
    in quanta of 1. Proportional widths are rounded to their grid,
    clamped, then repaired greedily (trim lowest-score entries, grow
    highest-score) until the kept width equals B exactly.
    """
    if not 0.0 < target_ratio < 1.0:
        raise ValidationError("ratio must be in (0,1)")
    if scores.n_layers != spec.n_layers:
        raise ValidationError(
            f"scores cover {scores.n_layers} layers, model has {spec.n_layers}"
        )
    if spec.n_kv_heads % group_size != 0:
        raise ValidationError(
            f"group size {group_size} does not divide {spec.n_kv_heads} kv heads"
        )
    full = spec.kv_width
    g = spec.n_kv_heads // group_size
    n_layers = spec.n_layers
    budget = round((1.0 - target_ratio) * 2 * full * n_layers)

    # entries: (score, quantum, min_width, full_width), keys then values per layer
    entries = []
    for li in range(n_layers):
        entries.append({"score": scores.key_scores[li], "q": g, "lo": g * r_min, "hi": full})
        entries.append({"score": scores.value_scores[li], "q": 1, "lo": r_min, "hi": full})
    lo_total = sum(e["lo"] for e in entries)
    hi_total = sum(e["hi"] for e in entries)
    if budget < lo_total or budget > hi_total:
        raise ValidationError(
            f"infeasible target: budget {budget} outside [{lo_total}, {hi_total}]"
        )

    total_score = sum(e["score"] for e in entries)
    widths = []
    for e in entries:
        share = budget / len(entries) if total_score == 0 else budget * e["score"] / total_score
        w = e["q"] * round(share / e["q"])
        widths.append(int(min(max(w, e["lo"]), e["hi"])))

    # Greedy repair to hit the budget exactly. Prefer unit-quantum (value)
    # entries when the remaining gap is smaller than a key quantum.
    for _ in range(4 * (hi_total - lo_total) + 8):
        d = sum(widths) - budget
        if d == 0:
            break
        if d > 0:
            cand = [i for i, e in enumerate(entries) if widths[i] - e["q"] >= e["lo"]]
            if d < g:
                fine = [i for i in cand if entries[i]["q"] <= d]
                cand = fine or cand
            if not cand:
                raise ValidationError("cannot meet budget exactly with these constraints")
            i = min(cand, key=lambda i: (entries[i]["score"], i))
            widths[i] -= entries[i]["q"]
        else:
            cand = [i for i, e in enumerate(entries) if widths[i] + e["q"] <= e["hi"]]
            if -d < g:
                fine = [i for i in cand if entries[i]["q"] <= -d]
                cand = fine or cand
            if not cand:
                raise ValidationError("cannot meet budget exactly with these constraints")
            i = max(cand, key=lambda i: (entries[i]["score"], -i))
            widths[i] += entries[i]["q"]
    else:
        raise ValidationError("budget repair did not converge")

    key_rank_per_group = [widths[2 * li] // g for li in range(n_layers)]
    value_rank = [widths[2 * li + 1] for li in range(n_layers)]
    achieved = 1.0 - sum(widths) / (2 * full * n_layers)
    return RankAllocation(
        key_rank_per_group=key_rank_per_group,
        value_rank=value_rank,
        achieved_ratio=achieved,
    )
