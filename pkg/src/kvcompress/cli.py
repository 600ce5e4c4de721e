"""Command-line pipeline driver.

Subcommands: ``synth`` (seeded toy-model generation), ``compress``
(scores -> allocation -> per-layer Key and Value compression -> save),
``fisher`` (score file generation), ``eval`` (reference vs compressed
fidelity + memory), ``report`` (inspect a compressed artifact).

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import engine, rankalloc, tensorio
from .cka import head_similarity
from .errors import NumericError, ValidationError
from .keycomp import compress_key
from .valuecomp import compress_value

DEFAULTS = {
    "ratio": None,
    "group_size": 4,
    "whiten": True,
    "calib_iters": 1,
    "quant": "off",
    "ridge": 0.0,
    "sim_mode": "weights",
    "calib_seed": 0,
    "calib_tokens": 128,
    "fisher_epsilon": 1e-3,
    "fisher_samples": 32,
    "seed": 0,
}


def _load_config(path: str | None) -> dict:
    """Flat key=value config file; '#' starts a comment line."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    out = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"bad config line: {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def _resolve(args, key: str, cast):
    """CLI flag > config file > hard default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    cfg = getattr(args, "_config", {})
    if key in cfg:
        raw = cfg[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return DEFAULTS[key]


def _synth_tokens(spec: tensorio.ModelSpec, seed: int, count: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, spec.vocab_size, size=count)


def _get_calibration(args, model) -> tensorio.CalibrationSet:
    if getattr(args, "calib", None):
        return tensorio.load_calibration(args.calib, model.spec)
    seed = int(_resolve(args, "calib_seed", int))
    count = int(_resolve(args, "calib_tokens", int))
    tokens = _synth_tokens(model.spec, seed, count)
    return engine.collect_activations(model, tokens, provenance=f"synthetic seed={seed}")


def cmd_synth(args) -> int:
    spec = tensorio.ModelSpec(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        n_kv_heads=args.n_kv_heads,
        d_head=args.d_model // args.n_heads,
        rope_theta=args.rope_theta,
        vocab_size=args.vocab_size,
    )
    model = engine.random_toy_model(spec, args.seed)
    engine.save_toy_model(model, args.out)
    print(f"wrote model manifest: {args.out}")
    return 0


def cmd_fisher(args) -> int:
    model = engine.load_toy_model(args.model)
    calib = _get_calibration(args, model)
    if calib.tokens is None:
        raise ValidationError("calibration set carries no token ids; cannot run finite differences")
    scores = rankalloc.fisher_scores(
        model,
        tokens=calib.tokens,
        epsilon=float(_resolve(args, "fisher_epsilon", float)),
        n_samples=int(_resolve(args, "fisher_samples", int)),
        seed=int(_resolve(args, "seed", int)),
    )
    rankalloc.save_scores(scores, args.out)
    print(f"wrote score file: {args.out}")
    return 0


def cmd_compress(args) -> int:
    args._config = _load_config(getattr(args, "config", None))
    ratio = _resolve(args, "ratio", float)
    if ratio is None:
        raise ValidationError("target ratio required (--ratio or config)")
    ratio = float(ratio)
    if not 0.0 < ratio < 1.0:
        raise ValidationError("ratio must be in (0,1)")
    group_size = int(_resolve(args, "group_size", int))
    whiten = bool(_resolve(args, "whiten", bool))
    calib_iters = int(_resolve(args, "calib_iters", int))
    quant = str(_resolve(args, "quant", str))
    if quant not in ("off", "4", "3"):
        raise ValidationError("quant must be off, 4, or 3")
    ridge = float(_resolve(args, "ridge", float))
    sim_mode = str(_resolve(args, "sim_mode", str))

    model = engine.load_toy_model(args.model)
    spec = model.spec

    print("[stage] calibration")
    calib = _get_calibration(args, model)

    print("[stage] fisher scores")
    if getattr(args, "scores", None):
        scores = rankalloc.fisher_scores(model, method="external", score_file=args.scores)
    else:
        if calib.tokens is None:
            raise ValidationError(
                "calibration file has no token ids; pass --scores or synthetic calibration"
            )
        scores = rankalloc.fisher_scores(
            model,
            tokens=calib.tokens,
            epsilon=float(_resolve(args, "fisher_epsilon", float)),
            n_samples=int(_resolve(args, "fisher_samples", int)),
            seed=int(_resolve(args, "seed", int)),
        )

    print("[stage] rank allocation")
    alloc = rankalloc.allocate(scores, spec, ratio, group_size=group_size)

    artifacts = []
    g = spec.n_kv_heads // group_size
    for li, lw in enumerate(model.layers):
        x = calib.activations[li]
        print(f"[stage] layer {li} key path (similarity -> reorder -> grouped SVD)")
        sim = head_similarity(lw.w_k, spec.d_head, mode=sim_mode,
                              x=x if sim_mode == "activations" else None)
        ck = compress_key(
            lw.w_k, spec, sim,
            rank_per_group=[alloc.key_rank_per_group[li]] * g,
            x=x, whiten=whiten, group_size=group_size, ridge=ridge,
        )
        print(f"[stage] layer {li} value path (SVD -> calibration -> fusion)")
        cv = compress_value(
            lw.w_v, lw.w_o, spec, alloc.value_rank[li],
            x=x, whiten=whiten, calibrate_iters=calib_iters, ridge=ridge,
        )
        artifacts.append((ck, cv))
        print(
            f"layer {li}: key rank/group={alloc.key_rank_per_group[li]} "
            f"value rank={alloc.value_rank[li]}"
        )

    print("[stage] save")
    allocation = alloc.to_dict()
    allocation["quant"] = quant
    tensorio.save_compressed(
        spec, artifacts, args.out,
        allocation=allocation,
        strip_r_factor=bool(getattr(args, "strip_r_factor", False)),
    )
    print(f"achieved ratio: {alloc.achieved_ratio:.6f} (target {ratio})")
    print(f"wrote compressed artifact: {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = engine.load_toy_model(args.model)
    spec, artifacts = tensorio.load_compressed(args.compressed)
    if spec.to_dict() != model.spec.to_dict():
        raise ValidationError("compressed artifact does not match model spec")
    if args.tokens:
        tokens = np.array([int(s) for s in args.tokens.split(",")], dtype=np.int64)
    else:
        tokens = _synth_tokens(spec, args.seq_seed, args.seq_len)

    manifest = json.loads(Path(args.compressed).read_text())
    quant = args.quant or manifest.get("allocation", {}).get("quant", "off")
    quant_bits = None if quant == "off" else int(quant)

    ref = engine.attention_reference(model, tokens)
    comp, cache = engine.attention_compressed(
        model, artifacts, tokens, quant_bits=quant_bits, return_cache=True
    )
    report = engine.fidelity_report(ref, comp)
    t = len(tokens)
    baseline_bytes = t * 2 * spec.kv_width * spec.n_layers * 8
    report.update({
        "tokens": t,
        "quant": quant,
        "cache_width_per_token": cache.width_per_token,
        "baseline_width_per_token": 2 * spec.kv_width * spec.n_layers,
        "cache_bytes": cache.nbytes(),
        "baseline_bytes": baseline_bytes,
        "memory_ratio": cache.nbytes() / baseline_bytes,
        "compression_ratio": engine.compression_ratio(spec, artifacts),
    })
    for key, val in report.items():
        print(f"{key}: {val}")
    if args.json_out:
        Path(args.json_out).write_text(json.dumps({"version": 1, "report": report}, indent=1))
        print(f"wrote report: {args.json_out}")
    return 0


def cmd_report(args) -> int:
    spec, artifacts = tensorio.load_compressed(args.compressed)
    manifest = json.loads(Path(args.compressed).read_text())
    print(f"layers: {spec.n_layers}  kv width: {spec.kv_width}")
    for li, (ck, cv) in enumerate(artifacts):
        print(
            f"layer {li}: key ranks {ck.ranks} (perm {ck.grouping.permutation}) "
            f"value rank {cv.rank}"
        )
    print(f"compression ratio: {engine.compression_ratio(spec, artifacts):.6f}")
    alloc = manifest.get("allocation")
    if alloc:
        print(f"allocation: {json.dumps(alloc)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvcompress")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a seeded random toy model manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--d-model", type=int, default=32)
    sp.add_argument("--n-layers", type=int, default=2)
    sp.add_argument("--n-heads", type=int, default=4)
    sp.add_argument("--n-kv-heads", type=int, default=4)
    sp.add_argument("--rope-theta", type=float, default=10000.0)
    sp.add_argument("--vocab-size", type=int, default=64)
    sp.set_defaults(func=cmd_synth)

    def add_calib_flags(q):
        q.add_argument("--calib", help="calibration manifest (default: synthetic)")
        q.add_argument("--calib-seed", type=int, default=None)
        q.add_argument("--calib-tokens", type=int, default=None)
        q.add_argument("--fisher-epsilon", type=float, default=None)
        q.add_argument("--fisher-samples", type=int, default=None)
        q.add_argument("--seed", type=int, default=None)

    cp = sub.add_parser("compress", help="run the full compression pipeline")
    cp.add_argument("--model", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--ratio", type=float, default=None)
    cp.add_argument("--group-size", type=int, default=None)
    cp.add_argument("--whiten", dest="whiten", action="store_true", default=None)
    cp.add_argument("--no-whiten", dest="whiten", action="store_false")
    cp.add_argument("--calib-iters", type=int, default=None)
    cp.add_argument("--quant", choices=["off", "4", "3"], default=None)
    cp.add_argument("--ridge", type=float, default=None)
    cp.add_argument("--sim-mode", choices=["weights", "activations"], default=None)
    cp.add_argument("--scores", help="external Fisher score file")
    cp.add_argument("--strip-r-factor", action="store_true")
    cp.add_argument("--config", help="flat key=value config file")
    add_calib_flags(cp)
    cp.set_defaults(func=cmd_compress)

    fp = sub.add_parser("fisher", help="estimate Fisher scores to a file")
    fp.add_argument("--model", required=True)
    fp.add_argument("--out", required=True)
    add_calib_flags(fp)
    fp.set_defaults(func=cmd_fisher)

    ep = sub.add_parser("eval", help="reference vs compressed fidelity report")
    ep.add_argument("--model", required=True)
    ep.add_argument("--compressed", required=True)
    ep.add_argument("--tokens", help="comma-separated token ids")
    ep.add_argument("--seq-seed", type=int, default=0)
    ep.add_argument("--seq-len", type=int, default=64)
    ep.add_argument("--quant", choices=["off", "4", "3"], default=None)
    ep.add_argument("--json-out")
    ep.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="inspect a compressed artifact")
    rp.add_argument("--compressed", required=True)
    rp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
