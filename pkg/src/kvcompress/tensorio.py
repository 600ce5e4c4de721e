"""On-disk formats: model manifests, compressed artifacts, calibration sets.

A manifest is a JSON file with a tensor table of
``{name, file, offset, shape, dtype}`` entries pointing into raw
little-endian IEEE-754 blobs ("f8" or "f4"; everything is upcast to
float64 on load). Save followed by load is bit-exact on float payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import NumericError, ValidationError

if TYPE_CHECKING:  # avoid an import cycle; only needed for annotations
    from .keycomp import CompressedKey
    from .valuecomp import CompressedValue

FORMAT_VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


@dataclass
class ModelSpec:
    """Attention geometry of a decoder-only model."""

    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    rope_theta: float = 10000.0
    vocab_size: int = 0

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValidationError(
                f"d_model {self.d_model} != n_heads {self.n_heads} x d_head {self.d_head}"
            )
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads != 0:
            raise ValidationError(
                f"n_kv_heads {self.n_kv_heads} must divide n_heads {self.n_heads}"
            )
        if self.rope_theta <= 0:
            raise ValidationError("rope_theta must be positive")

    @property
    def kv_width(self) -> int:
        """Per-token width of one uncompressed K or V row."""
        return self.n_kv_heads * self.d_head

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_head": self.d_head,
            "rope_theta": self.rope_theta,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: d[k] for k in (
            "d_model", "n_layers", "n_heads", "n_kv_heads", "d_head",
            "rope_theta", "vocab_size",
        )})


@dataclass
class LayerWeights:
    """Per-layer attention projections."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def validate(self, spec: ModelSpec) -> None:
        expect = {
            "w_q": (spec.d_model, spec.n_heads * spec.d_head),
            "w_k": (spec.d_model, spec.kv_width),
            "w_v": (spec.d_model, spec.kv_width),
            "w_o": (spec.n_heads * spec.d_head, spec.d_model),
        }
        for name, shape in expect.items():
            m = getattr(self, name)
            if m.shape != shape:
                raise ValidationError(f"{name} shape {m.shape} != expected {shape}")


@dataclass
class CalibrationSet:
    """Per-layer attention-block input activations, one t x d_model matrix
    per layer, all sharing the token count. ``tokens`` optionally records
    the source token ids (needed for Fisher estimation)."""

    activations: list[np.ndarray]
    token_count: int
    provenance: str = ""
    tokens: list[int] | None = None

    def __post_init__(self):
        for i, a in enumerate(self.activations):
            if a.shape[0] != self.token_count:
                raise ValidationError(
                    f"layer {i} has {a.shape[0]} tokens, expected {self.token_count}"
                )


class _BlobWriter:
    def __init__(self, blob_name: str):
        self.blob_name = blob_name
        self.chunks: list[bytes] = []
        self.offset = 0
        self.table: list[dict] = []

    def add(self, name: str, array: np.ndarray) -> str:
        a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        raw = a.tobytes()
        self.table.append({
            "name": name,
            "file": self.blob_name,
            "offset": self.offset,
            "shape": list(a.shape),
            "dtype": "f8",
        })
        self.chunks.append(raw)
        self.offset += len(raw)
        return name


def _write_manifest(manifest_path: Path, manifest: dict, writer: _BlobWriter) -> None:
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    (manifest_path.parent / writer.blob_name).write_bytes(b"".join(writer.chunks))
    manifest["tensors"] = writer.table
    manifest_path.write_text(json.dumps(manifest, indent=1))


def read_manifest(manifest_path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a manifest and all tensors it references (upcast to float64)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ValidationError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blobs: dict[str, bytes] = {}
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        fname = entry["file"]
        if fname not in blobs:
            blob_path = manifest_path.parent / fname
            if not blob_path.exists():
                raise ValidationError(f"tensor blob not found: {blob_path}")
            blobs[fname] = blob_path.read_bytes()
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ValidationError(f"unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, end = entry["offset"], entry["offset"] + count * dtype.itemsize
        if end > len(blobs[fname]):
            raise ValidationError(f"tensor {entry['name']} extends past end of blob")
        a = np.frombuffer(blobs[fname][start:end], dtype=dtype).reshape(shape)
        a = a.astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"tensor {entry['name']} contains non-finite entries")
        tensors[entry["name"]] = a
    return manifest, tensors


# ---------------------------------------------------------------------------
# model manifests


def save_model(
    spec: ModelSpec,
    layers: list[LayerWeights],
    manifest_path: str | Path,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a model manifest. ``extra_tensors`` carries anything beyond the
    attention projections (embeddings, norm gains, output head)."""
    manifest_path = Path(manifest_path)
    writer = _BlobWriter(manifest_path.stem + ".bin")
    for i, lw in enumerate(layers):
        lw.validate(spec)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            writer.add(f"layers.{i}.{name}", getattr(lw, name))
    for name, arr in (extra_tensors or {}).items():
        writer.add(name, arr)
    _write_manifest(
        manifest_path,
        {"format_version": FORMAT_VERSION, "kind": "model", "spec": spec.to_dict()},
        writer,
    )


def load_model(manifest_path: str | Path) -> tuple[ModelSpec, list[LayerWeights]]:
    """Load spec and per-layer projections, validating all shape invariants."""
    manifest, tensors = read_manifest(manifest_path)
    if manifest.get("kind") != "model":
        raise ValidationError(f"not a model manifest: {manifest_path}")
    spec = ModelSpec.from_dict(manifest["spec"])
    layers = []
    for i in range(spec.n_layers):
        try:
            lw = LayerWeights(*(tensors[f"layers.{i}.{n}"] for n in ("w_q", "w_k", "w_v", "w_o")))
        except KeyError as e:
            raise ValidationError(f"layer {i} tensor missing: {e}") from None
        lw.validate(spec)
        layers.append(lw)
    return spec, layers


# ---------------------------------------------------------------------------
# compressed artifacts


def save_compressed(
    spec: ModelSpec,
    artifacts: list[tuple["CompressedKey", "CompressedValue"]],
    out_path: str | Path,
    allocation: dict | None = None,
    strip_r_factor: bool = False,
) -> None:
    """Write per-layer compressed Key/Value factors plus head permutations.

    ``strip_r_factor`` drops the Value right factor from the artifact;
    inference needs only ``l_v`` and the fused output blocks.
    """
    if not artifacts:
        raise ValidationError("no layers to save")
    out_path = Path(out_path)
    writer = _BlobWriter(out_path.stem + ".bin")
    layer_meta = []
    for i, (ck, cv) in enumerate(artifacts):
        factors = []
        for j, pair in enumerate(ck.factors):
            factors.append({
                "l": writer.add(f"layers.{i}.key.g{j}.l", pair.l),
                "r": writer.add(f"layers.{i}.key.g{j}.r", pair.r_factor),
            })
        key_meta = {
            "group_size": ck.grouping.group_size,
            "groups": ck.grouping.groups,
            "d_head": ck.d_head,
            "ranks": list(ck.ranks),
            "factors": factors,
        }
        value_meta = {
            "rank": cv.rank,
            "l": writer.add(f"layers.{i}.value.l", cv.l_v),
            "fused": writer.add(f"layers.{i}.value.fused", cv.fused_w_o),
        }
        if not strip_r_factor:
            value_meta["r"] = writer.add(f"layers.{i}.value.r", cv.r_v_factor)
        layer_meta.append({"key": key_meta, "value": value_meta})
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "compressed",
        "spec": spec.to_dict(),
        "layers": layer_meta,
    }
    if allocation is not None:
        manifest["allocation"] = allocation
    _write_manifest(out_path, manifest, writer)


def load_compressed(
    path: str | Path,
) -> tuple[ModelSpec, list[tuple["CompressedKey", "CompressedValue"]]]:
    from .headgroup import HeadGrouping
    from .keycomp import CompressedKey
    from .linalg import LowRankPair
    from .valuecomp import CompressedValue

    manifest, tensors = read_manifest(path)
    if manifest.get("kind") != "compressed":
        raise ValidationError(f"not a compressed-model manifest: {path}")
    spec = ModelSpec.from_dict(manifest["spec"])
    artifacts = []
    for meta in manifest["layers"]:
        km = meta["key"]
        grouping = HeadGrouping(group_size=km["group_size"], groups=km["groups"])
        pairs = [
            LowRankPair(l=tensors[f["l"]], r_factor=tensors[f["r"]])
            for f in km["factors"]
        ]
        ck = CompressedKey(
            grouping=grouping, factors=pairs, ranks=list(km["ranks"]), d_head=km["d_head"]
        )
        vm = meta["value"]
        r_factor = tensors[vm["r"]] if "r" in vm else None
        cv = CompressedValue(
            l_v=tensors[vm["l"]],
            r_v_factor=r_factor,
            fused_w_o=tensors[vm["fused"]],
            rank=vm["rank"],
        )
        artifacts.append((ck, cv))
    return spec, artifacts


# ---------------------------------------------------------------------------
# calibration sets


def save_calibration(calib: CalibrationSet, path: str | Path) -> None:
    path = Path(path)
    writer = _BlobWriter(path.stem + ".bin")
    names = [writer.add(f"layers.{i}.x", a) for i, a in enumerate(calib.activations)]
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "calibration",
        "token_count": calib.token_count,
        "provenance": calib.provenance,
        "layers": names,
    }
    if calib.tokens is not None:
        manifest["token_ids"] = [int(t) for t in calib.tokens]
    _write_manifest(path, manifest, writer)


def load_calibration(path: str | Path, spec: ModelSpec) -> CalibrationSet:
    manifest, tensors = read_manifest(path)
    if manifest.get("kind") != "calibration":
        raise ValidationError(f"not a calibration manifest: {path}")
    names = manifest["layers"]
    if len(names) != spec.n_layers:
        raise ValidationError(
            f"calibration has {len(names)} layers, model has {spec.n_layers}"
        )
    activations = []
    for name in names:
        a = tensors[name]
        if a.shape[1] != spec.d_model:
            raise ValidationError(
                f"calibration activations have {a.shape[1]} columns, expected {spec.d_model}"
            )
        activations.append(a)
    t = manifest["token_count"]
    for a in activations:
        if a.shape[0] != t:
            raise ValidationError("calibration layers disagree on token count")
    return CalibrationSet(
        activations=activations,
        token_count=t,
        provenance=manifest.get("provenance", ""),
        tokens=manifest.get("token_ids"),
    )
