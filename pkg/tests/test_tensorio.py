import json

import numpy as np
import pytest

from kvcompress.cka import head_similarity
from kvcompress.errors import NumericError, ValidationError
from kvcompress.keycomp import compress_key, reconstruction_error
from kvcompress.tensorio import (
    CalibrationSet,
    LayerWeights,
    ModelSpec,
    load_calibration,
    load_compressed,
    load_model,
    read_manifest,
    save_calibration,
    save_compressed,
    save_model,
)
from kvcompress.valuecomp import compress_value
from tests.conftest import make_spec


class TestModelSpec:
    def test_kv_width(self):
        spec = make_spec(d_model=32, n_heads=4, n_kv_heads=2)
        assert spec.kv_width == 16

    def test_dict_round_trip(self):
        spec = make_spec(d_model=32, n_heads=4, n_kv_heads=2, theta=500.0, vocab=99)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_bad_geometry(self):
        with pytest.raises(ValidationError):
            ModelSpec(d_model=30, n_layers=1, n_heads=4, n_kv_heads=4, d_head=8)
        with pytest.raises(ValidationError):
            ModelSpec(d_model=32, n_layers=1, n_heads=4, n_kv_heads=3, d_head=8)
        with pytest.raises(ValidationError):
            ModelSpec(d_model=32, n_layers=1, n_heads=4, n_kv_heads=4, d_head=8,
                      rope_theta=-1.0)


def random_layers(rng, spec, n=None):
    layers = []
    for _ in range(n if n is not None else spec.n_layers):
        layers.append(LayerWeights(
            w_q=rng.normal(0, 1, (spec.d_model, spec.n_heads * spec.d_head)),
            w_k=rng.normal(0, 1, (spec.d_model, spec.kv_width)),
            w_v=rng.normal(0, 1, (spec.d_model, spec.kv_width)),
            w_o=rng.normal(0, 1, (spec.n_heads * spec.d_head, spec.d_model)),
        ))
    return layers


class TestModelRoundTrip:
    def test_bit_exact(self, rng, tmp_path):
        spec = make_spec(n_layers=3)
        layers = random_layers(rng, spec)
        path = tmp_path / "model.json"
        save_model(spec, layers, path, extra_tensors={"embedding": rng.normal(0, 1, (50, 32))})
        spec2, layers2 = load_model(path)
        assert spec2 == spec
        for a, b in zip(layers, layers2):
            for name in ("w_q", "w_k", "w_v", "w_o"):
                assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_extra_tensor_preserved(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        emb = rng.normal(0, 1, (50, 32))
        path = tmp_path / "model.json"
        save_model(spec, random_layers(rng, spec), path, extra_tensors={"embedding": emb})
        _, tensors = read_manifest(path)
        assert np.array_equal(tensors["embedding"], emb)

    def test_blob_is_raw_little_endian_f8(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        layers = random_layers(rng, spec)
        path = tmp_path / "model.json"
        save_model(spec, layers, path)
        manifest = json.loads(path.read_text())
        entry = manifest["tensors"][0]
        assert entry["name"] == "layers.0.w_q"
        blob = (tmp_path / entry["file"]).read_bytes()
        count = int(np.prod(entry["shape"]))
        raw = blob[entry["offset"] : entry["offset"] + 8 * count]
        decoded = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])
        assert np.array_equal(decoded, layers[0].w_q)

    def test_shape_mismatch_rejected_on_save(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        bad = random_layers(rng, spec)
        bad[0].w_k = bad[0].w_k[:, :-1]
        with pytest.raises(ValidationError):
            save_model(spec, bad, tmp_path / "bad.json")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            load_model(tmp_path / "nope.json")

    def test_missing_blob(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        path = tmp_path / "model.json"
        save_model(spec, random_layers(rng, spec), path)
        (tmp_path / "model.bin").unlink()
        with pytest.raises(ValidationError):
            load_model(path)

    def test_nonfinite_payload_rejected(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        layers = random_layers(rng, spec)
        layers[0].w_q[0, 0] = np.nan
        path = tmp_path / "model.json"
        save_model(spec, layers, path)
        with pytest.raises(NumericError):
            load_model(path)

    def test_wrong_kind_rejected(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        path = tmp_path / "model.json"
        save_model(spec, random_layers(rng, spec), path)
        with pytest.raises(ValidationError):
            load_calibration(path, spec)


class TestCompressedRoundTrip:
    def make_artifacts(self, rng, spec):
        arts = []
        for _ in range(spec.n_layers):
            w_k = rng.normal(0, 1, (spec.d_model, spec.kv_width))
            w_v = rng.normal(0, 1, (spec.d_model, spec.kv_width))
            w_o = rng.normal(0, 1, (spec.n_heads * spec.d_head, spec.d_model))
            sim = head_similarity(w_k, spec.d_head)
            ck = compress_key(w_k, spec, sim, [5, 3], group_size=2)
            cv = compress_value(w_v, w_o, spec, 6, calibrate_iters=0)
            arts.append((ck, cv))
        return arts

    def test_bit_exact(self, rng, tmp_path):
        spec = make_spec(n_layers=2)
        arts = self.make_artifacts(rng, spec)
        path = tmp_path / "compressed.json"
        save_compressed(spec, arts, path, allocation={"target_ratio": 0.5})
        spec2, arts2 = load_compressed(path)
        assert spec2 == spec
        for (ck, cv), (ck2, cv2) in zip(arts, arts2):
            assert ck2.grouping.groups == ck.grouping.groups
            assert ck2.ranks == ck.ranks
            for p, p2 in zip(ck.factors, ck2.factors):
                assert np.array_equal(p.l, p2.l)
                assert np.array_equal(p.r_factor, p2.r_factor)
            assert np.array_equal(cv.l_v, cv2.l_v)
            assert np.array_equal(cv.r_v_factor, cv2.r_v_factor)
            assert np.array_equal(cv.fused_w_o, cv2.fused_w_o)

    def test_allocation_metadata_preserved(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        path = tmp_path / "compressed.json"
        save_compressed(spec, self.make_artifacts(rng, spec), path,
                        allocation={"target_ratio": 0.25, "achieved_ratio": 0.25})
        manifest = json.loads(path.read_text())
        assert manifest["allocation"]["target_ratio"] == 0.25

    def test_strip_r_factor(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        path = tmp_path / "compressed.json"
        save_compressed(spec, self.make_artifacts(rng, spec), path, strip_r_factor=True)
        _, arts = load_compressed(path)
        assert arts[0][1].r_v_factor is None
        assert arts[0][1].fused_w_o is not None

    def test_loaded_artifact_still_functions(self, rng, tmp_path):
        spec = make_spec(n_layers=1)
        w_k = rng.normal(0, 1, (spec.d_model, spec.kv_width))
        sim = head_similarity(w_k, spec.d_head)
        ck = compress_key(w_k, spec, sim, [2 * spec.d_head] * 2, group_size=2)
        w_v = rng.normal(0, 1, (spec.d_model, spec.kv_width))
        w_o = rng.normal(0, 1, (spec.n_heads * spec.d_head, spec.d_model))
        cv = compress_value(w_v, w_o, spec, 4, calibrate_iters=0)
        path = tmp_path / "c.json"
        save_compressed(spec, [(ck, cv)], path)
        _, arts = load_compressed(path)
        assert reconstruction_error(arts[0][0], w_k) <= 1e-16

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_compressed(make_spec(), [], tmp_path / "c.json")


class TestCalibrationRoundTrip:
    def test_bit_exact_with_tokens(self, rng, tmp_path):
        spec = make_spec(n_layers=2)
        calib = CalibrationSet(
            activations=[rng.normal(0, 1, (17, 32)) for _ in range(2)],
            token_count=17,
            provenance="synthetic",
            tokens=list(rng.integers(0, 50, 17)),
        )
        path = tmp_path / "calib.json"
        save_calibration(calib, path)
        loaded = load_calibration(path, spec)
        assert loaded.token_count == 17
        assert loaded.provenance == "synthetic"
        assert loaded.tokens == [int(t) for t in calib.tokens]
        for a, b in zip(calib.activations, loaded.activations):
            assert np.array_equal(a, b)

    def test_engine_capture_round_trip(self, rng, tmp_path):
        from kvcompress.engine import collect_activations, random_toy_model

        spec = make_spec(n_layers=2, vocab=40)
        model = random_toy_model(spec, 3)
        tokens = rng.integers(0, 40, 15)
        calib = collect_activations(model, tokens)
        path = tmp_path / "calib.json"
        save_calibration(calib, path)
        loaded = load_calibration(path, spec)
        for a, b in zip(calib.activations, loaded.activations):
            assert np.array_equal(a, b)

    def test_layer_count_mismatch(self, rng, tmp_path):
        calib = CalibrationSet(
            activations=[rng.normal(0, 1, (5, 32))], token_count=5
        )
        path = tmp_path / "calib.json"
        save_calibration(calib, path)
        with pytest.raises(ValidationError):
            load_calibration(path, make_spec(n_layers=2))

    def test_token_count_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            CalibrationSet(
                activations=[rng.normal(0, 1, (5, 32)), rng.normal(0, 1, (6, 32))],
                token_count=5,
            )
