import numpy as np
import pytest

from kvcompress.errors import ValidationError
from kvcompress.latentquant import (
    dequantize_token,
    hadamard,
    pack_codes,
    quantize_token,
    sign_vector,
    unpack_codes,
)


class TestHadamard:
    def test_size_one_identity(self):
        assert np.allclose(hadamard(np.array([3.5])), [3.5])

    def test_size_two_known_values(self):
        # H_2 / sqrt(2) applied to (1, 0) and (a, b)
        out = hadamard(np.array([1.0, 0.0]))
        assert np.allclose(out, [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-14)
        out = hadamard(np.array([3.0, 1.0]))
        assert np.allclose(out, [4 / np.sqrt(2), 2 / np.sqrt(2)], atol=1e-14)

    def test_matches_explicit_matrix_oracle(self, rng):
        # oracle: build H_8 by the recursive Sylvester construction
        h = np.array([[1.0]])
        while h.shape[0] < 8:
            h = np.block([[h, h], [h, -h]])
        h = h / np.sqrt(8)
        v = rng.normal(0, 1, 8)
        assert np.allclose(hadamard(v), h @ v, atol=1e-12)

    def test_self_inverse(self, rng):
        for n in (1, 2, 4, 8, 16, 64):
            v = rng.normal(0, 1, n)
            assert np.allclose(hadamard(hadamard(v)), v, atol=1e-12)

    def test_norm_preserving(self, rng):
        v = rng.normal(0, 1, 32)
        assert np.linalg.norm(hadamard(v)) == pytest.approx(np.linalg.norm(v), rel=1e-12)

    def test_non_pow2_rejected(self):
        with pytest.raises(ValidationError):
            hadamard(np.zeros(6))


class TestSignVector:
    def test_values_and_determinism(self):
        s = sign_vector(7, 100)
        assert set(np.unique(s)) <= {-1.0, 1.0}
        assert np.array_equal(s, sign_vector(7, 100))

    def test_seed_changes_vector(self):
        assert not np.array_equal(sign_vector(0, 64), sign_vector(1, 64))


class TestPacking:
    def test_round_trip_all_codes(self):
        for bw in (3, 4):
            codes = np.arange(1 << bw, dtype=np.int64)
            assert np.array_equal(unpack_codes(pack_codes(codes, bw), bw, len(codes)), codes)

    def test_known_byte_layout_4bit(self):
        # two 4-bit codes per byte, first code in the low nibble
        packed = pack_codes(np.array([0x3, 0xA], dtype=np.int64), 4)
        assert packed == bytes([0xA3])

    def test_known_byte_layout_3bit(self):
        # codes 0b101, 0b011 -> bits 101 110 -> byte 0b00011101 = 0x1D
        packed = pack_codes(np.array([0b101, 0b011], dtype=np.int64), 3)
        assert packed == bytes([0x1D])

    def test_packed_length(self, rng):
        codes = rng.integers(0, 8, 16).astype(np.int64)
        assert len(pack_codes(codes, 3)) == 6  # 48 bits
        codes = rng.integers(0, 16, 16).astype(np.int64)
        assert len(pack_codes(codes, 4)) == 8

    def test_random_round_trip(self, rng):
        for _ in range(20):
            bw = int(rng.choice([3, 4]))
            n = int(rng.integers(1, 40))
            codes = rng.integers(0, 1 << bw, n).astype(np.int64)
            assert np.array_equal(unpack_codes(pack_codes(codes, bw), bw, n), codes)


class TestQuantizeToken:
    def test_round_trip_error_bound(self, rng):
        for _ in range(50):
            r = int(rng.integers(1, 40))
            v = rng.normal(0, 1, r)
            for bw in (3, 4):
                q = quantize_token(v, bw, seed=5)
                back = dequantize_token(q)
                assert back.shape == (r,)
                # per-entry bound holds in the transformed domain
                padded = np.zeros(q.padded_rank)
                padded[:r] = v
                u = hadamard(sign_vector(5, q.padded_rank) * padded)
                decoded = unpack_codes(q.codes, bw, q.padded_rank) * q.scale + q.offset
                assert np.max(np.abs(u - decoded)) <= q.scale / 2 + 1e-12
                # transform is orthonormal, so the euclidean error carries over
                assert np.linalg.norm(back - v) <= (
                    q.scale / 2 * np.sqrt(q.padded_rank) + 1e-12
                )

    def test_zero_vector_exact(self):
        q = quantize_token(np.zeros(5), 4)
        assert q.scale == 0.0
        assert np.allclose(dequantize_token(q), np.zeros(5), atol=1e-15)

    def test_constant_transformed_row_exact(self):
        # a single-entry latent always has zero range after the transform
        q = quantize_token(np.array([2.75]), 3)
        assert np.allclose(dequantize_token(q), [2.75], atol=1e-12)

    def test_seed_determinism(self, rng):
        v = rng.normal(0, 1, 12)
        a = quantize_token(v, 4, seed=9)
        b = quantize_token(v, 4, seed=9)
        assert a.codes == b.codes and a.scale == b.scale and a.offset == b.offset

    def test_higher_bitwidth_not_worse_on_average(self, rng):
        wins = 0
        trials = 30
        for _ in range(trials):
            v = rng.normal(0, 1, 16)
            e3 = np.linalg.norm(dequantize_token(quantize_token(v, 3)) - v)
            e4 = np.linalg.norm(dequantize_token(quantize_token(v, 4)) - v)
            if e4 <= e3:
                wins += 1
        assert wins >= trials * 0.8

    def test_bad_bitwidth(self):
        with pytest.raises(ValidationError):
            quantize_token(np.ones(4), 5)
        with pytest.raises(ValidationError):
            quantize_token(np.ones(4), 2)

    def test_empty_latent(self):
        with pytest.raises(ValidationError):
            quantize_token(np.zeros(0), 4)

    def test_padding_metadata(self, rng):
        q = quantize_token(rng.normal(0, 1, 5), 4)
        assert q.rank == 5 and q.padded_rank == 8
        assert len(q.codes) == 4  # 8 codes x 4 bits = 32 bits
