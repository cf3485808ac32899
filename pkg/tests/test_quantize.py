import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from peftkit import tensor as T
from peftkit.errors import NumericError, ShapeError
from peftkit.quantize import (
    QuantizedMatrix,
    SizeModel,
    dequantize,
    model_size_bytes,
    pack_nibbles,
    qlinear,
    qmatmul,
    quantize_4bit,
    quantized_size_bytes,
    round_half_away,
    unpack_nibbles,
)


def reference_quantize(w, block):
    """Straight-line oracle: absmax/7 scale, half-away rounding, per block."""
    flat = np.asarray(w, dtype=np.float32).ravel()
    codes, scales = [], []
    for i in range(0, flat.size, block):
        blk = flat[i : i + block].astype(np.float64)
        s = np.float32(np.abs(blk).max() / 7)
        scales.append(s)
        for v in blk:
            if s == 0:
                codes.append(0)
                continue
            y = v / float(s)
            c = int(np.floor(abs(y) + 0.5)) * (1 if y >= 0 else -1)
            codes.append(max(-7, min(7, c)))
    return np.array(codes), np.array(scales, dtype=np.float32)


class TestExamples:
    def test_all_zero_block(self):
        q = quantize_4bit(np.zeros((2, 4)), block_size=4)
        assert not q.unpacked_codes().any()
        assert not q.scales.any()
        assert not dequantize(q).data.any()

    def test_step_one_block(self):
        q = quantize_4bit(np.array([[7.0, -7.0, 1.0, 0.0]]), block_size=4)
        assert q.scales.tolist() == [1.0]
        assert q.unpacked_codes().tolist() == [[7, -7, 1, 0]]

    def test_single_value(self):
        q = quantize_4bit(np.array([[0.5]]), block_size=1)
        assert q.scales[0] == np.float32(0.5 / 7)
        assert q.unpacked_codes().tolist() == [[7]]

    def test_non_finite(self):
        with pytest.raises(NumericError):
            quantize_4bit(np.array([[1.0, np.inf]]))

    def test_non_2d(self):
        with pytest.raises(ShapeError):
            quantize_4bit(np.ones(4))


class TestSizes:
    def test_float32(self):
        assert model_size_bytes(32, 1_000_000) == 4_000_000

    def test_billion_scale(self):
        assert model_size_bytes(4, 1_240_000_000) == 620_000_000

    def test_blocks_overhead(self):
        assert quantized_size_bytes(128, 64) == 72

    def test_odd_bits_round_up(self):
        assert model_size_bytes(4, 3) == 2

    def test_size_model(self):
        assert SizeModel(4, 128, 8).total_bytes == 72

    def test_ratio_approaches_4_5_over_32(self):
        n = 64 * 100_000
        ratio = quantized_size_bytes(n, 64) / model_size_bytes(32, n)
        assert ratio == pytest.approx(4.5 / 32)
        assert quantized_size_bytes(n) < model_size_bytes(32, n)


class TestPacking:
    def test_nibble_order(self):
        assert pack_nibbles(np.array([1, 2])) == bytes([0x21])
        assert pack_nibbles(np.array([-1, 7])) == bytes([0x7F])
        assert pack_nibbles(np.array([3])) == bytes([0x03])

    def test_unpack_offsets(self):
        codes = np.array([-7, 3, 0, 5, -1, 2, 6])
        packed = pack_nibbles(codes)
        for start in range(len(codes)):
            for count in range(len(codes) - start + 1):
                assert unpack_nibbles(packed, count, start).tolist() == codes[start : start + count].tolist()

    def test_rounding_half_away(self):
        assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]

    def test_bytes_roundtrip(self):
        q = quantize_4bit(np.random.default_rng(0).normal(size=(5, 7)), block_size=8)
        q2 = QuantizedMatrix.from_bytes(q.to_bytes(), 8)
        assert q2 == q and q2.to_bytes() == q.to_bytes()

    def test_code_minus_eight_unused(self):
        q = quantize_4bit(np.random.default_rng(3).normal(size=(64, 64)))
        c = q.unpacked_codes()
        assert c.min() >= -7 and c.max() <= 7


@pytest.mark.parametrize("shape,block", [((1, 64), 64), ((3, 5), 4), ((8, 8), 64), ((7, 9), 10)])
def test_matches_reference_oracle(shape, block):
    w = np.random.default_rng(hash(shape) % 1000).normal(size=shape).astype(np.float32)
    q = quantize_4bit(w, block)
    codes, scales = reference_quantize(w, block)
    assert q.unpacked_codes().ravel().tolist() == codes.tolist()
    assert np.array_equal(q.scales, scales)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 17)), elements=st.floats(-100, 100, width=32)),
    st.sampled_from([1, 3, 8, 64]),
)
def test_error_bound_and_idempotence(w, block):
    q = quantize_4bit(w, block)
    back = dequantize(q).data
    flat = w.ravel()
    bound = np.repeat(q.scales.astype(np.float64) * 7 / 14, block)[: flat.size]
    assert (np.abs(flat - back.ravel()) <= bound + 1e-7 * np.maximum(1, np.abs(flat)) + 1e-7).all()
    assert quantize_4bit(back, block).unpacked_codes().tolist() == q.unpacked_codes().tolist()


class TestQMatmul:
    def test_identity_on_grid(self):
        q = quantize_4bit(np.eye(4), block_size=4)
        v = T.Tensor(np.arange(8.0).reshape(4, 2))
        np.testing.assert_array_equal(qmatmul(q, v).data, v.data)

    def test_zero(self):
        q = quantize_4bit(np.zeros((3, 4)))
        assert not qmatmul(q, T.Tensor(np.ones((4, 2)))).data.any()

    def test_matches_dense(self):
        g = np.random.default_rng(5)
        q = quantize_4bit(g.normal(size=(300, 40)), block_size=64)
        x = T.Tensor(g.normal(size=(40, 3)))
        np.testing.assert_allclose(qmatmul(q, x).data, dequantize(q).data @ x.data, atol=1e-5)
        xr = T.Tensor(g.normal(size=(2, 5, 40)))
        np.testing.assert_allclose(qlinear(xr, q).data, xr.data @ dequantize(q).data.T, atol=1e-5)

    def test_chunking_covers_all_rows(self):
        q = quantize_4bit(np.random.default_rng(1).normal(size=(1000, 8)))
        spans = list(q.row_chunks())
        assert spans[0][0] == 0 and spans[-1][1] == 1000
        assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            qmatmul(quantize_4bit(np.ones((2, 3))), T.Tensor(np.ones((4, 1))))
