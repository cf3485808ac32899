import math

import numpy as np
import pytest

from peftkit import tensor as T
from peftkit.errors import ConfigError, NotMergeableError, RankError
from peftkit.model import BOS, TransformerConfig, TransformerModel, attention
from peftkit.peft import (
    AdapterLayer,
    LoraAdapter,
    PeftSet,
    PrefixAdapter,
    adapter_forward,
    adapter_init,
    attach,
    attach_lora,
    lora_flops,
    lora_forward,
    lora_init,
    lora_param_count,
    merge,
    prefix_attend,
    prefix_init,
)
from peftkit.quantize import dequantize, quantize_4bit

SMALL = TransformerConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, max_seq_len=16)


def t(x, grad=False):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


class TestLoraCounts:
    def test_ten_rank(self):
        assert lora_param_count(1000, 1000, 10) == 20_000
        assert lora_init(1000, 1000, 10, seed=0).A.size + lora_init(1000, 1000, 10, seed=0).B.size == 20_000

    def test_square_full_rank(self):
        assert lora_param_count(12, 12, 12) == 2 * 12 * 12

    def test_512(self):
        assert lora_param_count(512, 512, 8) == 8_192

    def test_rank_bounds(self):
        with pytest.raises(RankError):
            lora_init(4, 8, 5, seed=0)
        with pytest.raises(RankError):
            lora_init(4, 8, 0, seed=0)

    def test_init_deterministic(self):
        a, b = lora_init(8, 6, 2, seed=9), lora_init(8, 6, 2, seed=9)
        assert a.A.data.tobytes() == b.A.data.tobytes()
        assert not b.B.data.any()
        assert a.A.shape == (6, 2) and a.B.shape == (2, 8)


class TestLoraForward:
    def test_rank_one_hand_case(self):
        ad = LoraAdapter("s", t([[1.0], [2.0]]), t([[3.0, 4.0]]))
        out = lora_forward(t(np.zeros((2, 2))), ad, t([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[7.0], [14.0]])

    def test_zero_b_is_base(self):
        g = np.random.default_rng(0)
        W, x = t(g.normal(size=(5, 4))), t(g.normal(size=(4, 3)))
        out = lora_forward(W, lora_init(4, 5, 2, seed=1), x)
        np.testing.assert_array_equal(out.data, T.matmul(W, x).data)

    def test_quantized_base(self):
        g = np.random.default_rng(1)
        q = quantize_4bit(g.normal(size=(6, 4)), block_size=8)
        ad = LoraAdapter("s", t(g.normal(size=(6, 2))), t(g.normal(size=(2, 4))))
        x = t(g.normal(size=(4, 3)))
        expected = (dequantize(q).data + ad.A.data @ ad.B.data) @ x.data
        np.testing.assert_allclose(lora_forward(q, ad, x).data, expected, atol=1e-6)

    def test_scale(self):
        ad = LoraAdapter("s", t([[1.0], [2.0]]), t([[3.0, 4.0]]), scale=0.5)
        out = lora_forward(t(np.zeros((2, 2))), ad, t([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.5], [7.0]])

    def test_no_dense_delta_and_flop_count(self, monkeypatch):
        d_in, d_out, r, n = 24, 20, 3, 5
        g = np.random.default_rng(2)
        ad = LoraAdapter("s", t(g.normal(size=(d_out, r))), t(g.normal(size=(r, d_in))))
        W, x = t(g.normal(size=(d_out, d_in))), t(g.normal(size=(d_in, n)))
        seen = []
        real = T.matmul

        def counting(a, b):
            out = real(a, b)
            seen.append((a.shape, b.shape, out.shape))
            return out

        monkeypatch.setattr(T, "matmul", counting)
        lora_forward(W, ad, x)
        assert all(o[-2:] not in ((d_out, d_in), (d_in, d_out)) for _, _, o in seen)
        flops = [a[-2] * a[-1] * b[-1] for a, b, _ in seen]
        base = d_in * d_out * n
        assert sum(flops) - base == r * (d_in + d_out) * n
        assert lora_flops(d_in, d_out, r, n) == {"base": base, "low_rank": r * (d_in + d_out) * n}


class TestAdapter:
    def test_zero_up_identity(self):
        x = t(np.random.default_rng(0).normal(size=(3, 6)))
        out = adapter_forward(x, adapter_init(6, 2, seed=0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_one_dimensional_path(self):
        # the scalar case W_down = W_up = 1, x = 1, carried in the first coordinate
        layer = AdapterLayer("s", t([[1.0, 0.0]]), t([[1.0], [0.0]]))
        out = adapter_forward(t([[1.0, 0.0]]), layer)
        np.testing.assert_allclose(out.data, [[1 + phi(1), 0.0]], rtol=1e-12)
        assert out.data[0, 0] == pytest.approx(1.8413, abs=1e-4)

    def test_zero_input(self):
        g = np.random.default_rng(1)
        layer = AdapterLayer("s", t(g.normal(size=(2, 5))), t(g.normal(size=(5, 2))))
        assert not adapter_forward(t(np.zeros((1, 5))), layer).data.any()

    def test_bottleneck(self):
        with pytest.raises(RankError):
            adapter_init(4, 4, seed=0)


class TestPrefix:
    def setup_method(self):
        g = np.random.default_rng(3)
        self.Q, self.K, self.V = (t(g.normal(size=(3, 4))) for _ in range(3))

    def test_no_prefix_is_plain(self):
        plain = attention(self.Q, self.K, self.V)
        np.testing.assert_array_equal(prefix_attend(None, self.Q, self.K, self.V).data, plain.data)

    def test_suppressed_prefix_is_plain(self):
        q = self.Q.data[:1]
        pre = PrefixAdapter("s", 0, t(-1e4 * q), t([[100.0, -100.0, 5.0, 5.0]]))
        out = prefix_attend(pre, t(q), self.K, self.V)
        np.testing.assert_allclose(out.data, attention(t(q), self.K, self.V).data, atol=1e-12)

    def test_equal_logits_average(self):
        q = t([[1.0, 2.0]])
        k = t([[0.0, -1.0]])
        pre = PrefixAdapter("s", 0, t([[2.0, -2.0]]), t([[4.0, 8.0]]))
        out = prefix_attend(pre, q, k, t([[0.0, 2.0]]))
        np.testing.assert_allclose(out.data, [[2.0, 5.0]], rtol=1e-12)

    def test_prefix_never_masked(self):
        pre = prefix_init(0, 1, 2, 4, seed=0)
        pk, pv = pre.P_k.data[0], pre.P_v.data[0]
        out = prefix_attend(PrefixAdapter("s", 0, t(pk), t(pv)), self.Q, self.K, self.V, causal=True).data
        # the first query sees both prefix rows and the first real key
        keys = np.vstack([pk, self.K.data[:1]])
        vals = np.vstack([pv, self.V.data[:1]])
        w = np.exp(self.Q.data[0] @ keys.T / 2)
        np.testing.assert_allclose(out[0], (w / w.sum()) @ vals, rtol=1e-6)


class TestPeftSet:
    def test_quantized_only_with_lora(self):
        with pytest.raises(ConfigError):
            PeftSet("adapter", base_mode="quantized4")

    def test_one_adapter_per_site(self):
        ps = PeftSet("lora")
        ps.add(lora_init(4, 4, 1, 0, "x"))
        with pytest.raises(ConfigError):
            ps.add(lora_init(4, 4, 1, 1, "x"))

    def test_sites_default_qkv(self):
        m = TransformerModel.init(SMALL, 0)
        ps = attach_lora(m, r=2)
        assert sorted(ps.adapters) == sorted(f"layers.{i}.attn.{s}" for i in range(2) for s in "qkv")

    def test_trainable_fraction_desk(self):
        m = TransformerModel.init(TransformerConfig(), 0)
        ps = attach_lora(m, r=4)
        closed = sum(lora_param_count(64, 64, 4) for _ in range(2 * 3))
        assert ps.trainable_count() == closed == 3072
        assert closed / m.parameter_count() < 0.05


@pytest.mark.parametrize("method", ["lora", "adapter", "prefix"])
def test_fresh_init_is_no_op_or_prefix_shift(method):
    m = TransformerModel.init(SMALL, 1)
    toks = [BOS, 40, 41, 42, 43]
    ps = attach(m, method, 2, seed=5)
    base, tuned = m(toks).data, m(toks, ps).data
    if method == "prefix":
        assert not np.array_equal(base, tuned)
    else:
        assert np.array_equal(base, tuned)


class TestMerge:
    def _trained(self, model, seed):
        ps = attach_lora(model, r=2, seed=seed, sites=("q", "k", "v", "o", "w1"))
        g = np.random.default_rng(seed)
        for ad in ps.adapters.values():
            ad.B.data[...] = g.normal(0, 0.1, ad.B.shape)
        return ps

    def test_zero_b_bitwise(self):
        m = TransformerModel.init(SMALL, 2)
        merged = merge(m, attach_lora(m, r=2, seed=0))
        for k, v in m.params.items():
            assert merged.params[k].data.tobytes() == v.data.tobytes()

    def test_equivalence(self):
        m = TransformerModel.init(SMALL, 3)
        ps = self._trained(m, 4)
        merged = merge(m, ps)
        toks = np.random.default_rng(0).integers(0, 259, (10, 12))
        assert np.abs(merged(toks).data - m(toks, ps).data).max() <= 1e-5
        assert merged.parameter_count() == m.parameter_count()
        assert set(merged.params) == set(m.params)

    def test_quantized_base_dequantizes(self):
        m = TransformerModel.init(SMALL, 3).quantized(16)
        ps = self._trained(m, 5)
        merged = merge(m, ps)
        assert not merged.is_quantized
        toks = np.random.default_rng(1).integers(0, 259, (4, 8))
        assert np.abs(merged(toks).data - m(toks, ps).data).max() <= 1e-4

    @pytest.mark.parametrize("method", ["adapter", "prefix"])
    def test_structural_methods_refuse(self, method):
        m = TransformerModel.init(SMALL, 0)
        with pytest.raises(NotMergeableError):
            merge(m, attach(m, method, 2, 0))

    def test_site_mismatch(self):
        m = TransformerModel.init(SMALL, 0)
        ps = PeftSet("lora", {"layers.9.attn.q": lora_init(16, 16, 2, 0, "layers.9.attn.q")})
        with pytest.raises(ConfigError):
            merge(m, ps)
