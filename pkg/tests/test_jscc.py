import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distjscc.channel import ChannelConfig
from distjscc.diffcore import grad_check
from distjscc.jscc import (
    JSCCDecoder,
    JSCCEncoder,
    RateAllocation,
    RateSet,
    RateTokens,
    allocate,
    decode,
    encode,
    mean_power,
    power_normalize,
    symbols_from_bytes,
    symbols_to_bytes,
)
from distjscc.model import DistributedCodec
from distjscc.objective import LossConfig
from distjscc.oracles import allocation_draws, brute_force_allocate, decode_smoke, gradient_cases
from distjscc.transforms import ModelConfig

V4 = RateSet(V=(4, 8, 12, 16), eta=0.2)


def coder(c=8, rates=V4, seed=0):
    rng = np.random.default_rng(seed)
    return JSCCEncoder(1, c, rates, rng), JSCCDecoder(1, c, rates, rng), RateTokens(rates, c, rng)


class TestRateSet:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            RateSet(V=(4, 2))

    def test_rejects_single(self):
        with pytest.raises(ValueError):
            RateSet(V=(4,))

    def test_index_rejects_foreign_value(self):
        with pytest.raises(ValueError):
            V4.index([4, 5])


class TestAllocate:
    def test_tie_goes_to_smaller(self):
        assert allocate([30.0], V4)[0] == 4

    def test_zero_bits(self):
        assert allocate([0.0], V4)[0] == 4

    def test_clamp_high(self):
        assert allocate([1e3], V4)[0] == 16

    def test_negative_bits_rejected(self):
        with pytest.raises(ValueError):
            allocate([-1.0], V4)

    def test_entries_in_rate_set(self):
        k = allocate(np.random.default_rng(0).uniform(0, 200, 500), RateSet())
        assert set(k.tolist()) <= set(RateSet().V)

    def test_matches_brute_force(self):
        for bits, eta, V in allocation_draws(2000, seed=1):
            assert allocate([bits], RateSet(V=V, eta=eta))[0] == brute_force_allocate(bits, eta, V)

    @settings(max_examples=200)
    @given(bits=st.floats(0, 1e4), eta=st.floats(1e-3, 10))
    def test_brute_force_property(self, bits, eta):
        V = (2, 4, 8, 12, 16, 24, 32)
        assert allocate([bits], RateSet(V=V, eta=eta))[0] == brute_force_allocate(bits, eta, V)


class TestEncode:
    def test_symbol_count(self):
        enc, _, tok = coder()
        y = np.random.default_rng(1).standard_normal((4, 8))
        alloc = RateAllocation(np.array([4, 4, 8, 8]))
        assert alloc.n == 24
        assert encode(enc, y, alloc, tok).shape == (24, 2)

    def test_conditioning_is_live(self):
        enc, _, tok = coder()
        y = np.random.default_rng(2).standard_normal((4, 8))
        a = encode(enc, y, RateAllocation(np.array([4, 4, 8, 8]), np.array([4, 4, 4, 4])), tok).data
        b = encode(enc, y, RateAllocation(np.array([4, 4, 8, 8]), np.array([16, 4, 4, 4])), tok).data
        assert not np.allclose(a, b)

    def test_token_major_layout(self):
        # each token's symbols come from its own projection, so changing only
        # which matrix token 0 uses leaves the slots of the other tokens in place
        enc, _, tok = coder()
        for lin in (enc.attn.o, enc.attn.ff2):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
        y = np.random.default_rng(3).standard_normal((3, 8))
        s = encode(enc, y, RateAllocation(np.array([8, 4, 12])), tok).data
        np.testing.assert_allclose(s[8:12], enc.proj[4](y[1:2] + tok.lookup(1, [4]).data).data.reshape(-1, 2))
        np.testing.assert_allclose(s[12:], enc.proj[12](y[2:3] + tok.lookup(1, [12]).data).data.reshape(-1, 2))

    def test_entry_outside_rate_set(self):
        enc, _, tok = coder()
        with pytest.raises(ValueError):
            encode(enc, np.zeros((2, 8)), RateAllocation(np.array([4, 5])), tok)

    def test_length_mismatch(self):
        enc, _, tok = coder()
        with pytest.raises(ValueError):
            encode(enc, np.zeros((3, 8)), RateAllocation(np.array([4, 4])), tok)

    def test_gradient(self):
        block, inputs = gradient_cases()["jscc.encode"](0)
        assert grad_check(block, inputs) < 1e-4


class TestPowerNormalize:
    @settings(max_examples=50)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 64), P=st.floats(0.1, 10))
    def test_exact_power(self, seed, n, P):
        s = np.random.default_rng(seed).standard_normal((n, 2))
        assert abs(mean_power(power_normalize(s, P)) - P) < 1e-9

    def test_idempotent(self):
        s = power_normalize(np.random.default_rng(0).standard_normal((32, 2))).data
        np.testing.assert_allclose(power_normalize(s).data, s, atol=1e-12)

    def test_single_symbol(self):
        out = power_normalize(np.array([[3.0, 4.0]])).data
        assert np.hypot(*out[0]) == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(out[0], [0.6, 0.8])

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            power_normalize(np.zeros((4, 2)))


class TestDecode:
    def test_shape_round_trip(self):
        enc, dec, tok = coder()
        y = np.random.default_rng(4).standard_normal((5, 8))
        alloc = RateAllocation(np.array([4, 16, 8, 4, 12]), np.array([4, 4, 4, 4, 4]))
        other = RateAllocation(alloc.k_star)
        assert decode(dec, encode(enc, y, alloc, tok), alloc, other, tok).shape == (5, 8)

    def test_length_mismatch(self):
        _, dec, tok = coder()
        with pytest.raises(ValueError):
            decode(dec, np.zeros((10, 2)), RateAllocation(np.array([4, 4])), None, tok)

    def test_training_reduces_error(self):
        first, last = decode_smoke()
        assert last < first

    def test_gradient(self):
        block, inputs = gradient_cases()["jscc.decode"](0)
        assert grad_check(block, inputs) < 1e-4


class TestSerialization:
    def test_round_trip(self):
        s = np.random.default_rng(0).standard_normal((24, 2))
        assert np.array_equal(symbols_from_bytes(symbols_to_bytes(s)), s)

    def test_layout(self):
        buf = symbols_to_bytes(np.array([[1.0, -2.0]]))
        assert len(buf) == 8 + 16
        assert buf[:8] == (1).to_bytes(8, "little")

    def test_truncated(self):
        with pytest.raises(ValueError):
            symbols_from_bytes(symbols_to_bytes(np.ones((3, 2)))[:-1])


class TestSharedAllocation:
    @pytest.mark.parametrize("train", [True, False])
    def test_receiver_recomputes_transmitter_bandwidths(self, train):
        model = DistributedCodec(ModelConfig(c_mid=4, c_lat=8), (1, 16, 32), RateSet(), seed=0)
        # push the allocation away from a single bandwidth so agreement is not vacuous
        for u in (1, 2):
            model.h_s[u].s1.lin.weight.data[:, 8:] *= 20.0
            model.h_s[u].s1.lin.bias.data[8:] = 2.0
        rng = np.random.default_rng(1)
        x1, x2 = rng.uniform(0, 1, (2, 1, 16, 32))
        rec = model.forward_pair(x1, x2, train=train, channel=ChannelConfig(), loss_cfg=LossConfig())
        u1, u2 = rec.users
        # receiver side: only the hyper grids are known
        k1, _, _ = model.allocation_from_hyper(1, u1.z_used.data)
        k2, _, _ = model.allocation_from_hyper(2, u2.z_used.data)
        assert len(set(k1.tolist())) > 1 and len(set(u1.alloc.k_star.tolist())) > 1
        np.testing.assert_array_equal(k1, u1.alloc.k)
        np.testing.assert_array_equal(k2, u2.alloc.k)
        np.testing.assert_array_equal(model.estimate_other(1, u1.z_used.data, quantized=not train), u1.alloc.k_star)
        np.testing.assert_array_equal(model.estimate_other(2, u2.z_used.data, quantized=not train), u2.alloc.k_star)
