import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distjscc.channel import NOISELESS, ChannelConfig, awgn_capacity, noise_variance, transmit
from distjscc.diffcore import Tensor

N = 1_000_000


class TestNoiseVariance:
    def test_five_db(self):
        assert noise_variance(ChannelConfig(snr_db=5.0)) == pytest.approx(0.3162278, abs=1e-7)

    def test_zero_db(self):
        assert noise_variance(ChannelConfig(snr_db=0.0)) == 1.0

    def test_power_two(self):
        assert noise_variance(ChannelConfig(snr_db=3.0103, P=2.0)) == pytest.approx(1.0, abs=1e-4)

    def test_noiseless(self):
        assert noise_variance(ChannelConfig(snr_db=NOISELESS)) == 0.0

    def test_power_must_be_positive(self):
        with pytest.raises(ValueError):
            ChannelConfig(P=0.0)


class TestTransmit:
    def test_noiseless_is_exact(self):
        s = np.random.default_rng(0).standard_normal((50, 2))
        assert np.array_equal(transmit(s, ChannelConfig(snr_db=NOISELESS)).data, s)

    def test_empirical_variance(self):
        noise = transmit(np.zeros((N, 2)), ChannelConfig(snr_db=5.0)).data
        var = np.mean(np.sum(noise ** 2, axis=1))
        assert abs(var / 0.3162278 - 1) < 0.01

    def test_isotropic(self):
        noise = transmit(np.zeros((N, 2)), ChannelConfig(snr_db=5.0)).data
        assert abs(np.var(noise[:, 0]) / np.var(noise[:, 1]) - 1) < 0.02

    def test_empirical_snr(self):
        cfg = ChannelConfig(snr_db=5.0, P=1.0)
        noise = transmit(np.zeros((N, 2)), cfg).data
        snr = 10 * math.log10(cfg.P / np.mean(np.sum(noise ** 2, axis=1)))
        assert abs(snr - 5.0) < 0.1

    def test_users_independent(self):
        cfg = ChannelConfig(snr_db=0.0)
        n1 = transmit(np.zeros((N, 2)), cfg, user=1).data.ravel()
        n2 = transmit(np.zeros((N, 2)), cfg, user=2).data.ravel()
        assert abs(np.corrcoef(n1, n2)[0, 1]) < 0.01

    def test_keyed_by_counter(self):
        cfg = ChannelConfig(seed=4)
        s = np.zeros((16, 2))
        a = transmit(s, cfg, pair_id=3, counter=9).data
        assert np.array_equal(a, transmit(s, cfg, pair_id=3, counter=9).data)
        assert not np.array_equal(a, transmit(s, cfg, pair_id=3, counter=10).data)
        assert not np.array_equal(a, transmit(s, cfg, pair_id=4, counter=9).data)

    def test_gradient_passes_through(self):
        s = Tensor(np.ones((4, 2)), requires_grad=True)
        (transmit(s, ChannelConfig()) * 3.0).sum().backward()
        np.testing.assert_array_equal(s.grad, np.full((4, 2), 3.0))


class TestCapacity:
    def test_five_db(self):
        assert awgn_capacity(5.0) == pytest.approx(2.0574, abs=1e-4)

    def test_zero_db(self):
        assert awgn_capacity(0.0) == pytest.approx(1.0)

    @given(a=st.floats(-30, 40), b=st.floats(-30, 40))
    def test_monotone(self, a, b):
        if a < b:
            assert awgn_capacity(a) <= awgn_capacity(b)
