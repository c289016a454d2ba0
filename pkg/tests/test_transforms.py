import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distjscc.diffcore import Lambda, grad_check
from distjscc.oracles import gradient_cases
from distjscc.transforms import (
    SIGMA_MIN,
    Analysis,
    HyperAnalysis,
    HyperSynthesis,
    JointSynthesis,
    ModelConfig,
    analyze,
    grid_of,
    hyper_analyze,
    hyper_synthesize,
    joint_synthesize,
    tokens_of,
)

CFG = ModelConfig()


@pytest.fixture
def blocks():
    rng = np.random.default_rng(0)
    return (Analysis("g_a", CFG, rng), HyperAnalysis("h_a", CFG, rng), HyperSynthesis("h_s", CFG, rng),
            JointSynthesis("g_s", CFG, rng))


class TestShapes:
    def test_pipeline_shapes(self, blocks):
        g_a, h_a, h_s, g_s = blocks
        x = np.random.default_rng(1).uniform(0, 1, (1, 16, 32))
        y = analyze(g_a, x)
        assert y.shape == (16, 4, 8)
        assert tokens_of(y).shape == (32, 16)
        z = hyper_analyze(h_a, y)
        assert z.shape == (8, 2, 4)
        assert z.size <= y.size // 4
        mu, sigma = hyper_synthesize(h_s, z)
        assert mu.shape == sigma.shape == y.shape
        assert joint_synthesize(g_s, y, y).shape == (1, 16, 32)

    def test_zero_side_information(self, blocks):
        g_s = blocks[3]
        out = joint_synthesize(g_s, np.ones((16, 4, 8)), np.zeros((16, 4, 8)))
        assert np.all(np.isfinite(out.data))

    def test_side_shape_mismatch(self, blocks):
        with pytest.raises(ValueError):
            joint_synthesize(blocks[3], np.ones((16, 4, 8)), np.ones((16, 2, 4)))

    def test_indivisible_image(self, blocks):
        with pytest.raises(ValueError):
            analyze(blocks[0], np.zeros((1, 10, 32)))

    def test_determinism(self, blocks):
        g_a, h_a = blocks[:2]
        x = np.random.default_rng(2).uniform(0, 1, (1, 16, 32))
        assert np.array_equal(analyze(g_a, x).data, analyze(g_a, x.copy()).data)
        y = analyze(g_a, x)
        assert np.array_equal(hyper_analyze(h_a, y).data, hyper_analyze(h_a, y).data)

    @settings(max_examples=15, deadline=None)
    @given(c_lat=st.integers(1, 6), stages=st.integers(1, 3), hw=st.sampled_from([(8, 8), (16, 32), (8, 16)]))
    def test_token_count_times_width_is_latent_size(self, c_lat, stages, hw):
        cfg = ModelConfig(c_lat=c_lat, c_mid=3, analysis_stages=stages)
        H, W = hw
        y = Analysis("g", cfg, np.random.default_rng(0))(np.zeros((1, H, W)))
        l, c = tokens_of(y).shape
        assert l * c == y.size
        assert y.shape == cfg.latent_shape(H, W)

    def test_token_grid_round_trip(self):
        y = np.random.default_rng(3).standard_normal((5, 2, 3))
        assert np.array_equal(grid_of(tokens_of(y), 2, 3).data, y)


class TestSigmaFloor:
    @settings(max_examples=20, deadline=None)
    @given(scale=st.floats(-1e3, 1e3))
    def test_sigma_at_least_floor(self, scale):
        h_s = HyperSynthesis("h_s", CFG, np.random.default_rng(0))
        z = scale * np.random.default_rng(1).standard_normal((8, 2, 4))
        _, sigma = h_s(z)
        assert np.all(sigma.data >= SIGMA_MIN)


class TestGradients:
    @pytest.mark.parametrize("name", ["transforms.analyze", "transforms.hyper_analyze",
                                      "transforms.hyper_synthesize", "transforms.joint_synthesize"])
    def test_block(self, name):
        block, inputs = gradient_cases()[name](0)
        assert grad_check(block, inputs) < 1e-4

    def test_analysis_on_8x8(self):
        rng = np.random.default_rng(5)
        g_a = Analysis("g_a", CFG, rng)
        assert grad_check(g_a, [rng.uniform(0, 1, (1, 8, 8))], max_entries=64) < 1e-4

    def test_end_to_end_composite(self):
        cfg = ModelConfig(c_mid=4, c_lat=4)
        rng = np.random.default_rng(6)
        g_a, g_s = Analysis("g_a", cfg, rng), JointSynthesis("g_s", cfg, rng)
        block = Lambda(lambda a, b: g_s(g_a(a), g_a(b)), g_a.parameters() + g_s.parameters())
        err = grad_check(block, [rng.uniform(0, 1, (1, 8, 8)), rng.uniform(0, 1, (1, 8, 8))])
        assert err < 1e-3
