import csv
import io
import math

import numpy as np
import pytest

from distjscc import entropy
from distjscc.channel import ChannelConfig
from distjscc.harness import (
    CSV_HEADER,
    ConfigError,
    RunConfig,
    checkpoint_path,
    evaluate,
    mode_key,
    rate_per_pixel,
    rate_report,
    rd_sweep,
    run_point,
)
from distjscc.oracles import oracle_check
from distjscc.sources import SourceConfig, gen_correlated_pair
from distjscc.training import TrainConfig, build_model, train


def tiny(tmp_path, **extra):
    cfg = RunConfig()
    for item in ("training.epochs=1", "source.n_train=2", "source.n_test=2", "model.c_mid=4", "model.c_lat=8",
                 f"sweep.checkpoint_dir={tmp_path}", *(f"{k}={v}" for k, v in extra.items())):
        cfg.override(item)
    return cfg


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.source() == SourceConfig()
        assert cfg.train_config().epochs == 50
        assert cfg.rates().V == (2, 4, 8, 12, 16, 24, 32)

    def test_parse_text(self):
        cfg = RunConfig.from_text("[training]\nlam = 0.05\nmode = point-to-point\n[rates]\nV = 2,4,8\n")
        assert cfg.train_config().lam == 0.05
        assert cfg.train_config().mode == "p2p"
        assert cfg.rates().V == (2, 4, 8)

    def test_text_round_trip(self):
        cfg = RunConfig()
        cfg.override("source.shared_gain=0.5")
        again = RunConfig.from_text(cfg.to_text())
        assert again.source() == cfg.source()
        assert again.train_config() == cfg.train_config()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[training]\nlearning_rate = 1\n")
        with pytest.raises(ConfigError):
            RunConfig().override("nosuch.key=1")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig().override("training.epochs=many")

    def test_override_syntax(self):
        with pytest.raises(ConfigError):
            RunConfig().override("training.epochs")

    def test_mode_names(self):
        assert mode_key("joint-prior") == mode_key("joint") == "joint"
        with pytest.raises(ConfigError):
            mode_key("both")


class TestRateAccounting:
    def test_worked_example(self):
        assert rate_per_pixel(128, 64, 2.0574, 1, 16, 32) == pytest.approx(0.28038, abs=1e-5)
        assert rate_report(128, 64, 5.0, (1, 16, 32)).r == pytest.approx(0.28038, abs=1e-5)

    def test_no_hyper_bits(self):
        assert rate_per_pixel(100, 0, 2.0, 1, 10, 10) == 1.0

    def test_linear_in_size(self):
        a = rate_per_pixel(128, 64, 2.0574, 1, 16, 32)
        assert rate_per_pixel(128, 64, 2.0574, 2, 16, 32) == pytest.approx(a / 2, rel=1e-15)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            rate_per_pixel(1, 1, 0.0, 1, 1, 1)


class TestEvaluate:
    def test_hyper_bits_match_training_rate(self):
        src, ids = SourceConfig(), list(range(8))
        cfg = TrainConfig(epochs=10, lr_init=1e-3)
        model = train(cfg, src, ids).model
        pairs = [gen_correlated_pair(src, i) for i in ids]
        train_rz = []
        for c in range(20):
            batch = model.forward_batch(pairs, train=True, channel=cfg.channel_config(),
                                        loss_cfg=cfg.loss_config(), counter=1000 + c)
            train_rz += [float(b.r_z.data) for b in batch.breakdowns]
        res = evaluate(model, src, ids, cfg.channel_config())
        assert abs(res.hyper_bits / np.mean(train_rz) - 1) < 0.05

    def test_rates_charge_full_hyper_bits(self):
        src = SourceConfig()
        model = build_model(TrainConfig(), src)
        res = evaluate(model, src, [20, 21], ChannelConfig())
        cap = math.log2(1 + 10 ** 0.5)
        for row in res.per_pair:
            assert row["r1"] == pytest.approx((row["n1"] + row["hyper_bits"] / (2 * cap)) / 512, rel=1e-12)

    def test_deterministic(self):
        src = SourceConfig()
        model = build_model(TrainConfig(), src)
        a = evaluate(model, src, [20, 21], ChannelConfig())
        b = evaluate(model, src, [20, 21], ChannelConfig())
        assert a.per_pair == b.per_pair


class TestAblationContract:
    @staticmethod
    def counters(mode):
        src = SourceConfig()
        model = build_model(TrainConfig(mode=mode), src)
        calls = []
        if model.aligner is not None:
            original = model.aligner.forward
            model.aligner.forward = lambda *a, **k: calls.append(1) or original(*a, **k)
        pair = gen_correlated_pair(src, 0)
        for train_flag in (True, False):
            model.forward_pair(pair.x1, pair.x2, train=train_flag, channel=ChannelConfig(),
                               loss_cfg=TrainConfig().loss_config())
        return len(calls), model.mmse_calls, model.rate_tokens.cross_calls

    def test_point_to_point_is_isolated(self):
        assert self.counters("p2p") == (0, 0, 0)

    def test_counters_are_live_in_joint_mode(self):
        aligner, mmse, cross = self.counters("joint")
        assert aligner == 2 and mmse == 4 and cross > 0


class TestSweep:
    def test_csv_header_and_rows(self, tmp_path):
        cfg = tiny(tmp_path, **{"sweep.modes": "p2p,joint", "sweep.seeds": "0"})
        buf = io.StringIO()
        rd_sweep(cfg, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
        assert [r["mode"] for r in rows] == ["point-to-point", "joint-prior"]

    def test_rows_reproducible_from_config(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            buf = io.StringIO()
            rd_sweep(tiny(tmp_path / sub, **{"sweep.modes": "independent", "sweep.seeds": "1"}), buf)
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]

    def test_checkpoint_reused(self, tmp_path):
        cfg = tiny(tmp_path)
        first = run_point(cfg, 0.01, "p2p", 0)
        assert first.train_log
        again = run_point(cfg, 0.01, "p2p", 0)
        assert not again.train_log
        assert again.result.per_pair == first.result.per_pair

    def test_missing_checkpoint(self, tmp_path):
        cfg = tiny(tmp_path, **{"sweep.train_inline": "false"})
        with pytest.raises(FileNotFoundError):
            run_point(cfg, 0.01, "joint", 0)

    def test_checkpoint_name(self):
        assert checkpoint_path("d", "joint", 0.01, 2).endswith("joint_lam0.01_seed2.ckpt")


class TestOracleCheck:
    def test_quick_suite_passes_with_runtime(self):
        report = oracle_check(quick=True)
        assert report.passed, report.table()
        assert all(r.seconds >= 0 for r in report.results)
        assert "seconds" in report.table().splitlines()[0]

    def test_corrupted_normal_cdf_is_caught(self, monkeypatch):
        true_ndtr = entropy.ndtr
        monkeypatch.setattr(entropy, "ndtr", lambda x: true_ndtr(1.01 * np.asarray(x)))
        report = oracle_check(only=["latent_bin_prob"])
        assert not report.passed
        assert "FAILED" in report.table()

    def test_crash_is_failure(self, monkeypatch):
        monkeypatch.setattr(entropy, "latent_bin_prob", lambda *a: 1 / 0)
        report = oracle_check(only=["latent_bin_prob"])
        assert not report.passed
        assert "ZeroDivisionError" in report.results[0].detail
