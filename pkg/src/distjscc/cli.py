"""Command-line entry point: ``distjscc <subcommand> [--config FILE] [--section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .channel import ChannelConfig
from .harness import ConfigError, RunConfig, config_docs, evaluate, rd_sweep
from .sources import gen_correlated_pair, write_pair
from .training import build_model, config_echo, load_checkpoint, train


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.overrides:
        if not item.startswith("--"):
            raise ConfigError(f"unexpected argument {item!r}")
        cfg.override(item[2:])
    return cfg


def cmd_gen_data(cfg: RunConfig, args) -> int:
    os.makedirs(args.out, exist_ok=True)
    train_ids, test_ids = cfg.split()
    source = cfg.source()
    for pid in train_ids + test_ids:
        write_pair(gen_correlated_pair(source, pid), args.out)
    with open(os.path.join(args.out, "split.json"), "w") as fh:
        json.dump({"train": train_ids, "test": test_ids}, fh)
    print(f"wrote {len(train_ids) + len(test_ids)} pairs to {args.out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    source = cfg.source()
    train_ids, _ = cfg.split()
    tcfg = cfg.train_config()
    model = build_model(tcfg, source, cfg.model(), cfg.rates())
    result = train(tcfg, source, train_ids, model=model, resume=args.resume, checkpoint=args.checkpoint,
                   dump_dir=os.path.dirname(os.path.abspath(args.checkpoint)))
    if args.log:
        result.write_csv(args.log)
    for row in result.epoch_log[-1:]:
        print(" ".join(f"{k}={v:.6g}" for k, v in row.items()))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    source = cfg.source()
    _, test_ids = cfg.split()
    tcfg = cfg.train_config()
    model = build_model(tcfg, source, cfg.model(), cfg.rates())
    _, echo = load_checkpoint(args.checkpoint, model)
    expected = config_echo(tcfg, source, model.cfg, model.rates)
    if echo.get("model") != expected["model"]:
        print("warning: checkpoint model config differs from the run config", file=sys.stderr)
    res = evaluate(model, source, test_ids, ChannelConfig(snr_db=tcfg.snr_db, P=tcfg.P), lam=tcfg.lam)
    print(f"mode={res.mode} n=({res.n[0]:.1f}, {res.n[1]:.1f}) hyper_bits={res.hyper_bits:.3f}")
    for u in (0, 1):
        print(f"user{u + 1}: r={res.r_user[u]:.5f} psnr={res.psnr[u]:.3f} msssim={res.msssim[u]:.4f}")
    return 0


def cmd_rd_sweep(cfg: RunConfig, args) -> int:
    out = args.out or sys.stdout
    rd_sweep(cfg, out)
    return 0


def cmd_oracle_check(cfg: RunConfig, args) -> int:
    from .oracles import oracle_check

    report = oracle_check(quick=args.quick)
    print(report.table())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distjscc",
        description="Distributed deep joint source-channel coding at desk scale.",
        epilog="Configuration keys (override with --section.key=value):\n" + config_docs(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file with [section] headers")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write the synthetic train/test pairs as PGM/PPM")
    p.add_argument("--out", required=True)
    p = add("train", cmd_train, "train one model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resume")
    p.add_argument("--log", help="per-epoch CSV log")
    p = add("eval", cmd_eval, "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p = add("rd-sweep", cmd_rd_sweep, "sweep λ × mode × seed and write the CSV")
    p.add_argument("--out")
    p = add("oracle-check", cmd_oracle_check, "run the numerical oracle suite")
    p.add_argument("--quick", action="store_true", help="skip the slow Monte Carlo and training oracles")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    args.overrides = rest
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        return args.fn(cfg, args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
