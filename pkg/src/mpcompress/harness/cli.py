"""``mpcompress`` command line: train, eval, codec-check, gradcheck, bench."""

from __future__ import annotations

import argparse
import logging
import sys

from ..compressors import dense
from ..nn_model import forward, load_checkpoint
from ..pipeline import Pipeline
from ..wire import wire_size
from .checks import codec_check, gradcheck
from .config import ConfigError, load_config
from .datasets import DatasetError, make_dataset
from .runner import model_for, output_dir, run_experiment


def _load(path, seeds: str | None):
    cfg = load_config(path)
    if seeds:
        cfg.seeds = [int(s) for s in seeds.split(",") if s.strip()]
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args.config, args.seeds)
    out = args.out or output_dir()
    res = run_experiment(cfg, out, checkpoints=args.checkpoint)
    for seed, path in zip(cfg.seeds, res.seed_csvs):
        last = res.rows[seed][-1] if res.rows[seed] else None
        summary = f" acc_on={last.test_acc_on} acc_off={last.test_acc_off}" if last else ""
        print(f"{path}{summary}")
    print(res.aggregate_csv)
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args.config, None)
    data = make_dataset(cfg.dataset)
    layers, loss = load_checkpoint(args.checkpoint)
    with Pipeline(layers, cfg.pipeline_config(), loss) as pipe:
        test_loss, acc = pipe.evaluate(data.x_test, data.y_test, args.compression == "on", cfg.batch_size)
    print(f"compression={args.compression} test_loss={test_loss!r} test_acc={acc!r}")
    return 0


def cmd_codec_check(args) -> int:
    rep = codec_check(args.trials, args.seed)
    print(rep.text())
    return 0 if rep.ok else 1


def cmd_gradcheck(args) -> int:
    rep = gradcheck(args.preset, args.seed)
    print(rep.text())
    return 0 if rep.ok else 1


def cmd_bench(args) -> int:
    """Measure wire bytes for one batch, first visit and repeat visit, without training."""
    cfg = _load(args.config, None)
    data = make_dataset(cfg.dataset)
    bs = cfg.batch_size
    steps = len(data.x_train) // bs
    x, y, ids = data.x_train[:bs], data.y_train[:bs], data.ids_train[:bs]
    layers = model_for(cfg, data, cfg.seeds[0])
    with Pipeline(layers, cfg.pipeline_config(), aqsgd_capacity=len(data.x_train)) as pipe:
        compress = cfg.warmup_epochs == 0
        pipe.compute_gradients(x, y, ids, compress)
        first = (pipe.bytes_forward(), pipe.bytes_backward())
        pipe.compute_gradients(x, y, ids, compress)
        second = (pipe.bytes_forward() - first[0], pipe.bytes_backward() - first[1])
        # the float32 dense frame for the same activation shapes
        ref = 0
        h = x
        for stage in pipe.stages[:-1]:
            h = forward(stage, h)
            ref += wire_size(dense(h))
    print(f"config={cfg.name} degree={cfg.degree} batch={bs} steps/epoch={steps}")
    print(f"first step   bytes_forward={first[0]} bytes_backward={first[1]}")
    print(f"repeat step  bytes_forward={second[0]} bytes_backward={second[1]}")
    print(f"float32 dense reference per direction per step: {ref}")
    if ref:
        print(f"ratio forward={second[0] / ref:.4f} backward={second[1] / ref:.4f}")
    print(f"estimated bytes per epoch: forward={second[0] * steps} backward={second[1] * steps}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpcompress", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment config and write metric CSVs")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default $MPCOMPRESS_OUTPUT_DIR or ./runs)")
    t.add_argument("--seeds", help="comma-separated seeds, overrides the config")
    t.add_argument("--checkpoint", action="store_true", help="also write one checkpoint per seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's test split")
    e.add_argument("config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--compression", choices=("on", "off"), default="on")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("codec-check", help="wire codec round-trip and fuzz properties")
    c.add_argument("--trials", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_codec_check)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--preset", default="mlp")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="bytes-only dry run of a config")
    b.add_argument("config")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for field_name, msg in exc.errors:
            print(f"config error: {field_name}: {msg}", file=sys.stderr)
        return 2
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
