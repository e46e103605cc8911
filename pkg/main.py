#!/usr/bin/env python3

"""
Command-line entry point.

    main.py train <config> [--init CKPT]
    main.py eval <config> <ckpt>
    main.py flops <config> [--format table|keyvalue] [--grid]
    main.py attn-dump <config> <ckpt> <index> [--layers 4,7,10] [--out DIR]
    main.py gen-data <classes> <samples> <seed> <dir> [--image-size N] [--channels N] [--noise S]
    main.py bench <config> [--repeats N]

Exit codes: 0 success, 2 invalid config / arguments / index out of range,
3 non-finite loss, 1 anything else.
"""

import argparse
import logging
import os
import signal
import sys
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

from prometheus_client import start_http_server
from scipy.stats import spearmanr

import config
from attention_dump import dump_attention
from checkpoint_io import CheckpointError, load_checkpoint, save_checkpoint
from config import ConfigError
from datasets import Dataset, DatasetError, load_raw_dir, save_raw_dir, synth_dataset
from dense_adapter import VARIANTS, AdapterConfig
from finetune_engine import EpochMetrics, NonFiniteLossError, evaluate, train
from flops_params import count_flops, describe
from input_validation import ValidationError, validate_int_list
from metrics import init_metrics
from run_config import RunConfig, load_run_config
from utils import best_of
from vit_backbone import ViTWeights, vit_forward

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_NONFINITE = 3

METRICS_LOG = "metrics.log"
FINAL_CHECKPOINT = "final.sptn"
BENCH_KEEP_RATES = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
GRID_BOTTLENECKS = (8, 16, 32, 64, 128)

# Set by SIGINT/SIGTERM; training stops after the current epoch
_stop_requested = False


def handle_shutdown_signal(signum, frame):
    """Handle shutdown signals by finishing the current epoch"""
    global _stop_requested
    signal_name = signal.Signals(signum).name
    logger.info(f"Received {signal_name} signal, stopping after the current epoch...")
    _stop_requested = True


def stop_requested() -> bool:
    return _stop_requested


def load_datasets(run_config: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Train and (optional) eval datasets described by the data section."""
    data = run_config.data
    model = run_config.model
    if data.source == "synthetic":
        train_set = synth_dataset(
            data.classes, data.samples, data.seed, model.image_size, model.channels, data.noise
        )
        eval_set = None
        if data.eval_samples > 0:
            eval_set = synth_dataset(
                data.classes, data.eval_samples, data.seed + 1, model.image_size, model.channels, data.noise
            )
    else:
        train_set = load_raw_dir(data.path, model.channels, model.image_size)
        eval_set = load_raw_dir(data.eval_path, model.channels, model.image_size) if data.eval_path else None

    for name, dataset in (("train", train_set), ("eval", eval_set)):
        if dataset is not None and len(dataset) and int(dataset.labels.max()) >= model.num_classes:
            raise DatasetError(
                f"{name} set has label {int(dataset.labels.max())}, model has {model.num_classes} classes"
            )
    return train_set, eval_set


def _eval_or_train_set(run_config: RunConfig) -> Dataset:
    train_set, eval_set = load_datasets(run_config)
    return eval_set if eval_set is not None and len(eval_set) else train_set


def cmd_train(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config)
    out_dir = run_config.output.dir
    if args.init:
        weights = load_checkpoint(args.init, run_config.model, run_config.plan)
    else:
        weights = ViTWeights.initialize(run_config.model, run_config.plan, seed=run_config.train.seed)
    train_set, eval_set = load_datasets(run_config)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, METRICS_LOG)
    checkpoint_every = run_config.output.checkpoint_every

    with open(log_path, "w") as log:
        for line in run_config.to_header().splitlines():
            log.write(f"# {line}\n")
        log.write("# epoch train_loss train_acc eval_acc seconds\n")
        log.flush()

        def on_epoch(epoch_metrics: EpochMetrics) -> None:
            log.write(epoch_metrics.to_line(run_config.output.wall_time) + "\n")
            log.flush()
            if checkpoint_every and epoch_metrics.epoch % checkpoint_every == 0:
                save_checkpoint(weights, os.path.join(out_dir, f"checkpoint_epoch{epoch_metrics.epoch}.sptn"))

        metrics = train(run_config.train, weights, train_set, eval_set, on_epoch, stop_requested)

    save_checkpoint(weights, os.path.join(out_dir, FINAL_CHECKPOINT))
    final = metrics.final
    print(f"epochs={len(metrics.epochs)}")
    if final.eval_accuracy is not None:
        logger.info(
            f"Training finished after {len(metrics.epochs)} epochs; "
            f"final eval accuracy {final.eval_accuracy:.4f}, best {metrics.best_eval_accuracy:.4f}"
        )
        print(f"final_eval_accuracy={final.eval_accuracy:.4f}")
    else:
        logger.info(f"Training finished after {len(metrics.epochs)} epochs; no eval set")
    print(f"metrics_log={log_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config)
    weights = load_checkpoint(args.checkpoint, run_config.model, run_config.plan)
    dataset = _eval_or_train_set(run_config)
    accuracy = evaluate(dataset, weights, run_config.train.batch_size)
    print(f"samples={len(dataset)}")
    print(f"accuracy={accuracy:.4f}")
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config)
    model, plan = run_config.model, run_config.plan
    if args.grid:
        base = plan.adapter if plan.adapter is not None else AdapterConfig()
        for variant in VARIANTS:
            for d in GRID_BOTTLENECKS:
                print(describe(model, replace(plan, adapter=replace(base, variant=variant, bottleneck=d))))
        return EXIT_OK
    report = count_flops(model, plan)
    print(report.to_keyvalue() if args.format == "keyvalue" else report.to_table())
    return EXIT_OK


def cmd_attn_dump(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config)
    weights = load_checkpoint(args.checkpoint, run_config.model, run_config.plan)
    dataset = _eval_or_train_set(run_config)
    if not 0 <= args.index < len(dataset):
        raise ValidationError(f"index: {args.index} is outside 0..{len(dataset) - 1}")
    layers = None
    if args.layers:
        try:
            parsed = [int(part) for part in args.layers.split(",")]
        except ValueError:
            raise ValidationError(f"--layers: expected comma-separated integers, got {args.layers!r}")
        layers = validate_int_list("--layers", parsed, minimum=1)
        if max(layers) > run_config.model.num_layers:
            raise ValidationError(f"--layers: {max(layers)} exceeds {run_config.model.num_layers} layers")
    out_dir = args.out or os.path.join(run_config.output.dir, "attention")
    for path in dump_attention(dataset.images[args.index], weights, out_dir, layers):
        print(path)
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    dataset = synth_dataset(
        args.classes, args.samples, args.seed, args.image_size, args.channels, args.noise
    )
    save_raw_dir(dataset, args.dir)
    print(f"samples={len(dataset)}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    run_config = load_run_config(args.config)
    model, plan = run_config.model, run_config.plan
    if plan.sparsify is None:
        logger.warning("Sparsification is disabled; every keep rate runs the dense network")
    repeats = args.repeats if args.repeats is not None else config.BENCH_REPEATS
    weights = ViTWeights.initialize(model, plan, seed=run_config.train.seed)
    image = synth_dataset(2, 1, run_config.data.seed, model.image_size, model.channels).images[0]

    seconds: List[float] = []
    gflops: List[float] = []
    with weights.inference():
        for keep_rate in BENCH_KEEP_RATES:
            rate_plan = plan.with_keep_rate(keep_rate)
            vit_forward(image, weights, rate_plan)
            elapsed = best_of(lambda: vit_forward(image, weights, rate_plan), repeats)
            report = count_flops(model, rate_plan)
            seconds.append(elapsed)
            gflops.append(report.gflops)
            print(
                f"keep_rate={keep_rate:g} seconds={elapsed:.6f} "
                f"images_per_s={1.0 / elapsed:.2f} gflops={report.gflops:.4f}"
            )

    if len(set(gflops)) > 1:
        rho = spearmanr(seconds, gflops).correlation
        print(f"spearman_time_vs_gflops={rho:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-tuning",
        description="Sparse-Tuning: token-sparsified ViT fine-tuning with Dense Adapters",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("train", help="Fine-tune per a RunConfig file")
    p.add_argument("config")
    p.add_argument("--init", help="Checkpoint to start from instead of a seeded initialization")
    p.set_defaults(handler=cmd_train)

    p = subparsers.add_parser("eval", help="Report accuracy of a checkpoint")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser("flops", help="Print the analytic cost report")
    p.add_argument("config")
    p.add_argument("--format", choices=("table", "keyvalue"), default="table")
    p.add_argument("--grid", action="store_true", help="One line per adapter variant and bottleneck")
    p.set_defaults(handler=cmd_flops)

    p = subparsers.add_parser("attn-dump", help="Write CLS-attention CSV and PGM maps")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("index", type=int)
    p.add_argument("--layers", help="Comma-separated 1-based layers to render (default: all)")
    p.add_argument("--out", help="Output directory (default: <output.dir>/attention)")
    p.set_defaults(handler=cmd_attn_dump)

    p = subparsers.add_parser("gen-data", help="Write a synthetic dataset as a raw directory")
    p.add_argument("classes", type=int)
    p.add_argument("samples", type=int)
    p.add_argument("seed", type=int)
    p.add_argument("dir")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(handler=cmd_gen_data)

    p = subparsers.add_parser("bench", help="Forward throughput across keep rates")
    p.add_argument("config")
    p.add_argument("--repeats", type=int, help=f"Timed passes per keep rate (default {config.BENCH_REPEATS})")
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    init_metrics()
    if config.METRICS_PORT > 0:
        start_http_server(config.METRICS_PORT)
        logger.info(f"Prometheus metrics server started on port {config.METRICS_PORT}")
    logger.debug(config.get_config_summary())

    global _stop_requested
    _stop_requested = False
    previous = {sig: signal.signal(sig, handle_shutdown_signal) for sig in (signal.SIGINT, signal.SIGTERM)}

    try:
        return args.handler(args)
    except (ValidationError, ConfigError, DatasetError, CheckpointError) as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLossError as e:
        logger.error(f"{args.command}: {e}; diagnostics: {e.diagnostics}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


if __name__ == "__main__":
    sys.exit(main())
