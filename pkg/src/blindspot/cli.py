"""Command line front end.

Subcommands mirror the library pipelines: train, attack, distance,
divergence, blindspot, report. Every run is deterministic under a
fixed --seed. Exit codes: 0 success, 1 validation problem, 2 I/O or
file format problem.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .attacks import CwOptions, attack_suite
from .config import load_config, pick
from .data import mnist_dataset
from .errors import FileFormatError, TrainingDivergedError, ValidationError
from .geometry import per_class_kl
from .harness import blindspot_grid, distance_binned_success
from .nn import build_small_cnn, extract_features_batched, load_checkpoint, save_checkpoint
from .reports import emit_report, render_csv
from .training import AdversarialConfig, TrainConfig, train_adversarial, train_natural

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # bad flags print usage and exit 1, not argparse's default 2
    def error(self, message):
        raise _UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed")
    common.add_argument("--config", default=None, help="flat key=value settings file")
    common.add_argument("--out", default=None, help="output directory for reports")
    common.add_argument("--subset-size", type=int, default=None,
                        help="evaluate only the first N test images")
    common.add_argument("--threads", type=int, default=None, help="attack worker threads")

    parser = _Parser(prog="blindspot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="train a small CNN")
    p_train.add_argument("--dataset", choices=("mnist", "fashion"), default="mnist")
    p_train.add_argument("--data-dir", default=None)
    p_train.add_argument("--adversarial", action="store_true")
    p_train.add_argument("--epsilon", type=float, default=None)
    p_train.add_argument("--pgd-steps", type=int, default=40)
    p_train.add_argument("--pgd-step-size", type=float, default=0.01)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--learning-rate", type=float, default=None)
    p_train.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p_train.add_argument("--train-size", type=int, default=None,
                         help="train on only the first N images")
    p_train.add_argument("--conv-channels", type=_int_list, default=None)
    p_train.add_argument("--fc-widths", type=_int_list, default=None)
    p_train.add_argument("--save", default=None, help="checkpoint path")
    p_train.set_defaults(handler=_cmd_train)

    p_attack = sub.add_parser("attack", parents=[common],
                              help="attack a test subset, emit per-example results")
    _model_flags(p_attack)
    p_attack.add_argument("--method", choices=("cw", "pgd"), default="cw")
    p_attack.add_argument("--thresholds", type=_float_list, default=(0.3,))
    p_attack.add_argument("--pgd-tol", type=float, default=0.01)
    _cw_flags(p_attack)
    p_attack.set_defaults(handler=_cmd_attack)

    p_dist = sub.add_parser("distance", parents=[common],
                            help="bin attack success by distance to the train set")
    _model_flags(p_dist)
    p_dist.add_argument("--extractor", default=None,
                        help="feature extractor checkpoint (defaults to --model)")
    p_dist.add_argument("--k", type=int, default=5)
    p_dist.add_argument("--p", type=float, default=2.0)
    p_dist.add_argument("--bins", type=int, default=20)
    p_dist.add_argument("--min-bin-count", type=int, default=10)
    p_dist.add_argument("--epsilon", type=float, default=0.3)
    p_dist.add_argument("--method", choices=("cw", "pgd"), default="cw")
    p_dist.add_argument("--tap", default="fc1")
    p_dist.add_argument("--pgd-tol", type=float, default=0.01)
    _cw_flags(p_dist)
    p_dist.set_defaults(handler=_cmd_distance)

    p_div = sub.add_parser("divergence", parents=[common],
                           help="per-class projected K-L divergence, train vs test")
    _model_flags(p_div)
    p_div.add_argument("--projection", choices=("pca", "tsne"), default="pca")
    p_div.add_argument("--grid", type=int, default=256)
    p_div.add_argument("--perplexity", type=float, default=30.0)
    p_div.add_argument("--iterations", type=int, default=1000)
    p_div.add_argument("--tap", default="fc1")
    p_div.add_argument("--train-size", type=int, default=None,
                       help="cap the train rows fed to the projection")
    p_div.set_defaults(handler=_cmd_divergence)

    p_blind = sub.add_parser("blindspot", parents=[common],
                             help="scale-and-shift grid: accuracy and success rates")
    _model_flags(p_blind)
    p_blind.add_argument("--epsilon", type=float, default=0.3)
    p_blind.add_argument("--method", choices=("cw", "pgd"), default="cw")
    p_blind.add_argument("--pgd-tol", type=float, default=0.01)
    _cw_flags(p_blind)
    p_blind.set_defaults(handler=_cmd_blindspot)

    p_report = sub.add_parser("report", parents=[common],
                              help="re-render an emitted CSV into its SVG figure")
    p_report.add_argument("csv", help="path to a previously emitted CSV report")
    p_report.set_defaults(handler=_cmd_report)

    return parser


def _model_flags(p: _Parser, dataset: bool = True) -> None:
    p.add_argument("--model", required=True, help="model checkpoint to evaluate")
    if dataset:
        p.add_argument("--dataset", choices=("mnist", "fashion"), default="mnist")
    p.add_argument("--data-dir", default=None)


def _cw_flags(p: _Parser) -> None:
    p.add_argument("--cw-iterations", type=int, default=1000)
    p.add_argument("--cw-tau-decay", type=float, default=0.9)
    p.add_argument("--cw-c-doublings", type=int, default=5)


def _globals(args, cfg) -> tuple[int, Path, int, int]:
    seed = pick(args.seed, cfg, "seed", 0, int)
    out = Path(pick(args.out, cfg, "out", "out", str))
    subset = pick(args.subset_size, cfg, "subset_size", 0, int)
    threads = pick(args.threads, cfg, "threads", 1, int)
    return seed, out, subset, threads


def _load_split(args, cfg, split: str, subset: int = 0):
    tag = getattr(args, "dataset", None) or "mnist"
    data_dir = pick(getattr(args, "data_dir", None), cfg, "data_dir", f"data/{tag}", str)
    data = mnist_dataset(data_dir, split)
    if subset:
        data = data.take(min(subset, len(data)))
    return data, tag


def _cw_opts(args, seed: int) -> CwOptions:
    return CwOptions(
        iterations=args.cw_iterations, tau_decay=args.cw_tau_decay,
        c_doublings=args.cw_c_doublings, seed=seed,
    )


def _cmd_train(args, cfg) -> int:
    seed, out, _, _ = _globals(args, cfg)
    train_set, tag = _load_split(args, cfg, "train")
    size = pick(args.train_size, cfg, "train_size", 0, int)
    if size:
        train_set = train_set.take(min(size, len(train_set)))
    channels = pick(args.conv_channels, cfg, "conv_channels", (32, 64),
                    lambda s: _int_list(s))
    widths = pick(args.fc_widths, cfg, "fc_widths", (1024,), lambda s: _int_list(s))
    model = build_small_cnn(conv_channels=channels, fc_widths=widths, seed=seed)
    model.metadata.update({"dataset": tag, "trained_on": len(train_set)})

    adversarial = None
    if args.adversarial:
        epsilon = pick(args.epsilon, cfg, "epsilon", 0.3, float)
        adversarial = AdversarialConfig(
            epsilon=epsilon, pgd_steps=args.pgd_steps, pgd_step_size=args.pgd_step_size
        )
    config = TrainConfig(
        epochs=pick(args.epochs, cfg, "epochs", 5, int),
        batch_size=pick(args.batch_size, cfg, "batch_size", 50, int),
        learning_rate=pick(args.learning_rate, cfg, "learning_rate", 1e-4, float),
        optimizer=pick(args.optimizer, cfg, "optimizer", "adam", str),
        seed=seed,
        adversarial=adversarial,
    )
    if adversarial is not None:
        stats = train_adversarial(model, train_set, config)
    else:
        stats = train_natural(model, train_set, config)
    for s in stats:
        print(f"epoch {s.epoch}: loss {s.loss:.6f}, train accuracy {s.accuracy:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    save_path = Path(pick(args.save, cfg, "save", str(out / "model.ckpt"), str))
    save_checkpoint(model, save_path)
    print(f"saved {save_path}")
    return 0


def _cmd_attack(args, cfg) -> int:
    seed, out, subset, threads = _globals(args, cfg)
    model = load_checkpoint(args.model)
    data, _ = _load_split(args, cfg, "test", subset)
    suite = attack_suite(
        model, data, list(args.thresholds), opts=_cw_opts(args, seed),
        method=args.method, threads=threads, pgd_tol=args.pgd_tol,
    )
    csv_path, svg_path = emit_report(suite, out)
    for threshold, rate in sorted(suite.success_rates.items()):
        print(f"success rate at {threshold:g}: {rate:.4f}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _cmd_distance(args, cfg) -> int:
    seed, out, subset, threads = _globals(args, cfg)
    model = load_checkpoint(args.model)
    extractor = load_checkpoint(args.extractor) if args.extractor else model
    train_set, _ = _load_split(args, cfg, "train")
    test_set, _ = _load_split(args, cfg, "test", subset)
    report = distance_binned_success(
        model, extractor, train_set, test_set,
        k=args.k, p=args.p, bins=args.bins, epsilon=args.epsilon,
        min_bin_count=args.min_bin_count, method=args.method,
        opts=_cw_opts(args, seed), threads=threads, tap=args.tap,
    )
    csv_path, svg_path = emit_report(report, out)
    defined = report.mask.sum()
    print(f"binned {report.evaluated} points into {report.counts.size} bins "
          f"({defined} with rates)")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _cmd_divergence(args, cfg) -> int:
    seed, out, subset, _ = _globals(args, cfg)
    model = load_checkpoint(args.model)
    train_set, _ = _load_split(args, cfg, "train")
    size = pick(args.train_size, cfg, "train_size", 0, int)
    if size:
        train_set = train_set.take(min(size, len(train_set)))
    test_set, _ = _load_split(args, cfg, "test", subset)
    train_feats = extract_features_batched(model, train_set.images, args.tap)
    test_feats = extract_features_batched(model, test_set.images, args.tap)
    report = per_class_kl(
        train_feats, train_set.labels, test_feats, test_set.labels,
        projection=args.projection, grid=args.grid,
        perplexity=args.perplexity, iterations=args.iterations, seed=seed,
    )
    csv_path, svg_path = emit_report(report, out)
    print(f"average K-L divergence: {report.average:.6f}")
    for cls, message in sorted(report.errors.items()):
        print(f"class {cls}: {message}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _cmd_blindspot(args, cfg) -> int:
    seed, out, subset, threads = _globals(args, cfg)
    model = load_checkpoint(args.model)
    test_set, tag = _load_split(args, cfg, "test", subset)
    report = blindspot_grid(
        model, test_set, tag, args.epsilon,
        method=args.method, opts=_cw_opts(args, seed), threads=threads,
    )
    csv_path, svg_path = emit_report(report, out)
    for row in report.rows:
        if row.error:
            print(f"({row.params.alpha:g}, {row.params.beta:g}): {row.error}")
        else:
            print(f"({row.params.alpha:g}, {row.params.beta:g}): "
                  f"accuracy {row.accuracy:.4f}, "
                  f"success {row.rate_at_epsilon:.4f} at eps, "
                  f"{row.rate_at_strict:.4f} at strict")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _cmd_report(args, cfg) -> int:
    _, out, _, _ = _globals(args, cfg)
    svg_path = render_csv(args.csv, out_dir=out if args.out else None)
    print(f"wrote {svg_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config) if args.config else {}
        return args.handler(args, cfg)
    except (ValidationError, TrainingDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FileFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
