"""Command-line interface: experiment orchestration and result emission.

Subcommands:

* ``train``: run one experiment from a flat key=value config (plus flag
  overrides); writes metrics JSONL, the final model, and the accountant
  ledger.
* ``sweep``: the same experiment over a list of reparametrization ranks,
  one metrics/model file per rank.
* ``blobs``: generate the seeded two-class Gaussian dataset as CSV.
* ``mi``: loss-threshold membership inference against a saved model.
* ``subspace``: gradient subspace invariance experiment on least squares.
* ``fetch-digits``: download a standard 10-class digit dataset in idx
  format (the only network-dependent command; nothing else needs it).

Exit codes: 0 success, 2 config error, 3 infeasible privacy calibration,
4 data error.
"""

import argparse
import dataclasses
import gzip
import json
import os
import sys
import urllib.request

import numpy as np

from pathlib import Path

from .analysis import LeastSquaresProblem, ls_gradient_subspace_check, mi_attack
from .config import TrainConfig
from .data import load_csv, load_idx_images, load_idx_labels, make_blobs, save_csv
from .errors import CalibrationError, ConfigError, DataError
from .estimator import DPMLPClassifier
from .modelfile import load_model, save_model
from .optimizer import layer_ranks

_TEST_SEED_OFFSET = 2 ** 20  # keeps train/test blob streams disjoint

DIGITS_BASE_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"
DIGITS_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)

__all__ = ["main", "run_experiment"]


def _load_datasets(cfg):
    """Return (train_x, train_y, test_x, test_y, input_shape_or_None)."""
    if cfg.format == "blobs":
        train_x, train_y = make_blobs(cfg.blobs_n, cfg.seed,
                                      std=cfg.blobs_std, separation=cfg.blobs_sep)
        test_x, test_y = make_blobs(cfg.blobs_test_n, cfg.seed + _TEST_SEED_OFFSET,
                                    std=cfg.blobs_std, separation=cfg.blobs_sep)
        return train_x, train_y, test_x, test_y, None
    if cfg.format == "csv":
        train_x, train_y = load_csv(cfg.train)
        test_x, test_y = load_csv(cfg.test)
        return train_x, train_y, test_x, test_y, None
    train_x, item_shape = load_idx_images(cfg.train_images)
    train_y = load_idx_labels(cfg.train_labels)
    test_x, _ = load_idx_images(cfg.test_images)
    test_y = load_idx_labels(cfg.test_labels)
    if cfg.input_shape:
        shape = tuple(cfg.input_shape)
    elif len(item_shape) == 2:
        shape = (1,) + tuple(item_shape)
    else:
        shape = tuple(item_shape)
    return train_x, train_y, test_x, test_y, shape


def _estimator_from_config(cfg, input_shape):
    return DPMLPClassifier(
        hidden_sizes=cfg.hidden,
        method=cfg.method,
        rank=cfg.rank,
        power_iters=cfg.power_iters,
        warmup_steps=cfg.warmup_steps,
        residual=cfg.residual,
        clip_norm=cfg.clip,
        noise_multiplier=cfg.sigma if cfg.sigma > 0 else None,
        target_epsilon=cfg.epsilon if cfg.epsilon > 0 else None,
        delta=cfg.delta,
        batch_size=cfg.batch,
        sampling=cfg.sampling,
        epochs=cfg.epochs,
        max_steps=cfg.max_steps or None,
        lr=cfg.lr,
        momentum=cfg.momentum,
        seed=cfg.seed,
        conv_channels=cfg.conv_channels,
        kernel_size=cfg.kernel_size,
        conv_stride=cfg.conv_stride,
        conv_padding=cfg.conv_padding,
        input_shape=input_shape,
        track_stable_rank=cfg.track_stable_rank,
        track_residuals=cfg.track_residuals,
        track_every_epochs=cfg.track_every_epochs,
        dense_check=cfg.dense_check,
    )


def _storage_formulas(net, rank):
    """Per-sample gradient floats per step: carrier route vs dense route."""
    carrier = 0
    dense = 0
    for layer, r in zip(net.trainable_layers, layer_ranks(net, rank)):
        p, d = layer.flat_weight.shape
        carrier += r * (p + d)
        dense += p * d
    return carrier, dense


def run_experiment(cfg, out_dir, tag=""):
    """Train once per ``cfg`` and write all artifacts into ``out_dir``.

    Returns a summary dict (also appended as the final metrics record).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = f"_{tag}" if tag else ""
    train_x, train_y, test_x, test_y, input_shape = _load_datasets(cfg)

    clf = _estimator_from_config(cfg, input_shape)
    clf.fit(train_x, train_y)

    train_acc = float(clf.score(train_x, train_y))
    test_acc = float(clf.score(test_x, test_y))
    carrier_floats, dense_floats = _storage_formulas(clf.network_, cfg.rank)
    summary = {
        "record": "final",
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "epsilon": clf.epsilon_,
        "sigma": clf.sigma_,
        "steps": clf.n_iter_,
        "grad_weight_floats": clf.grad_counter_.weight_floats,
        "grad_bias_floats": clf.grad_counter_.bias_floats,
        "per_sample_floats_carrier": carrier_floats,
        "per_sample_floats_dense": dense_floats,
    }

    metrics_path = out_dir / f"metrics{suffix}.jsonl"
    header = dict(cfg.resolved())
    header.update({
        "record": "config",
        "sampling_approximation": clf.sampling_approximation_,
        "resolved_sigma": clf.sigma_,
        "total_steps": clf.n_iter_,
        "sampling_q": clf.sampling_q_,
    })
    with open(metrics_path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(header, default=float) + "\n")
        for record in clf.metrics_:
            fh.write(json.dumps({"record": "step", **record}, default=float) + "\n")
        fh.write(json.dumps(summary, default=float) + "\n")

    model_path = out_dir / f"model{suffix}.bin"
    save_model(model_path, clf.network_)
    artifacts = {"metrics": str(metrics_path), "model": str(model_path)}

    if clf.accountant_ is not None:
        ledger_path = out_dir / f"accountant{suffix}.txt"
        clf.accountant_.save(ledger_path)
        artifacts["ledger"] = str(ledger_path)

    if cfg.track_stable_rank:
        path = out_dir / f"stable_rank{suffix}.csv"
        with open(path, "w", encoding="ascii") as fh:
            fh.write("step,layer,stable_rank\n")
            for record in clf.metrics_:
                for layer_idx, value in enumerate(record.get("stable_ranks") or []):
                    if value is not None:
                        fh.write(f"{record['step']},{layer_idx},{value!r}\n")
        artifacts["stable_rank"] = str(path)

    if cfg.track_residuals:
        path = out_dir / f"residuals{suffix}.csv"
        with open(path, "w", encoding="ascii") as fh:
            fh.write("epoch,layer,hist_residual,self_residual\n")
            for record in clf.metrics_:
                epoch = record["step"] // clf.steps_per_epoch_
                for layer_idx, value in enumerate(record.get("residuals") or []):
                    if value is not None:
                        fh.write(f"{epoch},{layer_idx},"
                                 f"{value['historical']!r},{value['self']!r}\n")
        artifacts["residuals"] = str(path)

    eps_text = f"{clf.epsilon_:.4f}" if clf.epsilon_ is not None else "inf (non-private)"
    print(f"method={cfg.method}{suffix}: test_accuracy={test_acc:.4f} "
          f"train_accuracy={train_acc:.4f} epsilon={eps_text}")
    print(f"  per-sample gradient floats/step: carrier={carrier_floats} "
          f"dense={dense_floats}; stored this run: "
          f"weights={clf.grad_counter_.weight_floats} biases={clf.grad_counter_.bias_floats}")
    summary["artifacts"] = artifacts
    return summary


# ----------------------------------------------------------------------
def _add_config_flags(parser):
    for field in dataclasses.fields(TrainConfig):
        flag = "--" + field.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{field.name}", metavar="V", default=None,
                            help=f"override config key {field.name}")


def _overrides_from_args(args):
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            overrides[key[4:]] = value
    return overrides


def _resolve_out(args):
    out = args.out or os.environ.get("RGP_OUT_DIR") or "."
    return Path(out)


def _cmd_train(args):
    cfg = TrainConfig.from_sources(args.config, _overrides_from_args(args))
    run_experiment(cfg, _resolve_out(args))
    return 0


def _cmd_sweep(args):
    cfg = TrainConfig.from_sources(args.config, _overrides_from_args(args))
    try:
        ranks = [int(r) for r in args.ranks.split(",") if r]
    except ValueError as exc:
        raise ConfigError(f"bad --ranks list: {exc}") from exc
    if not ranks:
        raise ConfigError("--ranks must name at least one rank")
    out = _resolve_out(args)
    for rank in ranks:
        run_experiment(dataclasses.replace(cfg, rank=rank), out, tag=f"r{rank}")
    return 0


def _cmd_blobs(args):
    x, y = make_blobs(args.n, args.seed, std=args.std, separation=args.sep)
    save_csv(args.out, x, y)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _per_sample_losses(net, x, y):
    logits, _ = net.forward(x)
    n_classes = logits.shape[1]
    labels = np.asarray(y)
    rounded = np.round(labels).astype(int)
    if not np.array_equal(rounded, labels) or rounded.min() < 0 or rounded.max() >= n_classes:
        raise DataError(f"labels must be integer class indices in [0, {n_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(rounded)), rounded]


def _cmd_mi(args):
    net = load_model(args.model)
    train_x, train_y = load_csv(args.train_csv)
    test_x, test_y = load_csv(args.test_csv)
    count = min(len(train_y), len(test_y))
    if count < 2:
        raise DataError("need at least two samples on each side")
    member = _per_sample_losses(net, train_x[:count], train_y[:count])
    nonmember = _per_sample_losses(net, test_x[:count], test_y[:count])
    rate = mi_attack(member, nonmember)
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write("# threshold_objective=balanced_accuracy\n")
        fh.write("method,epsilon,mi_success_rate\n")
        fh.write(f"{args.method_label},{args.epsilon_label},{rate!r}\n")
    print(f"mi_success_rate={rate:.4f} ({args.method_label})")
    return 0


def _cmd_subspace(args):
    problem = LeastSquaresProblem.random(args.n, args.d, args.p, args.seed,
                                         step_fraction=args.step_fraction)
    records = ls_gradient_subspace_check(problem, args.steps)
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write("step,grad_norm,col_residual,row_residual,closed_form_rel_err\n")
        for rec in records:
            fh.write(f"{rec['step']},{rec['grad_norm']!r},{rec['col_residual']!r},"
                     f"{rec['row_residual']!r},{rec['closed_form_rel_err']!r}\n")
    worst = max(max(r["col_residual"], r["row_residual"]) for r in records)
    print(f"wrote {len(records)} steps to {args.out}; worst residual {worst:.3e}")
    return 0


def _cmd_fetch_digits(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in DIGITS_FILES:
        target = out / name[:-3]
        if target.exists():
            print(f"{target} already present")
            continue
        url = DIGITS_BASE_URL + name
        print(f"fetching {url}")
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                payload = gzip.decompress(resp.read())
        except OSError as exc:
            raise DataError(f"download failed for {url}: {exc}") from exc
        target.write_bytes(payload)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rgp",
        description="Differentially private training via low-rank gradient carriers")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training experiment")
    train.add_argument("--config", help="flat key=value config file")
    train.add_argument("--out", help="output directory (default $RGP_OUT_DIR or .)")
    _add_config_flags(train)
    train.set_defaults(func=_cmd_train)

    sweep = sub.add_parser("sweep", help="repeat an experiment over several ranks")
    sweep.add_argument("--config")
    sweep.add_argument("--out")
    sweep.add_argument("--ranks", required=True, help="comma list, e.g. 1,2,4,8")
    _add_config_flags(sweep)
    sweep.set_defaults(func=_cmd_sweep)

    blobs = sub.add_parser("blobs", help="write the seeded Gaussian blobs dataset")
    blobs.add_argument("--n", type=int, default=5000)
    blobs.add_argument("--seed", type=int, default=0)
    blobs.add_argument("--std", type=float, default=1.0)
    blobs.add_argument("--sep", type=float, default=3.0)
    blobs.add_argument("--out", required=True)
    blobs.set_defaults(func=_cmd_blobs)

    mi = sub.add_parser("mi", help="loss-threshold membership inference")
    mi.add_argument("--model", required=True)
    mi.add_argument("--train-csv", required=True)
    mi.add_argument("--test-csv", required=True)
    mi.add_argument("--out", required=True)
    mi.add_argument("--method-label", default="unknown")
    mi.add_argument("--epsilon-label", default="inf")
    mi.set_defaults(func=_cmd_mi)

    subspace = sub.add_parser("subspace", help="least-squares gradient subspace check")
    subspace.add_argument("--n", type=int, default=4)
    subspace.add_argument("--d", type=int, default=16)
    subspace.add_argument("--p", type=int, default=12)
    subspace.add_argument("--steps", type=int, default=100)
    subspace.add_argument("--seed", type=int, default=0)
    subspace.add_argument("--step-fraction", type=float, default=0.5)
    subspace.add_argument("--out", required=True)
    subspace.set_defaults(func=_cmd_subspace)

    fetch = sub.add_parser("fetch-digits", help="download the 10-class digit dataset (idx)")
    fetch.add_argument("--out", required=True)
    fetch.set_defaults(func=_cmd_fetch_digits)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CalibrationError as exc:
        print(f"infeasible privacy calibration: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
