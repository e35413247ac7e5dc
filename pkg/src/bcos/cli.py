"""Command-line interface: train, explain, neurons, gridgame, ablation.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
input, 3 training aborted on a non-finite loss.  Diagnostics go to stderr as
a single line prefixed ``error:``; tables go to stdout tab-separated.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .errors import BcosError, CheckpointError, ConfigError, DatasetError, NaNLossError

log = logging.getLogger("bcos")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _words(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--config", default=None,
                   help="key=value overlay file; explicit flags take precedence")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (only 1 is deterministic; others are ignored)")
    p.add_argument("--verbose", action="store_true", default=False, help="log progress to stderr")


def _add_data(p):
    p.add_argument("--dataset", choices=["synth", "cifar10"], default="synth",
                   help="dataset selector")
    p.add_argument("--data-dir", default=None, help="CIFAR-10 binary batch directory")
    p.add_argument("--classes", type=int, default=4, help="synthetic classes K (2..10)")
    p.add_argument("--size", type=int, default=16, help="synthetic image size in pixels")
    p.add_argument("--n-train", type=int, default=2000, help="synthetic training samples")
    p.add_argument("--n-test", type=int, default=800, help="synthetic test samples")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic data")


def _add_model(p):
    p.add_argument("--arch", choices=["tiny", "cifar9"], default="tiny", help="architecture")
    p.add_argument("--channels", type=int, default=32, help="hidden channels of the tiny net")
    p.add_argument("--b", type=float, default=2.0, help="B-cos exponent B")
    p.add_argument("--maxout", type=int, default=1, help="MaxOut units per neuron")


def _add_train(p):
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="mini-batch size")
    p.add_argument("--lr-init", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--lr-final", type=float, default=1e-5, help="final learning rate (cosine)")
    p.add_argument("--hflip", type=_bool, default=False, help="random horizontal flips")
    p.add_argument("--pad-crop", type=int, default=0, help="padded random crop margin")
    p.add_argument("--precision", choices=["float32", "float64"], default="float32",
                   help="training precision")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="save a checkpoint every N epochs (0: only at the end)")


def _add_grid(p):
    p.add_argument("--grid-n", type=int, default=2, help="grid side length (cells per row)")
    p.add_argument("--n-grids", type=int, default=100, help="number of grid images")
    p.add_argument("--steps", type=int, default=50, help="IntGrad integration steps")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="bcos", description="B-cos networks: train, explain, evaluate.",
                                     formatter_class=fmt, allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network", formatter_class=fmt, allow_abbrev=False)
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--out-dir", default="run", help="output directory")

    p = sub.add_parser("explain", help="explain one image", formatter_class=fmt, allow_abbrev=False)
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="RGB image (PNG or PPM)")
    p.add_argument("--class", dest="cls", type=int, default=None,
                   help="class to explain; the predicted class when omitted")
    p.add_argument("--layer", type=int, default=None, help="explain a neuron of this layer (1-based)")
    p.add_argument("--neuron", type=int, default=None, help="channel of the neuron at --layer")
    p.add_argument("--position", default=None, help="row,col of the neuron; summed over space when omitted")
    p.add_argument("--out", default="explanation.ppm", help="explanation image (.ppm or .png)")
    p.add_argument("--figure", default=None, help="optional figure with input and contributions")

    p = sub.add_parser("neurons", help="explain top-activating inputs of hidden neurons",
                       formatter_class=fmt, allow_abbrev=False)
    _add_common(p), _add_data(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--layer", type=int, required=True, help="layer (1-based)")
    p.add_argument("--top-k", type=int, default=1, help="inputs per neuron")
    p.add_argument("--out-dir", default="neurons", help="output directory")

    p = sub.add_parser("gridgame", help="grid pointing game", formatter_class=fmt, allow_abbrev=False)
    _add_common(p), _add_data(p), _add_grid(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--methods", type=_words, default="inherent,grad,ixg,intgrad",
                   help="attribution methods (inherent, grad, ixg, intgrad, uniform)")
    p.add_argument("--out-dir", default="gridgame", help="output directory")

    p = sub.add_parser("ablation", help="train one model per B and score localisation",
                       formatter_class=fmt, allow_abbrev=False)
    _add_common(p), _add_data(p), _add_model(p), _add_train(p), _add_grid(p)
    p.add_argument("--b-list", type=_floats, default="1,1.5,2,2.5", help="comma-separated B values")
    p.add_argument("--out-dir", default="ablation", help="output directory")
    return parser


@dataclass
class CliConfig:
    command: str
    values: dict
    sources: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None


def read_overlay(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment, keys use flag spelling."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def resolve(argv) -> CliConfig:
    """Parse flags, apply the overlay file and record where every value came from."""
    parser = build_parser()
    args = parser.parse_args(argv)
    explicit = _explicit_dests(parser, argv, args.command)
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    values = vars(args).copy()
    sources = {k: ("flag" if k in explicit else "default") for k in values}
    if values.get("config"):
        for k, raw in read_overlay(values["config"]).items():
            if k not in actions:
                raise ConfigError(f"unknown config key {k!r} for {args.command}")
            if k in explicit:
                continue
            act = actions[k]
            try:
                if act.nargs == 0:
                    val = _bool(raw)
                elif act.type is not None:
                    val = act.type(raw)
                else:
                    val = raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from None
            if act.choices and val not in act.choices:
                raise ConfigError(f"{k} must be one of {sorted(act.choices)}")
            values[k], sources[k] = val, "file"
    for k in ("methods",):
        if isinstance(values.get(k), str):
            values[k] = _words(values[k])
    if isinstance(values.get("b_list"), str):
        values["b_list"] = _floats(values["b_list"])
    return CliConfig(args.command, values, sources)


def _subparser(parser, command):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[command]
    raise KeyError(command)


def _explicit_dests(parser, argv, command) -> set:
    sub = _subparser(parser, command)
    flags = {}
    for act in sub._actions:
        for opt in act.option_strings:
            flags[opt] = act.dest
    seen = set()
    for tok in argv:
        name = tok.split("=", 1)[0]
        if name in flags:
            seen.add(flags[name])
    return seen


# dataset / model helpers

def load_data(cfg: CliConfig, need_train: bool = True):
    from .data import load_cifar10, synth_split

    if cfg.dataset == "cifar10":
        if not cfg.data_dir:
            raise ConfigError("--data-dir is required for --dataset cifar10")
        if not os.path.isdir(cfg.data_dir):
            raise ConfigError(f"dataset path {cfg.data_dir} does not exist")
        train = load_cifar10(cfg.data_dir, "train") if need_train else None
        return train, load_cifar10(cfg.data_dir, "test")
    if not 2 <= cfg.classes <= 10:
        raise ConfigError("--classes must be within 2..10")
    if cfg.size < 16:
        raise ConfigError("--size must be >= 16")
    return synth_split(cfg.data_seed, cfg.n_train, cfg.n_test, cfg.classes, cfg.size)


def make_net(cfg: CliConfig, B: float, num_classes: int):
    from .models import build_cifar9, build_tiny

    if B < 1:
        raise ConfigError("--b must be >= 1")
    if cfg.maxout < 1:
        raise ConfigError("--maxout must be >= 1")
    if cfg.arch == "cifar9":
        return build_cifar9(B, cfg.maxout, seed=cfg.seed, num_classes=num_classes)
    if cfg.channels < 4:
        raise ConfigError("--channels must be >= 4")
    return build_tiny(B, cfg.maxout, cfg.channels, num_classes, seed=cfg.seed)


def train_config(cfg: CliConfig, B: float):
    from .training import TrainConfig

    try:
        return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr_init=cfg.lr_init,
                           lr_final=cfg.lr_final, seed=cfg.seed, B=B, maxout=cfg.maxout,
                           hflip=cfg.hflip, pad_crop=cfg.pad_crop, dataset=cfg.dataset,
                           precision=cfg.precision, checkpoint_every=cfg.checkpoint_every)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _data_meta(cfg: CliConfig) -> dict:
    keys = ["dataset", "data_dir", "classes", "size", "n_train", "n_test", "data_seed"]
    return {k: cfg.values.get(k) for k in keys}


def _print_table(header, rows):
    print("\t".join(header))
    for r in rows:
        print("\t".join(str(v) for v in r))


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# subcommands

def cmd_train(cfg: CliConfig) -> int:
    from .models import save_checkpoint
    from .plotting import plot_training
    from .training import train

    train_set, test_set = load_data(cfg)
    tcfg = train_config(cfg, cfg.b)
    net = make_net(cfg, cfg.b, train_set.num_classes)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "model.bcos")
    net, rows = train(net, train_set, tcfg, test_set, os.path.join(cfg.out_dir, "metrics.csv"), ckpt)
    net.meta["data"] = _data_meta(cfg)
    net.meta["provenance"] = {k: cfg.sources[k] for k in sorted(cfg.sources)}
    save_checkpoint(net.astype(np.float32) if net.dtype != np.float32 else net, ckpt)
    plot_training(rows, os.path.join(cfg.out_dir, "training.png"))
    last = rows[-1]
    _print_table(["epoch", "loss", "train_acc", "test_acc"],
                 [[last["epoch"], _fmt(last["loss"]), _fmt(last["train_acc"]), _fmt(last["test_acc"])]])
    return EXIT_OK


def _load_net(path):
    from .models import load_checkpoint

    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def cmd_explain(cfg: CliConfig) -> int:
    from .encoding import decode_row_to_color, encode_rgb6, read_image, write_image
    from .explain import collapse, contribution_map
    from .plotting import plot_explanation

    net = _load_net(cfg.checkpoint)
    if not os.path.exists(cfg.image):
        raise ConfigError(f"image {cfg.image} does not exist")
    rgb = read_image(cfg.image)
    x = encode_rgb6(rgb)
    if cfg.layer is None:
        if cfg.neuron is not None or cfg.position is not None:
            raise ConfigError("--neuron/--position require --layer")
        if cfg.cls is None:
            cls = int(net.logits_numpy(x[None]).argmax())
        else:
            cls = cfg.cls
        if not 0 <= cls < net.num_classes:
            raise ConfigError(f"--class {cls} outside 0..{net.num_classes - 1}")
        m = collapse(net, x, None, cls)
        label = f"class={cls}"
    else:
        if cfg.cls is not None:
            raise ConfigError("--class cannot be combined with --layer")
        pos = None
        if cfg.position:
            try:
                pos = tuple(int(v) for v in cfg.position.split(","))
            except ValueError:
                raise ConfigError("--position must be row,col") from None
        m = collapse(net, x, cfg.layer, cfg.neuron or 0, pos)
        label = f"layer={cfg.layer},neuron={cfg.neuron or 0}"
    cmap = contribution_map(m)
    write_image(decode_row_to_color(m.row), cfg.out)
    if cfg.figure:
        plot_explanation(rgb, m.row, cmap.values, cfg.figure, label)
    total = cmap.total()
    _print_table(["target", "contrib_sum", "bias", "activation", "abs_error"],
                 [[label, repr(float(cmap.values.astype(np.float64).sum())), repr(m.bias),
                   repr(m.activation), repr(abs(total - m.activation))]])
    return EXIT_OK


def cmd_neurons(cfg: CliConfig) -> int:
    from .encoding import decode_row_to_color, write_image
    from .explain import intermediate_neuron_explanations

    net = _load_net(cfg.checkpoint)
    if not 1 <= cfg.layer <= len(net):
        raise ConfigError(f"--layer must be within 1..{len(net)}")
    _, test_set = load_data(cfg, need_train=False)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for neuron, idx, m in intermediate_neuron_explanations(net, test_set, cfg.layer, cfg.top_k):
        name = f"layer{cfg.layer}_neuron{neuron}_sample{idx}.png"
        write_image(decode_row_to_color(m.row), os.path.join(cfg.out_dir, name))
        rows.append([neuron, idx, m.target.position, repr(m.activation), name])
    _print_table(["neuron", "sample", "position", "activation", "file"], rows)
    return EXIT_OK


def cmd_gridgame(cfg: CliConfig) -> int:
    from .evaluation import (ATTRIBUTIONS, build_grids, evaluate_localization, write_results)
    from .plotting import plot_localization

    net = _load_net(cfg.checkpoint)
    for m in cfg.methods:
        if m not in ATTRIBUTIONS:
            raise ConfigError(f"unknown method {m!r}; choose from {sorted(ATTRIBUTIONS)}")
    if cfg.grid_n < 1 or cfg.n_grids < 1 or cfg.steps < 1:
        raise ConfigError("--grid-n, --n-grids and --steps must be >= 1")
    _, test_set = load_data(cfg, need_train=False)
    if test_set.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {test_set.num_classes} classes, model {net.num_classes}")
    games = build_grids(test_set, net, cfg.n_grids, cfg.grid_n, seed=cfg.seed)
    scores = evaluate_localization(net, games, cfg.methods, steps=cfg.steps)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_results(scores, os.path.join(cfg.out_dir, "results.csv"),
                  os.path.join(cfg.out_dir, "aggregate.csv"))
    plot_localization(scores, os.path.join(cfg.out_dir, "localization.png"),
                      baseline=1 / cfg.grid_n ** 2)
    _print_table(["method", "mean", "std", "n"],
                 [[m, repr(s.mean), repr(s.std), s.n] for m, s in scores.items()])
    return EXIT_OK


def cmd_ablation(cfg: CliConfig) -> int:
    from .evaluation import b_ablation
    from .plotting import plot_ablation

    if not cfg.b_list:
        raise ConfigError("--b-list must not be empty")
    train_set, test_set = load_data(cfg)
    for B in cfg.b_list:
        make_net(cfg, B, train_set.num_classes)
    tcfg = train_config(cfg, cfg.b_list[0])
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = b_ablation(cfg.b_list, train_set, test_set, tcfg, cfg.grid_n, cfg.n_grids,
                      cfg.channels, os.path.join(cfg.out_dir, "ablation.csv"),
                      builder=lambda B, c: make_net(cfg, B, train_set.num_classes))
    plot_ablation(rows, os.path.join(cfg.out_dir, "ablation.png"), baseline=1 / cfg.grid_n ** 2)
    _print_table(["B", "accuracy", "localization"],
                 [[repr(r.B), repr(r.accuracy), repr(r.localization)] for r in rows])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "explain": cmd_explain, "neurons": cmd_neurons,
            "gridgame": cmd_gridgame, "ablation": cmd_ablation}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg = resolve(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:   # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[cfg.command](cfg)
    except NaNLossError as exc:
        print(f"error: nan-abort tensor={exc.tensor_name} step={exc.step}: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, DatasetError, CheckpointError, ValueError) as exc:
        print(f"error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return EXIT_CONFIG
    except BcosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
