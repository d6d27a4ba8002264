"""``saenet`` command line: train / eval / gradcheck / params / export-filters / make-synthetic.

Exit codes: 0 success, 1 invalid arguments or data, 2 numerical failure
(non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import data, train, zoo
from .errors import NumericalError, SaenetError
from .gradcheck import grad_check
from .nn import SaEConfig

PLACEMENTS = {"output": "on_branch_output", "input": "on_branch_input"}
DEFAULT_MODEL = "sae-resnet-cifar"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_common(p: argparse.ArgumentParser, preset_choices, preset_default, dtype_default="f32"):
    d = train.TrainConfig()
    s = SaEConfig()
    p.add_argument("--preset", choices=preset_choices, default=preset_default, metavar="P",
                   help=f"architecture preset ({', '.join(preset_choices)})")
    p.add_argument("--data", metavar="DIR", default=None, help="directory holding train.bin and test.bin")
    p.add_argument("--out", metavar="DIR", default=None, help="output directory for every artifact")
    p.add_argument("--seed", type=int, default=d.seed, help="seed for weights, shuffling and augmentation")
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="samples per SGD step")
    p.add_argument("--lr", type=float, default=d.lr0, help="initial learning rate")
    p.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="L2 penalty added to gradients")
    p.add_argument("--step-epochs", type=int, default=d.step_epochs, help="epochs between learning-rate decays")
    p.add_argument("--decay", type=float, default=d.decay, help="learning-rate decay factor")
    p.add_argument("--max-steps", type=int, default=None, help="stop training after this many SGD steps")
    p.add_argument("--reduction", type=int, default=s.reduction, help="gate reduction ratio r")
    p.add_argument("--cardinality", type=int, default=s.cardinality, help="number of squeeze branches")
    p.add_argument("--merge", choices=("concat", "sum"), default=s.merge, help="how squeeze branches are merged")
    p.add_argument("--gate-placement", choices=tuple(PLACEMENTS), default="output",
                   help="gate the branch output or the block input")
    p.add_argument("--dtype", choices=("f32", "f64"), default=dtype_default, help="float width")
    p.add_argument("--tol", type=float, default=1e-4, help="gradcheck relative-error tolerance")
    p.add_argument("--resize-224", action="store_true", help="bilinearly upsample inputs to 224x224")
    p.add_argument("--no-augment", action="store_true", help="disable random crop and flip")
    p.add_argument("--ckpt", metavar="DIR", default=None, help="run directory whose best.ckpt to load")
    p.add_argument("--classes", type=int, default=8, help="make-synthetic: number of classes")
    p.add_argument("--per-class", type=int, default=32, help="make-synthetic: training images per class")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saenet", formatter_class=_Formatter,
                     description="Squeeze-aggregated-excitation networks from scratch.")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    models = list(zoo.MODEL_PRESETS)
    commands = {
        "train": ("train a preset on CIFAR-format data", models, DEFAULT_MODEL, "f32"),
        "eval": ("evaluate a checkpoint on the test split", models, DEFAULT_MODEL, "f32"),
        "gradcheck": ("finite-difference check of a block or gate", list(zoo.BLOCK_TARGETS), "block-sae", "f64"),
        "params": ("per-layer parameter counts as CSV", models, DEFAULT_MODEL, "f32"),
        "export-filters": ("write stem filters as PGM images", models, DEFAULT_MODEL, "f32"),
        "make-synthetic": ("write a synthetic dataset in CIFAR binary layout", models, DEFAULT_MODEL, "f32"),
    }
    for name, (help_text, choices, default, dtype) in commands.items():
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        _add_common(p, choices, default, dtype)
    # Top-level help lists the shared flags too.
    shared = _Parser(add_help=False, formatter_class=_Formatter)
    _add_common(shared, models, DEFAULT_MODEL)
    text = shared.format_help()
    parser.epilog = "shared flags (see `saenet <subcommand> --help`):\n" + text[text.index("options:") + 9:]
    return parser


def _sae_config(args) -> SaEConfig:
    return SaEConfig(args.reduction, args.cardinality, args.merge, PLACEMENTS[args.gate_placement])


def _train_config(args) -> train.TrainConfig:
    return train.TrainConfig(lr0=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                             step_epochs=args.step_epochs, decay=args.decay, epochs=args.epochs,
                             batch_size=args.batch_size, seed=args.seed, dtype=args.dtype,
                             max_steps=args.max_steps)


def _preproc(args) -> data.Preproc:
    pp = data.Preproc(size=224 if args.resize_224 else None)
    return pp.without_augmentation() if args.no_augment else pp


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command} requires --{n.replace('_', '-')}")


def cmd_train(args) -> int:
    _require(args, "data")
    cfg = _train_config(args)
    train_set, test_set = data.load_cifar100(args.data, strict=False)
    model = zoo.build(zoo.preset(args.preset, _sae_config(args), num_classes=train_set.num_classes), args.seed)
    out = args.out or os.path.join("runs", args.preset)
    result = train.train(model, train_set, test_set, cfg, run_dir=out, preproc=_preproc(args))
    last = result.history[-1]
    print(f"epochs={len(result.history)} steps={result.steps} best_val_top1={result.best_top1!r} "
          f"final_train_loss={last.mean_loss!r} run_dir={out}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "data")
    ckpt = args.ckpt or args.out
    if ckpt is None:
        raise UsageError("eval requires --ckpt or --out pointing at a run directory")
    _, test_set = data.load_cifar100(args.data, strict=False)
    model = zoo.build(zoo.preset(args.preset, _sae_config(args), num_classes=test_set.num_classes), args.seed)
    train.load_checkpoint(model, ckpt)
    model.to(np.float32 if args.dtype == "f32" else np.float64)
    m = train.evaluate(model, test_set, _preproc(args), batch_size=args.batch_size)
    print("top1,top5,mean_loss")
    print(f"{m.top1!r},{m.top5!r},{m.mean_loss!r}")
    return 0


def cmd_gradcheck(args) -> int:
    module, shape = zoo.block_target(args.preset, _sae_config(args), args.seed)
    dtype = np.float64 if args.dtype == "f64" else np.float32
    report = grad_check(module, shape, args.tol, dtype=dtype, seed=args.seed)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w") as f:
            f.write(text)
    print(f"{'PASS' if report.passed else 'FAIL'} worst={report.worst:.3e} tol={args.tol:g}", file=sys.stderr)
    return 0 if report.passed else 2


def cmd_params(args) -> int:
    model = zoo.Model(zoo.preset(args.preset, _sae_config(args)))
    text = zoo.param_count(model).to_csv()
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "params.csv"), "w") as f:
            f.write(text)
    return 0


def cmd_export_filters(args) -> int:
    model = zoo.build(zoo.preset(args.preset, _sae_config(args)), args.seed)
    if args.ckpt:
        # Head width must match the checkpoint; read it from the manifest.
        with open(os.path.join(args.ckpt, "manifest.csv"), newline="") as f:
            shapes = {r["name"]: r["shape"] for r in csv.DictReader(f)}
        k = int(shapes["fc.bias"])
        model = zoo.build(zoo.preset(args.preset, _sae_config(args), num_classes=k), args.seed)
        train.load_checkpoint(model, args.ckpt)
    out = args.out or os.path.join("runs", args.preset, "filters")
    files = zoo.export_first_conv_filters(model, out)
    print(f"wrote {len(files)} files to {out}")
    return 0


def cmd_make_synthetic(args) -> int:
    _require(args, "out")
    tr = data.synthetic_dataset(args.classes, args.per_class, (3, 32, 32), seed=args.seed)
    te = data.synthetic_dataset(args.classes, max(args.per_class // 4, 1), (3, 32, 32), seed=args.seed + 1,
                                split="test")
    data.save_cifar_layout(args.out, tr, te)
    print(f"wrote {len(tr)} train / {len(te)} test records to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "export-filters": cmd_export_filters,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as e:
        print(f"saenet: numerical failure: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"saenet: error: {e}", file=sys.stderr)
        return 1
    except (SaenetError, OSError) as e:
        print(f"saenet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
