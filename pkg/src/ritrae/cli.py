"""``ritrae`` command-line tool.

Exit codes: 0 ok, 2 usage, 3 capacity, 4 integrity, 5 I/O.  Failures print
one line ``error[<category>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attacks import AttackConfig, read_attack_configs, run_attack
from .data import read_corpus, write_dataset
from .image import ImageFormatError, load_image, save_image
from .nn import ToyNetClassifier, load_weights, save_weights
from .pipeline import evaluate, make_rae, payload_comparison
from .rdh import DEFAULT_PASSES, CapacityError, RDHError, rdh_capacity
from .rit import IntegrityError, restore, transform

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_INTEGRITY, EXIT_IO = 0, 2, 3, 4, 5

ATTACK_FLAGS = {
    # flag: (type, help)
    "method": (str, "attack method: ifgsm, deepfool or cw_l2 (default: from config, else ifgsm)"),
    "epsilon": (str, "IFGSM L-inf budget, number or fraction such as 8/255 (default: from config, else 8/255)"),
    "alpha": (str, "IFGSM step (default: from config, else min(eps, 2.5*eps/iterations))"),
    "iterations": (int, "iteration count (default: from config, else 10 / 50 / 200 per method)"),
    "kappa": (str, "C&W confidence margin (default: from config, else 0)"),
    "c": (str, "C&W trade-off constant (default: from config, else 1.0)"),
    "learning-rate": (str, "C&W Adam step size (default: from config, else 0.005)"),
    "overshoot": (str, "DeepFool overshoot (default: from config, else 0.02)"),
    "seed": (int, "attack seed (default: from config, else 0)"),
}


class _Fail(Exception):
    def __init__(self, code, category, message):
        super().__init__(message)
        self.code, self.category = code, category


def _add_attack_flags(p):
    for flag, (typ, text) in ATTACK_FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, default=None, help=text)
    p.add_argument("--early-stop", dest="early_stop", action=argparse.BooleanOptionalAction, default=None,
                   help="stop IFGSM / DeepFool at the first rounded misclassification "
                        "(default: from config, else on)")
    p.add_argument("--config", type=Path, default=None,
                   help="INI attack config file; flags override its values (default: none)")
    p.add_argument("--section", default=None,
                   help="config section to use (default: the first section)")


def _rit_flags(p, passes=True):
    p.add_argument("--block-size", type=int, default=4, help="block side B in pixels (default: %(default)s)")
    p.add_argument("--classes", type=int, default=16, help="class count C, 1..64 (default: %(default)s)")
    if passes:
        _pass_flag(p)


def _pass_flag(p):
    p.add_argument("--passes", type=int, default=DEFAULT_PASSES,
                   help="histogram-shifting passes per channel (default: %(default)s)")


def _attack_overrides(args):
    out = {}
    for flag in ATTACK_FLAGS:
        key = flag.replace("-", "_")
        value = getattr(args, key)
        if value is not None:
            out[key] = value
    if args.early_stop is not None:
        out["early_stop"] = args.early_stop
    return out


def _single_config(args):
    overrides = _attack_overrides(args)
    if args.config:
        configs = read_attack_configs(args.config, **overrides)
        if args.section:
            match = [c for c in configs if c.name == args.section]
            if not match:
                raise _Fail(EXIT_USAGE, "usage", f"section {args.section!r} not in {args.config}")
            return match[0]
        return configs[0]
    return AttackConfig.from_mapping({}, **overrides)


def build_parser():
    fmt = argparse.HelpFormatter
    parser = argparse.ArgumentParser(prog="ritrae", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("dataset", help="write the digit dataset as PGM files", formatter_class=fmt)
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default: %(default)s)")
    p.add_argument("--margin", type=int, default=None, help="blank border in pixels (default: size // 8)")
    p.add_argument("--test-fraction", type=float, default=0.3, help="held-out share (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="split and rendering seed (default: %(default)s)")

    p = sub.add_parser("train", help="train the classifier on a class-per-directory corpus", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="training corpus directory (required)")
    p.add_argument("--out", type=Path, required=True, help="weight file to write (required)")
    p.add_argument("--architecture", default="cnn", choices=["cnn", "mlp", "linear"],
                   help="network layout (default: %(default)s)")
    p.add_argument("--conv-channels", default="8,16", help="two conv widths (default: %(default)s)")
    p.add_argument("--hidden", type=int, default=64, help="dense hidden units (default: %(default)s)")
    p.add_argument("--input-pool", type=int, default=2, help="input average pooling (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=25, help="training epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size (default: %(default)s)")
    p.add_argument("--learning-rate", type=float, default=2e-3, help="Adam step size (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default: %(default)s)")

    p = sub.add_parser("attack", help="craft an adversarial example for one image", formatter_class=fmt)
    p.add_argument("--model", type=Path, required=True, help="weight file (required)")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="input image (required)")
    p.add_argument("--label", type=int, default=None, help="true label (default: the model's prediction)")
    p.add_argument("--out", type=Path, required=True, help="adversarial image to write (required)")
    _add_attack_flags(p)

    p = sub.add_parser("transform", help="disguise an image as a target image", formatter_class=fmt)
    p.add_argument("--orig", type=Path, required=True, help="image to hide (required)")
    p.add_argument("--target", type=Path, required=True, help="image to imitate (required)")
    p.add_argument("--out", type=Path, required=True, help="camouflage image to write (required)")
    _rit_flags(p)

    p = sub.add_parser("restore", help="recover the original from a camouflage image", formatter_class=fmt)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="camouflage image (required)")
    p.add_argument("--out", type=Path, required=True, help="restored image to write (required)")
    p.add_argument("--verify", type=Path, default=None,
                   help="reference original; prints EXACT on a bit-exact match (default: none)")

    p = sub.add_parser("make-rae", help="attack one image and build its reversible version", formatter_class=fmt)
    p.add_argument("--model", type=Path, required=True, help="weight file (required)")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="original image (required)")
    p.add_argument("--label", type=int, default=None, help="true label (default: the model's prediction)")
    p.add_argument("--out", type=Path, required=True, help="RAE image to write (required)")
    p.add_argument("--ae-out", type=Path, default=None, help="also write the adversarial image (default: none)")
    _rit_flags(p)
    _add_attack_flags(p)

    p = sub.add_parser("eval", help="evaluate attack configs over a corpus", formatter_class=fmt)
    p.add_argument("--corpus", type=Path, required=True, help="class-per-directory corpus (required)")
    p.add_argument("--model", type=Path, required=True, help="weight file (required)")
    p.add_argument("--out", type=Path, default=Path("report"), help="report directory (default: %(default)s)")
    p.add_argument("--limit", type=int, default=None, help="evaluate a seeded subset of this size (default: all)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: %(default)s)")
    p.add_argument("--failure-policy", choices=["count", "skip"], default="count",
                   help="failed attacks count as RAE failures or are skipped (default: %(default)s)")
    p.add_argument("--eval-seed", type=int, default=0, help="subset selection seed (default: %(default)s)")
    _rit_flags(p)
    _add_attack_flags(p)

    p = sub.add_parser("capacity", help="print the embedding capacity of an image in bits", formatter_class=fmt)
    p.add_argument("--img", type=Path, required=True, help="image file (required)")
    _pass_flag(p)

    p = sub.add_parser("payload", help="compare RIT aux size, residual size and capacity", formatter_class=fmt)
    p.add_argument("--orig", type=Path, required=True, help="original image (required)")
    p.add_argument("--ae", type=Path, required=True, help="adversarial image (required)")
    _rit_flags(p)
    return parser


def _load(path):
    try:
        return load_image(path)
    except FileNotFoundError:
        raise _Fail(EXIT_IO, "io", f"{path}: no such file") from None


def _model(path):
    try:
        return load_weights(path)
    except FileNotFoundError:
        raise _Fail(EXIT_IO, "io", f"model {path}: no such file") from None
    except (ValueError, KeyError) as exc:
        raise _Fail(EXIT_IO, "io", f"model {path}: {exc}") from None


def _label(model, img, label):
    if label is None:
        return int(model.predict_index(img[None])[0])
    idx = np.flatnonzero(model.classes_ == label)
    if idx.size == 0:
        raise _Fail(EXIT_USAGE, "usage", f"label {label} is not one of the model classes")
    return int(idx[0])


def _cmd_dataset(args):
    counts = write_dataset(args.out, args.size, args.margin, args.test_fraction, args.seed)
    print(json.dumps(counts, sort_keys=True))


def _cmd_train(args):
    corpus = read_corpus(args.data)
    channels = tuple(int(v) for v in args.conv_channels.split(","))
    model = ToyNetClassifier(architecture=args.architecture, conv_channels=channels, hidden=args.hidden,
                             input_pool=args.input_pool, epochs=args.epochs, batch_size=args.batch_size,
                             learning_rate=args.learning_rate, random_state=args.seed)
    with threadpool_limits(1):
        model.fit(corpus.images, corpus.labels)
        acc = float(model.score(corpus.images, corpus.labels))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, args.out)
    print(json.dumps({"train_accuracy": round(acc, 6), "images": len(corpus)}, sort_keys=True))


def _cmd_attack(args):
    model = _model(args.model)
    img = _load(args.inp)
    label = _label(model, img, args.label)
    res = run_attack(model, img, label, _single_config(args))
    save_image(res.adversarial, args.out)
    print(json.dumps({"success": res.success, "success_real": res.success_real, "iterations": res.iterations,
                      "l2": round(res.l2, 6), "linf": round(res.linf, 6)}, sort_keys=True))


def _cmd_transform(args):
    cam = transform(_load(args.orig), _load(args.target), args.block_size, args.classes, args.passes)
    save_image(cam, args.out)


def _cmd_restore(args):
    out = restore(_load(args.inp))
    save_image(out, args.out)
    if args.verify is not None:
        ref = _load(args.verify)
        if ref.shape != out.shape or not np.array_equal(ref, out):
            raise _Fail(EXIT_INTEGRITY, "integrity", "restored image differs from the reference")
        print("EXACT")


def _cmd_make_rae(args):
    model = _model(args.model)
    img = _load(args.inp)
    label = _label(model, img, args.label)
    res = make_rae(img, label, model, _single_config(args), args.block_size, args.classes, args.passes)
    save_image(res.rae, args.out)
    if args.ae_out:
        save_image(res.ae, args.ae_out)
    print(json.dumps({"ae_success": res.attack.success,
                      "rae_misclassified": bool(model.predict_index(res.rae[None])[0] != label),
                      "aux_bits": res.aux_bits, "capacity_bits": res.capacity_bits}, sort_keys=True))


def _cmd_eval(args):
    model = _model(args.model)
    corpus = read_corpus(args.corpus)
    overrides = _attack_overrides(args)
    if args.config:
        configs = read_attack_configs(args.config, **overrides)
    else:
        configs = [AttackConfig.from_mapping({}, **overrides)]
    report = evaluate(corpus, model, configs, args.block_size, args.classes, args.passes, seed=args.eval_seed,
                      limit=args.limit, jobs=args.jobs, failure_policy=args.failure_policy,
                      corpus_name=Path(args.corpus).name)
    report.write(args.out)
    sys.stdout.write(report.table())


def _cmd_capacity(args):
    print(rdh_capacity(_load(args.img), args.passes))


def _cmd_payload(args):
    print(json.dumps(payload_comparison(_load(args.orig), _load(args.ae), args.block_size, args.classes),
                     sort_keys=True))


COMMANDS = {
    "dataset": _cmd_dataset, "train": _cmd_train, "attack": _cmd_attack, "transform": _cmd_transform,
    "restore": _cmd_restore, "make-rae": _cmd_make_rae, "eval": _cmd_eval, "capacity": _cmd_capacity,
    "payload": _cmd_payload,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except _Fail as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except CapacityError as exc:
        print(f"error[capacity]: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (IntegrityError, RDHError) as exc:
        print(f"error[integrity]: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ImageFormatError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
