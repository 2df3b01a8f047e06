"""Command-line entry point: ``advkit {train,attack,transfer,defend,visualize}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import harness
from .attacks import ATTACKS
from .config import ExperimentConfig, echo
from .data import load_dataset
from .defenses import DefenseConfig
from .errors import AdvkitError, InvalidArgumentError
from .metrics import atomic_write, emit_table, to_csv
from .model import accuracy, build_model, load_weights, save_weights, train

log = logging.getLogger("advkit")

ATTACK_FLAGS = {"eps": "epsilon", "alpha": "alpha", "iters": "iters", "mu": "mu", "kappa": "kappa"}


def _common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--format", choices=("idx", "cifar"), default="idx")
    p.add_argument("--split", choices=("train", "test"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p, multi_model=False):
    if not multi_model:
        p.add_argument("--weights", required=True, help="trained weight file")
    p.add_argument("--model", help="architecture name (checked against the weight file)")
    p.add_argument("--attacks", default=",".join(harness.DEFAULT_ATTACKS))
    for flag, typ in (("eps", float), ("alpha", float), ("iters", int), ("mu", float), ("kappa", float)):
        p.add_argument(f"--{flag}", type=typ, default=None)
    p.add_argument("--samples", type=int, default=None)


def _defense_flags(p):
    p.add_argument("--defense", choices=("gaussian_blur", "input_transform", "none"), default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--kernel", type=int, default=None)


def build_parser():
    ap = argparse.ArgumentParser(prog="advkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a reference architecture")
    _common(p)
    p.add_argument("--model", default="small-a")
    p.add_argument("--weights", help="output weight file (default OUT/<model>.weights)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("attack", help="white-box attack table")
    _common(p)
    _attack_flags(p)

    p = sub.add_parser("transfer", help="substitute-model transfer matrix")
    _common(p)
    _attack_flags(p, multi_model=True)
    p.add_argument("--substitutes", nargs="+", required=True, help="weight files to craft on")
    p.add_argument("--targets", nargs="+", required=True, help="weight files to evaluate on")

    p = sub.add_parser("defend", help="attacks evaluated through input filters")
    _common(p)
    _attack_flags(p)
    _defense_flags(p)

    p = sub.add_parser("visualize", help="perturbation / adversarial image grids")
    _common(p)
    _attack_flags(p)
    p.add_argument("--attention", action="store_true", help="also write the attention-map heatmap")
    return ap


# ---------------------------------------------------------------------------
def _config(args):
    return ExperimentConfig.read(args.config) if args.config else ExperimentConfig()


def _dataset(args, default_split):
    split = args.split or default_split
    try:
        return load_dataset(args.dataset, args.format, split)
    except FileNotFoundError as e:
        raise InvalidArgumentError(str(e)) from None


def _load(path, arch=None):
    if not os.path.exists(path):
        raise InvalidArgumentError(f"weight file not found: {path}")
    m = load_weights(path)
    if arch and m.name != arch:
        raise InvalidArgumentError(f"{path} holds a {m.name!r} model, not {arch!r}")
    return m


def _attack_setup(args, conf):
    names = [n.strip() for n in args.attacks.split(",") if n.strip()]
    unknown = [n for n in names if n not in ATTACKS]
    if unknown:
        raise InvalidArgumentError(f"unknown attacks {unknown}; choose from {sorted(ATTACKS)}")
    base = dict(conf.attack_base())
    seed = args.seed if args.seed is not None else conf.get("run", "seed", None, int)
    if seed is not None:
        base["seed"] = seed
    forced = {ATTACK_FLAGS[f]: getattr(args, f) for f in ATTACK_FLAGS if getattr(args, f) is not None}
    configs = harness.attack_configs(names, base, conf.per_attack(names), forced)
    samples = args.samples if args.samples is not None else conf.get("run", "samples", 100, int)
    if samples < 1:
        raise InvalidArgumentError("--samples must be >= 1")
    return configs, samples


def _header(args, configs, extra=None):
    sections = {name: dataclasses.asdict(cfg) for name, cfg in configs.items()}
    run = {k: v for k, v in vars(args).items() if k not in ATTACK_FLAGS and not callable(v)}
    sections["run"] = run
    if extra:
        sections.update(extra)
    return echo(sections)


def cmd_train(args):
    conf = _config(args)
    ds = _dataset(args, "train")
    seed = args.seed if args.seed is not None else conf.get("run", "seed", 0, int)
    epochs = args.epochs if args.epochs is not None else conf.get("train", "epochs", 12, int)
    lr = args.lr if args.lr is not None else conf.get("train", "lr", 1e-3, float)
    bs = args.batch_size if args.batch_size is not None else conf.get("train", "batch_size", 32, int)
    model = build_model(args.model, ds.input_shape, max(ds.num_classes, 2), seed=seed)
    model, hist = train(model, ds, epochs=epochs, lr=lr, batch_size=bs, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wpath = Path(args.weights) if args.weights else out / f"{args.model}.weights"
    save_weights(model, wpath)
    rows = [(e, l, a) for e, (l, a) in enumerate(zip(hist.loss, hist.accuracy))]
    atomic_write(out / "train_log.csv", to_csv(("epoch", "loss", "accuracy"), rows))
    print(f"saved {wpath}  final loss {hist.loss[-1] if hist.loss else float('nan'):.4f}  "
          f"train acc {accuracy(model, ds):.4f}")
    return 0


def cmd_attack(args):
    conf = _config(args)
    ds = _dataset(args, "test")
    model = _load(args.weights, args.model)
    configs, samples = _attack_setup(args, conf)
    reports, results = harness.white_box(model, ds, configs, samples)
    harness.write_white_box(args.out, reports, results, _header(args, configs))
    print(emit_table(reports)[0], end="")
    return 0


def cmd_transfer(args):
    conf = _config(args)
    ds = _dataset(args, "test")
    configs, samples = _attack_setup(args, conf)

    def named(paths):
        out = {}
        for p in paths:
            key = Path(p).stem
            out[key] = models.get(key) or _load(p)
            models[key] = out[key]
        return out

    models = {}
    subs, tgts = named(args.substitutes), named(args.targets)
    rows = harness.transfer(subs, tgts, ds, configs, samples)
    harness.write_transfer(args.out, rows, tgts, _header(args, configs))
    print((Path(args.out) / "transfer.md").read_text(), end="")
    return 0


def _defense_list(args, conf):
    fields = conf.defense()
    if args.sigma is not None:
        fields["sigma"] = args.sigma
    if args.kernel is not None:
        fields["kernel_size"] = args.kernel
    if args.defense:
        kinds = [args.defense]
    elif "kind" in fields:
        kinds = [fields["kind"]]
    else:
        kinds = ["gaussian_blur", "input_transform"]
    fields.pop("kind", None)
    out = [DefenseConfig(kind=k, **fields) for k in kinds if k != "none"]
    return out + [DefenseConfig(kind="none")]


def cmd_defend(args):
    conf = _config(args)
    ds = _dataset(args, "test")
    model = _load(args.weights, args.model)
    configs, samples = _attack_setup(args, conf)
    defenses = _defense_list(args, conf)
    rows, _ = harness.defend(model, ds, configs, defenses, samples)
    extra = {f"defense:{d.name}": dataclasses.asdict(d) for d in defenses}
    harness.write_defense(args.out, rows, _header(args, configs, extra))
    print((Path(args.out) / "defense.md").read_text(), end="")
    return 0


def cmd_visualize(args):
    conf = _config(args)
    ds = _dataset(args, "test")
    model = _load(args.weights, args.model)
    configs, samples = _attack_setup(args, conf)
    samples = args.samples if args.samples is not None else 1
    paths, _ = harness.visualize(model, ds, configs, args.out, samples, attention=args.attention)
    for p in paths:
        print(p)
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "defend": cmd_defend,
    "visualize": cmd_visualize,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (AdvkitError, OSError) as e:
        print(f"advkit {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
