"""Full desk-scale run: data, three models, white-box table, transfer matrix,
defense table and figures, all written under one output directory.

    python scripts/desk_benchmark.py runs/desk [--samples 100]
"""
import argparse
import sys
import time
from pathlib import Path

from advkit import cli
from advkit.data import desk_digits, write_idx_dataset


def step(*argv):
    t = time.perf_counter()
    rc = cli.main([str(a) for a in argv])
    print(f"# {argv[0]} finished in {time.perf_counter() - t:.1f} s", file=sys.stderr)
    if rc:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    train, test = desk_digits(seed=args.seed)
    write_idx_dataset(train, data, "train")
    write_idx_dataset(test, data, "test")

    weights = {}
    for arch, epochs in (("small-a", 12), ("small-c", 8)):
        step("train", "--dataset", data, "--model", arch, "--epochs", epochs, "--seed", args.seed, "--out", out / "models" / arch)
        weights[arch] = out / "models" / arch / f"{arch}.weights"

    common = ["--dataset", data, "--samples", args.samples, "--seed", args.seed]
    step("attack", *common, "--weights", weights["small-a"], "--out", out / "white_box")
    step("transfer", *common, "--substitutes", *weights.values(), "--targets", *weights.values(),
         "--attacks", "fgsm,pgd,mi-fgsm,finefool", "--out", out / "transfer")
    step("defend", *common, "--weights", weights["small-a"], "--out", out / "defense")
    step("visualize", "--dataset", data, "--weights", weights["small-a"], "--samples", 3, "--attention",
         "--out", out / "figures")


if __name__ == "__main__":
    main()
