"""Write the desk digits set (sklearn 8x8 digits placed on a 28x28 canvas) as IDX files."""
import argparse

from advkit.data import desk_digits, write_idx_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    args = ap.parse_args()
    train, test = desk_digits(args.test_fraction, args.seed)
    write_idx_dataset(train, args.out, "train")
    write_idx_dataset(test, args.out, "test")
    print(f"{args.out}: {len(train.labels)} train, {len(test.labels)} test")


if __name__ == "__main__":
    main()
