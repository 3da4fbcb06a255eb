#!/usr/bin/env python3
"""Generate a two-moons CSV fixture for the flat-feature dataset path."""

import argparse

from terntrain.data import make_two_moons


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="two_moons.csv")
    parser.add_argument("--n", type=int, default=400)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise", type=float, default=0.1)
    args = parser.parse_args()

    x, y = make_two_moons(args.n, seed=args.seed, noise=args.noise)
    with open(args.out, "w") as fh:
        fh.write("label,x1,x2\n")
        for xi, yi in zip(x, y):
            fh.write(f"{int(yi)},{float(xi[0])!r},{float(xi[1])!r}\n")
    print(f"wrote {args.n} samples to {args.out}")


if __name__ == "__main__":
    main()
