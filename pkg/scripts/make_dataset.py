"""Generate a synthetic digit dataset in standard IDX files.

The renderer draws stroke-based digits with random affine jitter, so the
files are format-identical to real MNIST and slot into the same pipeline.
Use scripts/fetch_mnist.py instead when network access is available.
"""

import argparse
import sys

sys.path.insert(0, "src")  # allow running from a source checkout

from weightmorph.datasets import write_synthetic_dataset  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dir", required=True, help="output directory")
    ap.add_argument("--train", type=int, default=10000)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_synthetic_dataset(args.dir, n_train=args.train, n_test=args.test,
                            seed=args.seed)
    print(f"wrote {args.train} train / {args.test} test digits to {args.dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
