"""Download the four MNIST IDX files (gzipped) into a data directory.

This is the only network-touching code in the repository and it lives
outside the package on purpose: the tool itself reads files from disk
only. In offline environments use scripts/make_dataset.py instead.
"""

import argparse
import gzip
import struct
import sys
import urllib.request
from pathlib import Path

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def _verify(path: Path) -> None:
    with gzip.open(path, "rb") as f:
        magic = struct.unpack(">I", f.read(4))[0]
    if magic not in (0x00000803, 0x00000801):
        raise ValueError(f"{path.name}: unexpected IDX magic 0x{magic:08x}")


def fetch(name: str, dest: Path) -> None:
    last = None
    for mirror in MIRRORS:
        try:
            urllib.request.urlretrieve(mirror + name, dest)
            _verify(dest)
            return
        except Exception as e:  # try the next mirror
            last = e
    raise SystemExit(f"all mirrors failed for {name}: {last}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dir", required=True, help="output directory")
    args = ap.parse_args()
    dest = Path(args.dir)
    dest.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        target = dest / name
        if target.exists():
            print(f"{name}: already present")
            continue
        print(f"fetching {name} ...")
        fetch(name, target)
    print(f"MNIST ready in {dest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
