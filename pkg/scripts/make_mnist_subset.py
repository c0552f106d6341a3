"""Write the 5000-sample MNIST subset shipped inside the mlxtend wheel as IDX files.

Usage: python scripts/make_mnist_subset.py SOURCE OUT_DIR [--train 4000]

SOURCE is either an mlxtend wheel (.whl) or the extracted mnist_5k.csv.gz.
After a fixed shuffle the first ``--train`` samples become the train split
and the rest the t10k split, under the standard MNIST file names.
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from sparselab.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def load_csv(source: Path) -> np.ndarray:
    if source.suffix == ".whl":
        raw = zipfile.ZipFile(source).read(MEMBER)
    else:
        raw = source.read_bytes()
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    tab = load_csv(args.source)
    x, y = tab[:, :-1], tab[:, -1]
    order = np.random.default_rng(args.seed).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    n = args.train
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", x[:n])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", y[:n])
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", x[n:])
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", y[n:])
    print(f"wrote {n} train / {len(y) - n} test samples to {args.out_dir}")


if __name__ == "__main__":
    main()
