"""Build the bundled 5000-image MNIST subset as gzipped IDX files.

The source is ``mnist_5k.csv.gz`` shipped inside the ``mlxtend`` wheel
(500 MNIST digits per class, one row of 784 pixels plus the label). The
first 400 images of each class become the training split, the remaining
100 the test split.

    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/make_mnist5k.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(source):
    source = Path(source)
    if source.suffix == ".whl":
        raw = zipfile.ZipFile(source).read(MEMBER)
    else:
        raw = source.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def idx_bytes(arr):
    magic = 0x0800 | arr.ndim
    return struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.tobytes()


def write_gz(path, payload):
    with open(path, "wb") as fh:
        with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="mlxtend wheel or mnist_5k.csv.gz")
    ap.add_argument("out", help="output directory")
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()

    images, labels = read_rows(args.source)
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train.append(idx[:args.train_per_class])
        test.append(idx[args.train_per_class:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, parts, (im_name, lab_name) in (
            ("train", train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
            ("test", test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))):
        idx = np.sort(np.concatenate(parts))
        write_gz(out / f"{im_name}.gz", idx_bytes(images[idx]))
        write_gz(out / f"{lab_name}.gz", idx_bytes(labels[idx]))
        print(f"{split}: {idx.size} images")


if __name__ == "__main__":
    main()
