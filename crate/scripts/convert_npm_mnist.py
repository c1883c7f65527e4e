"""Convert the digits bundled with the `mnist` npm package into IDX files.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/convert_npm_mnist.py package/src/digits data/mnist

The package ships roughly 10k MNIST digits as JSON arrays of 784 floats in
[0, 1] rounded to three decimals. Pixels are mapped back to bytes with
round(v * 255), the samples are shuffled with a fixed seed and split 8000/2000
into train and test IDX pairs (gzip-compressed).
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_images(path, images):
    n, rows, cols = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst, n_train=8000):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        data = np.array(json.loads((src / f"{digit}.json").read_text())["data"])
        data = data.reshape(-1, 28, 28)
        images.append(np.clip(np.rint(data * 255.0), 0, 255))
        labels.append(np.full(len(data), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(20240101).permutation(len(labels))
    images, labels = images[order], labels[order]
    dst.mkdir(parents=True, exist_ok=True)
    write_images(dst / "train-images-idx3-ubyte.gz", images[:n_train])
    write_labels(dst / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_images(dst / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_labels(dst / "t10k-labels-idx1-ubyte.gz", labels[n_train:])
    print(f"train={n_train} test={len(labels) - n_train}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
