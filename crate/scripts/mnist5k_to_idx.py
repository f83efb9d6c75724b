#!/usr/bin/env python3
"""Convert the 5000-image MNIST subset bundled with mlxtend (500 images per
class, 28x28, intensities 0..255) into IDX files that `neuroselect` can load.

Usage: python3 scripts/mnist5k_to_idx.py SOURCE [OUT_ROOT]

SOURCE is either `mnist_5k.csv.gz` itself or an mlxtend wheel containing it
(`pip download mlxtend --no-deps`). Each CSV row holds 784 pixels followed by
the label.

Writes OUT_ROOT/mnist5k (28x28) and OUT_ROOT/mnist5k_14 (14x14, each output
pixel the rounded mean of a 2x2 block). A fixed permutation (seed 20231)
splits the images into 4000 training and 1000 test samples.
"""
import gzip
import io
import os
import sys
import zipfile

import numpy as np

from digits_to_idx import write_idx_images, write_idx_labels

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(path):
    if path.endswith(".whl") or path.endswith(".zip"):
        raw = zipfile.ZipFile(path).read(MEMBER)
    else:
        with open(path, "rb") as f:
            raw = f.read()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    return table[:, :784].reshape(-1, 28, 28), table[:, 784]


def write_split(out, images, labels, order, n_train):
    os.makedirs(out, exist_ok=True)
    train, test = order[:n_train], order[n_train:]
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte"), images[train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte"), labels[train])
    write_idx_images(os.path.join(out, "test-images-idx3-ubyte"), images[test])
    write_idx_labels(os.path.join(out, "test-labels-idx1-ubyte"), labels[test])


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    root = sys.argv[2] if len(sys.argv) > 2 else "data"
    images, labels = read_source(sys.argv[1])
    order = np.random.RandomState(20231).permutation(len(labels))
    write_split(os.path.join(root, "mnist5k"), images, labels, order, 4000)
    pooled = images.reshape(-1, 14, 2, 14, 2).mean(axis=(2, 4))
    pooled = np.floor(pooled + 0.5).clip(0, 255).astype(np.uint8)
    write_split(os.path.join(root, "mnist5k_14"), pooled, labels, order, 4000)


if __name__ == "__main__":
    main()
