#!/usr/bin/env python3
"""Convert the UCI optical-recognition handwritten digits (as shipped with
scikit-learn, 1797 samples of 8x8 pixels with intensities 0..16) into IDX
files that `neuroselect` can load.

Usage: python3 scripts/digits_to_idx.py [OUT_DIR]

Intensities are rescaled to 0..255. A fixed permutation (seed 20231) splits
the corpus into 1437 training and 360 test samples.

Any other labelled image corpus can be converted the same way: write the
images as an unsigned-byte IDX3 file (magic 0x00000803, dims N, H, W) and the
labels as an IDX1 file (magic 0x00000801, dim N), both big-endian.
"""
import os
import struct
import sys

import numpy as np
from sklearn.datasets import load_digits


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/digits"
    os.makedirs(out, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0).clip(0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    perm = np.random.RandomState(20231).permutation(len(labels))
    n_test = 360
    test, train = perm[:n_test], perm[n_test:]
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte"), images[train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte"), labels[train])
    write_idx_images(os.path.join(out, "test-images-idx3-ubyte"), images[test])
    write_idx_labels(os.path.join(out, "test-labels-idx1-ubyte"), labels[test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
