"""Writes the 8x8 handwritten digits set as IDX ubyte files.

Pixel values 0..16 are rescaled to 0..255. The split is a fixed permutation
(seed 0): 1257 training and 540 test samples.
"""
import argparse
import pathlib
import struct

import numpy as np
from sklearn.datasets import load_digits


def write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data/digits")
    args = parser.parse_args()
    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    order = np.random.RandomState(0).permutation(len(labels))
    train, test = order[:1257], order[1257:]
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", images[train], 0x803)
    write_idx(out / "train-labels-idx1-ubyte", labels[train], 0x801)
    write_idx(out / "test-images-idx3-ubyte", images[test], 0x803)
    write_idx(out / "test-labels-idx1-ubyte", labels[test], 0x801)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
