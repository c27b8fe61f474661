"""Pack the four standard MNIST IDX files into one npz file.

Usage: python scripts/mnist_from_idx.py <dir-with-idx-files> data/mnist.npz

The npm ``mnist-data`` package ships the files under ``data/``; any copy of
``train-images-idx3-ubyte`` and friends works.  Output arrays are
``x_train, y_train, x_test, y_test`` (uint8), the layout ``load_mnist`` reads.
"""
import sys
from pathlib import Path

import numpy as np


def read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:2] != b"\x00\x00" or raw[2] != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    ndim = raw[3]
    shape = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(shape)


def main(src: str, dst: str) -> None:
    d = Path(src)
    arrays = {"x_train": read_idx(d / "train-images-idx3-ubyte"), "y_train": read_idx(d / "train-labels-idx1-ubyte"),
              "x_test": read_idx(d / "t10k-images-idx3-ubyte"), "y_test": read_idx(d / "t10k-labels-idx1-ubyte")}
    np.savez_compressed(dst, **arrays)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
