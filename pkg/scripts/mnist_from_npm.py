"""Convert the digits bundled in the npm ``mnist`` package into an npz file.

Usage: python scripts/mnist_from_npm.py <unpacked-package-dir> data/mnist10k.npz

The npm package ships 10,000 MNIST digits as ``src/digits/<d>.json`` with
pixel intensities normalized to [0, 1].  We store them as uint8 images with
integer labels so loaders never need the network.
"""
import json
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        data = json.loads((Path(src) / "src" / "digits" / f"{digit}.json").read_text())["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 784)
        images.append(np.rint(arr * 255).astype(np.uint8))
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    np.savez_compressed(dst, images=np.concatenate(images), labels=np.concatenate(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
