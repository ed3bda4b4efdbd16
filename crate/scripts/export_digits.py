"""Write the scikit-learn 8x8 digits as IDX files.

Pixels (0..16) are rescaled to bytes. The first 1500 images go to the
train files, the remaining 297 to the test files.

    python scripts/export_digits.py fixtures/digits
"""

import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

SPLIT = 1500


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * (255 / 16)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    write_idx(out / "train-images-idx3-ubyte", images[:SPLIT])
    write_idx(out / "train-labels-idx1-ubyte", labels[:SPLIT])
    write_idx(out / "test-images-idx3-ubyte", images[SPLIT:])
    write_idx(out / "test-labels-idx1-ubyte", labels[SPLIT:])
    print(f"{len(images)} images -> {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "fixtures/digits")
