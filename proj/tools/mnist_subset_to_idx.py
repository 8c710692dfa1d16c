#!/usr/bin/env python3
"""Convert the 5000-image MNIST subset shipped in the mlxtend wheel to IDX.

usage: mnist_subset_to_idx.py WHEEL OUT_DIR
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    wheel, out = Path(sys.argv[1]), Path(sys.argv[2])
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mnist5k-images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(pixels), 28, 28))
        f.write(pixels.tobytes())
    with open(out / "mnist5k-labels.idx", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main()
