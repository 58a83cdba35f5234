#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST sample shipped in the npm `mnist` package
(https://www.npmjs.com/package/mnist, MIT licensed) into gzipped IDX files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/prepare_mnist10k.py package/src/digits data/mnist10k

Pixels are stored in the package as value/255 rounded to three decimals, so
round(v * 255) recovers the original byte exactly. Samples are interleaved
with a fixed-seed shuffle so that any prefix is class-balanced.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(raw) // 784
        for i in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            samples.append((px, digit))
    random.Random(20160530).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
