#!/usr/bin/env python3
"""Build the bundled 10k-digit MNIST subset as IDX files.

Source: the `mnist` npm package (src/digits/<k>.json), which stores 10,000
MNIST digits as flattened 28x28 arrays of byte/255 rounded to 3 decimals.
Three decimals resolve 1/255 steps, so round(v * 255) recovers the bytes.

Usage: scripts/build_mnist10k.py [path/to/mnist-x.y.z.tgz]
Without an argument the tarball is fetched with `npm pack mnist`.
"""
import gzip
import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data" / "mnist10k"


def main():
    with tempfile.TemporaryDirectory() as tmp:
        if len(sys.argv) > 1:
            tgz = Path(sys.argv[1])
        else:
            name = subprocess.check_output(["npm", "pack", "mnist"], cwd=tmp, text=True).split()[-1]
            tgz = Path(tmp) / name
        samples = []
        with tarfile.open(tgz) as tar:
            for k in range(10):
                raw = tar.extractfile(f"package/src/digits/{k}.json").read()
                data = json.loads(raw)["data"]
                assert len(data) % 784 == 0
                for i in range(0, len(data), 784):
                    px = bytes(round(v * 255) for v in data[i : i + 784])
                    samples.append((px, k))
    # Source files are grouped by class; interleave with a fixed permutation.
    random.Random(20201012).shuffle(samples)
    n = len(samples)
    OUT.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(OUT / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(OUT / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} digits to {OUT}")


if __name__ == "__main__":
    main()
