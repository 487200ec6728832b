#!/usr/bin/env python3
"""Rebuild data/mnist-10k from the 10,000 MNIST digits bundled in the npm `mnist` package.

The package stores each digit class as JSON with pixels scaled to [0, 1] and
rounded to three decimals; every value maps back to a unique byte via
round(v * 255). Output is gzip-compressed IDX (magic 2051 / 2049).

Usage: scripts/mnist_from_npm.py [OUT_DIR]
"""
import gzip
import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile

VERSION = "1.1.0"


def main() -> None:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-10k")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "--silent", f"mnist@{VERSION}"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(pathlib.Path(tmp) / f"mnist-{VERSION}.tgz") as tar:
            tar.extractall(tmp)
        images = bytearray()
        labels = bytearray()
        for digit in range(10):
            path = pathlib.Path(tmp) / "package" / "src" / "digits" / f"{digit}.json"
            data = json.loads(path.read_text())["data"]
            assert len(data) % 784 == 0
            images.extend(round(v * 255) for v in data)
            labels.extend([digit] * (len(data) // 784))
    count = len(labels)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, count, 28, 28))
        f.write(bytes(images))
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, count))
        f.write(bytes(labels))
    print(f"wrote {count} samples to {out}")


if __name__ == "__main__":
    main()
