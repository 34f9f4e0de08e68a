#!/usr/bin/env python3
"""Build a 10 000-digit MNIST subset in IDX format from the `mnist` npm package.

The package ships 10 000 MNIST digits as JSON (pixels scaled to [0, 1] and
rounded to three decimals). This script restores 8-bit pixels, shuffles the
digits with a fixed seed and writes gzip-compressed IDX files:

    <out>/mnist10k-images-idx3-ubyte.gz
    <out>/mnist10k-labels-idx1-ubyte.gz

Usage: fetch_mnist_subset.py [--tarball mnist-1.1.0.tgz] [--out data/mnist]
"""
import argparse
import gzip
import io
import json
import random
import struct
import tarfile
import urllib.request
from pathlib import Path

URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball", help="local copy of the npm tarball")
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()

    if args.tarball:
        blob = Path(args.tarball).read_bytes()
    else:
        with urllib.request.urlopen(URL) as resp:
            blob = resp.read()

    samples = []
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            data = json.load(tar.extractfile(member))["data"]
            assert len(data) % 784 == 0
            for i in range(len(data) // 784):
                px = bytes(
                    min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]
                )
                samples.append((px, digit))

    random.Random(0).shuffle(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    images = struct.pack(">IIII", 0x00000803, n, 28, 28) + b"".join(s[0] for s in samples)
    labels = struct.pack(">II", 0x00000801, n) + bytes(s[1] for s in samples)
    # mtime=0 keeps the archives byte-stable across runs
    for name, payload in [
        ("mnist10k-images-idx3-ubyte.gz", images),
        ("mnist10k-labels-idx1-ubyte.gz", labels),
    ]:
        with open(out / name, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
