#!/usr/bin/env python3
"""Fetch the canonical MNIST IDX archives into a local data directory.

The library itself never downloads anything (offline reproducibility);
run this once, or drop the four canonical .gz files into the target
directory yourself. Every candidate mirror serves byte-identical copies
of the original distribution; downloads are verified against the
canonical MD5 digests before being kept.

Usage:
    python scripts/fetch_mnist.py [--dest data/mnist]
"""

import argparse
import hashlib
import sys
import urllib.request
from pathlib import Path

CANONICAL_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]


def fetch(dest: Path) -> int:
    dest.mkdir(parents=True, exist_ok=True)
    failures = 0
    for name, want_md5 in CANONICAL_MD5.items():
        target = dest / name
        if target.exists() and hashlib.md5(target.read_bytes()).hexdigest() == want_md5:
            print(f"{name}: already present and verified")
            continue
        ok = False
        for mirror in MIRRORS:
            url = mirror + name
            try:
                print(f"{name}: fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as resp:
                    data = resp.read()
            except OSError as exc:
                print(f"  failed: {exc}")
                continue
            if hashlib.md5(data).hexdigest() != want_md5:
                print("  checksum mismatch, trying next mirror")
                continue
            target.write_bytes(data)
            print(f"  verified ({len(data)} bytes)")
            ok = True
            break
        if not ok:
            print(f"{name}: could not fetch from any mirror", file=sys.stderr)
            failures += 1
    return failures


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data/mnist")
    args = parser.parse_args()
    return 1 if fetch(Path(args.dest)) else 0


if __name__ == "__main__":
    sys.exit(main())
