#!/usr/bin/env python3
"""Builds MNIST IDX files from the `mnist` npm package.

The npm package `mnist` (cazala/mnist, MIT) ships ~10.3k MNIST digits as
per-class JSON arrays of floats rounded to 3 decimals. round(v * 255) recovers
the original pixel bytes exactly, so the output files contain genuine MNIST
pixel data in the standard IDX layout (gzipped, like the canonical
distribution).

Usage:
  npm install --prefix /tmp/mnist_pkg mnist
  python3 scripts/prepare_mnist_from_npm.py --pkg /tmp/mnist_pkg/node_modules/mnist --out data/mnist

Writes train-images-idx3-ubyte.gz / train-labels-idx1-ubyte.gz (800 per class)
and t10k-images-idx2... (remaining images) plus a CHECKSUMS file.
"""

import argparse
import gzip
import hashlib
import json
import os
import struct
import sys

TRAIN_PER_CLASS = 800


def load_class(pkg_dir: str, digit: int):
    path = os.path.join(pkg_dir, "src", "digits", f"{digit}.json")
    with open(path) as f:
        payload = json.load(f)
    flat = payload["data"] if isinstance(payload, dict) else payload
    if len(flat) % 784 != 0:
        raise SystemExit(f"{path}: length {len(flat)} not divisible by 784")
    images = []
    for i in range(len(flat) // 784):
        px = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
        images.append(px)
    return images


def write_gz(path: str, buf: bytes):
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(buf)


def write_idx_images(path: str, images):
    buf = struct.pack(">IIII", 0x00000803, len(images), 28, 28)
    buf += b"".join(images)
    write_gz(path, buf)


def write_idx_labels(path: str, labels):
    buf = struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)
    write_gz(path, buf)


def sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pkg", required=True, help="path to node_modules/mnist")
    ap.add_argument("--out", required=True, help="output directory")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    train_imgs, train_lbls, test_imgs, test_lbls = [], [], [], []
    for digit in range(10):
        images = load_class(args.pkg, digit)
        if len(images) <= TRAIN_PER_CLASS:
            raise SystemExit(f"class {digit}: only {len(images)} images")
        train_imgs += images[:TRAIN_PER_CLASS]
        train_lbls += [digit] * TRAIN_PER_CLASS
        test_imgs += images[TRAIN_PER_CLASS:]
        test_lbls += [digit] * (len(images) - TRAIN_PER_CLASS)
        print(f"digit {digit}: {len(images)} images")

    files = {
        "train-images-idx3-ubyte.gz": lambda p: write_idx_images(p, train_imgs),
        "train-labels-idx1-ubyte.gz": lambda p: write_idx_labels(p, train_lbls),
        "t10k-images-idx3-ubyte.gz": lambda p: write_idx_images(p, test_imgs),
        "t10k-labels-idx1-ubyte.gz": lambda p: write_idx_labels(p, test_lbls),
    }
    sums = []
    for name, writer in files.items():
        path = os.path.join(args.out, name)
        writer(path)
        sums.append(f"{sha256(path)}  {name}")
        print("wrote", path)
    with open(os.path.join(args.out, "CHECKSUMS"), "w") as f:
        f.write("\n".join(sums) + "\n")
    print(f"train N={len(train_imgs)}, test N={len(test_imgs)}")


if __name__ == "__main__":
    sys.exit(main())
