"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (MIT licensed) ships ~10k real MNIST digits as JSON arrays of
pixel intensities in [0, 1] rounded to three decimals. This script picks a
class-stratified subset, re-quantizes to u8 and writes gzipped IDX files.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 tools/mnist_from_npm.py package/src/digits data/mnist-subset
"""
import gzip
import json
import os
import struct
import sys

import numpy as np

TRAIN_PER_CLASS = 400
TEST_PER_CLASS = 100


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    train, test = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = np.asarray(json.load(f)["data"], dtype=np.float64)
        imgs = raw.reshape(-1, 28 * 28)
        need = TRAIN_PER_CLASS + TEST_PER_CLASS
        assert imgs.shape[0] >= need, (digit, imgs.shape)
        q = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
        train += [(img, digit) for img in q[:TRAIN_PER_CLASS]]
        test += [(img, digit) for img in q[TRAIN_PER_CLASS:need]]
    rng = np.random.default_rng(0)
    os.makedirs(dst, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        order = rng.permutation(len(rows))
        images = b"".join(rows[i][0].tobytes() for i in order)
        labels = bytes(rows[i][1] for i in order)
        n = len(rows)
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte.gz"), 0x803, [n, 28, 28], images)
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte.gz"), 0x801, [n], labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
