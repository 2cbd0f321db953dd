#!/usr/bin/env python3
"""Build the desk-scale MNIST IDX files from the 10,000 digits bundled in the
`mnist` npm package (https://www.npmjs.com/package/mnist, MIT).

The package stores each digit as 784 floats equal to round(byte/255, 3); the
original bytes are recovered exactly by round(value * 255).

usage: npm pack mnist && tar xzf mnist-*.tgz && \
       python3 scripts/build_mnist_desk.py package/src/digits data/mnist-desk
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 7000
SEED = 20190301


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    samples = []
    for digit in range(10):
        values = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        assert len(values) % 784 == 0
        for k in range(len(values) // 784):
            px = [int(round(v * 255)) for v in values[k * 784:(k + 1) * 784]]
            samples.append((px, digit))
    random.Random(SEED).shuffle(samples)
    splits = {"train": samples[:TRAIN], "t10k": samples[TRAIN:]}
    Path(dst).mkdir(parents=True, exist_ok=True)
    for name, rows in splits.items():
        pixels = [p for px, _ in rows for p in px]
        labels = [y for _, y in rows]
        write_idx(Path(dst, f"{name}-images-idx3-ubyte.gz"), 0x00000803, [len(rows), 28, 28], pixels)
        write_idx(Path(dst, f"{name}-labels-idx1-ubyte.gz"), 0x00000801, [len(rows)], labels)
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
