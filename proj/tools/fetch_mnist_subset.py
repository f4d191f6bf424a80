#!/usr/bin/env python3
"""Write a small MNIST sample as standard IDX files.

The full MNIST archives are not always reachable from build machines, but the
mlxtend wheel on PyPI ships a 5000-image sample of the MNIST training set.
This script downloads that wheel with pip, shuffles the sample with a fixed
seed and writes a train/test split in the usual IDX layout:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

If you already have the real MNIST files, point --data-dir at them instead.
"""

import argparse
import gzip
import pathlib
import random
import struct
import subprocess
import sys
import tempfile
import zipfile

SAMPLE_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(wheel_arg, workdir):
    if wheel_arg:
        return pathlib.Path(wheel_arg)
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet",
         "-d", str(workdir), "mlxtend"],
        check=True)
    wheels = sorted(pathlib.Path(workdir).glob("mlxtend-*.whl"))
    if not wheels:
        sys.exit("pip download did not produce an mlxtend wheel")
    return wheels[-1]


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="data/mnist")
    ap.add_argument("--wheel", help="use a local mlxtend wheel instead of pip download")
    ap.add_argument("--test-size", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = find_wheel(args.wheel, tmp)
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(SAMPLE_MEMBER)).decode()

    rows = []
    for line in raw.splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        if len(vals) != 785:
            sys.exit(f"unexpected row width {len(vals)}")
        rows.append((vals[:784], vals[784]))

    random.Random(args.seed).shuffle(rows)
    test, train = rows[:args.test_size], rows[args.test_size:]

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", [r[0] for r in train])
    write_labels(out / "train-labels-idx1-ubyte", [r[1] for r in train])
    write_images(out / "t10k-images-idx3-ubyte", [r[0] for r in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [r[1] for r in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
