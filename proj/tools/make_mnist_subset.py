#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset shipped with mlxtend into IDX files.

The subset (500 images per digit, drawn from the MNIST training split) is
stored by mlxtend as a gzipped CSV: 784 pixel columns followed by the label.
This writes the two files the C++ loader expects:

    <out>/mnist5k-images-idx3-ubyte
    <out>/mnist5k-labels-idx1-ubyte

Usage:
    make_mnist_subset.py --out data/                # needs `pip install mlxtend`
    make_mnist_subset.py --csv mnist_5k.csv.gz --out data/
    make_mnist_subset.py --wheel mlxtend-*.whl --out data/
"""

import argparse
import gzip
import io
import pathlib
import struct
import sys
import zipfile

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def load_rows(args):
    if args.csv:
        raw = pathlib.Path(args.csv).read_bytes()
    elif args.wheel:
        with zipfile.ZipFile(args.wheel) as z:
            raw = z.read(CSV_MEMBER)
    else:
        try:
            import mlxtend
        except ImportError:
            sys.exit("mlxtend not installed; pass --csv or --wheel")
        raw = (pathlib.Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    text = gzip.decompress(raw).decode()
    rows = []
    for line in io.StringIO(text):
        line = line.strip()
        if not line:
            continue
        values = [int(float(v)) for v in line.split(",")]
        if len(values) != 785:
            sys.exit(f"unexpected row width {len(values)}")
        rows.append(values)
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--csv")
    parser.add_argument("--wheel")
    parser.add_argument("--out", default="data")
    args = parser.parse_args()

    rows = load_rows(args)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    images = bytearray(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(rows)))
    for row in rows:
        images.extend(bytes(row[:784]))
        labels.append(row[784])

    (out / "mnist5k-images-idx3-ubyte").write_bytes(images)
    (out / "mnist5k-labels-idx1-ubyte").write_bytes(labels)
    print(f"wrote {len(rows)} images to {out}")


if __name__ == "__main__":
    main()
