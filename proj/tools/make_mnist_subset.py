#!/usr/bin/env python3
"""Write a 5000-image MNIST sample as gzipped IDX files.

The sample ships inside the mlxtend wheel (``mlxtend/data/data/mnist_5k.csv.gz``,
500 images per digit, 28x28 unsigned bytes, label in the last column). The
wheel is fetched with ``pip download`` unless ``--wheel`` points at a local copy.

    python3 tools/make_mnist_subset.py --out data/mnist5k
"""

import argparse
import gzip
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-d", str(dest), "mlxtend==0.24.0"],
        check=True,
    )
    wheels = sorted(dest.glob("mlxtend-*.whl"))
    if not wheels:
        raise SystemExit("pip download did not produce an mlxtend wheel")
    return wheels[0]


def read_rows(wheel: pathlib.Path):
    with zipfile.ZipFile(wheel) as zf:
        text = gzip.decompress(zf.read(CSV_MEMBER)).decode()
    images, labels = [], []
    for line in text.splitlines():
        fields = line.split(",")
        pixels = [int(float(v)) for v in fields[:-1]]
        if len(pixels) != 784:
            raise SystemExit(f"unexpected row width {len(pixels)}")
        images.append(bytes(pixels))
        labels.append(int(float(fields[-1])))
    return images, labels


def write_idx(out: pathlib.Path, images, labels) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist5k"))
    parser.add_argument("--wheel", type=pathlib.Path, default=None)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(pathlib.Path(tmp))
        images, labels = read_rows(wheel)
    write_idx(args.out, images, labels)
    print(f"wrote {len(images)} images to {args.out}")


if __name__ == "__main__":
    main()
