"""Build gzipped IDX files from the 5000-image MNIST subset shipped in mlxtend.

The full MNIST archives are not reachable from the build sandbox; the mlxtend
wheel carries 500 training images per digit as CSV. This script splits them
per class (first 400 -> train, last 100 -> test) and writes the standard
IDX containers so the regular loader path is exercised.

    pip download --no-deps -d /tmp/wheels mlxtend==0.24.0
    python tools/make_mnist5k.py /tmp/wheels/mlxtend-0.24.0-py3-none-any.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main(wheel, out_dir, n_test=100):
    raw = zipfile.ZipFile(wheel).read(MEMBER)
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    train_idx, test_idx = [], []
    for c in range(10):
        rows = np.flatnonzero(labels == c)
        train_idx.extend(rows[:-n_test])
        test_idx.extend(rows[-n_test:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", np.sort(train_idx)), ("test", np.sort(test_idx))):
        images = pixels[idx].reshape(-1, 28, 28)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", images, 0x00000803)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", labels[idx], 0x00000801)
        print(name, images.shape[0])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
