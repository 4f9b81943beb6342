#!/usr/bin/env python3
"""Fetch MovieLens 100K ratings into data/ml-100k/u.data (tab separated).

Tries the GroupLens archive first. If that host is unreachable, falls back to
the copy bundled in the pytorch-widedeep wheel, which preserves the original
u.data line order.
"""
import io
import pathlib
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
OUT = ROOT / "data" / "ml-100k" / "u.data"
GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def from_wheel():
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp,
             "pytorch-widedeep==1.7.0"],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("*.whl"))
        member = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"
        frame = pd.read_parquet(io.BytesIO(zipfile.ZipFile(wheel).read(member)))
    frame = frame[["user_id", "movie_id", "rating", "timestamp"]]
    return frame.to_csv(sep="\t", header=False, index=False).encode()


def main():
    if OUT.exists():
        print(f"{OUT} already present")
        return
    OUT.parent.mkdir(parents=True, exist_ok=True)
    try:
        data = from_grouplens()
    except Exception as err:  # noqa: BLE001
        print(f"grouplens download failed ({err}); using wheel copy")
        data = from_wheel()
    OUT.write_bytes(data)
    lines = data.count(b"\n")
    print(f"wrote {OUT} ({lines} lines)")


if __name__ == "__main__":
    main()
