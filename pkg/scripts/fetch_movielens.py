#!/usr/bin/env python3
"""Write MovieLens-100K ratings to a ``userId,movieId,rating,timestamp`` CSV.

GroupLens is tried first. When it is unreachable the ratings are pulled from
the ``pytorch-widedeep`` wheel, which bundles the same 100,000 rows as a
parquet file (reading it needs pandas + pyarrow).

Usage:
  python scripts/fetch_movielens.py --out data/ml-100k-ratings.csv
"""

import argparse
import csv
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"


def _from_grouplens(timeout=20):
    with urllib.request.urlopen(GROUPLENS_URL, timeout=timeout) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        text = zf.read("ml-100k/u.data").decode("latin-1")
    rows = []
    for line in text.splitlines():
        user, item, rating, ts = line.split("\t")
        rows.append((int(user), int(item), int(rating), int(ts)))
    return rows


def _from_wheel():
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp,
             "pytorch-widedeep==1.7.0"],
            check=True,
        )
        wheel = next(Path(tmp).glob("pytorch_widedeep-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            frame = pd.read_parquet(io.BytesIO(zf.read(WHEEL_MEMBER)))
    return list(frame[["user_id", "movie_id", "rating", "timestamp"]].itertuples(index=False, name=None))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k-ratings.csv")
    args = ap.parse_args()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        rows = _from_grouplens()
        source = "grouplens"
    except OSError:
        rows = _from_wheel()
        source = "pytorch-widedeep wheel"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["userId", "movieId", "rating", "timestamp"])
        for user, item, rating, ts in rows:
            writer.writerow([int(user), int(item), f"{float(rating):.1f}", int(ts)])
    print(f"wrote {len(rows)} ratings from {source} to {out}")


if __name__ == "__main__":
    main()
