#!/usr/bin/env python3
"""Fetch the UCI smartphone activity dataset and export the binary task.

The source is the "Human Activity Recognition Using Smartphones" archive
(UCI repository id 240). We use the raw inertial signals, not the 561
engineered features: 9 channels of 128 readings per window, stacked in
the fixed order below. Windows are exported time-major as CSV rows of
128 * 9 feature cells followed by the label.

The six activity labels collapse to two classes:

    0: sitting (4), laying (6), walking upstairs (2)
    1: standing (5), walking (1), walking downstairs (3)

Expected shapes: train 7352 x 128 x 9, test 2947 x 128 x 9. If the
archive layout ever changes, the script stops with an error describing
the mismatch; it never reshapes silently.

Run from the repository root after installing the package:

    python3 scripts/prepare_har2.py --out data/har2
    python3 scripts/prepare_har2.py --archive /path/to/UCI_HAR_Dataset.zip

Then train the compressed model:

    fastgrnn train data/har2/train.csv --T 128 --D 9 --hidden 80 \
        --rw 5 --ru 40 --sw 0.2 --su 0.3 --test data/har2/test.csv
"""

import argparse
import io
import os
import sys
import urllib.request
import zipfile

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from fastgrnn.data import SequenceDataset, save_csv_dataset

URL = "https://archive.ics.uci.edu/ml/machine-learning-databases/00240/UCI%20HAR%20Dataset.zip"

# Channel stacking order; each name is a file under Inertial Signals/.
CHANNELS = (
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
)

T = 128

# Activity ids as assigned by the archive's activity_labels.txt.
CLASS_0 = {4, 6, 2}  # sitting, laying, walking upstairs
CLASS_1 = {5, 1, 3}  # standing, walking, walking downstairs

EXPECTED_N = {"train": 7352, "test": 2947}


def _read_member(zf: zipfile.ZipFile, suffix: str) -> np.ndarray:
    # The archive root directory name has varied ("UCI HAR Dataset/");
    # match on the path suffix instead of hard-coding it.
    matches = [n for n in zf.namelist() if n.endswith(suffix)]
    if len(matches) != 1:
        raise SystemExit(f"archive layout mismatch: {len(matches)} entries end with {suffix!r}")
    with zf.open(matches[0]) as fh:
        return np.loadtxt(io.TextIOWrapper(fh, encoding="ascii"))


def _load_split(zf: zipfile.ZipFile, split: str) -> SequenceDataset:
    stacks = []
    for ch in CHANNELS:
        m = _read_member(zf, f"{split}/Inertial Signals/{ch}_{split}.txt")
        if m.ndim != 2 or m.shape[1] != T:
            raise SystemExit(f"{ch}_{split}: expected (N, {T}) readings, got {m.shape}")
        stacks.append(m)
    shapes = {s.shape for s in stacks}
    if len(shapes) != 1:
        raise SystemExit(f"{split}: channel row counts disagree: {sorted(shapes)}")
    X = np.stack(stacks, axis=2)  # (N, T, 9)
    labels = _read_member(zf, f"{split}/y_{split}.txt").astype(int)
    if labels.shape[0] != X.shape[0]:
        raise SystemExit(f"{split}: {labels.shape[0]} labels for {X.shape[0]} windows")
    unknown = set(labels.tolist()) - CLASS_0 - CLASS_1
    if unknown:
        raise SystemExit(f"{split}: unmapped activity ids {sorted(unknown)}")
    y = np.where(np.isin(labels, sorted(CLASS_1)), 1, 0).astype(np.int64)
    if X.shape[0] != EXPECTED_N[split]:
        print(f"warning: {split} has {X.shape[0]} windows, expected {EXPECTED_N[split]}", file=sys.stderr)
    return SequenceDataset(X=X, y=y, n_classes=2, split=split)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--archive", help="already-downloaded archive zip (skips the network)")
    ap.add_argument("--url", default=URL)
    ap.add_argument("--out", default=os.path.join("data", "har2"))
    args = ap.parse_args()

    if args.archive:
        blob = open(args.archive, "rb").read()
    else:
        print(f"downloading {args.url}")
        blob = urllib.request.urlopen(args.url, timeout=120).read()

    os.makedirs(args.out, exist_ok=True)
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        for split in ("train", "test"):
            ds = _load_split(zf, split)
            path = os.path.join(args.out, f"{split}.csv")
            save_csv_dataset(ds, path)
            ones = int(ds.y.sum())
            print(f"wrote {path}: {ds.n} rows, T={ds.horizon}, D={ds.d_in}, class balance {ds.n - ones}/{ones}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
