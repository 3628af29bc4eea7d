"""Dataset ingestion, normalization, splits, and synthetic probe tasks.

The on-disk dataset format is a strict numeric CSV: one row per sequence,
T * D feature cells (time-major: all D features of step 1, then step 2, ...)
plus one integer label cell. No quoting, no headers. Parse errors report
1-based row (and column) numbers.

Two synthetic tasks probe long-horizon behavior. `delayed_recall` shows the
class at the first timestep only and buries it under clipped noise for the
remaining T - 1 steps, so solving it requires carrying one observation across
the full horizon; by construction a hand-coded single-state classifier (read
the first step, argmax over the class channels, ignore the rest) scores 100%.
`noisy_majority` labels each sequence by the majority sign of one noisy
channel, so evidence accumulates at every step instead.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng as rng_mod


class DataError(ValueError):
    """Malformed dataset input (file contents or schema mismatch)."""


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics, computed on a train split only."""

    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,) floored, see compute_norm_stats


@dataclass
class SequenceDataset:
    X: np.ndarray  # (N, T, D) float64
    y: np.ndarray  # (N,) int64
    n_classes: int
    split: str = "train"
    stats: NormStats | None = None  # set once normalize() has been applied

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def horizon(self) -> int:
        return self.X.shape[1]

    @property
    def d_in(self) -> int:
        return self.X.shape[2]


STD_FLOOR = 1e-8


def compute_norm_stats(train: SequenceDataset) -> NormStats:
    """Per-feature mean/std over all timesteps of the train split (population std)."""
    if train.n == 0:
        raise DataError("cannot compute normalization stats on an empty train split")
    flat = train.X.reshape(-1, train.d_in)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize(ds: SequenceDataset, stats: NormStats) -> SequenceDataset:
    """Apply train-split z-score stats to any split (never recomputed here)."""
    return replace(ds, X=(ds.X - stats.mean) / stats.std, stats=stats)


def train_val_split(ds: SequenceDataset, val_fraction: float = 0.2, seed: int = 0):
    """Seeded permutation split of a training set into (train, val)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = rng_mod.stream(seed, rng_mod.SPLIT).permutation(ds.n)
    n_val = max(1, int(round(ds.n * val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train = replace(ds, X=ds.X[train_idx], y=ds.y[train_idx], split="train")
    val = replace(ds, X=ds.X[val_idx], y=ds.y[val_idx], split="val")
    return train, val


# ---------------------------------------------------------------------------
# CSV in/out.


def load_csv_dataset(
    path,
    T: int,
    D: int,
    label_col: int = -1,
    n_classes: int | None = None,
    split: str = "train",
) -> SequenceDataset:
    """Parse and validate a sequence CSV; no normalization is applied."""
    if T < 1 or D < 1:
        raise DataError(f"schema requires T >= 1 and D >= 1, got T={T}, D={D}")
    expected = T * D + 1
    rows: list[np.ndarray] = []
    labels: list[int] = []
    with open(path, "r", encoding="ascii") as fh:
        lineno = 0
        for line in fh:
            lineno += 1
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != expected:
                raise DataError(
                    f"{path}: row {lineno} has {len(fields)} cells, expected {expected} (T*D + label)"
                )
            lc = label_col if label_col >= 0 else len(fields) + label_col
            if not 0 <= lc < len(fields):
                raise DataError(f"label_col {label_col} out of range for {expected}-cell rows")
            try:
                values = np.array(fields, dtype=np.float64)
            except ValueError:
                bad = next(i for i, f in enumerate(fields) if not _is_number(f))
                raise DataError(
                    f"{path}: row {lineno}, column {bad + 1}: non-numeric cell {fields[bad]!r}"
                ) from None
            label_val = values[lc]
            if label_val != int(label_val):
                raise DataError(f"{path}: row {lineno}: label {fields[lc]!r} is not an integer")
            features = np.delete(values, lc)
            rows.append(features)
            labels.append(int(label_val))
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = np.asarray(rows).reshape(len(rows), T, D)
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        bad = int(np.argmin(y))
        raise DataError(f"{path}: row {bad + 1}: negative label {y[bad]}")
    L = n_classes if n_classes is not None else int(y.max()) + 1
    if y.max() >= L:
        bad = int(np.argmax(y))
        raise DataError(f"{path}: row {bad + 1}: label {y[bad]} out of range [0, {L})")
    return SequenceDataset(X=X, y=y, n_classes=L, split=split)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def save_csv_dataset(ds: SequenceDataset, path) -> None:
    """Write the strict CSV layout (features time-major, label last)."""
    with open(path, "w", encoding="ascii") as fh:
        flat = ds.X.reshape(ds.n, -1)
        for i in range(ds.n):
            cells = ",".join(repr(float(v)) for v in flat[i])
            fh.write(f"{cells},{int(ds.y[i])}\n")


# ---------------------------------------------------------------------------
# Synthetic tasks.

SYNTH_KINDS = ("delayed_recall", "noisy_majority")

# delayed_recall geometry: the first n_classes channels carry an antipodal
# one-hot token (+RECALL_AMP on the label channel, -RECALL_AMP elsewhere) at
# step 1 and are silent afterwards; the remaining channels carry i.i.d. noise
# at every step. Class information exists only at step 1, so solving the task
# requires carrying it across the full horizon. The step-1 argmax over class
# channels recovers the label exactly.
#
# The noise floor is deliberate: an integrator with alpha ~ 1/T accumulates
# per-step noise to std ~ alpha*sqrt(T/2)*std_f while the lone token
# contributes ~ alpha*beta^T, so i.i.d. unit-scale noise at T=200 buries the
# token regardless of its amplitude (tanh caps it). At std 0.01 the token
# dominates (final-state class separability ratio ~ 9 at T=200 under a fresh
# init). For the same reason these probes train on their raw scale; z-scoring
# would push the noise back to unit variance.
RECALL_AMP = 1.0
RECALL_NOISE_STD = 0.01

MAJORITY_BIAS = 0.4


def synth_task(
    kind: str, T: int, N: int, seed: int, d: int = 4, n_classes: int = 2, part: int = 0
) -> SequenceDataset:
    """Deterministic synthetic dataset; `part` selects an independent stream
    (same seed, disjoint draws) so train/test splits never share noise."""
    if T < 2:
        raise DataError(f"synthetic tasks need T >= 2, got {T}")
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic task {kind!r}, expected one of {SYNTH_KINDS}")
    gen = rng_mod.stream(seed, rng_mod.SYNTH, part)
    # Balanced labels (within one when N is odd), order shuffled.
    y = np.arange(N, dtype=np.int64) % n_classes
    gen.shuffle(y)
    if kind == "delayed_recall":
        if d < n_classes:
            raise DataError(f"delayed_recall needs d >= n_classes, got d={d}, L={n_classes}")
        X = np.zeros((N, T, d))
        if d > n_classes:
            X[:, :, n_classes:] = gen.normal(0.0, RECALL_NOISE_STD, size=(N, T, d - n_classes))
        X[:, 0, :n_classes] = -RECALL_AMP
        X[np.arange(N), 0, y] = RECALL_AMP
    else:
        if n_classes != 2:
            raise DataError("noisy_majority is a binary task")
        X = gen.normal(0.0, 1.0, size=(N, T, d))
        sign = 2.0 * y - 1.0
        for i in range(N):
            # Redraw the signal channel until the realized majority matches the
            # intended balanced label (no ties, exact class balance).
            while True:
                s = MAJORITY_BIAS * sign[i] + gen.normal(0.0, 1.0, size=T)
                pos, neg = int(np.sum(s > 0)), int(np.sum(s < 0))
                if pos != neg and (pos > neg) == bool(y[i]):
                    X[i, :, 0] = s
                    break
    return SequenceDataset(X=X, y=y, n_classes=n_classes, split="train")


def delayed_recall_oracle(X: np.ndarray, n_classes: int = 2) -> np.ndarray:
    """The hand-coded classifier delayed_recall is built to satisfy:
    read step 1, remember the argmax over the class channels, ignore the rest."""
    return np.argmax(X[:, 0, :n_classes], axis=1)
