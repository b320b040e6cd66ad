"""Rating data ingestion, five-fold splits, and accuracy metrics.

Supports the two MovieLens file layouts (tab-separated ``u.data`` and
``::``-separated ``ratings.dat``), produces seeded per-rating five-fold
train/test views, and scores predictions with MAE / RMSE / NMSE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RATING_MIN = 1.0
RATING_MAX = 5.0

METRICS_CSV_HEADER = ["fold", "round", "algo", "mae", "rmse", "nmse"]


class ParseError(ValueError):
    """A rating file line that does not match the expected layout."""


class ValidationError(ValueError):
    """Structurally valid input that violates a dataset invariant."""


@dataclass
class RatingsDataset:
    """Sparse user-item-rating triples with optional fold assignments.

    ``users`` / ``items`` hold the raw ids from the source file; the
    contiguous indices ``uidx`` / ``iidx`` (0..num_users-1 etc.) are what
    the training code operates on.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    fold_of: np.ndarray | None = None
    user_ids: np.ndarray = field(init=False)
    item_ids: np.ndarray = field(init=False)
    uidx: np.ndarray = field(init=False)
    iidx: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=float)
        if not (self.users.shape == self.items.shape == self.ratings.shape):
            raise ValidationError("users, items and ratings must have equal length")
        if self.ratings.size and (
            self.ratings.min() < RATING_MIN or self.ratings.max() > RATING_MAX
        ):
            raise ValidationError(
                f"ratings must lie in [{RATING_MIN}, {RATING_MAX}]"
            )
        self.user_ids, self.uidx = np.unique(self.users, return_inverse=True)
        self.item_ids, self.iidx = np.unique(self.items, return_inverse=True)
        if self.ratings.size:
            pair_keys = self.uidx.astype(np.int64) * max(self.num_items, 1) + self.iidx
            if np.unique(pair_keys).size != pair_keys.size:
                raise ValidationError("duplicate (user, item) pair in dataset")

    def __len__(self) -> int:
        return int(self.ratings.size)

    @property
    def num_users(self) -> int:
        return int(self.user_ids.size)

    @property
    def num_items(self) -> int:
        return int(self.item_ids.size)


@dataclass
class FoldView:
    """Immutable slice of a dataset, sharing the parent's index space."""

    uidx: np.ndarray
    iidx: np.ndarray
    ratings: np.ndarray
    num_users: int
    num_items: int

    def __len__(self) -> int:
        return int(self.ratings.size)

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.uidx, self.iidx, self.ratings


def _parse_rating_file(path: str | Path, sep: str, fmt_name: str) -> RatingsDataset:
    path = Path(path)
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise ParseError(
                    f"{path}:{lineno}: expected 4 {fmt_name}-separated fields, got {len(parts)}"
                )
            try:
                u = int(parts[0])
                i = int(parts[1])
                r = float(parts[2])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if r < RATING_MIN or r > RATING_MAX:
                raise ValidationError(
                    f"{path}:{lineno}: rating {r} outside [{RATING_MIN}, {RATING_MAX}]"
                )
            users.append(u)
            items.append(i)
            ratings.append(r)
    return RatingsDataset(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=float),
    )


def parse_ml100k(path: str | Path) -> RatingsDataset:
    """Parse a tab-separated ``user item rating timestamp`` file (timestamps dropped)."""
    return _parse_rating_file(path, "\t", "tab")


def parse_ml1m(path: str | Path) -> RatingsDataset:
    """Parse a ``user::item::rating::timestamp`` file (timestamps dropped)."""
    return _parse_rating_file(path, "::", '"::"')


def write_ratings_file(path: str | Path, ds: RatingsDataset, sep: str = "\t") -> None:
    """Write triples back out in MovieLens layout (timestamp column fixed to 0)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            if float(r).is_integer():
                fh.write(f"{u}{sep}{i}{sep}{int(r)}{sep}0\n")
            else:
                fh.write(f"{u}{sep}{i}{sep}{r}{sep}0\n")


def five_fold_split(ds: RatingsDataset, seed: int) -> list[tuple[FoldView, FoldView]]:
    """Partition triples into five near-equal folds by a seeded shuffle.

    Returns five (train, test) view pairs; each fold serves as the test
    set exactly once. Also records the assignment in ``ds.fold_of``.
    """
    n = len(ds)
    if n < 5:
        raise ValidationError(f"need at least 5 ratings to make 5 folds, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, 5)):
        fold_of[chunk] = f
    ds.fold_of = fold_of

    pairs = []
    for f in range(5):
        test_mask = fold_of == f
        train_mask = ~test_mask
        pairs.append(
            (
                FoldView(
                    uidx=ds.uidx[train_mask],
                    iidx=ds.iidx[train_mask],
                    ratings=ds.ratings[train_mask],
                    num_users=ds.num_users,
                    num_items=ds.num_items,
                ),
                FoldView(
                    uidx=ds.uidx[test_mask],
                    iidx=ds.iidx[test_mask],
                    ratings=ds.ratings[test_mask],
                    num_users=ds.num_users,
                    num_items=ds.num_items,
                ),
            )
        )
    return pairs


@dataclass
class MetricsReport:
    """One evaluation snapshot. ``nmse`` is sum(e^2) / sum(r^2)."""

    mae: float
    rmse: float
    nmse: float
    fold_id: int = 0
    round: int = 0
    algo: str = ""


def metrics(
    predictions: np.ndarray,
    truths: np.ndarray,
    fold_id: int = 0,
    round_no: int = 0,
    algo: str = "",
) -> MetricsReport:
    """Score clamped predictions against ground truth.

    Predictions are clamped to the rating range before scoring. NMSE is
    normalized by the energy of the true ratings, so
    nmse * sum(r^2) == rmse^2 * n.
    """
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.size == 0 or predictions.shape != truths.shape:
        raise ValidationError("predictions and truths must be equal-length and nonempty")
    preds = np.clip(predictions, RATING_MIN, RATING_MAX)
    err = preds - truths
    mae = float(np.mean(np.abs(err)))
    mse = float(np.mean(err**2))
    denom = float(np.sum(truths**2))
    if denom <= 0:
        raise ValidationError("true ratings have zero energy; NMSE undefined")
    nmse = float(np.sum(err**2)) / denom
    return MetricsReport(
        mae=mae, rmse=float(np.sqrt(mse)), nmse=nmse, fold_id=fold_id, round=round_no, algo=algo
    )


def write_metrics_csv(path: str | Path, reports: list[MetricsReport]) -> None:
    """Serialize reports with the fixed ``fold,round,algo,mae,rmse,nmse`` schema."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_CSV_HEADER)
        for rep in reports:
            writer.writerow(
                [
                    rep.fold_id,
                    rep.round,
                    rep.algo,
                    f"{rep.mae:.6f}",
                    f"{rep.rmse:.6f}",
                    f"{rep.nmse:.6f}",
                ]
            )


def read_metrics_csv(path: str | Path) -> list[MetricsReport]:
    """Parse a metrics CSV written by :func:`write_metrics_csv`."""
    reports = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_CSV_HEADER:
            raise ParseError(f"{path}: unexpected header {header}")
        for row in reader:
            if len(row) != 6:
                raise ParseError(f"{path}: bad row {row}")
            reports.append(
                MetricsReport(
                    fold_id=int(row[0]),
                    round=int(row[1]),
                    algo=row[2],
                    mae=float(row[3]),
                    rmse=float(row[4]),
                    nmse=float(row[5]),
                )
            )
    return reports
