"""Numeric encoding, seeded stratified splitting and one-against-all targets."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .schema import MODEL_FIELDS, InjurySeverity, ModelRow

NUMERIC_MODEL_FIELDS = ("driver_age", "vehicle_age")


class PrepError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.3
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


@dataclass(frozen=True)
class Encoder:
    """Column layout plus standardization parameters.

    ``categories`` maps each categorical field to its sorted observed values;
    ``stats`` maps each numeric field to ``(mean, sd)`` over known cells.
    """

    categories: dict
    stats: dict

    @property
    def feature_names(self) -> list:
        names = []
        for f in MODEL_FIELDS:
            if f in NUMERIC_MODEL_FIELDS:
                names.append((f, "numeric"))
            else:
                names.extend((f, c) for c in self.categories[f])
        return names

    def field_columns(self, name: str) -> list:
        return [i for i, (f, _) in enumerate(self.feature_names) if f == name]

    def transform(self, raw_columns: Sequence[tuple]):
        n = len(raw_columns)
        names = self.feature_names
        x = np.zeros((n, len(names)))
        mask = np.zeros((n, len(names)), dtype=bool)
        col = 0
        for j, f in enumerate(MODEL_FIELDS):
            values = [row[j] for row in raw_columns]
            if f in NUMERIC_MODEL_FIELDS:
                mean, sd = self.stats[f]
                for i, v in enumerate(values):
                    if v is None:
                        mask[i, col] = True
                    else:
                        x[i, col] = (v - mean) / sd
                col += 1
            else:
                cats = self.categories[f]
                index = {c: k for k, c in enumerate(cats)}
                width = len(cats)
                for i, v in enumerate(values):
                    k = index.get(v) if v is not None else None
                    if k is None:
                        mask[i, col : col + width] = True
                    else:
                        x[i, col + k] = 1.0
                col += width
        return x, mask


def fit_encoder(raw_columns: Sequence[tuple], categories: Optional[dict] = None) -> Encoder:
    """Fit category lists and numeric (mean, sd) on ``raw_columns``.

    Passing ``categories`` keeps an existing layout and refits only the
    numeric statistics.
    """
    if not raw_columns:
        raise PrepError("cannot encode an empty row list")
    cats = {} if categories is None else dict(categories)
    stats = {}
    for j, f in enumerate(MODEL_FIELDS):
        known = [row[j] for row in raw_columns if row[j] is not None]
        if f in NUMERIC_MODEL_FIELDS:
            if not known:
                raise PrepError(f"numeric field {f!r} has no known values")
            arr = np.asarray(known, dtype=float)
            mean = float(arr.mean())
            sd = float(arr.std())
            stats[f] = (mean, sd if sd > 0 else 1.0)
        elif categories is None:
            if not known:
                raise PrepError(f"categorical field {f!r} has no observed categories")
            cats[f] = tuple(sorted(set(known)))
    return Encoder(categories=cats, stats=stats)


@dataclass(frozen=True)
class EncodedDataset:
    features: np.ndarray
    missing_mask: np.ndarray
    targets: np.ndarray
    raw_columns: tuple
    encoder: Encoder
    severity: np.ndarray
    # Row indices into the dataset that was originally encoded.
    row_ids: np.ndarray
    positive: Optional[InjurySeverity] = None

    @property
    def feature_names(self) -> list:
        return self.encoder.feature_names

    def __len__(self):
        return len(self.targets)

    def take(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            features=self.features[idx],
            missing_mask=self.missing_mask[idx],
            targets=self.targets[idx],
            raw_columns=tuple(self.raw_columns[i] for i in idx),
            severity=self.severity[idx],
            row_ids=self.row_ids[idx],
        )

    def reencode(self, encoder: Encoder) -> "EncodedDataset":
        x, mask = encoder.transform(self.raw_columns)
        return replace(self, features=x, missing_mask=mask, encoder=encoder)


def encode(rows: Sequence[ModelRow]) -> EncodedDataset:
    rows = list(rows)
    if not rows:
        raise PrepError("cannot encode an empty row list")
    raw = tuple(r.inputs() for r in rows)
    encoder = fit_encoder(raw)
    x, mask = encoder.transform(raw)
    severity = np.array([int(r.severity) for r in rows], dtype=int)
    return EncodedDataset(
        features=x,
        missing_mask=mask,
        targets=severity.copy(),
        raw_columns=raw,
        encoder=encoder,
        severity=severity,
        row_ids=np.arange(len(rows)),
    )


def split_indices(labels: np.ndarray, spec: SplitSpec):
    """Return sorted ``(train_idx, test_idx)`` for a seeded (stratified) split."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    n = len(labels)
    if not spec.stratified:
        perm = rng.permutation(n)
        n_test = min(max(round_half_up(spec.test_fraction * n), 1), n - 1)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    classes = np.unique(labels)
    sizes = np.array([np.sum(labels == c) for c in classes])
    for cls, size in zip(classes, sizes):
        if size < 2:
            raise PrepError(f"class {_class_name(cls)} has {size} row(s); stratified split needs >= 2")
    # Largest-remainder allocation: the total is round(f*N), each class within one row of f*n_c.
    exact = spec.test_fraction * sizes
    alloc = np.floor(exact).astype(int)
    extra = round_half_up(spec.test_fraction * n) - alloc.sum()
    order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[: max(extra, 0)]:
        alloc[i] += 1
    alloc = np.clip(alloc, 1, sizes - 1)
    test = []
    for cls, n_test in zip(classes, alloc):
        members = np.flatnonzero(labels == cls)
        test.append(rng.permutation(members)[:n_test])
    test_idx = np.sort(np.concatenate(test))
    train_mask = np.ones(n, dtype=bool)
    train_mask[test_idx] = False
    return np.flatnonzero(train_mask), test_idx


def _class_name(cls) -> str:
    try:
        return InjurySeverity(int(cls)).token
    except ValueError:
        return str(cls)


def split(ds: EncodedDataset, spec: SplitSpec, restandardize: bool = True):
    """Partition ``ds`` into train/test, stratifying on severity.

    With ``restandardize`` the numeric columns of both parts are rescaled with
    statistics from the training part only.
    """
    labels = ds.severity if ds.positive is None else ds.targets
    train_idx, test_idx = split_indices(labels, spec)
    train, test = ds.take(train_idx), ds.take(test_idx)
    if restandardize:
        enc = fit_encoder(train.raw_columns, categories=ds.encoder.categories)
        train, test = train.reencode(enc), test.reencode(enc)
    return train, test


def one_vs_all(ds: EncodedDataset, positive: InjurySeverity) -> EncodedDataset:
    positive = InjurySeverity(positive)
    targets = (ds.severity == int(positive)).astype(int)
    return replace(ds, targets=targets, positive=positive)
