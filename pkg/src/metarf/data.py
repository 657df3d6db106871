"""Descriptor tables, reaction encoding, group-wise splits and task sampling.

CSV layout: one header row, UTF-8, ``.`` as decimal separator. The columns
holding the row id, the group key and the yield are named by a
:class:`Schema`; every other column is a feature unless ``feature_columns``
restricts the set.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metarf.seeding import make_rng


class DataError(ValueError):
    """Raised when an input table violates the descriptor-table contract."""


@dataclass(frozen=True)
class Schema:
    """Column roles of a descriptor CSV.

    ``id_column`` may be ``None``, in which case row ids are the 0-based
    data-row positions. ``feature_columns`` of ``None`` means every column
    that is not id, group or yield.
    """

    group_column: str = "group"
    yield_column: str = "yield"
    id_column: str | None = "id"
    feature_columns: tuple[str, ...] | None = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DescriptorTable:
    row_ids: np.ndarray
    groups: np.ndarray
    features: np.ndarray
    yields: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.yields, dtype=np.float64)
        ids = np.asarray(self.row_ids, dtype=str)
        groups = np.asarray(self.groups, dtype=str)
        if X.ndim != 2 or X.shape[1] < 1:
            raise DataError(f"features must be an N x p matrix with p >= 1, got shape {X.shape}")
        n, p = X.shape
        if y.shape != (n,) or ids.shape != (n,) or groups.shape != (n,):
            raise DataError("row_ids, groups, features and yields must have one entry per row")
        if len(self.feature_names) != p:
            raise DataError(f"{len(self.feature_names)} feature names for {p} feature columns")
        if not np.all(np.isfinite(X)):
            i, j = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite feature at row {i + 1}, column {self.feature_names[j]!r}")
        if not np.all(np.isfinite(y)):
            i = int(np.flatnonzero(~np.isfinite(y))[0])
            raise DataError(f"non-finite yield at row {i + 1}")
        bad = np.flatnonzero((y < 0.0) | (y > 100.0))
        if bad.size:
            raise DataError(f"yield {y[bad[0]]!r} at row {bad[0] + 1} outside [0, 100]")
        empty = np.flatnonzero(np.char.str_len(groups) == 0) if n else np.array([], dtype=int)
        if empty.size:
            raise DataError(f"empty group key at row {empty[0] + 1}")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "yields", _frozen(y))
        object.__setattr__(self, "row_ids", _frozen(ids))
        object.__setattr__(self, "groups", _frozen(groups))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def group_keys(self) -> list[str]:
        """Distinct group keys, sorted."""
        return sorted(set(self.groups.tolist()))

    def indices_of(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.groups == group)

    def rows_in(self, groups: Iterable[str]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.groups, list(groups)))

    def subset(self, indices: Sequence[int] | np.ndarray) -> DescriptorTable:
        idx = np.asarray(indices, dtype=np.intp)
        return DescriptorTable(
            self.row_ids[idx], self.groups[idx], self.features[idx], self.yields[idx], self.feature_names
        )

    def with_features(self, features: np.ndarray) -> DescriptorTable:
        return DescriptorTable(self.row_ids, self.groups, features, self.yields, self.feature_names)


@dataclass(frozen=True)
class ComponentDescriptors:
    component_role: str
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite descriptor value for component {self.component_role!r}")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class SplitSpec:
    train_groups: frozenset[str]
    val_groups: frozenset[str]
    test_groups: frozenset[str]

    def __post_init__(self):
        for name in ("train_groups", "val_groups", "test_groups"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if (self.train_groups & self.val_groups) or (self.train_groups & self.test_groups) or (
            self.val_groups & self.test_groups
        ):
            raise DataError("split group sets overlap")

    def role_of(self, group: str) -> str:
        if group in self.train_groups:
            return "train"
        if group in self.val_groups:
            return "val"
        if group in self.test_groups:
            return "test"
        raise KeyError(group)

    def to_dict(self) -> dict[str, list[str]]:
        return {
            "train_groups": sorted(self.train_groups),
            "val_groups": sorted(self.val_groups),
            "test_groups": sorted(self.test_groups),
        }


@dataclass(frozen=True)
class Task:
    group: str
    support_indices: tuple[int, ...]
    query_indices: tuple[int, ...] = field(default=())


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row} (line {row + 1}), column {column!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row} (line {row + 1}), column {column!r}: non-finite value {cell!r}")
    return v


def load_descriptor_table(path: str | Path, schema: Schema | None = None) -> DescriptorTable:
    """Read and validate a descriptor CSV.

    Rows violating the table invariants are rejected with a :class:`DataError`
    naming the 1-based data row and the column; nothing is repaired.
    """
    schema = schema or Schema()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"descriptor table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise DataError(f"{path}: duplicate header columns {dupes}")
        role_cols = [schema.group_column, schema.yield_column]
        if schema.id_column is not None:
            role_cols.append(schema.id_column)
        missing = [c for c in role_cols if c not in header]
        if schema.feature_columns is not None:
            missing += [c for c in schema.feature_columns if c not in header]
            feature_cols = list(schema.feature_columns)
        else:
            feature_cols = [h for h in header if h not in role_cols]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        if not feature_cols:
            raise DataError(f"{path}: no feature columns")
        pos = {h: i for i, h in enumerate(header)}
        fpos = [pos[c] for c in feature_cols]
        ids, groups, rows, yields = [], [], [], []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {r} (line {r + 1}): {len(rec)} cells, header has {len(header)}")
            g = rec[pos[schema.group_column]].strip()
            if not g:
                raise DataError(f"row {r} (line {r + 1}), column {schema.group_column!r}: empty group key")
            ycell = rec[pos[schema.yield_column]].strip()
            if not ycell:
                raise DataError(f"row {r} (line {r + 1}), column {schema.yield_column!r}: missing yield")
            yv = _parse_float(ycell, r, schema.yield_column)
            if not 0.0 <= yv <= 100.0:
                raise DataError(f"row {r} (line {r + 1}), column {schema.yield_column!r}: yield {yv} outside [0, 100]")
            rows.append([_parse_float(rec[i].strip(), r, c) for i, c in zip(fpos, feature_cols)])
            yields.append(yv)
            groups.append(g)
            ids.append(rec[pos[schema.id_column]].strip() if schema.id_column is not None else str(r - 1))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return DescriptorTable(
        np.array(ids, dtype=str),
        np.array(groups, dtype=str),
        np.array(rows, dtype=np.float64),
        np.array(yields, dtype=np.float64),
        tuple(feature_cols),
    )


def write_descriptor_table(table: DescriptorTable, path: str | Path, schema: Schema | None = None) -> None:
    """Write ``table`` in the standard layout; floats use shortest round-trip repr."""
    schema = schema or Schema()
    id_col = schema.id_column or "id"
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_col, schema.group_column, *table.feature_names, schema.yield_column])
        for rid, g, x, y in zip(table.row_ids, table.groups, table.features, table.yields):
            w.writerow([rid, g, *(repr(float(v)) for v in x), repr(float(y))])


def encode_reaction(
    components: Sequence[ComponentDescriptors], role_lengths: Mapping[str, int] | None = None
) -> np.ndarray:
    """Concatenate component descriptor vectors in the given order.

    ``role_lengths`` pins the dataset-wide descriptor length per role; a
    component whose length disagrees is rejected.
    """
    if not components:
        raise DataError("cannot encode a reaction with no components")
    if role_lengths is not None:
        for c in components:
            want = role_lengths.get(c.component_role)
            if want is not None and want != len(c.values):
                raise DataError(
                    f"component {c.component_role!r} has {len(c.values)} descriptors, dataset uses {want}"
                )
    return np.concatenate([np.asarray(c.values, dtype=np.float64) for c in components])


def make_group_split(table: DescriptorTable, n_train: int, n_val: int, seed: int) -> SplitSpec:
    """Shuffle the sorted group keys with a seeded PCG64 stream and cut it.

    The first ``n_train`` shuffled groups train, the next ``n_val`` validate,
    and the rest are test groups.
    """
    keys = table.group_keys
    if n_train < 0 or n_val < 0:
        raise ValueError("group counts must be non-negative")
    if n_train + n_val >= len(keys):
        raise DataError(f"n_train + n_val = {n_train + n_val} leaves no test group among {len(keys)} groups")
    order = make_rng(seed).permutation(len(keys))
    shuffled = [keys[i] for i in order]
    return SplitSpec(
        frozenset(shuffled[:n_train]),
        frozenset(shuffled[n_train : n_train + n_val]),
        frozenset(shuffled[n_train + n_val :]),
    )


def sample_task(
    table: DescriptorTable,
    groups: Iterable[str],
    k: int,
    rng: np.random.Generator,
    rows: np.ndarray | None = None,
) -> Task:
    """Pick a group uniformly, then ``k`` support rows without replacement.

    The query set is every remaining row of that group. ``rows`` optionally
    restricts the candidate rows (e.g. to a reduced training set).
    """
    groups = sorted(set(groups))
    if not groups:
        raise DataError("no groups to sample a task from")
    if k < 1:
        raise ValueError("k must be >= 1")
    g = groups[int(rng.integers(len(groups)))]
    idx = table.indices_of(g)
    if rows is not None:
        idx = np.intersect1d(idx, rows)
    if idx.size <= k:
        raise DataError(f"group {g!r} has {idx.size} rows; need at least k + 1 = {k + 1}")
    perm = rng.permutation(idx.size)
    return Task(g, tuple(int(i) for i in idx[perm[:k]]), tuple(int(i) for i in np.sort(idx[perm[k:]])))


def iter_tasks(
    table: DescriptorTable,
    groups: Iterable[str],
    k: int,
    rng: np.random.Generator,
    rows: np.ndarray | None = None,
) -> Iterator[Task]:
    """Endless stream of :func:`sample_task` draws."""
    groups = sorted(set(groups))
    while True:
        yield sample_task(table, groups, k, rng, rows)
