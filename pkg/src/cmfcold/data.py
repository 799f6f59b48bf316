"""Ratings and side-information containers shared by the models."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

BINARY = "binary"
CONTINUOUS = "continuous"


def id_sort_key(label: str):
    """Numeric ids sort numerically, everything else lexicographically after them."""
    try:
        return (0, int(label), "")
    except (TypeError, ValueError):
        return (1, 0, str(label))


def sorted_ids(labels: Iterable) -> np.ndarray:
    uniq = {str(x) for x in labels}
    return np.array(sorted(uniq, key=id_sort_key), dtype=str)


@dataclass(eq=False)
class RatingsMatrix:
    """Sparse explicit ratings.

    ``users`` and ``items`` hold 0-based row/column indices; ``user_ids`` and
    ``item_ids`` map those indices back to the original labels. Users or items
    without any rating may be present in the id maps.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    duplicate_count: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        self.user_ids = np.asarray(self.user_ids, dtype=str)
        self.item_ids = np.asarray(self.item_ids, dtype=str)
        if not (self.users.shape == self.items.shape == self.ratings.shape):
            raise ValueError("users, items and ratings must have equal length")
        if self.users.size:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            keys = self.users * max(self.n_items, 1) + self.items
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (user, item) pairs")

    @classmethod
    def from_labels(cls, user_labels, item_labels, ratings,
                    user_ids: Optional[Sequence] = None,
                    item_ids: Optional[Sequence] = None) -> "RatingsMatrix":
        """Build from label triples, indexing ids in natural sort order.

        Explicit ``user_ids``/``item_ids`` fix the index (and may include
        entities without ratings); every label must then appear in them.
        """
        user_labels = np.asarray(user_labels, dtype=str)
        item_labels = np.asarray(item_labels, dtype=str)
        user_ids = sorted_ids(user_labels) if user_ids is None else np.asarray(user_ids, dtype=str)
        item_ids = sorted_ids(item_labels) if item_ids is None else np.asarray(item_ids, dtype=str)
        return cls(_lookup(user_ids, user_labels, "user"),
                   _lookup(item_ids, item_labels, "item"),
                   ratings, user_ids, item_ids)

    @property
    def n_users(self) -> int:
        return int(self.user_ids.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.ratings.shape[0])

    def __len__(self):
        return self.nnz

    @cached_property
    def by_user(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.ratings, (self.users, self.items)),
                             shape=(self.n_users, self.n_items))

    @cached_property
    def by_item(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.ratings, (self.items, self.users)),
                             shape=(self.n_items, self.n_users))

    def user_labels(self) -> np.ndarray:
        return self.user_ids[self.users]

    def item_labels(self) -> np.ndarray:
        return self.item_ids[self.items]

    def subset(self, mask: np.ndarray) -> "RatingsMatrix":
        """Entries selected by ``mask``, reindexed to the ids they use."""
        return RatingsMatrix.from_labels(self.user_labels()[mask],
                                         self.item_labels()[mask],
                                         self.ratings[mask])

    def with_ids(self, user_ids: Sequence, item_ids: Sequence) -> "RatingsMatrix":
        """Same entries reindexed against wider id maps."""
        return RatingsMatrix.from_labels(self.user_labels(), self.item_labels(),
                                         self.ratings, user_ids, item_ids)

    def dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full((self.n_users, self.n_items), fill)
        out[self.users, self.items] = self.ratings
        return out


def _lookup(ids: np.ndarray, labels: np.ndarray, what: str) -> np.ndarray:
    index = {label: i for i, label in enumerate(ids.tolist())}
    try:
        return np.fromiter((index[x] for x in labels.tolist()), dtype=np.int64,
                           count=labels.shape[0])
    except KeyError as exc:
        raise ValueError(f"{what} id {exc.args[0]!r} is not in the id map") from None


@dataclass(eq=False)
class SideInfoMatrix:
    """Dense attribute matrix with per-column kinds and per-row availability.

    Rows flagged absent in ``row_present`` hold zeros and are excluded from
    every loss term.
    """

    values: np.ndarray
    column_kinds: np.ndarray
    row_present: Optional[np.ndarray] = None
    row_ids: Optional[np.ndarray] = None
    column_names: Optional[list] = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64, ndmin=2)
        n_rows, n_cols = self.values.shape
        kinds = np.asarray(self.column_kinds, dtype=str)
        if kinds.ndim == 0:
            kinds = np.full(n_cols, str(kinds))
        if kinds.shape != (n_cols,):
            raise ValueError("column_kinds must have one entry per column")
        bad = set(kinds.tolist()) - {BINARY, CONTINUOUS}
        if bad:
            raise ValueError(f"unknown column kinds {sorted(bad)}")
        self.column_kinds = kinds
        if self.row_present is None:
            self.row_present = np.ones(n_rows, dtype=bool)
        self.row_present = np.asarray(self.row_present, dtype=bool)
        if self.row_present.shape != (n_rows,):
            raise ValueError("row_present must have one entry per row")
        self.values[~self.row_present] = 0.0
        if self.row_ids is not None:
            self.row_ids = np.asarray(self.row_ids, dtype=str)
            if self.row_ids.shape != (n_rows,):
                raise ValueError("row_ids must have one entry per row")
        if self.column_names is None:
            self.column_names = [f"x{j}" for j in range(n_cols)]
        binary = self.binary_mask
        if binary.any():
            block = self.values[self.row_present][:, binary]
            if not np.all((block == 0.0) | (block == 1.0)):
                raise ValueError("binary columns may only contain 0 or 1")

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.values.shape[1])

    @property
    def binary_mask(self) -> np.ndarray:
        return self.column_kinds == BINARY

    @property
    def n_present_entries(self) -> int:
        return int(self.row_present.sum()) * self.n_cols

    def align(self, labels: Sequence) -> "SideInfoMatrix":
        """Rows reordered to ``labels``; labels without a row become absent rows."""
        if self.row_ids is None:
            raise ValueError("side information has no row ids to align on")
        index = {label: i for i, label in enumerate(self.row_ids.tolist())}
        labels = np.asarray(labels, dtype=str)
        src = np.array([index.get(x, -1) for x in labels.tolist()], dtype=np.int64)
        found = src >= 0
        values = np.zeros((labels.shape[0], self.n_cols))
        values[found] = self.values[src[found]]
        present = np.zeros(labels.shape[0], dtype=bool)
        present[found] = self.row_present[src[found]]
        return SideInfoMatrix(values, self.column_kinds, present, labels,
                              list(self.column_names))

    def row(self, label: str) -> Optional[np.ndarray]:
        """Attribute vector for ``label`` or None when unavailable."""
        i = self._row_index.get(str(label), -1)
        if i < 0 or not self.row_present[i]:
            return None
        return self.values[i].copy()

    @cached_property
    def _row_index(self) -> dict:
        return {label: i for i, label in enumerate(self.row_ids.tolist())} if self.row_ids is not None else {}

    def rows_for(self, labels: Sequence) -> tuple:
        """(values, available) for many labels at once."""
        src = np.array([self._row_index.get(str(x), -1) for x in labels], dtype=np.int64)
        found = src >= 0
        found[found] = self.row_present[src[found]]
        out = np.zeros((len(src), self.n_cols))
        out[found] = self.values[src[found]]
        return out, found

    def present_labels(self) -> np.ndarray:
        if self.row_ids is None:
            return np.array([], dtype=str)
        return self.row_ids[self.row_present]
