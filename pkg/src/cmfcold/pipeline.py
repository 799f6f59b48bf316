"""Data ingestion, attribute preprocessing and the warm/cold four-way split."""
from __future__ import annotations

import io
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import BINARY, CONTINUOUS, RatingsMatrix, SideInfoMatrix, id_sort_key, sorted_ids

_logger = logging.getLogger(__name__)

ROLES = ("id", "categorical", "continuous", "binary", "ignore")

Source = Union[str, os.PathLike, Iterable[str]]


def _lines(source: Source) -> List[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="latin-1") as fh:
            return fh.read().splitlines()
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return source.read().splitlines()
    return [line.rstrip("\n") for line in source]


def compute_global_mean(train: RatingsMatrix) -> float:
    if train.nnz == 0:
        raise ValueError("cannot compute the mean of an empty ratings set")
    return math.fsum(train.ratings.tolist()) / train.nnz


# ---------------------------------------------------------------------------
# ratings


def load_ratings(source: Source, sep: str = "::",
                 columns: Sequence[str] = ("user", "item", "rating"),
                 skip_header: bool = False) -> RatingsMatrix:
    """Parse delimited ``user, item, rating[, ...]`` records.

    ``columns`` names the leading fields; trailing fields such as timestamps
    are ignored. Ids are reindexed in natural order. When a (user, item)
    pair repeats, the last record wins and ``duplicate_count`` says how many
    records were dropped.
    """
    cols = list(columns)
    try:
        iu, ii, ir = cols.index("user"), cols.index("item"), cols.index("rating")
    except ValueError:
        raise ValueError("columns must name 'user', 'item' and 'rating'") from None
    lines = _lines(source)
    if skip_header and lines:
        lines = lines[1:]
    latest: Dict[Tuple[str, str], float] = {}
    duplicates = 0
    for lineno, line in enumerate(lines, start=1 + int(skip_header)):
        if not line.strip():
            continue
        fields = line.split(sep)
        if len(fields) < len(cols):
            raise ValueError(f"line {lineno}: expected at least {len(cols)} fields")
        user, item = fields[iu].strip(), fields[ii].strip()
        if not user or not item:
            raise ValueError(f"line {lineno}: empty id")
        try:
            rating = float(fields[ir])
        except ValueError:
            raise ValueError(f"line {lineno}: cannot parse rating {fields[ir]!r}") from None
        key = (user, item)
        if key in latest:
            duplicates += 1
            del latest[key]  # keep insertion order of the last occurrence
        latest[key] = rating
    if not latest:
        raise ValueError("no ratings found in input")
    if duplicates:
        warnings.warn(f"{duplicates} duplicate (user, item) records; kept the last of each")
    users = [k[0] for k in latest]
    items = [k[1] for k in latest]
    out = RatingsMatrix.from_labels(users, items, list(latest.values()))
    out.duplicate_count = duplicates
    return out


# ---------------------------------------------------------------------------
# attribute tables


@dataclass
class RawTable:
    columns: List[str]
    rows: List[List[str]]
    schema: Dict[str, str]

    def __post_init__(self):
        for name, role in self.schema.items():
            if role not in ROLES:
                raise ValueError(f"column {name!r}: unknown role {role!r}")
            if name not in self.columns:
                raise ValueError(f"schema column {name!r} not in table")
        ids = [c for c in self.columns if self.schema.get(c) == "id"]
        if len(ids) != 1:
            raise ValueError("schema must declare exactly one id column")
        self.id_column = ids[0]
        j = self.columns.index(self.id_column)
        for r, row in enumerate(self.rows):
            if not row[j].strip():
                raise ValueError(f"row {r}: empty id")

    def column(self, name: str) -> List[str]:
        j = self.columns.index(name)
        return [row[j] for row in self.rows]


def parse_schema(text: str) -> Dict[str, str]:
    """``"user_id:id, gender:categorical, ..."`` -> ordered mapping."""
    schema = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, role = part.partition(":")
        schema[name.strip()] = role.strip() or "ignore"
    return schema


def load_table(source: Source, sep: str, schema: Dict[str, str],
               header: bool = False) -> RawTable:
    """Delimited attribute table. Without a header, columns follow ``schema`` order."""
    lines = [line for line in _lines(source) if line.strip()]
    if header:
        columns = [c.strip() for c in lines[0].split(sep)]
        lines = lines[1:]
    else:
        columns = list(schema)
    rows = []
    for lineno, line in enumerate(lines, start=1):
        fields = [f.strip() for f in line.split(sep)]
        if len(fields) < len(columns):
            raise ValueError(f"line {lineno}: expected {len(columns)} fields, got {len(fields)}")
        rows.append(fields[: len(columns)])
    return RawTable(columns, rows, dict(schema))


class CategoricalEncoder:
    """One-hot expansion of categorical columns; binary and continuous columns pass through."""

    def __init__(self):
        self.categories: Dict[str, List[str]] = {}
        self.columns: List[Tuple[str, str]] = []

    def fit(self, table: RawTable) -> "CategoricalEncoder":
        self.categories = {}
        self.columns = []
        for name in table.columns:
            role = table.schema.get(name, "ignore")
            if role == "categorical":
                values = sorted({v for v in table.column(name) if v != ""}, key=id_sort_key)
                if not values:
                    raise ValueError(f"categorical column {name!r} has no categories")
                self.categories[name] = values
                self.columns.extend((f"{name}={v}", BINARY) for v in values)
            elif role in ("binary", "continuous"):
                self.columns.append((name, BINARY if role == "binary" else CONTINUOUS))
        return self

    def transform(self, table: RawTable) -> SideInfoMatrix:
        blocks = []
        n = len(table.rows)
        unseen = 0
        for name in table.columns:
            role = table.schema.get(name, "ignore")
            if role == "categorical":
                cats = self.categories[name]
                pos = {c: j for j, c in enumerate(cats)}
                block = np.zeros((n, len(cats)))
                for r, v in enumerate(table.column(name)):
                    j = pos.get(v)
                    if j is None:
                        unseen += 1
                    else:
                        block[r, j] = 1.0
                blocks.append(block)
            elif role in ("binary", "continuous"):
                try:
                    blocks.append(np.array([float(v) for v in table.column(name)])[:, None])
                except ValueError:
                    raise ValueError(f"column {name!r} has non-numeric values") from None
        if unseen:
            warnings.warn(f"{unseen} categorical values unseen at fit time were encoded as zeros")
        values = np.hstack(blocks) if blocks else np.zeros((n, 0))
        return SideInfoMatrix(values, np.array([k for _, k in self.columns]),
                              row_ids=np.array(table.column(table.id_column), dtype=str),
                              column_names=[c for c, _ in self.columns])


def binarize_categoricals(table: RawTable,
                          encoder: Optional[CategoricalEncoder] = None) -> SideInfoMatrix:
    """One-hot encode categorical columns as binary ``<col>=<category>`` columns."""
    encoder = encoder or CategoricalEncoder().fit(table)
    return encoder.transform(table)


def load_long_attributes(path, sep: str = ",", id_column: int = 0, attr_column: int = 1,
                         value_column: int = 2, header: bool = True) -> SideInfoMatrix:
    """Pivot ``id, attribute, value`` records (e.g. tag-genome scores) to a dense matrix."""
    import pandas as pd

    frame = pd.read_csv(path, sep=sep, header=0 if header else None,
                        usecols=[id_column, attr_column, value_column],
                        dtype={0: str}, engine="c" if len(sep) == 1 else "python")
    frame.columns = ["id", "attr", "value"]
    frame["id"] = frame["id"].astype(str)
    wide = frame.pivot_table(index="id", columns="attr", values="value", aggfunc="last")
    ids = sorted(wide.index.tolist(), key=id_sort_key)
    wide = wide.loc[ids]
    present = ~wide.isna().all(axis=1).to_numpy()
    values = wide.fillna(0.0).to_numpy(dtype=np.float64)
    return SideInfoMatrix(values, CONTINUOUS, present, np.array(ids, dtype=str),
                          [str(c) for c in wide.columns])


def load_wide_attributes(source: Source, sep: str, schema: Dict[str, str],
                         header: bool = False) -> SideInfoMatrix:
    return binarize_categoricals(load_table(source, sep, schema, header))


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaTransform:
    means: np.ndarray
    basis: np.ndarray  # (n_features, n_components), orthonormal columns
    explained_variance: np.ndarray

    def transform(self, values) -> np.ndarray:
        return (np.atleast_2d(values) - self.means) @ self.basis

    def inverse_transform(self, reduced) -> np.ndarray:
        return np.atleast_2d(reduced) @ self.basis.T + self.means


def pca_reduce(matrix: SideInfoMatrix, n_components: int) -> Tuple[SideInfoMatrix, PcaTransform]:
    """Project present rows onto the leading principal directions.

    Columns are mean-centered over present rows; absent rows stay absent.
    Each basis vector's largest-magnitude coordinate is made positive so the
    result does not depend on the SVD's sign choice.
    """
    rows = np.flatnonzero(matrix.row_present)
    X = matrix.values[rows]
    if n_components < 1 or n_components > min(X.shape):
        raise ValueError(f"n_components must be in [1, {min(X.shape)}], got {n_components}")
    means = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - means, full_matrices=False)
    basis = vt[:n_components].T.copy()
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(n_components)])
    flip[flip == 0] = 1.0
    basis *= flip
    explained = s[:n_components] ** 2 / max(X.shape[0] - 1, 1)
    transform = PcaTransform(means, basis, explained)
    reduced = np.zeros((matrix.n_rows, n_components))
    reduced[rows] = transform.transform(X)
    out = SideInfoMatrix(reduced, CONTINUOUS, matrix.row_present.copy(), matrix.row_ids,
                         [f"pc{j + 1}" for j in range(n_components)])
    return out, transform


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    fraction_new_users: float = 0.25
    fraction_new_items: float = 0.25
    min_test_ratings_per_user: int = 5
    rng_seed: int = 1
    # share of warm (old user, old item) ratings held out for the warm test set
    fraction_warm_test: float = 0.15

    def __post_init__(self):
        for name in ("fraction_new_users", "fraction_new_items", "fraction_warm_test"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.min_test_ratings_per_user < 1:
            raise ValueError("min_test_ratings_per_user must be >= 1")


SPLIT_NAMES = ("train", "test_warm", "test_new_users", "test_new_items", "test_new_both")
SCENARIO_OF = {"test_warm": "warm", "test_new_users": "new-users",
               "test_new_items": "new-items", "test_new_both": "new-both"}


@dataclass
class FourWaySplit:
    train: RatingsMatrix
    test_warm: RatingsMatrix
    test_new_users: RatingsMatrix
    test_new_items: RatingsMatrix
    test_new_both: RatingsMatrix

    def sets(self) -> Dict[str, RatingsMatrix]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def test_sets(self) -> Dict[str, RatingsMatrix]:
        return {SCENARIO_OF[name]: getattr(self, name) for name in SPLIT_NAMES[1:]}

    def summary(self) -> List[Tuple[str, int, int, int]]:
        out = []
        for name, r in self.sets().items():
            out.append((name, r.nnz, int(np.unique(r.users).size), int(np.unique(r.items).size)))
        return out


def _min_per_user(mask, users, minimum):
    counts = np.bincount(users[mask], minlength=users.max() + 1 if users.size else 0)
    return mask & (counts[users] >= minimum)


def _empty_like(ratings: RatingsMatrix) -> RatingsMatrix:
    return RatingsMatrix([], [], [], [], [])


def _subset(ratings, mask):
    return ratings.subset(mask) if mask.any() else _empty_like(ratings)


def four_way_split(ratings: RatingsMatrix, item_attr_available, spec: SplitSpec = SplitSpec()) -> FourWaySplit:
    """Training set plus warm, new-user, new-item and new-both test sets.

    New users are drawn uniformly from all users and new items uniformly from
    items with attributes. Ratings among the remaining users and items form the
    warm pool; ``fraction_warm_test`` of it is held out. Test users with fewer
    than ``min_test_ratings_per_user`` ratings in a test set are dropped from
    that set.
    """
    available = np.asarray(item_attr_available, dtype=bool)
    if available.shape != (ratings.n_items,):
        raise ValueError("item_attr_available needs one flag per item")
    rng = np.random.default_rng(spec.rng_seed)
    u, i = ratings.users, ratings.items
    n_new_users = int(round(spec.fraction_new_users * ratings.n_users))
    eligible = np.flatnonzero(available)
    n_new_items = int(round(spec.fraction_new_items * eligible.size))
    if spec.fraction_new_items > 0 and eligible.size == 0:
        raise ValueError("fraction_new_items > 0 but no item has attributes")
    new_user = np.zeros(ratings.n_users, dtype=bool)
    new_user[rng.choice(ratings.n_users, n_new_users, replace=False)] = True
    new_item = np.zeros(ratings.n_items, dtype=bool)
    new_item[rng.choice(eligible, n_new_items, replace=False)] = True

    pool = ~new_user[u] & ~new_item[i]
    held = pool & (rng.random(ratings.nnz) < spec.fraction_warm_test)
    train = pool & ~held
    if not train.any():
        raise ValueError("training set is empty; lower the new-user/new-item/warm-test fractions")
    in_train_user = np.bincount(u[train], minlength=ratings.n_users) > 0
    in_train_item = np.bincount(i[train], minlength=ratings.n_items) > 0
    orphan = held & ~(in_train_user[u] & in_train_item[i])
    train |= orphan
    held &= ~orphan
    in_train_user = np.bincount(u[train], minlength=ratings.n_users) > 0
    in_train_item = np.bincount(i[train], minlength=ratings.n_items) > 0

    k = spec.min_test_ratings_per_user
    warm = _min_per_user(held, u, k)
    new_users = _min_per_user(new_user[u] & in_train_item[i], u, k)
    new_items = _min_per_user(~new_user[u] & new_item[i] & in_train_user[u], u, k)
    nu_final = np.bincount(u[new_users], minlength=ratings.n_users) > 0
    ni_final = np.bincount(i[new_items], minlength=ratings.n_items) > 0
    new_both = _min_per_user(nu_final[u] & ni_final[i], u, k)

    split = FourWaySplit(_subset(ratings, train), _subset(ratings, warm),
                         _subset(ratings, new_users), _subset(ratings, new_items),
                         _subset(ratings, new_both))
    for name, n_r, n_u, n_i in split.summary():
        _logger.info("%-15s %9d ratings %6d users %6d items", name, n_r, n_u, n_i)
    return split


def write_split(split: FourWaySplit, out_dir) -> Dict[str, Path]:
    """Five ``<set>.tsv`` manifests with global ids, plus ``summary.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, r in split.sets().items():
        path = out_dir / f"{name}.tsv"
        with open(path, "w") as fh:
            fh.write("user_id\titem_id\trating\n")
            for a, b, x in zip(r.user_labels().tolist(), r.item_labels().tolist(), r.ratings.tolist()):
                fh.write(f"{a}\t{b}\t{x!r}\n")
        paths[name] = path
    with open(out_dir / "summary.tsv", "w") as fh:
        fh.write("set\tratings\tusers\titems\n")
        for row in split.summary():
            fh.write("\t".join(map(str, row)) + "\n")
    paths["summary"] = out_dir / "summary.tsv"
    return paths


def read_manifest(path) -> RatingsMatrix:
    lines = _lines(path)[1:]
    if not lines:
        return RatingsMatrix([], [], [], [], [])
    users, items, ratings = [], [], []
    for line in lines:
        a, b, x = line.split("\t")
        users.append(a)
        items.append(b)
        ratings.append(float(x))
    return RatingsMatrix.from_labels(users, items, ratings)


def read_split(out_dir) -> FourWaySplit:
    out_dir = Path(out_dir)
    missing = [n for n in SPLIT_NAMES if not (out_dir / f"{n}.tsv").exists()]
    if missing:
        raise FileNotFoundError(f"missing split manifests in {out_dir}: {', '.join(missing)}")
    return FourWaySplit(*(read_manifest(out_dir / f"{n}.tsv") for n in SPLIT_NAMES))


def prepare_training(train: RatingsMatrix, user_side: Optional[SideInfoMatrix] = None,
                     item_side: Optional[SideInfoMatrix] = None, scope: str = "all"):
    """Model index and aligned attribute matrices for fitting.

    With ``scope="all"`` every user/item with attributes joins the model index
    even without ratings, so its attributes shape ``C``/``D``. With
    ``scope="train"`` only entities with training ratings are used.
    """
    if scope not in ("all", "train"):
        raise ValueError("scope must be 'all' or 'train'")
    user_ids, item_ids = train.user_ids, train.item_ids
    if scope == "all":
        if user_side is not None:
            user_ids = sorted_ids(np.concatenate([user_ids, user_side.present_labels()]))
        if item_side is not None:
            item_ids = sorted_ids(np.concatenate([item_ids, item_side.present_labels()]))
    X = train.with_ids(user_ids, item_ids)
    U = user_side.align(user_ids) if user_side is not None else None
    I = item_side.align(item_ids) if item_side is not None else None
    return X, U, I
