"""Collective matrix factorization with shared and non-shared latent factors.

Ratings ``X`` are factorized jointly with user attributes ``U`` and item
attributes ``I``::

    w_x * ||I_x(X - mu - m - n - A_x B_x^T)||^2 / |X|
  + w_u * ||U - S(A_u C^T)||^2 / |U|
  + w_i * ||I - S(B_i D^T)||^2 / |I|
  + lambda * (||A||^2 + ||B||^2 + ||C||^2 + ||D||^2 + ||m||^2 + ||n||^2)

where the factor columns are laid out as ``(attr, shared, main)``, ``A_x`` is
``(shared, main)``, ``A_u`` is ``(attr, shared)`` and ``S`` is the logistic
function on binary attribute columns and the identity elsewhere.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import _terms
from .data import BINARY, RatingsMatrix, SideInfoMatrix
from .optimizer import ObjectiveEvaluation, SolverConfig, lbfgs_minimize
from .pipeline import compute_global_mean
from .scoring import FactorScorer

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FactorPartition:
    k_attr: int = 0
    k_shared: int = 40
    k_main: int = 0

    def __post_init__(self):
        if min(self.k_attr, self.k_shared, self.k_main) < 0:
            raise ValueError("factor counts must be non-negative")
        if self.total < 1:
            raise ValueError("at least one latent factor is required")

    @property
    def total(self) -> int:
        return self.k_attr + self.k_shared + self.k_main

    @property
    def x_cols(self) -> slice:
        return slice(self.k_attr, self.total)

    @property
    def attr_cols(self) -> slice:
        return slice(0, self.k_attr + self.k_shared)

    @property
    def k_x(self) -> int:
        return self.k_shared + self.k_main

    @property
    def k_side(self) -> int:
        return self.k_attr + self.k_shared


@dataclass(frozen=True)
class CmfHyperparams:
    """Regularization, factorization weights and factor layout.

    ``lambda_A`` .. ``lambda_n`` override ``lambda_`` for one parameter block.
    With ``use_sigmoid=False`` binary columns are modelled with the identity
    link like continuous ones.
    """

    lambda_: float = 1e-4
    w_x: float = 1.0
    w_u: float = 1.0
    w_i: float = 1.0
    partition: FactorPartition = FactorPartition()
    use_sigmoid: bool = True
    lambda_A: Optional[float] = None
    lambda_B: Optional[float] = None
    lambda_C: Optional[float] = None
    lambda_D: Optional[float] = None
    lambda_m: Optional[float] = None
    lambda_n: Optional[float] = None

    def __post_init__(self):
        if self.lambda_ < 0 or any(v is not None and v < 0 for v in self.lambdas().values()):
            raise ValueError("regularization must be non-negative")
        if min(self.w_x, self.w_u, self.w_i) < 0:
            raise ValueError("weights must be non-negative")
        if max(self.w_x, self.w_u, self.w_i) <= 0:
            raise ValueError("at least one weight must be positive")

    def lambdas(self) -> dict:
        out = {}
        for name in "ABCDmn":
            override = getattr(self, f"lambda_{name}")
            out[name] = self.lambda_ if override is None else override
        return out


@dataclass(eq=False)
class CmfModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    m: np.ndarray
    n: np.ndarray
    mu: float
    hyper: CmfHyperparams = CmfHyperparams()
    user_ids: Optional[np.ndarray] = None
    item_ids: Optional[np.ndarray] = None
    user_column_kinds: Optional[np.ndarray] = None
    item_column_kinds: Optional[np.ndarray] = None
    # counts of present attribute entries, |U| and |I|, used by fold-in
    user_attr_entries: int = 0
    item_attr_entries: int = 0
    trace: list = field(default_factory=list)
    termination: str = ""

    def __post_init__(self):
        k = self.partition.total
        self.A = _as_matrix(self.A, k)
        self.B = _as_matrix(self.B, k)
        self.C = _as_matrix(self.C, self.partition.k_side)
        self.D = _as_matrix(self.D, self.partition.k_side)
        self.m = np.asarray(self.m, dtype=np.float64).ravel()
        self.n = np.asarray(self.n, dtype=np.float64).ravel()
        self.mu = float(self.mu)
        if self.user_ids is None:
            self.user_ids = np.arange(self.A.shape[0]).astype(str)
        if self.item_ids is None:
            self.item_ids = np.arange(self.B.shape[0]).astype(str)
        if self.user_column_kinds is None:
            self.user_column_kinds = np.full(self.C.shape[0], "continuous")
        if self.item_column_kinds is None:
            self.item_column_kinds = np.full(self.D.shape[0], "continuous")
        self.user_ids = np.asarray(self.user_ids, dtype=str)
        self.item_ids = np.asarray(self.item_ids, dtype=str)
        self.user_column_kinds = np.asarray(self.user_column_kinds, dtype=str)
        self.item_column_kinds = np.asarray(self.item_column_kinds, dtype=str)

    @property
    def partition(self) -> FactorPartition:
        return self.hyper.partition

    @property
    def A_x(self) -> np.ndarray:
        return self.A[:, self.partition.x_cols]

    @property
    def B_x(self) -> np.ndarray:
        return self.B[:, self.partition.x_cols]

    @property
    def A_u(self) -> np.ndarray:
        return self.A[:, self.partition.attr_cols]

    @property
    def B_i(self) -> np.ndarray:
        return self.B[:, self.partition.attr_cols]

    def fold_in_lambda(self, side: str) -> float:
        """Ridge penalty that makes fold-in agree with the training objective.

        The attribute loss is divided by ``|U|`` and weighted by ``w_u``, so
        the row-wise minimizer is a ridge solve with ``lambda * |U| / w_u``.
        """
        lam = self.hyper.lambdas()["A" if side == "user" else "B"]
        weight = self.hyper.w_u if side == "user" else self.hyper.w_i
        entries = self.user_attr_entries if side == "user" else self.item_attr_entries
        if weight <= 0 or entries <= 0:
            return lam
        return lam * entries / weight

    def predict(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return (self.mu + self.m[users] + self.n[items]
                + np.einsum("ij,ij->i", self.A_x[users], self.B_x[items]))

    def _fold_in(self, side, attrs, lambda_=None):
        factor = self.C if side == "user" else self.D
        kinds = self.user_column_kinds if side == "user" else self.item_column_kinds
        if factor.shape[0] == 0:
            raise ValueError(f"model was not trained with {side} attributes")
        lam = self.fold_in_lambda(side) if lambda_ is None else lambda_
        attrs = np.atleast_2d(np.asarray(attrs, dtype=np.float64))
        if self.hyper.use_sigmoid and np.any(kinds == BINARY):
            return np.vstack([cold_start_factors_sigmoid(row, factor, kinds, lam) for row in attrs])
        return _ridge_fold_in(attrs, factor, lam)

    def fold_in_user(self, attrs, lambda_=None) -> np.ndarray:
        """Factors in the ``A_x`` layout for new users (rows of ``attrs``)."""
        side = self._fold_in("user", attrs, lambda_)
        return _to_x_layout(side, self.partition)

    def fold_in_item(self, attrs, lambda_=None) -> np.ndarray:
        side = self._fold_in("item", attrs, lambda_)
        return _to_x_layout(side, self.partition)

    def scorer(self, user_side: Optional[SideInfoMatrix] = None,
               item_side: Optional[SideInfoMatrix] = None) -> FactorScorer:
        use_u = user_side is not None and self.C.shape[0] > 0
        use_i = item_side is not None and self.D.shape[0] > 0
        return FactorScorer(
            self.mu, self.user_ids, self.item_ids, self.A_x, self.B_x, self.m, self.n,
            user_side=user_side if use_u else None,
            user_fold_in=self.fold_in_user if use_u else None,
            item_side=item_side if use_i else None,
            item_fold_in=self.fold_in_item if use_i else None,
            weights=(self.hyper.w_x, self.hyper.w_u if self.C.shape[0] else None,
                     self.hyper.w_i if self.D.shape[0] else None))


def _as_matrix(a, cols):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        if a.shape[1] != cols:
            raise ValueError(f"expected {cols} columns, got {a.shape[1]}")
        return a
    if a.size == 0:
        return np.zeros((0, cols))
    return a.reshape(-1, cols)


def _to_x_layout(side_factors, partition: FactorPartition):
    out = np.zeros((side_factors.shape[0], partition.k_x))
    out[:, : partition.k_shared] = side_factors[:, partition.k_attr:]
    return out


def sigmoid_transform(x, column_kind: str):
    """Logistic function for binary columns, identity for continuous ones."""
    if column_kind == BINARY:
        return _terms.sigmoid(x)
    if column_kind == "continuous":
        return x
    raise ValueError(f"unknown column kind {column_kind!r}")


# ---------------------------------------------------------------------------
# objective


class _Problem:
    """Training data bound to a parameter layout."""

    def __init__(self, X: RatingsMatrix, U: Optional[SideInfoMatrix],
                 I: Optional[SideInfoMatrix], hyper: CmfHyperparams, mu: float):
        part = hyper.partition
        if U is not None and U.n_rows != X.n_users:
            raise ValueError(f"U has {U.n_rows} rows for {X.n_users} users")
        if I is not None and I.n_rows != X.n_items:
            raise ValueError(f"I has {I.n_rows} rows for {X.n_items} items")
        if hyper.w_x > 0 and X.nnz == 0:
            raise ValueError("ratings matrix is empty")
        self.X, self.U, self.I, self.hyper, self.mu = X, U, I, hyper, float(mu)
        self.R = _terms.RatingsIndex(X)
        self.scale_x = hyper.w_x / X.nnz if X.nnz else 0.0
        self.scale_u = hyper.w_u / U.n_present_entries if U is not None and U.n_present_entries else 0.0
        self.scale_i = hyper.w_i / I.n_present_entries if I is not None and I.n_present_entries else 0.0
        p = U.n_cols if U is not None else 0
        q = I.n_cols if I is not None else 0
        k = part.total
        self.layout = _terms.Layout({
            "A": (X.n_users, k), "B": (X.n_items, k), "m": (X.n_users,),
            "n": (X.n_items,), "C": (p, part.k_side), "D": (q, part.k_side)})
        self.lambdas = hyper.lambdas()

    def evaluate_params(self, P):
        part, hyper = self.hyper.partition, self.hyper
        grads = _terms.regularizer_gradient(P, self.lambdas)
        f_x = f_u = f_i = 0.0
        if self.scale_x:
            f_x, dAx, dBx, dm, dn = _terms.ratings_term(
                self.R, P["A"][:, part.x_cols], P["B"][:, part.x_cols],
                P["m"], P["n"], self.mu, self.scale_x)
            grads["A"][:, part.x_cols] += dAx
            grads["B"][:, part.x_cols] += dBx
            grads["m"] += dm
            grads["n"] += dn
        if self.scale_u and part.k_side:
            f_u, dF, dC = _terms.side_term(self.U, P["A"][:, part.attr_cols], P["C"],
                                           self.scale_u, hyper.use_sigmoid)
            grads["A"][:, part.attr_cols] += dF
            grads["C"] += dC
        if self.scale_i and part.k_side:
            f_i, dF, dD = _terms.side_term(self.I, P["B"][:, part.attr_cols], P["D"],
                                           self.scale_i, hyper.use_sigmoid)
            grads["B"][:, part.attr_cols] += dF
            grads["D"] += dD
        value = f_x + f_u + f_i + _terms.regularizer(P, self.lambdas)
        return value, grads

    def __call__(self, theta) -> ObjectiveEvaluation:
        value, grads = self.evaluate_params(self.layout.unpack(theta))
        return ObjectiveEvaluation(value, self.layout.pack(grads))

    def initial_params(self, seed) -> dict:
        part = self.hyper.partition
        lay = self.layout.shapes
        rng = np.random.default_rng(seed)
        A, B, C, D = _terms.normal_init(rng, [lay["A"], lay["B"], lay["C"], lay["D"]], part.total)
        # rows with neither ratings nor attributes only feel the regularizer
        A[~self._has_data("user")] = 0.0
        B[~self._has_data("item")] = 0.0
        return {"A": A, "B": B, "C": C, "D": D,
                "m": np.zeros(lay["m"]), "n": np.zeros(lay["n"])}

    def _has_data(self, side):
        if side == "user":
            counts = np.bincount(self.X.users, minlength=self.X.n_users)
            side_info, scale = self.U, self.scale_u
        else:
            counts = np.bincount(self.X.items, minlength=self.X.n_items)
            side_info, scale = self.I, self.scale_i
        has = counts > 0
        if side_info is not None and scale > 0:
            has = has | side_info.row_present
        return has

    def to_model(self, P, trace=()) -> CmfModel:
        U, I = self.U, self.I
        return CmfModel(
            A=P["A"].copy(), B=P["B"].copy(), C=P["C"].copy(), D=P["D"].copy(),
            m=P["m"].copy(), n=P["n"].copy(), mu=self.mu, hyper=self.hyper,
            user_ids=self.X.user_ids, item_ids=self.X.item_ids,
            user_column_kinds=U.column_kinds if U is not None else None,
            item_column_kinds=I.column_kinds if I is not None else None,
            user_attr_entries=U.n_present_entries if U is not None else 0,
            item_attr_entries=I.n_present_entries if I is not None else 0,
            trace=list(trace))


def _params_of(model: CmfModel) -> dict:
    return {"A": model.A, "B": model.B, "C": model.C, "D": model.D, "m": model.m, "n": model.n}


def cmf_objective(model: CmfModel, X: RatingsMatrix, U: Optional[SideInfoMatrix] = None,
                  I: Optional[SideInfoMatrix] = None,
                  hyper: Optional[CmfHyperparams] = None) -> ObjectiveEvaluation:
    """Objective value and flat gradient (order A, B, m, n, C, D); ``mu`` is held fixed."""
    hyper = hyper or model.hyper
    problem = _Problem(X, U, I, hyper, model.mu)
    P = _params_of(model)
    for name, shape in problem.layout.shapes.items():
        if P[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {P[name].shape}, expected {shape}")
    value, grads = problem.evaluate_params(P)
    return ObjectiveEvaluation(value, problem.layout.pack(grads))


def pack_params(model: CmfModel) -> np.ndarray:
    P = _params_of(model)
    shapes = {name: P[name].shape for name in P}
    return _terms.Layout(shapes).pack(P)


def unpack_params(model: CmfModel, theta) -> CmfModel:
    P = _params_of(model)
    new = _terms.Layout({name: P[name].shape for name in P}).unpack(np.asarray(theta, dtype=np.float64))
    return replace(model, **{name: arr.copy() for name, arr in new.items()})


# ---------------------------------------------------------------------------
# fitting


def lbfgs_fit(X: RatingsMatrix, U: Optional[SideInfoMatrix] = None,
              I: Optional[SideInfoMatrix] = None,
              hyper: CmfHyperparams = CmfHyperparams(),
              config: Optional[SolverConfig] = None, init_seed: int = 1,
              mu: Optional[float] = None,
              callback: Optional[Callable[[int, float], None]] = None) -> CmfModel:
    """Fit all parameters jointly with L-BFGS (works with the sigmoid link)."""
    mu = compute_global_mean(X) if mu is None else mu
    problem = _Problem(X, U, I, hyper, mu)
    theta0 = problem.layout.pack(problem.initial_params(init_seed))
    result = lbfgs_minimize(problem, theta0, config or SolverConfig(), callback=callback)
    _logger.info("CMF L-BFGS: %d iterations, objective %.6g (%s)",
                 result.n_iterations, result.fun, result.termination.value)
    model = problem.to_model(problem.layout.unpack(result.x), result.trace)
    model.termination = result.termination.value
    return model


def als_row_solution(k_attr: int, k_shared: int, k_main: int,
                     other_x: Optional[np.ndarray], targets: Optional[np.ndarray], w_ratings: float,
                     attr_factors: Optional[np.ndarray], attr_row: Optional[np.ndarray], w_attrs: float,
                     lam: float, attr_gram: Optional[np.ndarray] = None, row: int = -1) -> np.ndarray:
    """Closed-form minimizer for one row of ``A`` (or ``B``).

    ``other_x`` holds the ``(shared, main)`` columns of the opposite factor
    matrix for the row's observed entries and ``targets`` the ratings net of
    mean and biases. ``attr_factors`` is ``C`` (or ``D``) restricted to the
    ``(attr, shared)`` columns. Solves the weighted ridge normal equations::

        (w_r Bx^T Bx (+) w_a C^T C + lam I) a = w_r Bx^T t (+) w_a C^T u

    where ``(+)`` places each block in its columns of ``a``.
    """
    K = k_attr + k_shared + k_main
    gram = lam * np.eye(K)
    rhs = np.zeros(K)
    used = False
    if other_x is not None and targets is not None and targets.size and w_ratings > 0:
        xs = slice(k_attr, K)
        gram[xs, xs] += w_ratings * (other_x.T @ other_x)
        rhs[xs] += w_ratings * (other_x.T @ targets)
        used = True
    if attr_row is not None and attr_factors is not None and w_attrs > 0 and attr_factors.shape[0]:
        us = slice(0, k_attr + k_shared)
        g = attr_factors.T @ attr_factors if attr_gram is None else attr_gram
        gram[us, us] += w_attrs * g
        rhs[us] += w_attrs * (attr_factors.T @ attr_row)
        used = True
    if not used:
        return np.zeros(K)
    try:
        return scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError):
        raise np.linalg.LinAlgError(
            f"normal equations for row {row} are singular; use lambda > 0") from None


def _update_factor_rows(F, other, csr, base_targets, side, attr_factor, part, w_r, w_a, lam):
    """ALS pass over all rows of ``F`` (users when ``csr`` is by user)."""
    K = part.total
    xs = part.x_cols
    other_x = other[:, xs]
    present = side.row_present if side is not None else None
    gram = attr_factor.T @ attr_factor if attr_factor is not None and attr_factor.shape[0] else None
    for r in range(F.shape[0]):
        lo, hi = csr.indptr[r], csr.indptr[r + 1]
        cols = csr.indices[lo:hi]
        attrs = side.values[r] if present is not None and present[r] else None
        F[r] = als_row_solution(part.k_attr, part.k_shared, part.k_main,
                                other_x[cols] if hi > lo else None,
                                base_targets[lo:hi] if hi > lo else None, w_r,
                                attr_factor, attrs, w_a, lam, gram, row=r)
    return F


def _update_side_factor(side, F, part, w_a, lam):
    """Closed form for C (or D): shared normal matrix, one right-hand side per attribute."""
    k_side = part.k_side
    rows = np.flatnonzero(side.row_present)
    Fp = F[rows][:, part.attr_cols]
    gram = w_a * (Fp.T @ Fp) + lam * np.eye(k_side)
    rhs = w_a * (Fp.T @ side.values[rows])
    try:
        return scipy.linalg.solve(gram, rhs, assume_a="pos").T.copy()
    except (np.linalg.LinAlgError, ValueError):
        raise np.linalg.LinAlgError("attribute factor normal equations are singular; use lambda > 0") from None


def als_fit(X: RatingsMatrix, U: Optional[SideInfoMatrix] = None,
            I: Optional[SideInfoMatrix] = None,
            hyper: CmfHyperparams = CmfHyperparams(), sweeps: int = 10,
            init_seed: int = 1, mu: Optional[float] = None,
            callback: Optional[Callable[[int, float], None]] = None) -> CmfModel:
    """Alternating least squares for the identity-link objective.

    One sweep updates A, B, C, D, then m and n, each by its exact block
    minimizer, so the objective never increases. ``trace`` holds the objective
    before the first sweep and after each sweep.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    for side in (U, I):
        if side is not None and hyper.use_sigmoid and side.binary_mask.any():
            raise ValueError("ALS needs the identity link; pass use_sigmoid=False or use lbfgs_fit")
    mu = compute_global_mean(X) if mu is None else mu
    problem = _Problem(X, U, I, hyper, mu)
    part = hyper.partition
    lam = problem.lambdas
    P = problem.initial_params(init_seed)
    by_user, by_item = X.by_user.tocsr(), X.by_item.tocsr()
    by_user.sort_indices()
    by_item.sort_indices()
    u_rows = np.repeat(np.arange(X.n_users), np.diff(by_user.indptr))
    i_rows = np.repeat(np.arange(X.n_items), np.diff(by_item.indptr))
    trace = [problem.evaluate_params(P)[0]]
    w_r = problem.scale_x
    for sweep in range(1, sweeps + 1):
        A, B, C, D, m, n = (P[k] for k in "ABCDmn")
        t_user = by_user.data - mu - m[u_rows] - n[by_user.indices]
        _update_factor_rows(A, B, by_user, t_user, U, C if U is not None else None,
                            part, w_r, problem.scale_u, lam["A"])
        t_item = by_item.data - mu - n[i_rows] - m[by_item.indices]
        _update_factor_rows(B, A, by_item, t_item, I, D if I is not None else None,
                            part, w_r, problem.scale_i, lam["B"])
        if U is not None and U.n_cols:
            P["C"] = (_update_side_factor(U, A, part, problem.scale_u, lam["C"])
                      if problem.scale_u else np.zeros_like(C))
        if I is not None and I.n_cols:
            P["D"] = (_update_side_factor(I, B, part, problem.scale_i, lam["D"])
                      if problem.scale_i else np.zeros_like(D))
        dots = np.einsum("ij,ij->i", A[X.users][:, part.x_cols], B[X.items][:, part.x_cols])
        P["m"] = _bias_update(X.users, X.ratings - mu - n[X.items] - dots, X.n_users, w_r, lam["m"])
        P["n"] = _bias_update(X.items, X.ratings - mu - P["m"][X.users] - dots, X.n_items, w_r, lam["n"])
        value = problem.evaluate_params(P)[0]
        trace.append(value)
        if callback is not None:
            callback(sweep, value)
        _logger.debug("ALS sweep %d: objective %.8g", sweep, value)
    model = problem.to_model(P, trace)
    model.termination = "sweeps_completed"
    return model


def _bias_update(index, resid, size, w_r, lam):
    num = w_r * np.bincount(index, weights=resid, minlength=size)
    den = w_r * np.bincount(index, minlength=size) + lam
    out = np.zeros(size)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# cold start


def _ridge_fold_in(attrs, factor, lam):
    k = factor.shape[1]
    gram = factor.T @ factor + lam * np.eye(k)
    rhs = factor.T @ np.atleast_2d(attrs).T
    try:
        sol = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError):
        raise np.linalg.LinAlgError("fold-in system is singular; use lambda > 0") from None
    return sol.T


def cold_start_user_factors(u_attrs, model: CmfModel, lambda_: Optional[float] = None) -> np.ndarray:
    """``(C^T C + lambda I)^-1 C^T u`` for a user known only by attributes.

    Returns the ``(attr, shared)`` block; the ``main`` block of a new user is
    zero. ``lambda_`` defaults to :meth:`CmfModel.fold_in_lambda`.
    """
    u_attrs = np.asarray(u_attrs, dtype=np.float64).ravel()
    if model.C.shape[0] == 0:
        raise ValueError("model was not trained with user attributes")
    if u_attrs.shape[0] != model.C.shape[0]:
        raise ValueError(f"expected {model.C.shape[0]} user attributes, got {u_attrs.shape[0]}")
    lam = model.fold_in_lambda("user") if lambda_ is None else lambda_
    return _ridge_fold_in(u_attrs, model.C, lam)[0]


def cold_start_item_factors(i_attrs, model: CmfModel, lambda_: Optional[float] = None) -> np.ndarray:
    i_attrs = np.asarray(i_attrs, dtype=np.float64).ravel()
    if model.D.shape[0] == 0:
        raise ValueError("model was not trained with item attributes")
    if i_attrs.shape[0] != model.D.shape[0]:
        raise ValueError(f"expected {model.D.shape[0]} item attributes, got {i_attrs.shape[0]}")
    lam = model.fold_in_lambda("item") if lambda_ is None else lambda_
    return _ridge_fold_in(i_attrs, model.D, lam)[0]


def cold_start_factors_sigmoid(attrs, attr_factor_matrix, column_kinds, lambda_: float,
                               config: Optional[SolverConfig] = None) -> np.ndarray:
    """Minimize ``||attrs - S(M a)||^2 + lambda ||a||^2`` from ``a = 0``."""
    attrs = np.asarray(attrs, dtype=np.float64).ravel()
    M = np.asarray(attr_factor_matrix, dtype=np.float64)
    binary = np.asarray(column_kinds, dtype=str) == BINARY
    if attrs.shape[0] != M.shape[0]:
        raise ValueError(f"expected {M.shape[0]} attributes, got {attrs.shape[0]}")

    def objective(a):
        z = M @ a
        p = z.copy()
        p[binary] = _terms.sigmoid(z[binary])
        e = p - attrs
        g = 2.0 * e
        g[binary] *= p[binary] * (1.0 - p[binary])
        return ObjectiveEvaluation(float(e @ e + lambda_ * (a @ a)), M.T @ g + 2.0 * lambda_ * a)

    config = config or SolverConfig(gradient_tolerance=1e-10, relative_objective_tolerance=1e-14,
                                    max_iterations=500)
    return lbfgs_minimize(objective, np.zeros(M.shape[1]), config).x


def cmf_predict(model: CmfModel, user_factors, item_factors,
                user_bias: float = 0.0, item_bias: float = 0.0) -> float:
    """``mu + m_u + n_i + <a_u, b_i>`` with both vectors in the ``(shared, main)`` layout."""
    a = np.asarray(user_factors, dtype=np.float64).ravel()
    b = np.asarray(item_factors, dtype=np.float64).ravel()
    k_x = model.partition.k_x
    if a.shape[0] != k_x or b.shape[0] != k_x:
        raise ValueError(f"factor vectors must have length {k_x} (shared + main)")
    return float(model.mu + user_bias + item_bias + a @ b)
