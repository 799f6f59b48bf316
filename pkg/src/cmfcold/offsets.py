"""The offsets model: attribute-driven latent factors plus free per-entity offsets.

Ratings are modelled as ``mu + m + n + (A + U C)(B + I D)^T``. A user without
ratings has a zero offset, so its factors are just ``u C``: a vector-matrix
product, with no linear system to solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import _terms
from .data import RatingsMatrix, SideInfoMatrix
from .optimizer import ObjectiveEvaluation, SolverConfig, lbfgs_minimize
from .pipeline import compute_global_mean
from .scoring import FactorScorer

_logger = logging.getLogger(__name__)


@dataclass(eq=False)
class OffsetsModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    m: np.ndarray
    n: np.ndarray
    mu: float
    lambda_: float = 1e-4
    lambda_offsets: Optional[float] = None
    user_ids: Optional[np.ndarray] = None
    item_ids: Optional[np.ndarray] = None
    # effective factors A + U C and B + I D for the training rows
    user_factors: Optional[np.ndarray] = None
    item_factors: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)
    termination: str = ""

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        k = self.A.shape[1]
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1, k)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1, k)
        self.D = np.asarray(self.D, dtype=np.float64).reshape(-1, k)
        self.m = np.asarray(self.m, dtype=np.float64).ravel()
        self.n = np.asarray(self.n, dtype=np.float64).ravel()
        self.mu = float(self.mu)
        if self.user_ids is None:
            self.user_ids = np.arange(self.A.shape[0]).astype(str)
        if self.item_ids is None:
            self.item_ids = np.arange(self.B.shape[0]).astype(str)
        self.user_ids = np.asarray(self.user_ids, dtype=str)
        self.item_ids = np.asarray(self.item_ids, dtype=str)
        self.user_factors = self.A.copy() if self.user_factors is None else np.asarray(self.user_factors, dtype=np.float64)
        self.item_factors = self.B.copy() if self.item_factors is None else np.asarray(self.item_factors, dtype=np.float64)

    @property
    def k(self) -> int:
        return self.A.shape[1]

    def lambdas(self) -> dict:
        free = self.lambda_ if self.lambda_offsets is None else self.lambda_offsets
        return {"A": free, "B": free, "C": self.lambda_, "D": self.lambda_,
                "m": self.lambda_, "n": self.lambda_}

    def full_prediction(self) -> np.ndarray:
        return self.mu + self.m[:, None] + self.n[None, :] + self.user_factors @ self.item_factors.T

    def scorer(self, user_side: Optional[SideInfoMatrix] = None,
               item_side: Optional[SideInfoMatrix] = None) -> FactorScorer:
        use_u = user_side is not None and self.C.shape[0] > 0
        use_i = item_side is not None and self.D.shape[0] > 0
        return FactorScorer(
            self.mu, self.user_ids, self.item_ids, self.user_factors, self.item_factors,
            self.m, self.n,
            user_side=user_side if use_u else None,
            user_fold_in=(lambda attrs: np.atleast_2d(attrs) @ self.C) if use_u else None,
            item_side=item_side if use_i else None,
            item_fold_in=(lambda attrs: np.atleast_2d(attrs) @ self.D) if use_i else None)


class _Problem:
    def __init__(self, X: RatingsMatrix, U: Optional[SideInfoMatrix], I: Optional[SideInfoMatrix],
                 k: int, lambda_: float, lambda_offsets: Optional[float], mu: float):
        if U is not None and U.n_rows != X.n_users:
            raise ValueError(f"U has {U.n_rows} rows for {X.n_users} users")
        if I is not None and I.n_rows != X.n_items:
            raise ValueError(f"I has {I.n_rows} rows for {X.n_items} items")
        if k < 1:
            raise ValueError("k must be >= 1")
        self.X, self.mu, self.k = X, float(mu), k
        self.R = _terms.RatingsIndex(X)
        self.Uv = U.values if U is not None else np.zeros((X.n_users, 0))
        self.Iv = I.values if I is not None else np.zeros((X.n_items, 0))
        self.layout = _terms.Layout({
            "A": (X.n_users, k), "B": (X.n_items, k), "m": (X.n_users,), "n": (X.n_items,),
            "C": (self.Uv.shape[1], k), "D": (self.Iv.shape[1], k)})
        self.lambdas = OffsetsModel(np.zeros((0, k)), np.zeros((0, k)), np.zeros((0, k)),
                                    np.zeros((0, k)), [], [], 0.0, lambda_, lambda_offsets).lambdas()
        self.lambda_, self.lambda_offsets = lambda_, lambda_offsets

    def effective(self, P):
        return P["A"] + self.Uv @ P["C"], P["B"] + self.Iv @ P["D"]

    def evaluate_params(self, P):
        grads = _terms.regularizer_gradient(P, self.lambdas)
        Aeff, Beff = self.effective(P)
        f_x, dA, dB, dm, dn = _terms.ratings_term(self.R, Aeff, Beff, P["m"], P["n"], self.mu, 1.0)
        grads["A"] += dA
        grads["B"] += dB
        grads["m"] += dm
        grads["n"] += dn
        grads["C"] += self.Uv.T @ dA
        grads["D"] += self.Iv.T @ dB
        value = f_x + 0.0 + 0.0 + _terms.regularizer(P, self.lambdas)
        return value, grads

    def __call__(self, theta) -> ObjectiveEvaluation:
        value, grads = self.evaluate_params(self.layout.unpack(theta))
        return ObjectiveEvaluation(value, self.layout.pack(grads))

    def initial_params(self, seed) -> dict:
        lay = self.layout.shapes
        rng = np.random.default_rng(seed)
        A, B = _terms.normal_init(rng, [lay["A"], lay["B"]], self.k)
        # entities without ratings have no offset
        A[np.bincount(self.X.users, minlength=self.X.n_users) == 0] = 0.0
        B[np.bincount(self.X.items, minlength=self.X.n_items) == 0] = 0.0
        return {"A": A, "B": B, "C": np.zeros(lay["C"]), "D": np.zeros(lay["D"]),
                "m": np.zeros(lay["m"]), "n": np.zeros(lay["n"])}

    def to_model(self, P, trace=()) -> OffsetsModel:
        Aeff, Beff = self.effective(P)
        return OffsetsModel(P["A"].copy(), P["B"].copy(), P["C"].copy(), P["D"].copy(),
                            P["m"].copy(), P["n"].copy(), self.mu, self.lambda_, self.lambda_offsets,
                            self.X.user_ids, self.X.item_ids, Aeff, Beff, list(trace))


def offsets_objective(model: OffsetsModel, X: RatingsMatrix, U: Optional[SideInfoMatrix] = None,
                      I: Optional[SideInfoMatrix] = None,
                      lambda_: Optional[float] = None) -> ObjectiveEvaluation:
    """Unnormalized squared error plus ridge penalty; flat gradient ordered A, B, m, n, C, D."""
    lam = model.lambda_ if lambda_ is None else lambda_
    problem = _Problem(X, U, I, model.k, lam, model.lambda_offsets, model.mu)
    P = {"A": model.A, "B": model.B, "C": model.C, "D": model.D, "m": model.m, "n": model.n}
    for name, shape in problem.layout.shapes.items():
        if P[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {P[name].shape}, expected {shape}")
    value, grads = problem.evaluate_params(P)
    return ObjectiveEvaluation(value, problem.layout.pack(grads))


def offsets_fit(X: RatingsMatrix, U: Optional[SideInfoMatrix] = None,
                I: Optional[SideInfoMatrix] = None, lambda_: float = 1e-4, k: int = 40,
                config: Optional[SolverConfig] = None, init_seed: int = 1,
                lambda_offsets: Optional[float] = None, mu: Optional[float] = None,
                callback: Optional[Callable[[int, float], None]] = None) -> OffsetsModel:
    """Fit the offsets model with L-BFGS.

    Free offsets start ``N(0, 1/k)`` (zero for entities without ratings) and
    the attribute matrices ``C``, ``D`` start at zero.
    """
    mu = compute_global_mean(X) if mu is None else mu
    problem = _Problem(X, U, I, k, lambda_, lambda_offsets, mu)
    theta0 = problem.layout.pack(problem.initial_params(init_seed))
    result = lbfgs_minimize(problem, theta0, config or SolverConfig(), callback=callback)
    _logger.info("offsets L-BFGS: %d iterations, objective %.6g (%s)",
                 result.n_iterations, result.fun, result.termination.value)
    model = problem.to_model(problem.layout.unpack(result.x), result.trace)
    model.termination = result.termination.value
    return model


def _ridge_regression(features, targets, lam):
    gram = features.T @ features + lam * np.eye(features.shape[1])
    try:
        return scipy.linalg.solve(gram, features.T @ targets, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError):
        raise np.linalg.LinAlgError(
            "attribute least-squares system is singular; use lambda > 0") from None


def offsets_two_stage_fit(X: RatingsMatrix, U: Optional[SideInfoMatrix] = None,
                          I: Optional[SideInfoMatrix] = None, lambda_: float = 1e-4, k: int = 40,
                          config: Optional[SolverConfig] = None, init_seed: int = 1,
                          mu: Optional[float] = None) -> OffsetsModel:
    """Plain MF first, then ridge-regress its factors on the attributes.

    ``C = argmin ||A* - U C||^2 + lambda ||C||^2`` over users with ratings and
    attributes, and the offsets become the residuals ``A = A* - U C`` (items
    likewise with ``D``).
    """
    stage1 = offsets_fit(X, None, None, lambda_, k, config, init_seed, mu=mu)
    A, B = stage1.A.copy(), stage1.B.copy()
    has_u = np.bincount(X.users, minlength=X.n_users) > 0
    has_i = np.bincount(X.items, minlength=X.n_items) > 0

    def stage2(side, F, has):
        if side is None:
            return np.zeros((0, k))
        rows = has & side.row_present
        coef = _ridge_regression(side.values[rows], F[rows], lambda_)
        F[rows] -= side.values[rows] @ coef
        return coef

    C = stage2(U, A, has_u)
    D = stage2(I, B, has_i)
    problem = _Problem(X, U, I, k, lambda_, None, stage1.mu)
    P = {"A": A, "B": B, "C": C, "D": D, "m": stage1.m, "n": stage1.n}
    model = problem.to_model(P, stage1.trace)
    model.trace.append(problem.evaluate_params(P)[0])
    model.termination = stage1.termination
    return model


def offsets_user_vector(u_attrs, model: OffsetsModel) -> np.ndarray:
    """Latent factors ``u C`` of a user known only by attributes."""
    u_attrs = np.asarray(u_attrs, dtype=np.float64).ravel()
    if u_attrs.shape[0] != model.C.shape[0]:
        raise ValueError(f"expected {model.C.shape[0]} user attributes, got {u_attrs.shape[0]}")
    return u_attrs @ model.C


def offsets_item_vector(i_attrs, model: OffsetsModel) -> np.ndarray:
    i_attrs = np.asarray(i_attrs, dtype=np.float64).ravel()
    if i_attrs.shape[0] != model.D.shape[0]:
        raise ValueError(f"expected {model.D.shape[0]} item attributes, got {i_attrs.shape[0]}")
    return i_attrs @ model.D


def offsets_predict_new_user(u_attrs, model: OffsetsModel,
                             item_subset: Optional[Sequence[int]] = None,
                             new_item_attrs=None) -> np.ndarray:
    """Scores ``mu + u C (B + I D)^T + n`` of a new user.

    ``item_subset`` selects trained items (all by default). Rows of
    ``new_item_attrs`` are scored as new items (zero offset and bias) and
    appended after the trained ones.
    """
    p = offsets_user_vector(u_attrs, model)
    items = slice(None) if item_subset is None else np.asarray(item_subset, dtype=np.int64)
    scores = model.mu + model.item_factors[items] @ p + model.n[items]
    if new_item_attrs is not None:
        Q = np.atleast_2d(np.asarray(new_item_attrs, dtype=np.float64))
        if Q.shape[1] != model.D.shape[0]:
            raise ValueError(f"expected {model.D.shape[0]} item attributes, got {Q.shape[1]}")
        scores = np.concatenate([scores, model.mu + (Q @ model.D) @ p])
    return scores


def offsets_predict(model: OffsetsModel, user: Optional[int] = None, item: Optional[int] = None,
                    user_attrs=None, item_attrs=None) -> float:
    """``mu + m_u + n_i + <a_u + u C, b_i + i D>`` for known indices and/or attribute vectors.

    A known index uses the trained effective factors and bias; otherwise the
    attribute vector supplies ``u C`` (or ``i D``) with zero offset and bias.
    """
    if user is None and user_attrs is None:
        raise ValueError("give a user index or user attributes")
    if item is None and item_attrs is None:
        raise ValueError("give an item index or item attributes")
    if user is not None:
        p, bu = model.user_factors[user], model.m[user]
    else:
        p, bu = offsets_user_vector(user_attrs, model), 0.0
    if item is not None:
        q, bi = model.item_factors[item], model.n[item]
    else:
        q, bi = offsets_item_vector(item_attrs, model), 0.0
    return float(model.mu + bu + bi + p @ q)
