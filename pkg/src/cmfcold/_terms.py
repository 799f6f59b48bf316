"""Loss terms and parameter packing shared by the CMF and offsets models."""
from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import RatingsMatrix, SideInfoMatrix

# Packing order. Attribute blocks go last so that a model without side
# information is a prefix of one with (all-zero) side information.
PARAM_ORDER = ("A", "B", "m", "n", "C", "D")


class Layout:
    def __init__(self, shapes: Dict[str, Tuple[int, ...]]):
        self.shapes = {name: tuple(shapes[name]) for name in PARAM_ORDER}
        self.offsets = {}
        pos = 0
        for name in PARAM_ORDER:
            size = int(np.prod(self.shapes[name], dtype=np.int64))
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.size = pos

    def unpack(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: theta[a:b].reshape(self.shapes[name])
                for name, (a, b) in self.offsets.items()}

    def pack(self, params: Dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for name, (a, b) in self.offsets.items():
            out[a:b] = np.asarray(params[name], dtype=np.float64).ravel()
        return out


class RatingsIndex:
    """Observed entries plus a CSR pattern reused for every gradient."""

    def __init__(self, X: RatingsMatrix):
        self.n_users, self.n_items = X.n_users, X.n_items
        self.order = np.lexsort((X.items, X.users))
        self.u = X.users
        self.i = X.items
        self.x = X.ratings
        self.indices = X.items[self.order]
        self.indptr = np.concatenate(
            ([0], np.cumsum(np.bincount(X.users, minlength=X.n_users)))).astype(np.int64)
        self.nnz = X.nnz

    def matrix(self, values: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((values[self.order], self.indices, self.indptr),
                             shape=(self.n_users, self.n_items))


def ratings_term(R: RatingsIndex, Ax, Bx, m, n, mu, scale):
    """scale * ||I_x(X - mu - m - n - Ax Bx^T)||^2 and its gradients."""
    u, i = R.u, R.i
    pred = mu + m[u] + n[i] + np.einsum("ij,ij->i", Ax[u], Bx[i])
    resid = pred - R.x
    value = scale * float(np.dot(resid, resid))
    g = (2.0 * scale) * resid
    G = R.matrix(g)
    dAx = np.asarray(G @ Bx)
    dBx = np.asarray(G.T @ Ax)
    dm = np.bincount(u, weights=g, minlength=R.n_users)
    dn = np.bincount(i, weights=g, minlength=R.n_items)
    return value, dAx, dBx, dm, dn


def sigmoid(z):
    return expit(z)


def side_term(Y: SideInfoMatrix, F, C, scale, use_sigmoid):
    """scale * ||Y - S(F C^T)||^2 over present rows, with gradients for F and C."""
    rows = np.flatnonzero(Y.row_present)
    dF = np.zeros_like(F)
    if rows.size == 0 or scale == 0.0:
        return 0.0, dF, np.zeros_like(C)
    Fp = F[rows]
    Z = Fp @ C.T
    binary = Y.binary_mask if use_sigmoid else np.zeros(Y.n_cols, dtype=bool)
    P = Z
    if binary.any():
        P = Z.copy()
        P[:, binary] = sigmoid(Z[:, binary])
    E = P - Y.values[rows]
    value = scale * float(np.sum(E * E))
    G = (2.0 * scale) * E
    if binary.any():
        Pb = P[:, binary]
        G[:, binary] *= Pb * (1.0 - Pb)
    dF[rows] = G @ C
    dC = G.T @ Fp
    return value, dF, dC


def sum_squares(a) -> float:
    a = np.asarray(a).ravel()
    return float(np.dot(a, a))


def regularizer(params, lambdas) -> float:
    total = 0.0
    for name in ("A", "B", "C", "D", "m", "n"):
        total += lambdas[name] * sum_squares(params[name])
    return total


def regularizer_gradient(params, lambdas) -> Dict[str, np.ndarray]:
    return {name: (2.0 * lambdas[name]) * params[name] for name in PARAM_ORDER}


def normal_init(rng: np.random.Generator, shapes: List[Tuple[int, int]], k_total: int):
    std = 1.0 / np.sqrt(max(k_total, 1))
    return [rng.standard_normal(shape) * std for shape in shapes]
