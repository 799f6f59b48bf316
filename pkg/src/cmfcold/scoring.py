"""Turn fitted factor models into label-based scorers for evaluation and CLI use."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .data import SideInfoMatrix

SCENARIOS = ("warm", "new-users", "new-items", "new-both")

FoldIn = Callable[[np.ndarray], np.ndarray]


class FactorScorer:
    """Scores ``(user, item)`` label pairs as ``mu + bias_u + bias_i + <p_u, q_i>``.

    Labels found in the model's id maps use the fitted rows. Unknown labels are
    folded in from their attribute rows with zero bias; pairs that can be
    neither looked up nor folded in score NaN.
    """

    reports_rmse = True

    def __init__(self, mu, user_ids, item_ids, user_factors, item_factors,
                 user_bias, item_bias,
                 user_side: Optional[SideInfoMatrix] = None, user_fold_in: Optional[FoldIn] = None,
                 item_side: Optional[SideInfoMatrix] = None, item_fold_in: Optional[FoldIn] = None,
                 weights=None):
        self.mu = float(mu)
        self.user_index = {label: j for j, label in enumerate(np.asarray(user_ids, dtype=str).tolist())}
        self.item_index = {label: j for j, label in enumerate(np.asarray(item_ids, dtype=str).tolist())}
        self.user_factors = np.asarray(user_factors)
        self.item_factors = np.asarray(item_factors)
        self.user_bias = np.asarray(user_bias)
        self.item_bias = np.asarray(item_bias)
        self.user_side, self.user_fold_in = user_side, user_fold_in
        self.item_side, self.item_fold_in = item_side, item_fold_in
        self.weights = weights
        self._cold_cache = {"user": {}, "item": {}}

    def supports(self, scenario: str) -> bool:
        cold_users = self.user_side is not None and self.user_fold_in is not None
        cold_items = self.item_side is not None and self.item_fold_in is not None
        return {"warm": True, "new-users": cold_users, "new-items": cold_items,
                "new-both": cold_users and cold_items}[scenario]

    def _vectors(self, labels, side: str):
        if side == "user":
            index, factors, bias = self.user_index, self.user_factors, self.user_bias
            table, fold_in = self.user_side, self.user_fold_in
        else:
            index, factors, bias = self.item_index, self.item_factors, self.item_bias
            table, fold_in = self.item_side, self.item_fold_in
        labels = np.asarray(labels, dtype=str)
        uniq, inverse = np.unique(labels, return_inverse=True)
        vecs = np.zeros((uniq.shape[0], factors.shape[1]))
        b = np.zeros(uniq.shape[0])
        ok = np.zeros(uniq.shape[0], dtype=bool)
        cold = []
        for j, label in enumerate(uniq.tolist()):
            pos = index.get(label)
            if pos is not None:
                vecs[j], b[j], ok[j] = factors[pos], bias[pos], True
            else:
                cold.append(j)
        if cold and table is not None and fold_in is not None:
            cache = self._cold_cache[side]
            missing = [j for j in cold if uniq[j] not in cache]
            if missing:
                attrs, found = table.rows_for(uniq[missing])
                if found.any():
                    folded = fold_in(attrs[found])
                    for j, vec in zip(np.asarray(missing)[found], folded):
                        cache[uniq[j]] = vec
            for j in cold:
                vec = cache.get(uniq[j])
                if vec is not None:
                    vecs[j], ok[j] = vec, True
        return vecs[inverse], b[inverse], ok[inverse]

    def __call__(self, users: Sequence, items: Sequence) -> np.ndarray:
        pu, bu, oku = self._vectors(users, "user")
        qi, bi, oki = self._vectors(items, "item")
        scores = self.mu + bu + bi + np.einsum("ij,ij->i", pu, qi)
        scores[~(oku & oki)] = np.nan
        return scores
