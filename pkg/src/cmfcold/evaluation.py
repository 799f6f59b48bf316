"""Ranking and rating metrics, non-personalized baselines and the scenario runner."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import RatingsMatrix
from .pipeline import FourWaySplit
from .scoring import SCENARIOS

_logger = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def rmse(predictions, actuals) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    actuals = np.asarray(actuals, dtype=np.float64).ravel()
    if predictions.shape != actuals.shape:
        raise ValueError("predictions and actuals differ in length")
    if predictions.size == 0:
        raise ValueError("rmse of an empty set is undefined")
    err = predictions - actuals
    return math.sqrt(float(np.dot(err, err)) / err.size)


def rank_order(scores) -> np.ndarray:
    """Positions sorted by descending score; ties keep input order, NaN goes last."""
    scores = np.asarray(scores, dtype=np.float64)
    key = np.where(np.isnan(scores), np.inf, -scores)
    return np.argsort(key, kind="stable")


def dcg_at_k(ranked_ratings, k: int) -> float:
    """Sum over the top ``k`` positions of ``(2^x - 1) / log2(position + 1)``."""
    x = np.asarray(ranked_ratings, dtype=np.float64)[:k]
    discounts = np.log2(np.arange(2, x.size + 2))
    return float(np.sum((np.exp2(x) - 1.0) / discounts))


def ndcg_at_k(predicted_scores, actual_ratings, k: int) -> float:
    """DCG of the predicted order over the ideal DCG; NaN when the ideal DCG is zero."""
    actual = np.asarray(actual_ratings, dtype=np.float64)
    if actual.size == 0:
        raise ValueError("ndcg needs at least one item")
    if np.shape(predicted_scores) != actual.shape:
        raise ValueError("scores and ratings differ in length")
    ideal = dcg_at_k(np.sort(actual)[::-1], k)
    if ideal == 0.0:
        return math.nan
    return dcg_at_k(actual[rank_order(predicted_scores)], k) / ideal


def _score(scorer: Scorer, test_set: RatingsMatrix) -> np.ndarray:
    return np.asarray(scorer(test_set.user_labels(), test_set.item_labels()), dtype=np.float64)


def per_user_ndcg(scores: np.ndarray, test_set: RatingsMatrix, k: int) -> np.ndarray:
    """NDCG@k per test user, ranking only that user's test items.

    Items are visited in ascending id order, so equal scores rank the smaller
    item id first.
    """
    order = np.lexsort((test_set.items, test_set.users))
    users = test_set.users[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [users.size]))
    s, x = scores[order], test_set.ratings[order]
    return np.array([ndcg_at_k(s[a:b], x[a:b], k) for a, b in zip(starts, ends)])


def mean_user_ndcg(scorer: Scorer, test_set: RatingsMatrix, k: int = 5) -> float:
    if test_set.nnz == 0:
        raise ValueError("test set is empty")
    values = per_user_ndcg(_score(scorer, test_set), test_set, k)
    return float(np.nanmean(values)) if np.any(~np.isnan(values)) else math.nan


# ---------------------------------------------------------------------------
# baselines


def most_popular_baseline(train: RatingsMatrix) -> dict:
    """Mean training rating of every item that has training ratings."""
    sums = np.bincount(train.items, weights=train.ratings, minlength=train.n_items)
    counts = np.bincount(train.items, minlength=train.n_items)
    return {train.item_ids[j]: sums[j] / counts[j] for j in np.flatnonzero(counts)}


class MostPopularScorer:
    reports_rmse = False
    weights = None

    def __init__(self, train: RatingsMatrix):
        self.item_scores = most_popular_baseline(train)

    def supports(self, scenario: str) -> bool:
        return scenario in ("warm", "new-users")

    def __call__(self, users, items) -> np.ndarray:
        return np.array([self.item_scores.get(str(i), np.nan) for i in items], dtype=np.float64)


class RandomScorer:
    """Uniform random scores; the same seed and input length give the same scores."""

    reports_rmse = False
    weights = None

    def __init__(self, rng_seed: int):
        self.rng_seed = rng_seed

    def supports(self, scenario: str) -> bool:
        return True

    def __call__(self, users, items) -> np.ndarray:
        return np.random.default_rng(self.rng_seed).random(len(items))


def random_baseline(rng_seed: int) -> RandomScorer:
    return RandomScorer(rng_seed)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    label: str
    w_x: Optional[float] = None
    w_u: Optional[float] = None
    w_i: Optional[float] = None
    rmse: Optional[float] = None
    ndcg: float = math.nan
    n_users: int = 0
    n_excluded: int = 0
    n_unscorable: int = 0

    @property
    def flagged(self) -> bool:
        return self.n_unscorable > 0


@dataclass
class EvalReport:
    scenario: str
    k: int
    rows: List[ReportRow] = field(default_factory=list)

    def _cells(self, row: ReportRow) -> Tuple[str, ...]:
        def weight(v):
            return "-" if v is None else f"{v:g}"

        def metric(v):
            return "-" if v is None or math.isnan(v) else f"{v:.4f}"

        return (row.label + (" [unscorable pairs]" if row.flagged else ""),
                weight(row.w_x), weight(row.w_u), weight(row.w_i),
                metric(row.rmse), metric(row.ndcg))

    def to_delimited(self, sep: str = "\t") -> str:
        head = ["scenario", "model", "w_x", "w_u", "w_i", "rmse", f"ndcg@{self.k}",
                "n_users", "n_excluded", "n_unscorable"]
        lines = [sep.join(head)]
        for r in self.rows:
            vals = [self.scenario, r.label, r.w_x, r.w_u, r.w_i, r.rmse, r.ndcg,
                    r.n_users, r.n_excluded, r.n_unscorable]
            lines.append(sep.join("-" if v is None else (repr(v) if isinstance(v, float) else str(v))
                                  for v in vals))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = ("Model", "w_x", "w_u", "w_i", "RMSE", f"NDCG@{self.k}")
        cells = [header] + [self._cells(r) for r in self.rows]
        widths = [max(len(c[j]) for c in cells) for j in range(len(header))]
        rule = "+".join("-" * (w + 2) for w in widths)
        out = [f"Scenario: {self.scenario}", rule]
        for n, c in enumerate(cells):
            out.append("|".join(f" {v:<{w}} " if j == 0 else f" {v:>{w}} "
                                for j, (v, w) in enumerate(zip(c, widths))))
            if n == 0:
                out.append(rule)
        out.append(rule)
        return "\n".join(out) + "\n"


def _supports(scorer, scenario) -> bool:
    check = getattr(scorer, "supports", None)
    return True if check is None else bool(check(scenario))


def evaluate_scorer(label: str, scorer: Scorer, test_set: RatingsMatrix, k: int = 5,
                    clip: Optional[Tuple[float, float]] = None) -> ReportRow:
    """One report row: RMSE over all scorable test ratings and mean per-user NDCG@k."""
    scores = _score(scorer, test_set)
    ok = ~np.isnan(scores)
    weights = getattr(scorer, "weights", None) or (None, None, None)
    row = ReportRow(label, *weights, n_unscorable=int((~ok).sum()))
    if row.flagged:
        _logger.warning("%s could not score %d of %d pairs", label, row.n_unscorable, scores.size)
    if getattr(scorer, "reports_rmse", True) and ok.any():
        pred = scores[ok] if clip is None else np.clip(scores[ok], *clip)
        row.rmse = rmse(pred, test_set.ratings[ok])
    ndcgs = per_user_ndcg(scores, test_set, k)
    defined = ~np.isnan(ndcgs)
    row.n_users = int(defined.sum())
    row.n_excluded = int((~defined).sum())
    row.ndcg = float(ndcgs[defined].mean()) if defined.any() else math.nan
    return row


def run_scenarios(models: Mapping[str, Scorer], split: FourWaySplit, k: int = 5,
                  clip: Optional[Tuple[float, float]] = None) -> List[EvalReport]:
    """Evaluate every model on every non-empty test set it supports, in scenario order."""
    reports = []
    tests = split.test_sets()
    for scenario in SCENARIOS:
        test_set = tests[scenario]
        if test_set.nnz == 0:
            continue
        report = EvalReport(scenario, k)
        for label, scorer in models.items():
            if _supports(scorer, scenario):
                report.rows.append(evaluate_scorer(label, scorer, test_set, k, clip))
        reports.append(report)
    return reports
