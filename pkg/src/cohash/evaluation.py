"""Dataset splitting, ranking metrics, and model comparison.

Rankings are produced per user over the full item set minus the items
that user rated in training; users with no test interactions are
skipped, and the reported numbers are macro-averages over the users
that remain.  Positives for Precision@k are the test items whose raw
rating equals the scale maximum (5 on a 1-5 star scale, 1 on binary
data).  DCG uses raw ratings and a base-2 log discount.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from cohash.core import Dataset, Hyperparams
from cohash.retrieval import CodeSet, hamming_rank_topk, realvalued_topk
from cohash.runtime import run_training

__all__ = [
    "SplitSpec",
    "EvalReport",
    "NoEvaluableUsersError",
    "split",
    "precision_at_k",
    "dcg_at_k",
    "evaluate",
    "run_variance",
]


class NoEvaluableUsersError(ValueError):
    """The test set contains no user with at least one interaction."""


@dataclass(frozen=True)
class SplitSpec:
    """Train fraction and seed for a reproducible uniform split."""

    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")


def split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Uniform random split of the triples into train and test sets.

    The two parts are disjoint, cover the data, and keep the original
    row order internally; the same spec always produces the same split.
    """
    n = len(data)
    n_train = int(round(spec.train_fraction * n))
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(3,)))
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return data.subset(train_idx), data.subset(test_idx)


def precision_at_k(ranked: Sequence[int], positives: set, k: int) -> float:
    """Fraction of the first k ranked items that are positives."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not len(ranked):
        return 0.0
    hits = sum(1 for item in ranked[:k] if item in positives)
    return hits / k


def dcg_at_k(ranked: Sequence[int], ratings: Mapping[int, float], k: int) -> float:
    """Sum of (2^r_i - 1) / log2(i + 1) over the first k ranked items.

    r_i is the raw test rating of the item at rank i (1-based); items
    the user never rated contribute zero gain.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        r = ratings.get(item, 0.0)
        if r:
            total += (2.0 ** r - 1.0) / np.log2(rank + 1)
    return float(total)


@dataclass
class EvalReport:
    """Macro-averaged ranking metrics for one model."""

    model: str
    users_evaluated: int
    precision: dict[int, float]
    dcg: dict[int, float]

    def __post_init__(self) -> None:
        for k, v in self.precision.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"Precision@{k} out of range: {v}")
        for k, v in self.dcg.items():
            if v < 0.0:
                raise ValueError(f"DCG@{k} negative: {v}")

    def rows(self) -> list[tuple[str, str, int, float]]:
        """One (model, metric, k, value) row per metric, for CSV/JSON."""
        out = [(self.model, "precision", k, v) for k, v in sorted(self.precision.items())]
        out += [(self.model, "dcg", k, v) for k, v in sorted(self.dcg.items())]
        return out


def _rank_for_user(user_repr, item_repr, u: int, kk: int) -> list[int]:
    if isinstance(user_repr, CodeSet):
        pairs = hamming_rank_topk(user_repr.codes[u], item_repr, kk)
    else:
        pairs = realvalued_topk(user_repr[u], item_repr, kk)
    return [p for p, _ in pairs]


def evaluate(
    user_repr,
    item_repr,
    train: Dataset | None,
    test: Dataset,
    ks: Sequence[int],
    model: str = "model",
    positive_rating: float | None = None,
) -> EvalReport:
    """Rank every evaluable user's candidates and macro-average the metrics.

    ``user_repr`` / ``item_repr`` are either two CodeSets (Hamming
    ranking) or two factor matrices (dot-product ranking).  Candidates
    are all items except the user's training items.  ``positive_rating``
    defaults to the test set's declared scale maximum, falling back to
    the largest raw rating present.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must contain positive ranks")
    codes_in = isinstance(user_repr, CodeSet)
    if codes_in != isinstance(item_repr, CodeSet):
        raise TypeError("user and item representations must both be codes or both vectors")
    if not codes_in:
        user_repr = np.asarray(user_repr, dtype=np.float64)
        item_repr = np.asarray(item_repr, dtype=np.float64)

    if positive_rating is None:
        if test.scale is not None:
            positive_rating = float(test.scale[1])
        elif len(test):
            positive_rating = float(test.raw_ratings.max())
        else:
            raise NoEvaluableUsersError("empty test set")

    by_user: dict[int, dict[int, float]] = {}
    for u, i, raw in zip(test.users, test.items, test.raw_ratings):
        by_user.setdefault(int(u), {})[int(i)] = float(raw)
    if not by_user:
        raise NoEvaluableUsersError("no user has a test interaction")

    seen_by_user: dict[int, set[int]] = {}
    if train is not None:
        for u, i in zip(train.users, train.items):
            seen_by_user.setdefault(int(u), set()).add(int(i))

    max_k = ks[-1]
    prec_sums = {k: 0.0 for k in ks}
    dcg_sums = {k: 0.0 for k in ks}
    for u in sorted(by_user):
        ratings = by_user[u]
        seen = seen_by_user.get(u, set())
        ranked = _rank_for_user(user_repr, item_repr, u, max_k + len(seen))
        ranked = [p for p in ranked if p not in seen][:max_k]
        positives = {i for i, r in ratings.items() if r == positive_rating}
        for k in ks:
            prec_sums[k] += precision_at_k(ranked, positives, k)
            dcg_sums[k] += dcg_at_k(ranked, ratings, k)
    n_users = len(by_user)
    return EvalReport(
        model=model,
        users_evaluated=n_users,
        precision={k: prec_sums[k] / n_users for k in ks},
        dcg={k: dcg_sums[k] / n_users for k in ks},
    )


def run_variance(
    data: Dataset,
    h: Hyperparams,
    seeds: Sequence[int],
    objective: str = "dch",
) -> np.ndarray:
    """Across-seed sample variance of the training-loss trace.

    Trains once per seed with convergence stopping disabled so traces
    align barrier-for-barrier; traces are truncated to the shortest one
    and the variance at each barrier uses the n-1 denominator.
    """
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds")
    traces = []
    for s in seeds:
        r = run_training(
            data,
            dataclasses.replace(h, seed=int(s)),
            objective=objective,
            stop_on_convergence=False,
            make_codes=False,
        )
        traces.append(r.losses)
    length = min(len(t) for t in traces)
    stacked = np.array([t[:length] for t in traces], dtype=np.float64)
    # shift by one trace so identical runs give exactly zero variance
    return (stacked - stacked[0]).var(axis=0, ddof=1)
