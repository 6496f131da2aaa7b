"""Bipartite matching between decoder queries and ground-truth targets.

The training loss assigns each flattened (box, phrase) target to exactly
one query by minimum total cost over a weighted combination of a phrase
cross-entropy term, an L1 box term, and a negative generalized-IOU term.
GIOU enters as ``-giou`` rather than ``1 - giou``: constant offsets do not
change the argmin, and the negative form is the convention the default
weights were tuned against.

``hungarian_solve`` is the production solver; ``brute_force_assignment``
is the exhaustive oracle used to test it. Both resolve cost ties by
returning the lowest lexicographic (query_index, gt_index) pair sequence
among the optima, and both compute ``total_cost`` by summing matched
costs in query-index order so equal assignments produce bit-equal totals.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import BoxXYXY, PhraseSpans
from .geometry import BoxCXCYWH, giou_corners

__all__ = [
    "CostWeights",
    "Assignment",
    "matching_cost_matrix",
    "hungarian_solve",
    "brute_force_assignment",
]

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class CostWeights:
    """Weights of the three matching-cost terms (defaults: 1, 5, 2)."""

    w_class: float = 1.0
    w_bbox: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        for name in ("w_class", "w_bbox", "w_giou"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class Assignment:
    """A one-to-one matching: (query_index, gt_index) pairs plus its cost.

    Pairs are sorted by query index; ``len(pairs)`` equals
    ``min(n_queries, n_targets)``.
    """

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def matching_cost_matrix(
    query_boxes: Sequence[BoxCXCYWH],
    query_phrase_logits: np.ndarray,
    targets: Sequence[tuple[BoxXYXY, PhraseSpans]],
    weights: CostWeights,
    tau: float = 0.07,
) -> np.ndarray:
    """Cost matrix [n_queries, n_targets] for query/target matching.

    ``query_phrase_logits`` holds raw similarity scores over the extended
    token positions (text tokens plus the trailing no-phrase slot); the
    phrase term is the mean, over the target phrase's token indices, of
    the negative log-softmax of ``logits / tau``. The mean (rather than a
    sum) keeps phrases of different lengths competing on equal footing.
    Box terms are the center/size L1 distance and the negative GIOU.
    """
    logits = np.asarray(query_phrase_logits, dtype=np.float64)
    n_q = len(query_boxes)
    n_g = len(targets)
    if logits.ndim != 2 or logits.shape[0] != n_q:
        raise ValueError(
            f"logits shape {logits.shape} inconsistent with {n_q} queries"
        )
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite phrase logits")

    z = logits / tau
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    cost = np.zeros((n_q, n_g), dtype=np.float64)
    # Raw coordinates: predicted boxes may poke outside the unit square
    # mid-training, so the strict file-format box type stays out of here.
    query_cxcywh = [b.as_tuple() for b in query_boxes]
    query_corners = [
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        for cx, cy, w, h in query_cxcywh
    ]
    for g, (gt_box, gt_phrase) in enumerate(targets):
        token_idx = sorted(gt_phrase.token_set())
        if not token_idx:
            raise ValueError(f"target {g} has an empty phrase")
        if max(token_idx) >= logits.shape[1] - 1:
            raise ValueError(
                f"target {g} token index {max(token_idx)} out of range for "
                f"{logits.shape[1] - 1} text positions"
            )
        gx1, gy1, gx2, gy2 = gt_box.as_tuple()
        gt_cxcywh = ((gx1 + gx2) / 2.0, (gy1 + gy2) / 2.0, gx2 - gx1, gy2 - gy1)
        phrase_cost = -log_probs[:, token_idx].mean(axis=1)
        for q in range(n_q):
            l1 = sum(abs(p - t) for p, t in zip(query_cxcywh[q], gt_cxcywh))
            cost[q, g] = (
                weights.w_class * phrase_cost[q]
                + weights.w_bbox * l1
                + weights.w_giou * -giou_corners(query_corners[q], gt_box.as_tuple())
            )
    return cost


def _fold_cost(cost: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    """Left-to-right sum of matched costs in query-index order."""
    total = 0.0
    for q, g in sorted(pairs):
        total += float(cost[q, g])
    return total


def hungarian_solve(cost_matrix: np.ndarray) -> Assignment:
    """Minimum-total-cost assignment with deterministic tie-breaking.

    Among all optimal assignments, returns the one whose pair sequence
    (sorted by query index) is lexicographically smallest. The optimum is
    found with scipy's solver; the tie-break is enforced by rebuilding the
    pair sequence greedily, accepting each lexicographically earliest pair
    that still admits a completion at the optimal total.
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n_q, n_g = cost.shape
    k = min(n_q, n_g)
    if k == 0:
        return Assignment(pairs=(), total_cost=0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite costs")

    rows, cols = linear_sum_assignment(cost)
    base = sorted((int(q), int(g)) for q, g in zip(rows, cols))
    best_total = _fold_cost(cost, base)

    pairs: list[tuple[int, int]] = []
    unused = list(range(n_g))
    prefix = 0.0
    last_q = -1
    for pos in range(k):
        remaining = k - pos
        chosen = None
        for q in range(last_q + 1, n_q - remaining + 1):
            for gi, g in enumerate(unused):
                cand = prefix + float(cost[q, g])
                need = remaining - 1
                if need == 0:
                    total = cand
                else:
                    sub_gts = unused[:gi] + unused[gi + 1:]
                    sub = cost[np.ix_(range(q + 1, n_q), sub_gts)]
                    r2, c2 = linear_sum_assignment(sub)
                    total = cand
                    for rr, cc in sorted(zip(r2, c2)):
                        total += float(sub[rr, cc])
                if total == best_total:
                    chosen = (q, g)
                    break
            if chosen is not None:
                break
        if chosen is None:
            # Sub-optimal fold mismatch (only reachable when distinct optima
            # differ by rounding of the completion sum); fall back to the
            # solver's own assignment, which is still optimal.
            return Assignment(pairs=tuple(base), total_cost=best_total)
        pairs.append(chosen)
        unused.remove(chosen[1])
        prefix += float(cost[chosen[0], chosen[1]])
        last_q = chosen[0]
    return Assignment(pairs=tuple(pairs), total_cost=_fold_cost(cost, pairs))


def brute_force_assignment(cost_matrix: np.ndarray) -> Assignment:
    """Exhaustive-enumeration optimum with the same tie-break rule.

    Test oracle only: refuses matrices with min(n, m) > 8. Enumerates all
    injections from the smaller axis into the larger one.
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n_q, n_g = cost.shape
    k = min(n_q, n_g)
    if k == 0:
        return Assignment(pairs=(), total_cost=0.0)
    if k > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"min(n, m) = {k} exceeds oracle bound {BRUTE_FORCE_LIMIT}"
        )
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite costs")

    best_total: float | None = None
    best_pairs: tuple[tuple[int, int], ...] | None = None
    if n_g <= n_q:
        # Choose an injective map gt -> query.
        for perm in itertools.permutations(range(n_q), n_g):
            pairs = tuple(sorted(zip(perm, range(n_g))))
            total = 0.0
            for q, g in pairs:
                total += float(cost[q, g])
            if (best_total is None or total < best_total
                    or (total == best_total and pairs < best_pairs)):
                best_total = total
                best_pairs = pairs
    else:
        # Fewer queries than targets: every query gets matched.
        for perm in itertools.permutations(range(n_g), n_q):
            pairs = tuple((q, perm[q]) for q in range(n_q))
            total = 0.0
            for q, g in pairs:
                total += float(cost[q, g])
            if (best_total is None or total < best_total
                    or (total == best_total and pairs < best_pairs)):
                best_total = total
                best_pairs = pairs
    return Assignment(pairs=best_pairs, total_cost=best_total)
