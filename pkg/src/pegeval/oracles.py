"""Slow reference implementations used to cross-check the fast paths.

Everything here is written directly against the definitions with plain
Python loops and no helpers shared with the production modules: box and
phrase overlaps are recomputed from raw coordinates, matching walks every
prediction/target combination explicitly, and the PR curve is integrated
step by step. Agreement between these functions and the production code
is therefore evidence, not tautology. Used by the self-test command and
the test suite; not meant to be fast.
"""

from __future__ import annotations

from typing import Sequence

from .data import PegPredictionSet, PegSampleGT

__all__ = [
    "naive_dual_overlap",
    "naive_sample_verdicts",
    "naive_average_precision",
    "naive_cmap",
]


def _box_overlap(a, b) -> float:
    ix1 = a[0] if a[0] > b[0] else b[0]
    iy1 = a[1] if a[1] > b[1] else b[1]
    ix2 = a[2] if a[2] < b[2] else b[2]
    iy2 = a[3] if a[3] < b[3] else b[3]
    if ix2 <= ix1 or iy2 <= iy1:
        return 0.0
    inter = (ix2 - ix1) * (iy2 - iy1)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _token_set(spans) -> set[int]:
    out: set[int] = set()
    for start, end in spans:
        for j in range(start, end):
            out.add(j)
    return out


def naive_dual_overlap(box_a, box_b, spans_a, spans_b) -> float:
    """sqrt(box overlap) * token-set overlap, from raw tuples."""
    sa = _token_set(spans_a)
    sb = _token_set(spans_b)
    union = sa | sb
    if not union:
        phrase = 0.0
    else:
        phrase = len(sa & sb) / len(union)
    return _box_overlap(box_a, box_b) ** 0.5 * phrase


def naive_sample_verdicts(
    gt: PegSampleGT, preds: PegPredictionSet, threshold: float
) -> list[tuple[float, int, bool]]:
    """(confidence, rank, is_tp) per prediction, greedy best-overlap-first."""
    targets = []
    for pair in gt.pairs:
        for box in pair.boxes:
            targets.append((box.as_tuple(), pair.phrase.spans))
    taken = [False] * len(targets)

    indexed = list(enumerate(preds.predictions))
    indexed.sort(key=lambda item: (-item[1].confidence, item[0]))
    verdicts = []
    for rank, (_, pred) in enumerate(indexed):
        pbox = pred.box.as_tuple()
        pspans = pred.phrase.spans
        best_j = -1
        best_val = None
        for j, (tbox, tspans) in enumerate(targets):
            if taken[j]:
                continue
            val = naive_dual_overlap(pbox, tbox, pspans, tspans)
            if val >= threshold and (best_val is None or val > best_val):
                best_val = val
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
        verdicts.append((pred.confidence, rank, best_j >= 0))
    return verdicts


def naive_average_precision(
    flags: Sequence[tuple[float, str, int, bool]], n_gt: int
) -> float:
    """Step-by-step PR integration from (confidence, sample_id, rank, is_tp)."""
    if n_gt <= 0 or not flags:
        return 0.0
    ordered = sorted(flags, key=lambda f: (-f[0], f[1], f[2]))
    precisions = []
    recalls = []
    tp = 0
    for i, item in enumerate(ordered, start=1):
        if item[3]:
            tp += 1
        precisions.append(tp / i)
        recalls.append(tp / n_gt)
    # Monotone envelope from the right.
    for i in range(len(precisions) - 2, -1, -1):
        if precisions[i + 1] > precisions[i]:
            precisions[i] = precisions[i + 1]
    ap = 0.0
    prev = 0.0
    for r, p in zip(recalls, precisions):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def naive_cmap(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    threshold: float,
) -> float:
    """Dataset AP at one threshold, everything recomputed from scratch."""
    by_id = {s.sample_id: s for s in gt_samples}
    n_gt = 0
    for s in gt_samples:
        for pair in s.pairs:
            n_gt += len(pair.boxes)
    pooled = []
    for ps in pred_sets:
        gt = by_id[ps.sample_id]
        for conf, rank, is_tp in naive_sample_verdicts(gt, ps, threshold):
            pooled.append((conf, ps.sample_id, rank, is_tp))
    return naive_average_precision(pooled, n_gt)
