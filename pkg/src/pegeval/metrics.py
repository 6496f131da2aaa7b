"""Dataset-level scoring: combined-overlap AP, PR curves, and recall@k.

The average-precision metric treats every flattened (box, phrase) ground
truth as one target. Within a sample, predictions are matched greedily in
descending confidence to the unmatched target of highest combined overlap
(``sqrt(box_iou) * phrase_iou``) at or above the threshold; each target
absorbs at most one prediction. Verdicts are pooled over the whole
dataset into a single class-agnostic PR curve and integrated with the
all-point interpolation (monotone precision envelope), so results are
deterministic bit-for-bit.

The two legacy recall protocols answer a different question: for each
ground-truth phrase, do any of its top-k associated predictions localize
it? ``anybox`` accepts a hit on any of the phrase's boxes; ``merged``
first collapses the phrase's boxes into their enclosing hull and tests
against that alone. Since predictions carry no phrase identity, each
prediction is associated to the phrase of maximal phrase overlap.

Per-sample matching never crosses sample boundaries, so samples may be
matched concurrently and pooled afterwards without changing any result.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, NamedTuple, Sequence

import numpy as np

from .data import (
    PegPredictionSet,
    PegSampleGT,
    flatten_gt_targets,
)
from .geometry import box_iou, dual_iou, merge_boxes, phrase_iou

__all__ = [
    "Verdict",
    "PRPoint",
    "EvalReport",
    "greedy_match_sample",
    "average_precision",
    "pr_curve_points",
    "cmap",
    "recall_at_k_anybox",
    "recall_at_k_merged",
    "evaluate",
    "write_pr_csv",
]


class Verdict(NamedTuple):
    """One scored prediction: its confidence and whether it matched.

    ``sample_id`` and ``rank`` (position in the sample's confidence-sorted
    prediction order) make the dataset-wide sort deterministic under
    confidence ties.
    """

    confidence: float
    sample_id: str
    rank: int
    is_tp: bool


class PRPoint(NamedTuple):
    """Cumulative precision/recall after one more pooled verdict."""

    recall: float
    precision: float
    confidence: float


class SampleMismatchError(ValueError):
    """Prediction set refers to a sample the ground truth does not define."""


def greedy_match_sample(
    gt: PegSampleGT,
    preds: PegPredictionSet,
    threshold: float,
) -> list[Verdict]:
    """Match one sample's predictions against its flattened targets.

    Predictions are processed in descending confidence (ties keep input
    order). Each is matched to the unmatched target with the highest
    combined overlap at or above ``threshold``, lowest target index
    winning exact ties; matched predictions are true positives, the rest
    false positives.
    """
    if gt.sample_id != preds.sample_id:
        raise SampleMismatchError(
            f"ground truth {gt.sample_id!r} vs predictions {preds.sample_id!r}"
        )
    targets = flatten_gt_targets(gt)
    taken = [False] * len(targets)
    order = sorted(
        range(len(preds.predictions)),
        key=lambda i: -preds.predictions[i].confidence,
    )
    verdicts: list[Verdict] = []
    for rank, i in enumerate(order):
        pred = preds.predictions[i]
        best_j = -1
        best = -1.0
        for j, (t_box, t_phrase) in enumerate(targets):
            if taken[j]:
                continue
            d = dual_iou(pred.box, t_box, pred.phrase, t_phrase)
            if d >= threshold and d > best:
                best = d
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
        verdicts.append(
            Verdict(pred.confidence, gt.sample_id, rank, best_j >= 0)
        )
    return verdicts


def _sort_pooled(verdicts: Sequence[Verdict]) -> list[Verdict]:
    return sorted(verdicts, key=lambda v: (-v.confidence, v.sample_id, v.rank))


def average_precision(verdicts: Sequence[Verdict], n_gt: int) -> float:
    """Area under the pooled PR curve with the monotone precision envelope.

    Verdicts are sorted by descending confidence with (sample_id, rank)
    breaking ties. Returns 0.0 when there are no targets or no verdicts.
    """
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0 or not verdicts:
        return 0.0
    ordered = _sort_pooled(verdicts)
    tp = np.cumsum([1.0 if v.is_tp else 0.0 for v in ordered])
    n_seen = np.arange(1, len(ordered) + 1, dtype=np.float64)
    precision = tp / n_seen
    recall = tp / float(n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(ordered)):
        if recall[i] > prev_recall:
            ap += (recall[i] - prev_recall) * envelope[i]
            prev_recall = recall[i]
    return float(ap)


def pr_curve_points(verdicts: Sequence[Verdict], n_gt: int) -> list[PRPoint]:
    """Raw (pre-envelope) cumulative PR point per pooled verdict."""
    if n_gt == 0 or not verdicts:
        return []
    ordered = _sort_pooled(verdicts)
    points: list[PRPoint] = []
    tp = 0
    for i, v in enumerate(ordered, start=1):
        tp += 1 if v.is_tp else 0
        points.append(PRPoint(tp / n_gt, tp / i, v.confidence))
    return points


def _check_ids(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
) -> dict[str, PegSampleGT]:
    by_id = {s.sample_id: s for s in gt_samples}
    for pred_set in pred_sets:
        if pred_set.sample_id not in by_id:
            raise SampleMismatchError(
                f"unknown sample id {pred_set.sample_id!r} in predictions"
            )
        n_text = by_id[pred_set.sample_id].caption.n_text
        for p in pred_set.predictions:
            if p.phrase.max_end > n_text:
                raise SampleMismatchError(
                    f"sample {pred_set.sample_id!r}: predicted span end "
                    f"{p.phrase.max_end} exceeds token count {n_text}"
                )
    return by_id


def _pooled_verdicts(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    threshold: float,
    threads: int = 1,
) -> list[Verdict]:
    by_id = _check_ids(gt_samples, pred_sets)
    jobs = [(by_id[ps.sample_id], ps) for ps in pred_sets]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda j: greedy_match_sample(j[0], j[1], threshold), jobs)
            )
    else:
        results = [greedy_match_sample(g, p, threshold) for g, p in jobs]
    pooled: list[Verdict] = []
    for r in results:
        pooled.extend(r)
    return pooled


def _total_targets(gt_samples: Sequence[PegSampleGT]) -> int:
    return sum(len(flatten_gt_targets(s)) for s in gt_samples)


def cmap(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    thresholds: Sequence[float],
    threads: int = 1,
) -> dict[float, float]:
    """AP per combined-overlap threshold, pooled over the whole dataset."""
    n_gt = _total_targets(gt_samples)
    out: dict[float, float] = {}
    for t in thresholds:
        pooled = _pooled_verdicts(gt_samples, pred_sets, t, threads=threads)
        out[t] = average_precision(pooled, n_gt)
    return out


def _associate_predictions(
    gt: PegSampleGT, preds: PegPredictionSet
) -> dict[int, list[int]]:
    """Map pair index -> prediction indices associated to that phrase.

    A prediction with a non-empty phrase is associated to the pair of
    maximal phrase overlap; ties go to the phrase with the lowest first
    token index, then the lowest pair index.
    """
    assoc: dict[int, list[int]] = {i: [] for i in range(len(gt.pairs))}
    if not gt.pairs:
        return assoc
    for i, pred in enumerate(preds.predictions):
        if pred.phrase.is_empty:
            continue
        best_key = None
        best_pair = -1
        for j, pair in enumerate(gt.pairs):
            key = (-phrase_iou(pred.phrase, pair.phrase), pair.phrase.first_token, j)
            if best_key is None or key < best_key:
                best_key = key
                best_pair = j
        assoc[best_pair].append(i)
    return assoc


def _recall_at_k(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    k: int,
    box_threshold: float,
    merged: bool,
) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    by_id = _check_ids(gt_samples, pred_sets)
    preds_by_id = {ps.sample_id: ps for ps in pred_sets}
    total = 0
    recalled = 0
    for gt in gt_samples:
        total += len(gt.pairs)
        preds = preds_by_id.get(gt.sample_id)
        if preds is None or not gt.pairs:
            continue
        assoc = _associate_predictions(gt, preds)
        for j, pair in enumerate(gt.pairs):
            candidates = sorted(
                assoc[j], key=lambda i: (-preds.predictions[i].confidence, i)
            )[:k]
            gt_boxes = [merge_boxes(pair.boxes)] if merged else list(pair.boxes)
            hit = any(
                box_iou(preds.predictions[i].box, b) >= box_threshold
                for i in candidates
                for b in gt_boxes
            )
            if hit:
                recalled += 1
    if total == 0:
        return 0.0
    return recalled / total


def recall_at_k_anybox(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    k: int,
    box_threshold: float = 0.5,
) -> float:
    """Fraction of phrases whose top-k predictions hit any of their boxes."""
    return _recall_at_k(gt_samples, pred_sets, k, box_threshold, merged=False)


def recall_at_k_merged(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    k: int,
    box_threshold: float = 0.5,
) -> float:
    """Like anybox recall, but each phrase's boxes are hulled first."""
    return _recall_at_k(gt_samples, pred_sets, k, box_threshold, merged=True)


@dataclass(frozen=True)
class EvalReport:
    """Full evaluation output: AP per threshold, recalls, counts, curves."""

    cmap: dict[float, float]
    recall_at_k: dict[tuple[str, int], float]
    n_gt_pairs: int
    n_predictions: int
    pr_curves: dict[float, list[PRPoint]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        """External report schema (PR curves are emitted separately)."""
        return {
            "cmap": {f"{t:.2f}": round(v, 6) for t, v in self.cmap.items()},
            "recall": {
                f"{proto}@{k}": round(v, 6)
                for (proto, k), v in self.recall_at_k.items()
            },
            "n_gt_pairs": self.n_gt_pairs,
            "n_predictions": self.n_predictions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)


def evaluate(
    gt_samples: Sequence[PegSampleGT],
    pred_sets: Sequence[PegPredictionSet],
    thresholds: Sequence[float] = (0.5,),
    ks: Sequence[int] = (1, 5, 10),
    protocols: Sequence[str] = ("anybox", "merged"),
    threads: int = 1,
    with_pr_curves: bool = False,
) -> EvalReport:
    """Score a dataset and bundle everything into an EvalReport."""
    n_gt = _total_targets(gt_samples)
    cmap_values: dict[float, float] = {}
    curves: dict[float, list[PRPoint]] = {}
    for t in thresholds:
        pooled = _pooled_verdicts(gt_samples, pred_sets, t, threads=threads)
        cmap_values[t] = average_precision(pooled, n_gt)
        if with_pr_curves:
            curves[t] = pr_curve_points(pooled, n_gt)
    recalls: dict[tuple[str, int], float] = {}
    for proto in protocols:
        fn = recall_at_k_anybox if proto == "anybox" else recall_at_k_merged
        for k in ks:
            recalls[(proto, k)] = fn(gt_samples, pred_sets, k)
    return EvalReport(
        cmap=cmap_values,
        recall_at_k=recalls,
        n_gt_pairs=n_gt,
        n_predictions=sum(len(ps.predictions) for ps in pred_sets),
        pr_curves=curves,
    )


def write_pr_csv(points: Sequence[PRPoint], stream: IO[str]) -> None:
    """PR curve as CSV: header then one row per pooled verdict."""
    stream.write("recall,precision,confidence\n")
    for p in points:
        stream.write(
            f"{p.recall:.6f},{p.precision:.6f},{p.confidence:.6f}\n"
        )
