"""Box and phrase geometry: overlap measures, merging, conversions.

All functions are pure, operate on normalized coordinates in 64-bit
floats, and are safe for unrestricted concurrent use. No epsilons are
applied inside the overlap computations; the arithmetic on normalized
coordinates is taken as-is.

The combined overlap measure for a (box, phrase) prediction against a
(box, phrase) target is ``sqrt(box_iou) * phrase_iou``. The square root
keeps a threshold on the combined value comparable to a plain box-IOU
threshold even though two quantities are being multiplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .data import BoxXYXY, PhraseSpans

__all__ = [
    "BoxCXCYWH",
    "box_xyxy_to_cxcywh",
    "box_cxcywh_to_xyxy",
    "box_iou",
    "box_giou",
    "giou_corners",
    "box_l1",
    "phrase_iou",
    "dual_iou",
    "merge_boxes",
]


@dataclass(frozen=True)
class BoxCXCYWH:
    """Box as center plus size; the parameterization used by anchors."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError(f"non-finite box ({self.cx},{self.cy},{self.w},{self.h})")
        if self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(f"degenerate box with w={self.w}, h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def box_xyxy_to_cxcywh(box: BoxXYXY) -> BoxCXCYWH:
    return BoxCXCYWH(
        cx=(box.x1 + box.x2) / 2.0,
        cy=(box.y1 + box.y2) / 2.0,
        w=box.x2 - box.x1,
        h=box.y2 - box.y1,
    )


def box_cxcywh_to_xyxy(box: BoxCXCYWH) -> BoxXYXY:
    return BoxXYXY(
        x1=box.cx - box.w / 2.0,
        y1=box.cy - box.h / 2.0,
        x2=box.cx + box.w / 2.0,
        y2=box.cy + box.h / 2.0,
    )


def box_iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    return inter / (area_a + area_b - inter)


def giou_corners(
    a: tuple[float, float, float, float],
    b: tuple[float, float, float, float],
) -> float:
    """Generalized IOU on raw (x1, y1, x2, y2) tuples.

    Needs only x1 < x2 and y1 < y2; coordinates may leave [0, 1], which
    happens for unclamped predicted boxes during matching.
    """
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def box_giou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Generalized IOU: IOU minus the enclosing-box slack, in [-1, 1].

    Equals plain IOU when the union fills the tightest enclosing box and
    is strictly smaller otherwise, going to -1 for far-apart boxes.
    """
    return giou_corners(a.as_tuple(), b.as_tuple())


def box_l1(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    """Sum of absolute coordinate differences in center/size space."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )


def phrase_iou(a: PhraseSpans, b: PhraseSpans) -> float:
    """Token-set intersection over union of two phrases.

    Returns 0.0 when the union is empty (both phrases empty), so a
    no-phrase prediction never scores as a correct phrase match.
    """
    sa = a.token_set()
    sb = b.token_set()
    union = len(sa | sb)
    if union == 0:
        return 0.0
    return len(sa & sb) / union


def dual_iou(
    box_a: BoxXYXY,
    box_b: BoxXYXY,
    phrase_a: PhraseSpans,
    phrase_b: PhraseSpans,
) -> float:
    """Combined box/phrase overlap: sqrt(box_iou) * phrase_iou, in [0, 1]."""
    return math.sqrt(box_iou(box_a, box_b)) * phrase_iou(phrase_a, phrase_b)


def merge_boxes(boxes: Sequence[BoxXYXY]) -> BoxXYXY:
    """Tightest box enclosing every input box; input must be non-empty."""
    if not boxes:
        raise ValueError("merge_boxes requires at least one box")
    return BoxXYXY(
        x1=min(b.x1 for b in boxes),
        y1=min(b.y1 for b in boxes),
        x2=max(b.x2 for b in boxes),
        y2=max(b.y2 for b in boxes),
    )
