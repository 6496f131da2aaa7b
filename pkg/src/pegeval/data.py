"""Data model and JSONL file formats for phrase extraction and grounding.

A *sample* is one image-text pair. Ground truth tokenizes the caption and
lists grounding pairs, each pairing a phrase (a set of token-index spans)
with one or more object boxes. Predictions are (box, phrase, confidence)
triples; an empty span list means the prediction committed to no phrase.

Ground-truth JSONL, one object per line::

    {"id": str, "tokens": [str, ...],
     "pairs": [{"spans": [[start, end], ...],
                "boxes": [[x1, y1, x2, y2], ...]}]}

Prediction JSONL::

    {"id": str,
     "predictions": [{"box": [x1, y1, x2, y2],
                      "spans": [[start, end], ...],
                      "confidence": c}]}

Files are UTF-8 with LF line endings and 64-bit floats. Box coordinates
are normalized to [0, 1]; spans are half-open token-index intervals over
the sample's own ``tokens`` array, so ground truth and predictions can
never disagree on token boundaries. There is no established interchange
format for this task; the one above is this package's own.

All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "TokenizedCaption",
    "PhraseSpans",
    "BoxXYXY",
    "GroundingPair",
    "PegSampleGT",
    "PegPrediction",
    "PegPredictionSet",
    "spans_to_mask",
    "mask_to_spans",
    "flatten_gt_targets",
    "parse_ground_truth",
    "parse_predictions",
    "load_ground_truth",
    "load_predictions",
    "write_ground_truth",
    "write_predictions",
]


class DataFormatError(ValueError):
    """Malformed record in a ground-truth or prediction file.

    ``line`` is the 1-based line number when the error was raised while
    parsing a stream, else None.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class PhraseSpans:
    """A phrase as sorted, non-overlapping, non-adjacent [start, end) spans.

    Non-adjacency makes the representation canonical: the same token set
    always produces the same span tuple, and the round trip through a
    binary mask is lossless. An empty span tuple is the "no phrase" value.
    """

    spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev_end = None
        for start, end in self.spans:
            if start < 0 or start >= end:
                raise DataFormatError(f"invalid span [{start}, {end})")
            if prev_end is not None and start <= prev_end:
                raise DataFormatError(
                    f"spans not sorted/merged at [{start}, {end})"
                )
            prev_end = end

    @classmethod
    def make(cls, spans: Iterable[Sequence[int]]) -> "PhraseSpans":
        return cls(tuple((int(s), int(e)) for s, e in spans))

    @property
    def is_empty(self) -> bool:
        return not self.spans

    @property
    def first_token(self) -> int:
        """Index of the earliest token, or -1 for an empty phrase."""
        return self.spans[0][0] if self.spans else -1

    @property
    def max_end(self) -> int:
        return self.spans[-1][1] if self.spans else 0

    def token_count(self) -> int:
        return sum(end - start for start, end in self.spans)

    def token_set(self) -> frozenset[int]:
        return frozenset(
            j for start, end in self.spans for j in range(start, end)
        )


def spans_to_mask(spans: PhraseSpans, n_text: int) -> np.ndarray:
    """Expand spans to a uint8 mask of length ``n_text``.

    mask[j] is 1 iff token j lies in some span. Raises DataFormatError if
    any span reaches past ``n_text``.
    """
    if spans.max_end > n_text:
        raise DataFormatError(
            f"span end {spans.max_end} exceeds token count {n_text}"
        )
    mask = np.zeros(n_text, dtype=np.uint8)
    for start, end in spans.spans:
        mask[start:end] = 1
    return mask


def mask_to_spans(mask: Sequence[int] | np.ndarray) -> PhraseSpans:
    """Collapse a binary mask to maximally merged spans.

    Inverse of :func:`spans_to_mask`: runs of set bits become spans, so
    the result is always canonical (sorted, non-overlapping, non-adjacent).
    """
    spans: list[tuple[int, int]] = []
    start = None
    for j, bit in enumerate(mask):
        if bit and start is None:
            start = j
        elif not bit and start is not None:
            spans.append((start, j))
            start = None
    if start is not None:
        spans.append((start, len(mask)))
    return PhraseSpans(tuple(spans))


@dataclass(frozen=True)
class BoxXYXY:
    """Axis-aligned box as corner coordinates normalized to [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DataFormatError(f"non-finite box {coords}")
        if not (0.0 <= self.x1 < self.x2 <= 1.0
                and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise DataFormatError(f"degenerate box {coords}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class TokenizedCaption:
    """A sample's caption, pre-tokenized by the data producer."""

    sample_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.sample_id:
            raise DataFormatError("empty sample id")
        if len(self.tokens) < 1 or any(not t for t in self.tokens):
            raise DataFormatError(
                f"sample {self.sample_id!r}: tokens must be non-empty strings"
            )

    @property
    def n_text(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class GroundingPair:
    """One annotated phrase and the object boxes it refers to."""

    phrase: PhraseSpans
    boxes: tuple[BoxXYXY, ...]

    def __post_init__(self):
        if self.phrase.is_empty:
            raise DataFormatError("empty phrase in ground-truth pair")
        if len(self.boxes) < 1:
            raise DataFormatError("ground-truth pair without boxes")


@dataclass(frozen=True)
class PegSampleGT:
    """Ground truth for one sample: caption plus grounding pairs."""

    caption: TokenizedCaption
    pairs: tuple[GroundingPair, ...]

    def __post_init__(self):
        n = self.caption.n_text
        for pair in self.pairs:
            if pair.phrase.max_end > n:
                raise DataFormatError(
                    f"sample {self.caption.sample_id!r}: span end "
                    f"{pair.phrase.max_end} exceeds token count {n}"
                )

    @property
    def sample_id(self) -> str:
        return self.caption.sample_id


@dataclass(frozen=True)
class PegPrediction:
    """A predicted (box, phrase, confidence) triple.

    The phrase may be empty, meaning the query committed to no phrase;
    such predictions never count as correct phrase matches.
    """

    box: BoxXYXY
    phrase: PhraseSpans
    confidence: float

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise DataFormatError(f"confidence {self.confidence} not finite")
        if not (0.0 <= self.confidence <= 1.0):
            raise DataFormatError(
                f"confidence {self.confidence} out of [0,1]"
            )


@dataclass(frozen=True)
class PegPredictionSet:
    """All predictions for one sample id."""

    sample_id: str
    predictions: tuple[PegPrediction, ...]

    def __post_init__(self):
        if not self.sample_id:
            raise DataFormatError("empty sample id")


def flatten_gt_targets(
    sample: PegSampleGT,
) -> list[tuple[BoxXYXY, PhraseSpans]]:
    """Flatten grounding pairs to one (box, phrase) target per box.

    A pair with k boxes yields k targets sharing one phrase, so matching
    and scoring treat every object instance as its own target.
    """
    return [(box, pair.phrase) for pair in sample.pairs for box in pair.boxes]


# ---------------------------------------------------------------------------
# JSONL parsing / serialization
# ---------------------------------------------------------------------------

def _iter_lines(stream: IO[bytes] | IO[str] | Iterable) -> Iterator[tuple[int, str]]:
    for i, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DataFormatError(f"invalid UTF-8: {exc}", line=i) from exc
        line = raw.rstrip("\n").rstrip("\r")
        if line.strip():
            yield i, line


def _parse_json_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed JSON ({exc.msg})", line=lineno) from exc
    if not isinstance(obj, dict):
        raise DataFormatError("record is not a JSON object", line=lineno)
    return obj


def _parse_box(raw, lineno: int) -> BoxXYXY:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4):
        raise DataFormatError(f"box must be 4 numbers, got {raw!r}", line=lineno)
    try:
        return BoxXYXY(*(float(v) for v in raw))
    except DataFormatError as exc:
        raise DataFormatError(str(exc), line=lineno) from exc


def _parse_spans(raw, lineno: int) -> PhraseSpans:
    if not isinstance(raw, list):
        raise DataFormatError(f"spans must be a list, got {raw!r}", line=lineno)
    try:
        return PhraseSpans.make(raw)
    except (DataFormatError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad spans {raw!r}: {exc}", line=lineno) from exc


def parse_ground_truth(
    stream: IO[bytes] | IO[str] | Iterable,
) -> list[PegSampleGT]:
    """Parse a ground-truth JSONL stream, validating every invariant.

    Returns samples in file order. Raises DataFormatError with the 1-based
    line number for malformed JSON, out-of-range spans, empty phrases,
    degenerate boxes, or duplicate sample ids.
    """
    samples: list[PegSampleGT] = []
    seen: set[str] = set()
    for lineno, line in _iter_lines(stream):
        obj = _parse_json_line(line, lineno)
        try:
            caption = TokenizedCaption(
                sample_id=str(obj["id"]),
                tokens=tuple(str(t) for t in obj["tokens"]),
            )
            pairs = tuple(
                GroundingPair(
                    phrase=_parse_spans(p.get("spans", []), lineno),
                    boxes=tuple(_parse_box(b, lineno) for b in p.get("boxes", [])),
                )
                for p in obj.get("pairs", [])
            )
            sample = PegSampleGT(caption=caption, pairs=pairs)
        except KeyError as exc:
            raise DataFormatError(f"missing field {exc}", line=lineno) from exc
        except DataFormatError as exc:
            if exc.line is None:
                raise DataFormatError(str(exc), line=lineno) from exc
            raise
        if sample.sample_id in seen:
            raise DataFormatError(
                f"duplicate sample id {sample.sample_id!r}", line=lineno
            )
        seen.add(sample.sample_id)
        samples.append(sample)
    return samples


def parse_predictions(
    stream: IO[bytes] | IO[str] | Iterable,
) -> list[PegPredictionSet]:
    """Parse a prediction JSONL stream.

    Same discipline as :func:`parse_ground_truth`; empty ``spans`` lists
    are valid (no-phrase predictions). Whether sample ids exist in the
    paired ground truth is checked at evaluation time, not here.
    """
    sets: list[PegPredictionSet] = []
    seen: set[str] = set()
    for lineno, line in _iter_lines(stream):
        obj = _parse_json_line(line, lineno)
        try:
            preds = []
            for p in obj.get("predictions", []):
                confidence = float(p["confidence"])
                preds.append(
                    PegPrediction(
                        box=_parse_box(p["box"], lineno),
                        phrase=_parse_spans(p.get("spans", []), lineno),
                        confidence=confidence,
                    )
                )
            pred_set = PegPredictionSet(
                sample_id=str(obj["id"]), predictions=tuple(preds)
            )
        except KeyError as exc:
            raise DataFormatError(f"missing field {exc}", line=lineno) from exc
        except DataFormatError as exc:
            if exc.line is None:
                raise DataFormatError(str(exc), line=lineno) from exc
            raise
        if pred_set.sample_id in seen:
            raise DataFormatError(
                f"duplicate sample id {pred_set.sample_id!r}", line=lineno
            )
        seen.add(pred_set.sample_id)
        sets.append(pred_set)
    return sets


def load_ground_truth(path) -> list[PegSampleGT]:
    with open(path, "rb") as fh:
        return parse_ground_truth(fh)


def load_predictions(path) -> list[PegPredictionSet]:
    with open(path, "rb") as fh:
        return parse_predictions(fh)


def _box_json(box: BoxXYXY) -> list[float]:
    return [box.x1, box.y1, box.x2, box.y2]


def write_ground_truth(samples: Iterable[PegSampleGT], stream: IO[str]) -> None:
    """Serialize samples as ground-truth JSONL (sorted keys, LF endings)."""
    for sample in samples:
        obj = {
            "id": sample.sample_id,
            "tokens": list(sample.caption.tokens),
            "pairs": [
                {
                    "spans": [list(s) for s in pair.phrase.spans],
                    "boxes": [_box_json(b) for b in pair.boxes],
                }
                for pair in sample.pairs
            ],
        }
        stream.write(json.dumps(obj, sort_keys=True) + "\n")


def write_predictions(
    pred_sets: Iterable[PegPredictionSet], stream: IO[str]
) -> None:
    """Serialize prediction sets as prediction JSONL."""
    for pred_set in pred_sets:
        obj = {
            "id": pred_set.sample_id,
            "predictions": [
                {
                    "box": _box_json(p.box),
                    "spans": [list(s) for s in p.phrase.spans],
                    "confidence": p.confidence,
                }
                for p in pred_set.predictions
            ],
        }
        stream.write(json.dumps(obj, sort_keys=True) + "\n")
