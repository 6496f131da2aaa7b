"""Synthetic datasets and a small numerically trained overfit loop.

``generate_dataset`` plants a recoverable structure: text features carry
a per-token identity direction, and the image tokens that belong to a
grounding pair carry (a) that pair's box coordinates in four reserved
dimensions and (b) the sum of the identity directions of the pair's
phrase tokens. Image features inside ground-truth boxes are therefore an
exact linear function of the text features of the ground-truth spans,
which makes the decoder's job realizable: attend to the right image
tokens, read the box, and align the projection heads with the identity
directions.

``fd_train`` differentiates the total loss by central finite differences
over every parameter and descends with plain gradient steps, halving the
step size whenever a step would increase the loss. Within one step the
query-to-target assignments are computed once on the unperturbed
parameters and held fixed for the sweep (the matching is piecewise
constant, so this is the exact gradient almost everywhere). Coordinate
evaluations are independent and may be spread over worker processes; the
merged gradient is bitwise identical for any worker count.

Memory sidecar format (one file per sample): a 16-byte header
``<4sHHHHI`` = (magic b"PGMF", version, N_img, N_text, D, reserved),
followed by little-endian float64 payload in order: image features
[N_img * D], text features [N_text * D], image modality embedding [D],
text modality embedding [D], all row-major.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data import (
    BoxXYXY,
    GroundingPair,
    PegPrediction,
    PegPredictionSet,
    PegSampleGT,
    PhraseSpans,
    TokenizedCaption,
    flatten_gt_targets,
    load_ground_truth,
    mask_to_spans,
    write_ground_truth,
)
from .kernels import (
    ANCHOR_MAX,
    ANCHOR_MIN,
    KernelConfig,
    KernelNumericsError,
    Memory,
    MlpParams,
    ModelParams,
    count_params,
    flatten_params,
    init_model_params,
    params_with_vector,
    run_decoder,
    total_loss,
    _sine_encode_rows,
)
from .metrics import cmap, recall_at_k_anybox

__all__ = [
    "SynthSpec",
    "TrainingDiverged",
    "FdTrainResult",
    "generate_dataset",
    "write_dataset",
    "load_dataset",
    "write_memory",
    "read_memory",
    "fd_train",
    "predictions_from_params",
]

MEMORY_MAGIC = b"PGMF"
MEMORY_VERSION = 1
_HEADER = struct.Struct("<4sHHHHI")

MAX_FD_PARAMS = 20_000
_MIN_STEP = 1e-18


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for dataset generation; every draw flows from ``seed``."""

    seed: int = 0
    n_samples: int = 3
    n_text_range: tuple[int, int] = (5, 7)
    n_img: int = 8
    pairs_range: tuple[int, int] = (1, 2)
    noise: float = 0.01
    d_model: int = 16

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        for name in ("n_text_range", "pairs_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"empty {name}: ({lo}, {hi})")
        if self.n_text_range[0] < 1:
            raise ValueError("captions need at least one token")
        if self.n_img < 1:
            raise ValueError("need at least one image token")
        if not (math.isfinite(self.noise) and self.noise >= 0.0):
            raise ValueError(f"noise must be finite and >= 0, got {self.noise}")
        if self.pairs_range[1] > self.n_text_range[0]:
            raise ValueError(
                f"up to {self.pairs_range[1]} pairs cannot fit disjoint spans "
                f"in {self.n_text_range[0]} tokens"
            )
        if self.pairs_range[1] > self.n_img:
            raise ValueError(
                f"{self.pairs_range[1]} pairs need at least as many image tokens"
            )
        if self.n_text_range[1] > self.d_model - 4:
            raise ValueError(
                f"n_text up to {self.n_text_range[1]} exceeds the "
                f"{self.d_model - 4} token-identity dimensions of d_model="
                f"{self.d_model}"
            )


def generate_dataset(
    spec: SynthSpec,
) -> tuple[list[PegSampleGT], dict[str, Memory]]:
    """Deterministically generate ground truth plus per-sample memory."""
    rng = np.random.default_rng(spec.seed)
    d = spec.d_model
    samples: list[PegSampleGT] = []
    memories: dict[str, Memory] = {}
    for i in range(spec.n_samples):
        sample_id = f"synth-{i:04d}"
        n_text = int(rng.integers(spec.n_text_range[0], spec.n_text_range[1] + 1))
        n_pairs = int(rng.integers(spec.pairs_range[0], spec.pairs_range[1] + 1))

        # Disjoint spans: spread starts over the caption, extend to length 2
        # when the gap to the next start allows it.
        starts = sorted(
            int(v) for v in rng.choice(n_text, size=n_pairs, replace=False)
        )
        pairs: list[GroundingPair] = []
        for p, start in enumerate(starts):
            limit = starts[p + 1] if p + 1 < n_pairs else n_text
            max_len = min(2, limit - start)
            length = int(rng.integers(1, max_len + 1))
            span = PhraseSpans(((start, start + length),))
            cx, cy = rng.uniform(0.25, 0.75, size=2)
            w, h = rng.uniform(0.15, 0.35, size=2)
            box = BoxXYXY(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            pairs.append(GroundingPair(phrase=span, boxes=(box,)))

        caption = TokenizedCaption(
            sample_id=sample_id,
            tokens=tuple(f"w{j}" for j in range(n_text)),
        )
        samples.append(PegSampleGT(caption=caption, pairs=tuple(pairs)))

        # Planted features: identity directions for tokens, box coordinates
        # plus span signatures for in-box image tokens.
        text = spec.noise * rng.normal(size=(n_text, d))
        for j in range(n_text):
            text[j, 4 + j] += 1.0
        image = spec.noise * rng.normal(size=(spec.n_img, d))
        slots = rng.permutation(spec.n_img)
        per_pair = max(1, spec.n_img // max(1, 2 * n_pairs)) if n_pairs else 0
        cursor = 0
        for pair in pairs:
            box = pair.boxes[0]
            cxcywh = np.array([
                (box.x1 + box.x2) / 2.0,
                (box.y1 + box.y2) / 2.0,
                box.x2 - box.x1,
                box.y2 - box.y1,
            ])
            signature = np.zeros(d)
            for start, end in pair.phrase.spans:
                signature[4 + start:4 + end] += 1.0
            for _ in range(per_pair):
                tok = slots[cursor]
                cursor += 1
                image[tok, 0:4] += cxcywh
                image[tok] += signature
        memories[sample_id] = Memory(
            image_features=image,
            text_features=text,
            modality_embed_image=0.05 * rng.normal(size=d),
            modality_embed_text=0.05 * rng.normal(size=d),
        )
    return samples, memories


# ---------------------------------------------------------------------------
# Sidecar serialization
# ---------------------------------------------------------------------------

def write_memory(memory: Memory, path) -> None:
    header = _HEADER.pack(
        MEMORY_MAGIC, MEMORY_VERSION, memory.n_img, memory.n_text,
        memory.image_features.shape[1], 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (memory.image_features, memory.text_features,
                    memory.modality_embed_image, memory.modality_embed_text):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_memory(path) -> Memory:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated memory sidecar")
    magic, version, n_img, n_text, d, _ = _HEADER.unpack_from(raw)
    if magic != MEMORY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != MEMORY_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    counts = (n_img * d, n_text * d, d, d)
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if payload.size != sum(counts):
        raise ValueError(
            f"{path}: payload holds {payload.size} floats, expected {sum(counts)}"
        )
    parts = []
    offset = 0
    for count in counts:
        parts.append(payload[offset:offset + count].astype(np.float64))
        offset += count
    return Memory(
        image_features=parts[0].reshape(n_img, d),
        text_features=parts[1].reshape(n_text, d),
        modality_embed_image=parts[2],
        modality_embed_text=parts[3],
    )


def write_dataset(
    samples: Sequence[PegSampleGT],
    memories: dict[str, Memory],
    out_dir,
) -> Path:
    """Write gt.jsonl plus memory/<sample_id>.mem; returns the directory."""
    out = Path(out_dir)
    (out / "memory").mkdir(parents=True, exist_ok=True)
    with open(out / "gt.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_ground_truth(samples, fh)
    for sample in samples:
        write_memory(memories[sample.sample_id], out / "memory" / f"{sample.sample_id}.mem")
    return out


def load_dataset(dataset_dir) -> list[tuple[PegSampleGT, Memory]]:
    root = Path(dataset_dir)
    samples = load_ground_truth(root / "gt.jsonl")
    return [
        (s, read_memory(root / "memory" / f"{s.sample_id}.mem")) for s in samples
    ]


# ---------------------------------------------------------------------------
# Finite-difference training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    """Loss blew past the divergence limit; carries the trace so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class FdTrainResult:
    params: ModelParams
    loss_trace: list[float]
    predictions: list[PegPredictionSet]
    steps_run: int
    stopped_early: bool


def predictions_from_params(
    params: ModelParams,
    dataset: Sequence[tuple[PegSampleGT, Memory]],
    config: KernelConfig,
) -> list[PegPredictionSet]:
    """Decode every sample into a prediction set.

    Per query: box = final anchor (clipped into the unit square), phrase =
    final text-mask row, confidence = 1 - p(no_phrase).
    """
    out: list[PegPredictionSet] = []
    for sample, memory in dataset:
        fwd = run_decoder(params, memory, config)
        state = fwd.final_state
        logits = fwd.outputs.phrase_logits / config.tau
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        preds = []
        for q in range(state.anchors.shape[0]):
            cx, cy, w, h = state.anchors[q]
            box = BoxXYXY(
                x1=max(0.0, cx - w / 2.0),
                y1=max(0.0, cy - h / 2.0),
                x2=min(1.0, cx + w / 2.0),
                y2=min(1.0, cy + h / 2.0),
            )
            preds.append(
                PegPrediction(
                    box=box,
                    phrase=mask_to_spans(state.text_masks[q]),
                    confidence=float(1.0 - probs[q, -1]),
                )
            )
        out.append(
            PegPredictionSet(sample_id=sample.sample_id, predictions=tuple(preds))
        )
    return out


def _dataset_loss_matched(
    params: ModelParams,
    dataset: Sequence[tuple[PegSampleGT, Memory]],
    config: KernelConfig,
) -> tuple[float, list[tuple[tuple[int, int], ...]]]:
    value = 0.0
    assignments: list[tuple[tuple[int, int], ...]] = []
    for sample, memory in dataset:
        fwd = run_decoder(params, memory, config)
        result = total_loss(fwd.outputs, sample, config)
        value += result.value
        assignments.append(result.assignment.pairs)
    return value, assignments


class _BatchedLoss:
    """Fixed-assignment dataset loss over a batch of parameter vectors.

    The central-difference sweep needs 2 * n_params loss values per step;
    evaluating them one reference forward at a time drowns in Python
    overhead. This evaluator mirrors the reference decoder with a leading
    batch axis so one numpy call services a whole chunk of perturbations.
    Every batch row is computed independently by the underlying GEMMs, so
    results do not depend on the chunk size. Values agree with the
    reference path to floating-point reassociation (tests pin this down),
    and the sweep itself only ever uses this path, so the gradient is
    self-consistent.
    """

    def __init__(
        self,
        template: ModelParams,
        dataset: Sequence[tuple[PegSampleGT, Memory]],
        targets_per_sample: Sequence,
        config: KernelConfig,
    ):
        self.template = template
        self.config = config
        self.samples = []
        for (sample, memory), targets in zip(dataset, targets_per_sample):
            tgt = []
            for box, phrase in targets:
                x1, y1, x2, y2 = box.as_tuple()
                tgt.append((
                    np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]),
                    sorted(phrase.token_set()),
                ))
            self.samples.append((memory, tgt))
        self.assignments: list[Sequence[tuple[int, int]]] = [
            () for _ in self.samples
        ]

    def set_assignments(self, assignments) -> None:
        self.assignments = assignments

    def __call__(self, theta_batch: np.ndarray) -> np.ndarray:
        params = _rebuild_batched(self.template, theta_batch, [0])
        total = np.zeros(theta_batch.shape[0])
        for (memory, targets), pairs in zip(self.samples, self.assignments):
            boxes, logits = self._forward(params, memory)
            total += self._loss(boxes, logits, targets, pairs)
        return total

    def _forward(self, p, memory: Memory):
        cfg = self.config
        n_q = cfg.n_queries
        n_heads = cfg.n_heads
        batch = p.anchor_logits.shape[0]
        anchors = np.clip(expit(p.anchor_logits), ANCHOR_MIN, ANCHOR_MAX)
        masks = np.ones((batch, n_q, memory.n_text))
        c_img = np.broadcast_to(p.content_image, (batch, n_q, cfg.d_model)).copy()
        c_txt = np.broadcast_to(p.content_text, (batch, n_q, cfg.d_model)).copy()
        mem_raw = np.concatenate([
            memory.image_features + memory.modality_embed_image,
            memory.text_features + memory.modality_embed_text,
        ])[None, :, :]
        for layer in p.layers:
            pos = _mlp_b(_sine_encode_rows(anchors, cfg.d_model), layer.pos_mlp)
            content = np.concatenate([c_img, c_txt], axis=1)
            qk = np.concatenate([
                c_img + pos + layer.modality_image[:, None, :],
                c_txt + pos + layer.modality_text[:, None, :],
            ], axis=1)
            content = content + _attn_b(qk, qk, content, layer.self_attn, n_heads, None)
            q_cross = np.concatenate([
                content[:, :n_q] + pos + layer.modality_image[:, None, :],
                content[:, n_q:] + pos + layer.modality_text[:, None, :],
            ], axis=1)
            key_mask = np.ones((batch, 2 * n_q, mem_raw.shape[1]), dtype=bool)
            key_mask[:, n_q:, memory.n_img:] = masks.astype(bool)
            content = content + _attn_b(
                q_cross, mem_raw, mem_raw, layer.cross_attn, n_heads, key_mask
            )
            c_img = content[:, :n_q] + _mlp_b(content[:, :n_q], layer.ffn_image)
            c_txt = content[:, n_q:] + _mlp_b(content[:, n_q:], layer.ffn_text)
            delta = _mlp_b(c_img, layer.box_mlp)
            anchors = np.clip(expit(logit(anchors) + delta), ANCHOR_MIN, ANCHOR_MAX)
            q_proj = c_img @ layer.query_proj.w + layer.query_proj.b[:, None, :]
            t_proj = memory.text_features[None] @ layer.text_proj.w \
                + layer.text_proj.b[:, None, :]
            mask_logits = q_proj @ t_proj.transpose(0, 2, 1)
            masks = (mask_logits > cfg.mask_threshold).astype(np.float64)
            live = masks.any(axis=-1, keepdims=True)
            masks = np.where(live, masks, 1.0)
        last = p.layers[-1]
        q_proj = c_txt @ last.query_proj.w + last.query_proj.b[:, None, :]
        t_proj = memory.text_features[None] @ last.text_proj.w \
            + last.text_proj.b[:, None, :]
        ext = np.concatenate([t_proj, last.no_phrase_token[:, None, :]], axis=1)
        return anchors, q_proj @ ext.transpose(0, 2, 1)

    def _loss(self, boxes, logits, targets, pairs):
        cfg = self.config
        n_q = boxes.shape[1]
        matched = dict(pairs)
        z = logits / cfg.tau
        z = z - z.max(axis=-1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        value = np.zeros(boxes.shape[0])
        for q in range(n_q):
            if q in matched:
                gt4, token_idx = targets[matched[q]]
                value += _box_loss_b(
                    boxes[:, q], gt4, cfg.loss_coef_bbox, cfg.loss_coef_giou
                )
                phrase = -log_probs[:, q, token_idx].sum(axis=-1)
            else:
                phrase = cfg.no_phrase_weight * -log_probs[:, q, -1]
            value += cfg.loss_coef_phrase * phrase
        return value


def _mlp_b(x, p: "MlpParams"):
    h = np.maximum(x @ p.w1 + p.b1[:, None, :], 0.0)
    return h @ p.w2 + p.b2[:, None, :]


def _attn_b(q_in, k_in, v_in, p, n_heads: int, key_mask):
    batch = q_in.shape[0]
    t_q, t_k = q_in.shape[1], k_in.shape[1]
    d = p.wq.shape[1]
    dh = d // n_heads
    q = (q_in @ p.wq + p.bq[:, None, :]).reshape(batch, t_q, n_heads, dh)
    k = (k_in @ p.wk + p.bk[:, None, :]).reshape(-1, t_k, n_heads, dh)
    v = (v_in @ p.wv + p.bv[:, None, :]).reshape(-1, t_k, n_heads, dh)
    q = q.transpose(0, 2, 1, 3)
    k = k.transpose(0, 2, 1, 3)
    v = v.transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    if key_mask is not None:
        scores = np.where(key_mask[:, None, :, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=-1, keepdims=True)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, t_q, d)
    return ctx @ p.wo + p.bo[:, None, :]


def _box_loss_b(pred, gt4, coef_bbox: float, coef_giou: float):
    l1 = np.abs(pred - gt4).sum(axis=-1)
    ax1 = pred[:, 0] - pred[:, 2] / 2.0
    ay1 = pred[:, 1] - pred[:, 3] / 2.0
    ax2 = pred[:, 0] + pred[:, 2] / 2.0
    ay2 = pred[:, 1] + pred[:, 3] / 2.0
    bx1, by1 = gt4[0] - gt4[2] / 2.0, gt4[1] - gt4[3] / 2.0
    bx2, by2 = gt4[0] + gt4[2] / 2.0, gt4[1] + gt4[3] / 2.0
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * \
        (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    giou = inter / union - (hull - union) / hull
    return coef_bbox * l1 + coef_giou * (1.0 - giou)


def _rebuild_batched(obj, vec2d: np.ndarray, offset: list[int]):
    """Like params_with_vector but over [batch, n_params] vectors."""
    import dataclasses

    if isinstance(obj, np.ndarray):
        start = offset[0]
        offset[0] += obj.size
        return vec2d[:, start:offset[0]].reshape((vec2d.shape[0],) + obj.shape)
    if dataclasses.is_dataclass(obj):
        kwargs = {
            f.name: _rebuild_batched(getattr(obj, f.name), vec2d, offset)
            for f in dataclasses.fields(obj)
        }
        return type(obj)(**kwargs)
    if isinstance(obj, tuple):
        return tuple(_rebuild_batched(item, vec2d, offset) for item in obj)
    raise TypeError(f"unexpected parameter leaf {type(obj)!r}")


def _fd_gradient(
    theta: np.ndarray,
    evaluator: _BatchedLoss,
    fd_step: float,
    chunk_size: int,
) -> np.ndarray:
    n = theta.size
    grad = np.empty(n)
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        width = hi - lo
        batch = np.tile(theta, (2 * width, 1))
        idx = np.arange(width)
        batch[idx, lo + idx] += fd_step
        batch[width + idx, lo + idx] -= fd_step
        values = evaluator(batch)
        grad[lo:hi] = (values[:width] - values[width:]) / (2.0 * fd_step)
    return grad


def fd_train(
    dataset: Sequence[tuple[PegSampleGT, Memory]],
    config: KernelConfig,
    steps: int,
    learning_rate: float,
    *,
    seed: int = 0,
    fd_step: float = 1e-6,
    stop_when_perfect: bool = True,
    check_every: int = 5,
    divergence_limit: float = 1e6,
    chunk_size: int = 256,
) -> FdTrainResult:
    """Train by central-difference gradient descent until done or perfect.

    Runs at most ``steps`` accepted steps. A proposed step that would
    increase the loss halves the step size and retries, so the recorded
    trace is non-increasing after the first entry; the step size regrows
    gently (capped at ``learning_rate``) after accepted steps. Within a
    step the assignments are frozen at the unperturbed parameters. When
    ``stop_when_perfect`` is set, the train set is scored every
    ``check_every`` steps and training stops once the combined-overlap AP
    at 0.5 and top-1 anybox recall both reach 1.0. ``chunk_size`` only
    bounds the sweep's working memory; it never changes any value.
    """
    if not dataset:
        raise ValueError("empty dataset")
    params = init_model_params(config, seed)
    n_params = count_params(params)
    if n_params > MAX_FD_PARAMS:
        raise ValueError(
            f"{n_params} parameters exceed the finite-difference budget "
            f"({MAX_FD_PARAMS})"
        )
    theta = flatten_params(params)
    params = params_with_vector(params, theta)
    targets = [flatten_gt_targets(sample) for sample, _ in dataset]
    gt_samples = [sample for sample, _ in dataset]
    evaluator = _BatchedLoss(params, dataset, targets, config)

    def is_perfect() -> bool:
        preds = predictions_from_params(params, dataset, config)
        if cmap(gt_samples, preds, [0.5])[0.5] != 1.0:
            return False
        return recall_at_k_anybox(gt_samples, preds, 1) == 1.0

    current, assignments = _dataset_loss_matched(params, dataset, config)
    trace = [current]
    lr = learning_rate
    steps_run = 0
    stopped_early = False
    for step_i in range(steps):
        if stop_when_perfect and step_i % check_every == 0 and is_perfect():
            stopped_early = True
            break
        evaluator.set_assignments(assignments)
        grad = _fd_gradient(theta, evaluator, fd_step, chunk_size)
        base = theta.copy()
        while True:
            theta[:] = base - lr * grad
            try:
                cand, cand_assignments = _dataset_loss_matched(
                    params, dataset, config
                )
            except KernelNumericsError:
                cand, cand_assignments = math.inf, assignments
            if (math.isfinite(cand) and cand <= current) or lr <= _MIN_STEP:
                break
            lr *= 0.5
        if not math.isfinite(cand) or cand > current:
            # Step size floored out; keep the old parameters.
            theta[:] = base
            cand, cand_assignments = current, assignments
        current, assignments = cand, cand_assignments
        trace.append(current)
        steps_run = step_i + 1
        if not math.isfinite(current) or current > divergence_limit:
            raise TrainingDiverged(
                f"loss {current} after step {steps_run}", trace
            )
        lr = min(lr * 1.5, learning_rate)
    if stop_when_perfect and not stopped_early and is_perfect():
        stopped_early = True

    return FdTrainResult(
        params=params,
        loss_trace=trace,
        predictions=predictions_from_params(params, dataset, config),
        steps_run=steps_run,
        stopped_early=stopped_early,
    )
