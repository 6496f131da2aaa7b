"""Built-in verification suites behind ``peg-eval selftest``.

Each suite cross-checks a production path against an independent route:
the assignment solver against exhaustive enumeration, dataset AP against
the naive step-by-step oracle, analytic loss gradients against central
finite differences, and decoder attention against its row-sum / masking
/ sharing invariants. Suites are deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .assignment import brute_force_assignment, hungarian_solve
from .data import (
    BoxXYXY,
    GroundingPair,
    PegPrediction,
    PegPredictionSet,
    PegSampleGT,
    PhraseSpans,
    TokenizedCaption,
    mask_to_spans,
)
from .kernels import (
    KernelConfig,
    Memory,
    fd_check_gradient,
    init_model_params,
    loss_box,
    loss_phrase_contrastive,
    run_decoder,
    _loss_box_arrays,
)
from .geometry import BoxCXCYWH
from .metrics import cmap

__all__ = ["SuiteResult", "run_selftest", "SUITE_NAMES", "random_mini_dataset"]

SUITE_NAMES = ("hungarian", "ap", "gradients", "attention")


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)

    def check(self, ok: bool, message: str) -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(message)

    @property
    def ok(self) -> bool:
        return self.failed == 0


# ---------------------------------------------------------------------------
# Random inputs
# ---------------------------------------------------------------------------

def _random_box(rng: np.random.Generator) -> BoxXYXY:
    x1, y1 = rng.uniform(0.0, 0.7, size=2)
    w, h = rng.uniform(0.05, 0.3, size=2)
    return BoxXYXY(x1, y1, min(1.0, x1 + w), min(1.0, y1 + h))


def _random_spans(rng: np.random.Generator, n_text: int, allow_empty: bool) -> PhraseSpans:
    if allow_empty and rng.random() < 0.15:
        return PhraseSpans(())
    mask = (rng.random(n_text) < 0.4).astype(np.uint8)
    if not mask.any():
        mask[int(rng.integers(n_text))] = 1
    return mask_to_spans(mask)


def _jitter_box(rng: np.random.Generator, box: BoxXYXY, scale: float) -> BoxXYXY:
    x1 = min(max(box.x1 + rng.normal(0.0, scale), 0.0), 0.98)
    y1 = min(max(box.y1 + rng.normal(0.0, scale), 0.0), 0.98)
    x2 = max(min(box.x2 + rng.normal(0.0, scale), 1.0), x1 + 0.01)
    y2 = max(min(box.y2 + rng.normal(0.0, scale), 1.0), y1 + 0.01)
    return BoxXYXY(x1, y1, x2, y2)


def random_mini_dataset(
    rng: np.random.Generator,
    max_samples: int = 5,
    max_preds: int = 6,
) -> tuple[list[PegSampleGT], list[PegPredictionSet]]:
    """A small random dataset mixing near-hits, misses, and tied scores."""
    samples: list[PegSampleGT] = []
    pred_sets: list[PegPredictionSet] = []
    n_samples = int(rng.integers(1, max_samples + 1))
    for i in range(n_samples):
        n_text = int(rng.integers(2, 9))
        pairs = []
        for _ in range(int(rng.integers(0, 4))):
            spans = _random_spans(rng, n_text, allow_empty=False)
            boxes = tuple(_random_box(rng) for _ in range(int(rng.integers(1, 3))))
            pairs.append(GroundingPair(phrase=spans, boxes=boxes))
        sample = PegSampleGT(
            caption=TokenizedCaption(
                sample_id=f"r{i}", tokens=tuple(f"t{j}" for j in range(n_text))
            ),
            pairs=tuple(pairs),
        )
        samples.append(sample)
        preds = []
        targets = [(b, p.phrase) for p in pairs for b in p.boxes]
        for _ in range(int(rng.integers(0, max_preds + 1))):
            if targets and rng.random() < 0.6:
                box, phrase = targets[int(rng.integers(len(targets)))]
                box = _jitter_box(rng, box, scale=0.03)
                if rng.random() < 0.3:
                    phrase = _random_spans(rng, n_text, allow_empty=True)
            else:
                box = _random_box(rng)
                phrase = _random_spans(rng, n_text, allow_empty=True)
            # Quantized confidences force tie-break paths to agree too.
            confidence = round(float(rng.random()), 1)
            preds.append(PegPrediction(box=box, phrase=phrase, confidence=confidence))
        pred_sets.append(PegPredictionSet(sample_id=f"r{i}", predictions=tuple(preds)))
    return samples, pred_sets


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def run_hungarian_suite(seed: int, trials: int = 2000) -> SuiteResult:
    result = SuiteResult("hungarian")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.uniform(-5.0, 5.0, size=(n, m))
        if rng.random() < 0.2:
            cost = np.round(cost)  # exercise exact ties
        fast = hungarian_solve(cost)
        slow = brute_force_assignment(cost)
        result.check(
            fast.total_cost == slow.total_cost and fast.pairs == slow.pairs,
            f"hungarian trial {t}: {fast} != oracle {slow} for shape {n}x{m}",
        )
    return result


def run_ap_suite(seed: int, trials: int = 500) -> SuiteResult:
    result = SuiteResult("ap")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        samples, pred_sets = random_mini_dataset(rng)
        threshold = float(rng.choice([0.3, 0.5, 0.75]))
        fast = cmap(samples, pred_sets, [threshold])[threshold]
        slow = oracles.naive_cmap(samples, pred_sets, threshold)
        result.check(
            abs(fast - slow) <= 1e-12,
            f"ap trial {t}: cmap {fast!r} vs oracle {slow!r} at {threshold}",
        )
    return result


def _random_cxcywh(rng: np.random.Generator) -> BoxCXCYWH:
    cx, cy = rng.uniform(0.2, 0.8, size=2)
    w, h = rng.uniform(0.08, 0.4, size=2)
    return BoxCXCYWH(cx, cy, w, h)


def run_gradient_suite(seed: int, trials: int = 100) -> SuiteResult:
    result = SuiteResult("gradients")
    rng = np.random.default_rng(seed)
    config = KernelConfig()
    for t in range(trials):
        gt = np.array(_random_cxcywh(rng).as_tuple())
        pred = np.array(_random_cxcywh(rng).as_tuple())

        def box_fn(x, gt=gt):
            return _loss_box_arrays(
                x, gt, config.loss_coef_bbox, config.loss_coef_giou
            )

        report = fd_check_gradient(box_fn, pred, step=1e-6, tolerance=1e-4)
        result.check(
            report.passed,
            f"loss_box gradient trial {t}: max rel error {report.max_rel_error:.3e}",
        )

        n_ext = int(rng.integers(2, 9))
        logits = rng.normal(0.0, 1.0, size=n_ext)
        matched = bool(rng.random() < 0.8)
        if matched:
            n_targets = int(rng.integers(1, n_ext))
            target = sorted(
                int(v) for v in rng.choice(n_ext - 1, size=n_targets, replace=False)
            )
        else:
            target = [n_ext - 1]

        def phrase_fn(x, target=target, matched=matched):
            return loss_phrase_contrastive(x, target, matched, config)

        report = fd_check_gradient(phrase_fn, logits, step=1e-6, tolerance=1e-6)
        result.check(
            report.passed,
            f"loss_phrase gradient trial {t}: max rel error {report.max_rel_error:.3e}",
        )
    return result


def _plain_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def run_attention_suite(seed: int, trials: int = 200) -> SuiteResult:
    result = SuiteResult("attention")
    rng = np.random.default_rng(seed)
    config = KernelConfig(n_layers=2)
    for t in range(trials):
        n_img = int(rng.integers(2, 7))
        n_text = int(rng.integers(2, 7))
        d = config.d_model
        memory = Memory(
            image_features=rng.normal(size=(n_img, d)),
            text_features=rng.normal(size=(n_text, d)),
            modality_embed_image=0.1 * rng.normal(size=d),
            modality_embed_text=0.1 * rng.normal(size=d),
        )
        params = init_model_params(config, seed=int(rng.integers(1 << 31)))
        fwd = run_decoder(params, memory, config, collect_attention=True)

        for layer_i, record in enumerate(fwd.attention):
            for name, weights in (("self", record.self_weights),
                                  ("cross", record.cross_weights)):
                sums = weights.sum(axis=-1)
                result.check(
                    bool(np.all(np.abs(sums - 1.0) <= 1e-9)),
                    f"attention trial {t} layer {layer_i}: {name} row sums "
                    f"off by {np.abs(sums - 1.0).max():.3e}",
                )
            masked = ~record.cross_key_mask[None, :, :] & np.ones(
                record.cross_weights.shape, dtype=bool
            )
            leaked = record.cross_weights[masked]
            result.check(
                leaked.size == 0 or float(np.abs(leaked).max()) < 1e-12,
                f"attention trial {t} layer {layer_i}: masked key weight leak",
            )
            if layer_i == 0:
                # First layer masks are all ones: the masked softmax must be
                # bit-identical to a plain stabilized softmax of the logits.
                plain = _plain_softmax_rows(record.cross_logits)
                result.check(
                    bool(np.array_equal(plain, record.cross_weights)),
                    f"attention trial {t}: all-ones mask differs from plain softmax",
                )

        # Positional sharing: each state stores one anchors array and one
        # text-mask array that both streams consume.
        for state in fwd.states:
            result.check(
                state.anchors.shape == (config.n_queries, 4)
                and state.text_masks.shape == (config.n_queries, n_text)
                and bool(np.all((state.anchors > 0) & (state.anchors < 1))),
                f"attention trial {t}: positional state invariant broken",
            )
    return result


_SUITE_RUNNERS = {
    "hungarian": run_hungarian_suite,
    "ap": run_ap_suite,
    "gradients": run_gradient_suite,
    "attention": run_attention_suite,
}

_DEFAULT_TRIALS = {
    "hungarian": 2000,
    "ap": 500,
    "gradients": 100,
    "attention": 200,
}


def run_selftest(
    seed: int = 0,
    suites: tuple[str, ...] | None = None,
    trials: int | None = None,
) -> list[SuiteResult]:
    """Run the requested suites (all by default) with the given seed."""
    chosen = suites or SUITE_NAMES
    results = []
    for name in chosen:
        if name not in _SUITE_RUNNERS:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITE_NAMES}")
        n = trials if trials is not None else _DEFAULT_TRIALS[name]
        results.append(_SUITE_RUNNERS[name](seed, n))
    return results
