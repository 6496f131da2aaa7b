"""``peg-eval`` command line: score, pr-curve, validate, selftest, synth.

Exit codes are a stable contract: 0 success, 1 input/parse error, 2
cross-file consistency error, 3 selftest failure. All numeric output is
printed with six decimal places and report JSON uses sorted keys, so
identical inputs and flags produce byte-identical outputs regardless of
``--threads``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import DataFormatError, load_ground_truth, load_predictions, write_predictions
from .kernels import KernelConfig
from .metrics import SampleMismatchError, evaluate, write_pr_csv
from .selftest import SUITE_NAMES, run_selftest
from .synth import (
    SynthSpec,
    TrainingDiverged,
    fd_train,
    generate_dataset,
    load_dataset,
    write_dataset,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONSISTENCY = 2
EXIT_SELFTEST = 3


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_pair(gt_path, pred_path):
    try:
        gt = load_ground_truth(gt_path)
    except DataFormatError as exc:
        raise DataFormatError(f"{gt_path}: {exc}") from exc
    try:
        preds = load_predictions(pred_path)
    except DataFormatError as exc:
        raise DataFormatError(f"{pred_path}: {exc}") from exc
    return gt, preds


def _cmd_score(args) -> int:
    gt, preds = _load_pair(args.gt, args.pred)
    ks = _parse_int_list(args.k)
    if any(k < 1 for k in ks):
        raise DataFormatError(f"--k values must be >= 1, got {args.k}")
    protocols = ("anybox", "merged") if args.protocol == "both" else (args.protocol,)
    report = evaluate(
        gt,
        preds,
        thresholds=_parse_float_list(args.thresholds),
        ks=ks,
        protocols=protocols,
        threads=args.threads,
    )
    for t in sorted(report.cmap):
        print(f"cmap@{t:.2f} = {report.cmap[t]:.6f}")
    for proto, k in sorted(report.recall_at_k):
        print(f"{proto}@{k} = {report.recall_at_k[(proto, k)]:.6f}")
    payload = report.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    return EXIT_OK


def _cmd_pr_curve(args) -> int:
    gt, preds = _load_pair(args.gt, args.pred)
    report = evaluate(
        gt, preds, thresholds=[args.threshold], ks=(), protocols=(),
        with_pr_curves=True,
    )
    points = report.pr_curves[args.threshold]
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_pr_csv(points, fh)
    print(f"wrote {len(points)} PR points to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    gt, preds = _load_pair(args.gt, args.pred)
    by_id = {s.sample_id: s for s in gt}
    violations: list[str] = []
    for pred_set in preds:
        sample = by_id.get(pred_set.sample_id)
        if sample is None:
            violations.append(f"unknown sample id {pred_set.sample_id!r}")
            continue
        for i, p in enumerate(pred_set.predictions):
            if p.phrase.max_end > sample.caption.n_text:
                violations.append(
                    f"sample {pred_set.sample_id!r} prediction {i}: span end "
                    f"{p.phrase.max_end} exceeds token count {sample.caption.n_text}"
                )
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return EXIT_CONSISTENCY
    n_preds = sum(len(ps.predictions) for ps in preds)
    print(f"OK: {len(gt)} samples, {n_preds} predictions")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    suites = tuple(args.suite.split(",")) if args.suite != "all" else None
    results = run_selftest(seed=args.seed, suites=suites, trials=args.trials)
    failed = 0
    for r in results:
        print(f"{r.name}: {r.passed} passed, {r.failed} failed")
        for message in r.failures[:10]:
            print(f"  FAIL {message}")
        failed += r.failed
    return EXIT_OK if failed == 0 else EXIT_SELFTEST


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        n_samples=args.samples,
        n_text_range=(args.text_min, args.text_max),
        n_img=args.img_tokens,
        pairs_range=(args.pairs_min, args.pairs_max),
        noise=args.noise,
    )
    samples, memories = generate_dataset(spec)
    out_dir = write_dataset(samples, memories, args.output)
    print(f"wrote {len(samples)} samples to {out_dir}")
    if not args.train:
        return EXIT_OK

    config = KernelConfig(n_layers=args.layers)
    dataset = load_dataset(out_dir)
    try:
        result = fd_train(
            dataset,
            config,
            steps=args.steps,
            learning_rate=args.lr,
            seed=args.seed,
            workers=args.threads,
        )
    except TrainingDiverged as exc:
        _write_trace(out_dir / "loss_trace.csv", exc.trace)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_INPUT
    _write_trace(out_dir / "loss_trace.csv", result.loss_trace)
    with open(out_dir / "pred.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_predictions(result.predictions, fh)
    print(
        f"trained for {result.steps_run} steps "
        f"(loss {result.loss_trace[0]:.6f} -> {result.loss_trace[-1]:.6f}), "
        f"wrote {out_dir / 'pred.jsonl'}"
    )
    return EXIT_OK


def _write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(trace):
            fh.write(f"{i},{loss:.6f}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peg-eval",
        description="Evaluate phrase-extraction-and-grounding predictions "
        "and run the built-in self-tests and synthetic harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    score = sub.add_parser("score", help="score predictions against ground truth")
    score.add_argument("--gt", required=True, help="ground-truth JSONL")
    score.add_argument("--pred", required=True, help="prediction JSONL")
    score.add_argument("--thresholds", default="0.5",
                       help="comma list of overlap thresholds (default 0.5)")
    score.add_argument("--k", default="1,5,10",
                       help="comma list of recall cutoffs (default 1,5,10)")
    score.add_argument("--protocol", choices=("anybox", "merged", "both"),
                       default="both")
    score.add_argument("--output", default=None,
                       help="write report JSON here instead of stdout")
    score.add_argument("--threads", type=int, default=1)
    score.set_defaults(func=_cmd_score)

    pr = sub.add_parser("pr-curve", help="dump the PR curve as CSV")
    pr.add_argument("--gt", required=True)
    pr.add_argument("--pred", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.add_argument("--out", required=True, help="output CSV path")
    pr.set_defaults(func=_cmd_pr_curve)

    val = sub.add_parser("validate", help="check a ground-truth/prediction pair")
    val.add_argument("--gt", required=True)
    val.add_argument("--pred", required=True)
    val.set_defaults(func=_cmd_validate)

    st = sub.add_parser("selftest", help="run the built-in oracle suites")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--suite", default="all",
                    help=f"comma list from {', '.join(SUITE_NAMES)} (default all)")
    st.add_argument("--trials", type=int, default=None,
                    help="override the per-suite trial count")
    st.set_defaults(func=_cmd_selftest)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--samples", type=int, default=3)
    synth.add_argument("--text-min", type=int, default=5)
    synth.add_argument("--text-max", type=int, default=7)
    synth.add_argument("--img-tokens", type=int, default=8)
    synth.add_argument("--pairs-min", type=int, default=1)
    synth.add_argument("--pairs-max", type=int, default=2)
    synth.add_argument("--noise", type=float, default=0.01)
    synth.add_argument("--output", default="synth_out", help="output directory")
    synth.add_argument("--train", action="store_true",
                       help="also run the finite-difference overfit loop")
    synth.add_argument("--steps", type=int, default=2000,
                       help="max accepted training steps (default 2000)")
    synth.add_argument("--lr", type=float, default=0.5)
    synth.add_argument("--layers", type=int, default=1,
                       help="decoder layers for the training run (default 1)")
    synth.add_argument("--threads", type=int, default=1,
                       help="worker processes for the gradient sweep")
    synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SampleMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
