"""Metrics, matching, and desk-scale decoder kernels for joint phrase
extraction and grounding.

The package splits into: ``data`` (types and JSONL formats), ``geometry``
(overlap measures), ``assignment`` (bipartite matching), ``metrics``
(dataset scoring), ``kernels`` (the dual-query decoder forward and
losses), ``synth`` (dataset generation and finite-difference training),
``oracles``/``selftest`` (independent cross-checks), and ``cli``.
"""

from .assignment import (
    Assignment,
    CostWeights,
    brute_force_assignment,
    hungarian_solve,
    matching_cost_matrix,
)
from .data import (
    BoxXYXY,
    DataFormatError,
    GroundingPair,
    PegPrediction,
    PegPredictionSet,
    PegSampleGT,
    PhraseSpans,
    TokenizedCaption,
    flatten_gt_targets,
    load_ground_truth,
    load_predictions,
    mask_to_spans,
    parse_ground_truth,
    parse_predictions,
    spans_to_mask,
    write_ground_truth,
    write_predictions,
)
from .geometry import (
    BoxCXCYWH,
    box_cxcywh_to_xyxy,
    box_giou,
    box_iou,
    box_l1,
    box_xyxy_to_cxcywh,
    dual_iou,
    merge_boxes,
    phrase_iou,
)
from .kernels import (
    DualQueryState,
    FdCheckReport,
    KernelConfig,
    Memory,
    ModelOutputs,
    ModelParams,
    decoder_layer_forward,
    fd_check_gradient,
    init_model_params,
    load_kernel_config,
    loss_box,
    loss_phrase_contrastive,
    masked_softmax,
    phrase_distribution,
    predict_text_mask,
    run_decoder,
    sine_encode_anchor,
    total_loss,
)
from .metrics import (
    EvalReport,
    PRPoint,
    SampleMismatchError,
    Verdict,
    average_precision,
    cmap,
    evaluate,
    greedy_match_sample,
    recall_at_k_anybox,
    recall_at_k_merged,
)
from .synth import SynthSpec, fd_train, generate_dataset, predictions_from_params

__version__ = "0.1.0"
