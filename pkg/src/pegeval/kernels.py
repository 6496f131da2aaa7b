"""Desk-scale, forward-only reference of the dual-query decoder.

Each of the ``n_queries`` query pairs holds two content vectors (an image
stream and a text stream) plus *shared* positional state: one anchor box
in center/size form and one binary text mask. A decoder layer runs joint
self-attention over the stacked 2*Nq queries, cross-attention over the
concatenated image+text memory (text keys gated per text-query mask),
per-stream feed-forward blocks, and then refines the shared positional
state: anchors move in inverse-sigmoid space by an MLP of the image
content, and new text masks come from thresholded dot products between
projected image content and projected text features. All-ones masks feed
the first layer; a row that thresholds to all zeros falls back to all
ones so attention always has at least one live key.

Losses: L1 + (1 - GIOU) on matched boxes, and a temperature-scaled
contrastive softmax over the extended token positions (text tokens plus
a trailing learnable no_phrase slot) for phrases. Queries left unmatched
by the bipartite assignment are trained toward no_phrase with a small
class-balance weight. Both losses return exact analytic gradients, and
``fd_check_gradient`` verifies any (value, gradient) function against
central finite differences.

Everything is float64, single-sample, and deterministic: identical seeds
and inputs produce bit-identical outputs. There is no backward pass
through the decoder; training at this scale differentiates numerically
(see the synthetic-data module).
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit, logit

from .assignment import Assignment, CostWeights, hungarian_solve, matching_cost_matrix
from .data import PegSampleGT, flatten_gt_targets
from .geometry import BoxCXCYWH, box_xyxy_to_cxcywh

__all__ = [
    "KernelConfig",
    "KernelNumericsError",
    "Memory",
    "DualQueryState",
    "AttentionParams",
    "MlpParams",
    "LinearParams",
    "DecoderLayerParams",
    "ModelParams",
    "AttentionRecord",
    "ModelOutputs",
    "TotalLossResult",
    "FdCheckReport",
    "load_kernel_config",
    "sine_encode_anchor",
    "masked_softmax",
    "decoder_layer_forward",
    "run_decoder",
    "predict_text_mask",
    "phrase_similarity_logits",
    "phrase_distribution",
    "loss_phrase_contrastive",
    "loss_box",
    "loss_for_assignment",
    "total_loss",
    "fd_check_gradient",
    "flatten_params",
    "params_with_vector",
    "count_params",
    "init_model_params",
]

ANCHOR_MIN = 1e-4
ANCHOR_MAX = 1.0 - 1e-4


class KernelNumericsError(ArithmeticError):
    """Non-finite values produced inside a decoder stage."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelConfig:
    """Dimensions, layer count, and loss/cost coefficients.

    Defaults are the desk-scale numbers; the full-scale counterparts are
    d_model=256, d_proj=64, n_queries=100, n_heads=8, n_layers=6 with the
    same temperature, weights, and coefficients.
    """

    d_model: int = 16
    d_proj: int = 8
    n_queries: int = 4
    n_heads: int = 2
    n_layers: int = 2
    d_ffn: int = 32
    tau: float = 0.07
    no_phrase_weight: float = 0.05
    loss_coef_phrase: float = 2.0
    loss_coef_bbox: float = 5.0
    loss_coef_giou: float = 2.0
    cost_weights: CostWeights = field(default_factory=CostWeights)
    mask_threshold: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.d_model % 8 != 0:
            raise ValueError(
                f"d_model={self.d_model} must be divisible by 8 for the "
                "four-coordinate sine encoding"
            )
        for name in ("d_model", "d_proj", "n_queries", "n_heads", "n_layers", "d_ffn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (math.isfinite(self.tau) and self.tau > 0.0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("no_phrase_weight", "loss_coef_phrase", "loss_coef_bbox",
                     "loss_coef_giou", "mask_threshold"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


# Flat key=value config file: model keys map onto KernelConfig fields,
# training-schedule keys are accepted but ignored with a warning.
_CONFIG_KEY_MAP = {
    "hidden_dim": ("d_model", int),
    "nheads": ("n_heads", int),
    "num_queries": ("n_queries", int),
    "dec_layers": ("n_layers", int),
    "dim_feedforward": ("d_ffn", int),
    "cls_temperature": ("tau", float),
    "ce_loss_coef": ("loss_coef_phrase", float),
    "bbox_loss_coef": ("loss_coef_bbox", float),
    "giou_loss_coef": ("loss_coef_giou", float),
    "d_proj": ("d_proj", int),
    "no_phrase_weight": ("no_phrase_weight", float),
    "mask_threshold": ("mask_threshold", float),
}
_CONFIG_COST_KEYS = {
    "set_cost_class": "w_class",
    "set_cost_bbox": "w_bbox",
    "set_cost_giou": "w_giou",
}
_CONFIG_IGNORED = {
    "lr", "lr_backbone", "text_encoder_lr", "fraction_warmup_steps",
    "weight_decay", "clip_max_norm", "dropout", "enc_layers",
    "batch_norm_type", "pre_norm",
}


def load_kernel_config(path) -> KernelConfig:
    """Read a KernelConfig from a flat ``key = value`` text file.

    Lines may be blank or start with ``#``. Training-schedule keys (lr and
    friends) are ignored with a warning; unknown keys are errors.
    """
    fields: dict = {}
    cost: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip().strip('"').strip("'")
            if key in _CONFIG_IGNORED:
                warnings.warn(f"config key {key!r} is training-only; ignored")
                continue
            if key == "transformer_activation":
                if value != "relu":
                    warnings.warn(
                        f"transformer_activation={value!r} unsupported; using relu"
                    )
                continue
            if key in _CONFIG_COST_KEYS:
                cost[_CONFIG_COST_KEYS[key]] = float(value)
                continue
            if key not in _CONFIG_KEY_MAP:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            name, conv = _CONFIG_KEY_MAP[key]
            fields[name] = conv(value)
    if cost:
        fields["cost_weights"] = CostWeights(**cost)
    return KernelConfig(**fields)


# ---------------------------------------------------------------------------
# Inputs and state
# ---------------------------------------------------------------------------

def _as_f64(x, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Memory:
    """Encoder-side features consumed by cross-attention.

    The image and text features are concatenated as keys/values after
    adding the respective modality embedding to each side.
    """

    image_features: np.ndarray   # [N_img, D]
    text_features: np.ndarray    # [N_text, D]
    modality_embed_image: np.ndarray  # [D]
    modality_embed_text: np.ndarray   # [D]

    def __post_init__(self):
        img = _as_f64(self.image_features, "image_features", 2)
        txt = _as_f64(self.text_features, "text_features", 2)
        ei = _as_f64(self.modality_embed_image, "modality_embed_image", 1)
        et = _as_f64(self.modality_embed_text, "modality_embed_text", 1)
        d = img.shape[1]
        if txt.shape[1] != d or ei.shape[0] != d or et.shape[0] != d:
            raise ValueError("memory feature dimensions disagree")
        if img.shape[0] < 1 or txt.shape[0] < 1:
            raise ValueError("memory needs at least one image and one text token")
        object.__setattr__(self, "image_features", img)
        object.__setattr__(self, "text_features", txt)
        object.__setattr__(self, "modality_embed_image", ei)
        object.__setattr__(self, "modality_embed_text", et)

    @property
    def n_img(self) -> int:
        return self.image_features.shape[0]

    @property
    def n_text(self) -> int:
        return self.text_features.shape[0]


@dataclass(frozen=True)
class DualQueryState:
    """Per-layer query state: two content streams plus shared positions.

    ``anchors`` and ``text_masks`` are stored once and consumed by both
    streams, which is what makes the positional parts shared by
    construction. First-layer text masks are all ones.
    """

    content_image: np.ndarray  # [Nq, D]
    content_text: np.ndarray   # [Nq, D]
    anchors: np.ndarray        # [Nq, 4] cxcywh, strictly inside (0, 1)
    text_masks: np.ndarray     # [Nq, N_text] in {0, 1}

    def __post_init__(self):
        ci = _as_f64(self.content_image, "content_image", 2)
        ct = _as_f64(self.content_text, "content_text", 2)
        a = _as_f64(self.anchors, "anchors", 2)
        m = np.asarray(self.text_masks)
        if ci.shape != ct.shape:
            raise ValueError("content streams must share a shape")
        if a.shape != (ci.shape[0], 4):
            raise ValueError(f"anchors must be [{ci.shape[0]}, 4], got {a.shape}")
        if not np.all((a > 0.0) & (a < 1.0)):
            raise ValueError("anchors must lie strictly inside (0, 1)")
        if m.ndim != 2 or m.shape[0] != ci.shape[0]:
            raise ValueError(f"text_masks must be [{ci.shape[0]}, N_text]")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("text_masks must be binary")
        object.__setattr__(self, "content_image", ci)
        object.__setattr__(self, "content_text", ct)
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "text_masks", m.astype(np.uint8))

    @classmethod
    def initial(
        cls, content_image, content_text, anchors, n_text: int
    ) -> "DualQueryState":
        """First-layer state: the text masks start as all ones."""
        n_q = np.asarray(content_image).shape[0]
        return cls(
            content_image=content_image,
            content_text=content_text,
            anchors=anchors,
            text_masks=np.ones((n_q, n_text), dtype=np.uint8),
        )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass
class MlpParams:
    """Two-layer MLP with relu in between."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class LinearParams:
    w: np.ndarray
    b: np.ndarray


@dataclass
class DecoderLayerParams:
    """All learnable arrays of one decoder layer.

    ``query_proj`` / ``text_proj`` are shared between the mask head
    (applied to image content and text features) and the phrase
    similarity head (applied to text content and text features), and
    ``no_phrase_token`` extends the projected text features by one slot.
    The modality vectors are the per-type tokens added to queries/keys in
    attention.
    """

    pos_mlp: MlpParams
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn_image: MlpParams
    ffn_text: MlpParams
    box_mlp: MlpParams
    query_proj: LinearParams
    text_proj: LinearParams
    no_phrase_token: np.ndarray
    modality_image: np.ndarray
    modality_text: np.ndarray


@dataclass
class ModelParams:
    """Initial query state plus every decoder layer's parameters."""

    content_image: np.ndarray  # [Nq, D]
    content_text: np.ndarray   # [Nq, D]
    anchor_logits: np.ndarray  # [Nq, 4], anchors = clipped sigmoid
    layers: tuple[DecoderLayerParams, ...]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_linear(rng, d_in, d_out) -> LinearParams:
    return LinearParams(
        w=_uniform(rng, (d_in, d_out), d_in), b=np.zeros(d_out)
    )


def _init_mlp(rng, d_in, d_hidden, d_out) -> MlpParams:
    return MlpParams(
        w1=_uniform(rng, (d_in, d_hidden), d_in),
        b1=np.zeros(d_hidden),
        w2=_uniform(rng, (d_hidden, d_out), d_hidden),
        b2=np.zeros(d_out),
    )


def _init_attention(rng, d) -> AttentionParams:
    return AttentionParams(
        wq=_uniform(rng, (d, d), d), bq=np.zeros(d),
        wk=_uniform(rng, (d, d), d), bk=np.zeros(d),
        wv=_uniform(rng, (d, d), d), bv=np.zeros(d),
        wo=_uniform(rng, (d, d), d), bo=np.zeros(d),
    )


def init_layer_params(config: KernelConfig, rng: np.random.Generator) -> DecoderLayerParams:
    d = config.d_model
    return DecoderLayerParams(
        pos_mlp=_init_mlp(rng, d, d, d),
        self_attn=_init_attention(rng, d),
        cross_attn=_init_attention(rng, d),
        ffn_image=_init_mlp(rng, d, config.d_ffn, d),
        ffn_text=_init_mlp(rng, d, config.d_ffn, d),
        box_mlp=_init_mlp(rng, d, d, 4),
        query_proj=_init_linear(rng, d, config.d_proj),
        text_proj=_init_linear(rng, d, config.d_proj),
        no_phrase_token=_uniform(rng, (config.d_proj,), config.d_proj),
        modality_image=_uniform(rng, (d,), d),
        modality_text=_uniform(rng, (d,), d),
    )


def init_model_params(config: KernelConfig, seed: int) -> ModelParams:
    """Seeded parameter init: weights uniform in +-1/sqrt(fan_in), biases 0.

    Initial anchors are spread uniformly inside (0.2, 0.8) per coordinate
    (stored in inverse-sigmoid space).
    """
    rng = np.random.default_rng(seed)
    d = config.d_model
    anchors = rng.uniform(0.2, 0.8, size=(config.n_queries, 4))
    return ModelParams(
        content_image=_uniform(rng, (config.n_queries, d), d),
        content_text=_uniform(rng, (config.n_queries, d), d),
        anchor_logits=_inverse_sigmoid(anchors),
        layers=tuple(
            init_layer_params(config, rng) for _ in range(config.n_layers)
        ),
    )


def _walk_arrays(obj) -> Iterator[np.ndarray]:
    if isinstance(obj, np.ndarray):
        yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk_arrays(getattr(obj, f.name))
    elif isinstance(obj, (tuple, list)):
        for item in obj:
            yield from _walk_arrays(item)
    else:  # pragma: no cover - layout bug guard
        raise TypeError(f"unexpected parameter leaf {type(obj)!r}")


def count_params(params: ModelParams) -> int:
    return sum(a.size for a in _walk_arrays(params))


def flatten_params(params: ModelParams) -> np.ndarray:
    """Concatenate every parameter array (deterministic field order)."""
    return np.concatenate([a.ravel() for a in _walk_arrays(params)])


def _rebuild(obj, vec: np.ndarray, offset: list[int]):
    if isinstance(obj, np.ndarray):
        start = offset[0]
        offset[0] += obj.size
        return vec[start:offset[0]].reshape(obj.shape)
    if dataclasses.is_dataclass(obj):
        kwargs = {
            f.name: _rebuild(getattr(obj, f.name), vec, offset)
            for f in dataclasses.fields(obj)
        }
        return type(obj)(**kwargs)
    if isinstance(obj, tuple):
        return tuple(_rebuild(item, vec, offset) for item in obj)
    raise TypeError(f"unexpected parameter leaf {type(obj)!r}")


def params_with_vector(template: ModelParams, vec: np.ndarray) -> ModelParams:
    """Rebuild params whose arrays are *views* into ``vec``.

    Mutating ``vec`` in place is then visible through the returned params,
    which is what the finite-difference training loop relies on.
    """
    offset = [0]
    rebuilt = _rebuild(template, vec, offset)
    if offset[0] != vec.size:
        raise ValueError(
            f"vector length {vec.size} does not match template ({offset[0]})"
        )
    return rebuilt


# ---------------------------------------------------------------------------
# Elementary ops
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _inverse_sigmoid(x: np.ndarray) -> np.ndarray:
    return logit(x)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _mlp(x: np.ndarray, p: MlpParams) -> np.ndarray:
    return _relu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def sine_encode_anchor(anchor, d_model: int) -> np.ndarray:
    """Sine/cosine-encode one (cx, cy, w, h) anchor to ``d_model`` dims.

    Each coordinate gets d_model/4 dimensions: interleaved sin/cos of
    ``2*pi*coord / 10000**(2k/n)`` over the frequency index k. The highest
    angular frequency is 2*pi, so the encoding is Lipschitz with constant
    2*pi per component.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    if a.shape != (4,):
        raise ValueError(f"anchor must have 4 coordinates, got {a.shape}")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError(f"anchor coordinate outside the unit interval: {a}")
    return _sine_encode_rows(a[None, :], d_model)[0]


def _sine_encode_rows(anchors: np.ndarray, d_model: int) -> np.ndarray:
    if d_model % 8 != 0:
        raise ValueError(f"d_model={d_model} must be divisible by 8")
    n = d_model // 4
    half = n // 2
    freqs = 10000.0 ** (2.0 * np.arange(half) / n)     # [half]
    angles = (2.0 * math.pi) * anchors[..., None] / freqs  # [Nq, 4, half]
    block = np.empty(anchors.shape[:-1] + (4, n))
    block[..., 0::2] = np.sin(angles)
    block[..., 1::2] = np.cos(angles)
    return block.reshape(anchors.shape[:-1] + (4 * n,))


def masked_softmax(logits, mask) -> np.ndarray:
    """Softmax over the positions where ``mask`` is 1; zeros elsewhere.

    Stabilized by subtracting the max over unmasked entries. With an
    all-ones mask this is bit-identical to a plain stabilized softmax.
    Raises on an all-zero mask: callers must apply their fallback first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != logits.shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    return _masked_softmax_rows(logits, mask.astype(bool))


def _masked_softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax mask with an all-zero row")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Decoder forward
# ---------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Pre-softmax logits, weights, and the key mask of one layer's
    attention calls, recorded for invariant checks. Shapes are
    [n_heads, n_rows, n_keys]; self-attention rows/keys are the stacked
    2*Nq queries (image stream first), cross-attention keys are image
    memory then text memory."""

    self_logits: np.ndarray
    self_weights: np.ndarray
    cross_logits: np.ndarray
    cross_weights: np.ndarray
    cross_key_mask: np.ndarray  # [2*Nq, N_img + N_text] booleans
    n_img: int


def _attention(
    q_in: np.ndarray,
    k_in: np.ndarray,
    v_in: np.ndarray,
    p: AttentionParams,
    n_heads: int,
    key_mask: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multi-head attention; returns (output, logits, weights)."""
    t_q, d = q_in.shape
    t_k = k_in.shape[0]
    dh = d // n_heads
    q = (q_in @ p.wq + p.bq).reshape(t_q, n_heads, dh).transpose(1, 0, 2)
    k = (k_in @ p.wk + p.bk).reshape(t_k, n_heads, dh).transpose(1, 0, 2)
    v = (v_in @ p.wv + p.bv).reshape(t_k, n_heads, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(dh)   # [H, Tq, Tk]
    if key_mask is None:
        mask = np.ones((1, t_q, t_k), dtype=bool)
    else:
        mask = key_mask[None, :, :]
    weights = _masked_softmax_rows(logits, np.broadcast_to(mask, logits.shape))
    ctx = (weights @ v).transpose(1, 0, 2).reshape(t_q, d)
    return ctx @ p.wo + p.bo, logits, weights


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise KernelNumericsError(f"non-finite values after {stage}")


def decoder_layer_forward(
    state: DualQueryState,
    memory: Memory,
    params: DecoderLayerParams,
    config: KernelConfig,
    collect_attention: bool = False,
) -> DualQueryState | tuple[DualQueryState, AttentionRecord]:
    """One decoder layer; returns the next state (shapes preserved).

    Stages: positional embedding from the shared anchors; joint
    self-attention over the stacked query pairs (content + positional
    embedding + modality token as query/key, content as value);
    cross-attention over the concatenated memory where each text query's
    text keys are gated by its mask and image keys stay open; per-stream
    feed-forward; anchor refinement in inverse-sigmoid space; new text
    masks from the image stream. Residual connections wrap the attention
    and feed-forward stages.
    """
    n_q = state.content_image.shape[0]
    n_img = memory.n_img
    n_text = memory.n_text
    if state.text_masks.shape[1] != n_text:
        raise ValueError(
            f"text_masks width {state.text_masks.shape[1]} != N_text {n_text}"
        )
    if not np.all(state.text_masks.any(axis=1)):
        raise ValueError("text mask row with no live token (fallback missing)")

    pos = _mlp(_sine_encode_rows(state.anchors, config.d_model), params.pos_mlp)
    _check_finite(pos, "positional embedding")

    # Joint self-attention over the 2*Nq stacked queries.
    content = np.vstack([state.content_image, state.content_text])
    qk = np.vstack([
        state.content_image + pos + params.modality_image,
        state.content_text + pos + params.modality_text,
    ])
    self_out, self_logits, self_weights = _attention(
        qk, qk, content, params.self_attn, config.n_heads, None
    )
    content = content + self_out
    _check_finite(content, "self-attention")

    # Cross-attention over concatenated memory with modality embeddings.
    mem = np.vstack([
        memory.image_features + memory.modality_embed_image,
        memory.text_features + memory.modality_embed_text,
    ])
    q_cross = np.vstack([
        content[:n_q] + pos + params.modality_image,
        content[n_q:] + pos + params.modality_text,
    ])
    key_mask = np.ones((2 * n_q, n_img + n_text), dtype=bool)
    key_mask[n_q:, n_img:] = state.text_masks.astype(bool)
    cross_out, cross_logits, cross_weights = _attention(
        q_cross, mem, mem, params.cross_attn, config.n_heads, key_mask
    )
    content = content + cross_out
    _check_finite(content, "cross-attention")

    c_img = content[:n_q] + _mlp(content[:n_q], params.ffn_image)
    c_txt = content[n_q:] + _mlp(content[n_q:], params.ffn_text)
    _check_finite(c_img, "image feed-forward")
    _check_finite(c_txt, "text feed-forward")

    delta = _mlp(c_img, params.box_mlp)
    new_anchors = np.clip(
        _sigmoid(_inverse_sigmoid(state.anchors) + delta), ANCHOR_MIN, ANCHOR_MAX
    )
    _check_finite(new_anchors, "anchor update")

    new_masks = predict_text_mask(
        c_img, memory.text_features, params, config.mask_threshold
    )

    new_state = DualQueryState(
        content_image=c_img,
        content_text=c_txt,
        anchors=new_anchors,
        text_masks=new_masks,
    )
    if not collect_attention:
        return new_state
    record = AttentionRecord(
        self_logits=self_logits,
        self_weights=self_weights,
        cross_logits=cross_logits,
        cross_weights=cross_weights,
        cross_key_mask=key_mask,
        n_img=n_img,
    )
    return new_state, record


def predict_text_mask(
    content_image: np.ndarray,
    text_features: np.ndarray,
    params: DecoderLayerParams,
    threshold: float = 0.0,
) -> np.ndarray:
    """Binary text masks from image content vs projected text features.

    A bit is set where the projected dot product strictly exceeds the
    threshold; rows that end up all zero fall back to all ones so the
    next layer's attention keeps at least one live text key.
    """
    q = content_image @ params.query_proj.w + params.query_proj.b
    t = text_features @ params.text_proj.w + params.text_proj.b
    logits = q @ t.T
    mask = (logits > threshold).astype(np.uint8)
    dead = ~mask.any(axis=1)
    mask[dead, :] = 1
    return mask


def phrase_similarity_logits(
    content_text: np.ndarray,
    text_features: np.ndarray,
    params: DecoderLayerParams,
) -> np.ndarray:
    """Raw similarities [Nq, N_text + 1] over extended token positions.

    The trailing column scores the no_phrase token. The temperature is
    *not* applied here; losses and costs divide by it themselves.
    """
    q = content_text @ params.query_proj.w + params.query_proj.b
    t = text_features @ params.text_proj.w + params.text_proj.b
    ext = np.vstack([t, params.no_phrase_token[None, :]])
    return q @ ext.T


def phrase_distribution(
    query_content_text: np.ndarray,
    text_features: np.ndarray,
    params: DecoderLayerParams,
    tau: float = 0.07,
) -> np.ndarray:
    """Probabilities over N_text + 1 extended positions for one query."""
    q = np.asarray(query_content_text, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError(f"expected a single query vector, got shape {q.shape}")
    logits = phrase_similarity_logits(q[None, :], text_features, params)[0]
    z = logits / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_phrase_contrastive(
    logits: np.ndarray,
    target_indices: Sequence[int],
    matched: bool,
    config: KernelConfig,
) -> tuple[float, np.ndarray]:
    """Temperature-scaled cross entropy summed over the target positions.

    ``logits`` are the raw extended-position similarities of one query.
    For an unmatched query the caller passes the no_phrase index as the
    single target and the loss is scaled by ``no_phrase_weight``. Returns
    (loss, exact gradient with respect to the logits).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"logits must be 1-d, got shape {z.shape}")
    idx = list(target_indices)
    if not idx:
        raise ValueError("empty target index set")
    if min(idx) < 0 or max(idx) >= z.shape[0]:
        raise ValueError(f"target index out of range for {z.shape[0]} positions")
    weight = 1.0 if matched else config.no_phrase_weight
    s = z / config.tau
    s = s - s.max()
    log_probs = s - math.log(np.exp(s).sum())
    loss = weight * -float(log_probs[idx].sum())
    probs = np.exp(log_probs)
    grad = (len(idx) * probs) / config.tau
    for j in idx:
        grad[j] -= 1.0 / config.tau
    return loss, weight * grad


def _giou_value_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """GIOU of corner boxes a, b and its gradient with respect to a.

    At min/max switch points the strict-inequality branch is taken
    (subgradient choice); callers doing finite-difference checks stay
    away from those kinks.
    """
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    d_inter = np.zeros(4)
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        d_iw = np.array([-1.0 if ax1 > bx1 else 0.0, 0.0,
                         1.0 if ax2 < bx2 else 0.0, 0.0])
        d_ih = np.array([0.0, -1.0 if ay1 > by1 else 0.0,
                         0.0, 1.0 if ay2 < by2 else 0.0])
        d_inter = ih * d_iw + iw * d_ih
    else:
        inter = 0.0
    area_a = (ax2 - ax1) * (ay2 - ay1)
    d_area_a = np.array([-(ay2 - ay1), -(ax2 - ax1), (ay2 - ay1), (ax2 - ax1)])
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    d_union = d_area_a - d_inter
    hw = max(ax2, bx2) - min(ax1, bx1)
    hh = max(ay2, by2) - min(ay1, by1)
    d_hw = np.array([-1.0 if ax1 < bx1 else 0.0, 0.0,
                     1.0 if ax2 > bx2 else 0.0, 0.0])
    d_hh = np.array([0.0, -1.0 if ay1 < by1 else 0.0,
                     0.0, 1.0 if ay2 > by2 else 0.0])
    hull = hw * hh
    d_hull = hh * d_hw + hw * d_hh
    giou = inter / union - (hull - union) / hull
    d_giou = (
        (d_inter * union - inter * d_union) / (union * union)
        + (d_union * hull - union * d_hull) / (hull * hull)
    )
    return float(giou), d_giou


def _loss_box_arrays(
    pred: np.ndarray, gt: np.ndarray, coef_bbox: float, coef_giou: float
) -> tuple[float, np.ndarray]:
    """Box loss and gradient on raw (cx, cy, w, h) float arrays."""
    if pred[2] <= 0.0 or pred[3] <= 0.0:
        raise ValueError(f"degenerate predicted box {pred}")
    if gt[2] <= 0.0 or gt[3] <= 0.0:
        raise ValueError(f"degenerate target box {gt}")
    diff = pred - gt
    l1 = float(np.abs(diff).sum())
    a = np.array([pred[0] - pred[2] / 2.0, pred[1] - pred[3] / 2.0,
                  pred[0] + pred[2] / 2.0, pred[1] + pred[3] / 2.0])
    b = np.array([gt[0] - gt[2] / 2.0, gt[1] - gt[3] / 2.0,
                  gt[0] + gt[2] / 2.0, gt[1] + gt[3] / 2.0])
    giou, dg = _giou_value_grad(a, b)
    d_giou_pred = np.array([
        dg[0] + dg[2],
        dg[1] + dg[3],
        0.5 * (dg[2] - dg[0]),
        0.5 * (dg[3] - dg[1]),
    ])
    loss = coef_bbox * l1 + coef_giou * (1.0 - giou)
    grad = coef_bbox * np.sign(diff) - coef_giou * d_giou_pred
    return loss, grad


def loss_box(
    pred: BoxCXCYWH, gt: BoxCXCYWH, config: KernelConfig
) -> tuple[float, np.ndarray]:
    """Weighted L1 + (1 - GIOU) box loss with its analytic gradient.

    The gradient is with respect to the predicted (cx, cy, w, h); the L1
    subgradient is 0 exactly at a kink.
    """
    return _loss_box_arrays(
        np.array(pred.as_tuple()),
        np.array(gt.as_tuple()),
        config.loss_coef_bbox,
        config.loss_coef_giou,
    )


@dataclass(frozen=True)
class ModelOutputs:
    """Final decoder outputs for one sample."""

    boxes: np.ndarray          # [Nq, 4] cxcywh
    phrase_logits: np.ndarray  # [Nq, N_text + 1] raw similarities


@dataclass(frozen=True)
class TotalLossResult:
    value: float
    grad_boxes: np.ndarray     # [Nq, 4]
    grad_logits: np.ndarray    # [Nq, N_text + 1]
    assignment: Assignment


def loss_for_assignment(
    outputs: ModelOutputs,
    targets: Sequence,
    pairs: Sequence[tuple[int, int]],
    config: KernelConfig,
) -> TotalLossResult:
    """Sample loss under a fixed query-to-target assignment.

    Matched queries pay box loss plus the phrase term; unmatched queries
    pay the down-weighted no_phrase term. The phrase coefficient scales
    both phrase terms (they are one loss family). Deterministic: terms
    accumulate in query order.
    """
    boxes = np.asarray(outputs.boxes, dtype=np.float64)
    logits = np.asarray(outputs.phrase_logits, dtype=np.float64)
    n_q = boxes.shape[0]
    n_ext = logits.shape[1]
    matched = dict(pairs)
    grad_boxes = np.zeros_like(boxes)
    grad_logits = np.zeros_like(logits)
    value = 0.0
    for q in range(n_q):
        if q in matched:
            t_box, t_phrase = targets[matched[q]]
            gt4 = np.array(box_xyxy_to_cxcywh(t_box).as_tuple())
            bl, bg = _loss_box_arrays(
                boxes[q], gt4, config.loss_coef_bbox, config.loss_coef_giou
            )
            value += bl
            grad_boxes[q] = bg
            token_idx = sorted(t_phrase.token_set())
            pl, pg = loss_phrase_contrastive(logits[q], token_idx, True, config)
        else:
            pl, pg = loss_phrase_contrastive(logits[q], [n_ext - 1], False, config)
        value += config.loss_coef_phrase * pl
        grad_logits[q] = config.loss_coef_phrase * pg
    return TotalLossResult(
        value=value,
        grad_boxes=grad_boxes,
        grad_logits=grad_logits,
        assignment=Assignment(pairs=tuple(sorted(pairs)), total_cost=0.0),
    )


def total_loss(
    outputs: ModelOutputs, gt: PegSampleGT, config: KernelConfig
) -> TotalLossResult:
    """Match queries to the sample's flattened targets, then sum losses.

    The assignment minimizes the weighted matching cost; gradients treat
    it as fixed (it is piecewise constant in the outputs).
    """
    targets = flatten_gt_targets(gt)
    boxes = np.asarray(outputs.boxes, dtype=np.float64)
    if targets:
        query_boxes = [BoxCXCYWH(*row) for row in boxes]
        cost = matching_cost_matrix(
            query_boxes,
            outputs.phrase_logits,
            targets,
            config.cost_weights,
            tau=config.tau,
        )
        assignment = hungarian_solve(cost)
    else:
        assignment = Assignment(pairs=(), total_cost=0.0)
    result = loss_for_assignment(outputs, targets, assignment.pairs, config)
    return TotalLossResult(
        value=result.value,
        grad_boxes=result.grad_boxes,
        grad_logits=result.grad_logits,
        assignment=assignment,
    )


@dataclass(frozen=True)
class DecoderForward:
    """Everything produced by a full decoder run.

    ``states`` (populated when attention is collected) holds the input
    state followed by each layer's output state.
    """

    final_state: DualQueryState
    outputs: ModelOutputs
    attention: tuple[AttentionRecord, ...] | None = None
    states: tuple[DualQueryState, ...] | None = None


def run_decoder(
    params: ModelParams,
    memory: Memory,
    config: KernelConfig,
    collect_attention: bool = False,
) -> DecoderForward:
    """Run all layers from the initial all-ones-mask state.

    Output boxes are the final anchors; phrase logits come from the last
    layer's projection heads applied to the final text content.
    """
    anchors = np.clip(_sigmoid(params.anchor_logits), ANCHOR_MIN, ANCHOR_MAX)
    state = DualQueryState.initial(
        content_image=params.content_image,
        content_text=params.content_text,
        anchors=anchors,
        n_text=memory.n_text,
    )
    records: list[AttentionRecord] = []
    states: list[DualQueryState] = [state]
    for layer in params.layers:
        if collect_attention:
            state, record = decoder_layer_forward(
                state, memory, layer, config, collect_attention=True
            )
            records.append(record)
            states.append(state)
        else:
            state = decoder_layer_forward(state, memory, layer, config)
    outputs = ModelOutputs(
        boxes=state.anchors,
        phrase_logits=phrase_similarity_logits(
            state.content_text, memory.text_features, params.layers[-1]
        ),
    )
    return DecoderForward(
        final_state=state,
        outputs=outputs,
        attention=tuple(records) if collect_attention else None,
        states=tuple(states) if collect_attention else None,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FdCheckReport:
    """Outcome of a central-difference check of an analytic gradient."""

    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def fd_check_gradient(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    step: float = 1e-6,
    tolerance: float = 1e-6,
) -> FdCheckReport:
    """Compare ``fn``'s gradient against central differences at ``point``.

    ``fn`` maps a 1-d float64 array to (value, gradient). The relative
    error per coordinate is |analytic - fd| / max(1e-8, |analytic| + |fd|).
    Callers are responsible for choosing points away from kinks.
    """
    x = np.array(point, dtype=np.float64).reshape(-1)
    value, grad = fn(x.copy())
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise KernelNumericsError("non-finite evaluation at the base point")
    numeric = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        f_plus, _ = fn(xp)
        xp[i] -= 2.0 * step
        f_minus, _ = fn(xp)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise KernelNumericsError(f"non-finite evaluation at coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    denom = np.maximum(1e-8, np.abs(grad) + np.abs(numeric))
    rel = np.abs(grad - numeric) / denom
    return FdCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        rel_errors=rel,
        analytic=grad,
        numeric=numeric,
        tolerance=tolerance,
    )
