"""Desk-scale multi-label classifier with label attention.

Architecture per position t: h_t = tanh(W_enc E[token_t] + b_enc), applied
segment by segment (the encoder is position-independent, so segmentation
never changes H, which is asserted in tests).  Attention: Z = tanh(P H),
scores M = (U Z)^T in R^{N x L}, attention A = softmax over positions
(axis 0), one distribution per label, so every *column* of A sums to 1.
Label representations V = H A in R^{d_h x L}; per-label logits
W_cls[l] . V[:, l] + b_cls[l]; sigmoid probabilities; mean binary
cross-entropy over labels.

`backward` returns exact gradients for every parameter of one example,
validated against central finite differences in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit

from .errors import DataError
from . import rng as rngmod

PROB_CLAMP = 1e-12

PARAM_NAMES = (
    "embedding",
    "encoder_weight",
    "encoder_bias",
    "attn_hidden",
    "attn_label",
    "classifier_weight",
    "classifier_bias",
)


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    attention_dim: int
    num_labels: int
    segment_len: int = 64
    max_len: int = 512

    def __post_init__(self) -> None:
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{name} must be positive")
        if self.segment_len > self.max_len:
            raise ValueError("segment_len must not exceed max_len")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "embedding": (self.vocab_size, self.embed_dim),
            "encoder_weight": (self.hidden_dim, self.embed_dim),
            "encoder_bias": (self.hidden_dim,),
            "attn_hidden": (self.attention_dim, self.hidden_dim),
            "attn_label": (self.num_labels, self.attention_dim),
            "classifier_weight": (self.num_labels, self.hidden_dim),
            "classifier_bias": (self.num_labels,),
        }


ModelParams = dict[str, np.ndarray]


def init_params(dims: ModelDims, rng: np.random.Generator) -> ModelParams:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) per matrix;
    bias vectors start at zero."""
    params: ModelParams = {}
    for name, shape in dims.param_shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def check_params(params: ModelParams, dims: ModelDims) -> None:
    shapes = dims.param_shapes()
    if set(params) != set(shapes):
        raise ValueError("parameter names do not match the model dims")
    for name, p in params.items():
        if tuple(p.shape) != shapes[name]:
            raise ValueError(f"{name}: shape {p.shape} != {shapes[name]}")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"{name}: non-finite entries")


def segment(tokens: np.ndarray, segment_len: int) -> list[np.ndarray]:
    """Consecutive non-overlapping chunks of `segment_len` (last may be short)."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise DataError("cannot segment an empty token sequence")
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    return [tokens[i : i + segment_len] for i in range(0, len(tokens), segment_len)]


@dataclass
class ForwardCache:
    tokens: np.ndarray
    embedded: np.ndarray      # [d_e, N]
    hidden: np.ndarray        # H, [d_h, N]
    attn_tanh: np.ndarray     # Z, [d_p, N]
    attention: np.ndarray     # A, [N, L]; columns sum to 1
    label_repr: np.ndarray    # V, [d_h, L]
    logits: np.ndarray        # [L]
    probabilities: np.ndarray # [L]


def forward(params: ModelParams, dims: ModelDims, tokens: np.ndarray) -> ForwardCache:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise DataError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= dims.vocab_size:
        raise DataError(
            f"token id outside vocabulary [0, {dims.vocab_size}): "
            f"{int(tokens.min())}..{int(tokens.max())}"
        )
    tokens = tokens[: dims.max_len]

    blocks = []
    for seg in segment(tokens, dims.segment_len):
        x = params["embedding"][seg].T  # [d_e, n_seg]
        blocks.append(np.tanh(params["encoder_weight"] @ x + params["encoder_bias"][:, None]))
    hidden = np.concatenate(blocks, axis=1)
    embedded = params["embedding"][tokens].T

    attn_tanh = np.tanh(params["attn_hidden"] @ hidden)          # Z, [d_p, N]
    scores = (params["attn_label"] @ attn_tanh).T                # [N, L]
    scores = scores - scores.max(axis=0, keepdims=True)
    expo = np.exp(scores)
    attention = expo / expo.sum(axis=0, keepdims=True)           # [N, L]
    label_repr = hidden @ attention                              # [d_h, L]
    logits = np.einsum("ld,dl->l", params["classifier_weight"], label_repr)
    logits = logits + params["classifier_bias"]
    probabilities = expit(logits)
    return ForwardCache(
        tokens=tokens,
        embedded=embedded,
        hidden=hidden,
        attn_tanh=attn_tanh,
        attention=attention,
        label_repr=label_repr,
        logits=logits,
        probabilities=probabilities,
    )


def loss(cache: ForwardCache, labels: np.ndarray) -> float:
    """Mean over labels of binary cross-entropy, probabilities clamped."""
    y = np.asarray(labels, dtype=float)
    if y.shape != cache.probabilities.shape or not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be a binary vector of length num_labels")
    p = np.clip(cache.probabilities, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def backward(
    params: ModelParams, dims: ModelDims, cache: ForwardCache, labels: np.ndarray
) -> ModelParams:
    """Exact gradient of `loss` w.r.t. every parameter for one example."""
    y = np.asarray(labels, dtype=float)
    n = cache.hidden.shape[1]
    L = dims.num_labels

    d_logits = (cache.probabilities - y) / L                     # [L]
    grad_cls_w = d_logits[:, None] * cache.label_repr.T          # [L, d_h]
    grad_cls_b = d_logits
    grad_v = params["classifier_weight"].T * d_logits[None, :]   # [d_h, L]

    # V = H A: split into the H path and the attention path.
    grad_h = grad_v @ cache.attention.T                          # [d_h, N]
    grad_a = cache.hidden.T @ grad_v                             # [N, L]

    # Per-label softmax over positions (columns of A).
    weighted = cache.attention * grad_a
    grad_scores = weighted - cache.attention * weighted.sum(axis=0, keepdims=True)

    # scores = (U Z)^T
    grad_u = grad_scores.T @ cache.attn_tanh.T                   # [L, d_p]
    grad_z = params["attn_label"].T @ grad_scores.T              # [d_p, N]
    grad_pre_z = grad_z * (1.0 - cache.attn_tanh**2)
    grad_p = grad_pre_z @ cache.hidden.T                         # [d_p, d_h]
    grad_h = grad_h + params["attn_hidden"].T @ grad_pre_z

    # H = tanh(W_enc X + b_enc)
    grad_pre_h = grad_h * (1.0 - cache.hidden**2)                # [d_h, N]
    grad_enc_w = grad_pre_h @ cache.embedded.T                   # [d_h, d_e]
    grad_enc_b = grad_pre_h.sum(axis=1)
    grad_x = params["encoder_weight"].T @ grad_pre_h             # [d_e, N]

    grad_emb = np.zeros_like(params["embedding"])
    np.add.at(grad_emb, cache.tokens, grad_x.T)

    assert n == len(cache.tokens)
    return {
        "embedding": grad_emb,
        "encoder_weight": grad_enc_w,
        "encoder_bias": grad_enc_b,
        "attn_hidden": grad_p,
        "attn_label": grad_u,
        "classifier_weight": grad_cls_w,
        "classifier_bias": grad_cls_b,
    }


def predict(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Assign label l iff p_l >= threshold."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    return (np.asarray(probabilities) >= threshold).astype(np.int8)


def tune_threshold(
    probabilities: np.ndarray, golds: np.ndarray, grid: tuple[float, ...] | None = None
) -> float:
    """Pick the micro-F1-maximising threshold on a validation set.

    0.5 is always in the grid, so tuning never degrades the 0.5 baseline.
    """
    from .fairness import confusion, micro_f1  # local import to avoid a cycle

    if grid is None:
        grid = tuple(round(0.1 * i, 1) for i in range(1, 10))
    probs = np.asarray(probabilities)
    golds = np.asarray(golds)
    best_t, best_f1 = 0.5, -1.0
    for t in sorted(grid):
        counts = confusion((probs >= t).astype(np.int8), golds)
        f1 = micro_f1(counts)
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t


# Checkpoint container: a magic line, a JSON header line (dims, parameter
# names/shapes, dtype, seed lineage), then the raw little-endian float64
# C-order blobs concatenated in header order.  Byte-stable for fixed content.
_CKPT_MAGIC = b"DPICD-CKPT-1\n"


def save_checkpoint(path, params: ModelParams, dims: ModelDims, seed_lineage: dict) -> None:
    check_params(params, dims)
    header = {
        "dims": asdict(dims),
        "params": [{"name": n, "shape": list(params[n].shape)} for n in PARAM_NAMES],
        "dtype": "<f8",
        "order": "C",
        "seed_lineage": seed_lineage,
    }
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelDims, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode())
        dims = ModelDims(**header["dims"])
        params: ModelParams = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n_bytes = int(np.prod(shape)) * 8
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise DataError(f"{path}: truncated checkpoint")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    check_params(params, dims)
    return params, dims, header["seed_lineage"]


def seeded_params(dims: ModelDims, master_seed: int) -> tuple[ModelParams, dict]:
    """Initialise from the named `init` stream and report the seed lineage."""
    params = init_params(dims, rngmod.named_stream(master_seed, "init"))
    lineage = rngmod.seed_lineage(master_seed, ("init",))
    return params, lineage
