"""Gradient privatisation: per-example norms, clipping, noisy aggregation.

A gradient collection is a mapping from parameter name to a dense array.
`ParamGroupSpec` assigns every parameter to exactly one named group; with the
default one-parameter-per-group layout the group name is the parameter name,
matching the grouping used for the classifier (each linear layer's weight and
bias, the embedding table, and both attention matrices form their own group).

Norm computation comes in two flavours: direct (from materialised
per-example gradients) and ghost (from layer activations and output
gradients, never materialising the per-example weight gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

GradientCollection = dict[str, np.ndarray]


@dataclass(frozen=True)
class ParamGroupSpec:
    """Ordered partition of parameters into named clipping groups."""

    groups: tuple[tuple[str, tuple[tuple[str, tuple[int, ...]], ...]], ...]

    def __post_init__(self) -> None:
        names = [g for g, _ in self.groups]
        if len(names) != len(set(names)):
            raise ValueError("group names must be unique")
        if not names:
            raise ValueError("need at least one group")
        params = [p for _, members in self.groups for p, _ in members]
        if len(params) != len(set(params)):
            raise ValueError("every parameter must belong to exactly one group")

    @property
    def k(self) -> int:
        return len(self.groups)

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {p: s for _, members in self.groups for p, s in members}

    def members(self, group: str) -> tuple[str, ...]:
        for name, members in self.groups:
            if name == group:
                return tuple(p for p, _ in members)
        raise KeyError(group)

    @classmethod
    def one_group_per_param(cls, shapes: Mapping[str, tuple[int, ...]]) -> "ParamGroupSpec":
        return cls(tuple((p, ((p, tuple(s)),)) for p, s in shapes.items()))


@dataclass(frozen=True)
class ClipConfig:
    """Clip norm, mode and noise level for one privatisation step."""

    clip_norm: float
    mode: str = "flat"
    noise_multiplier: float = 0.0
    rng_seed: int | None = None

    def __post_init__(self) -> None:
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if self.mode not in ("flat", "grouped"):
            raise ValueError(f"unknown clip mode {self.mode!r}")


class PerExampleGrads:
    """Stacked per-example gradients: param name -> array[batch, *shape]."""

    def __init__(self, arrays: Mapping[str, np.ndarray], spec: ParamGroupSpec):
        shapes = spec.param_shapes
        if set(arrays) != set(shapes):
            raise ValueError("gradient keys do not match the parameter spec")
        sizes = {a.shape[0] for a in arrays.values()}
        if len(sizes) > 1:
            raise ValueError("inconsistent batch sizes")
        for p, a in arrays.items():
            if tuple(a.shape[1:]) != shapes[p]:
                raise ValueError(f"shape mismatch for {p}: {a.shape[1:]} != {shapes[p]}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite gradient entries in {p}")
        self.arrays = {p: np.asarray(a, dtype=float) for p, a in arrays.items()}
        self.spec = spec

    @classmethod
    def from_examples(
        cls, examples: Sequence[GradientCollection], spec: ParamGroupSpec
    ) -> "PerExampleGrads":
        if not examples:
            raise ValueError("empty example list; use empty() for a zero batch")
        arrays = {
            p: np.stack([ex[p] for ex in examples], axis=0) for p in spec.param_shapes
        }
        return cls(arrays, spec)

    @classmethod
    def empty(cls, spec: ParamGroupSpec) -> "PerExampleGrads":
        arrays = {p: np.zeros((0, *s)) for p, s in spec.param_shapes.items()}
        return cls(arrays, spec)

    @property
    def batch_size(self) -> int:
        return next(iter(self.arrays.values())).shape[0]

    def example(self, i: int) -> GradientCollection:
        return {p: a[i] for p, a in self.arrays.items()}

    def __iter__(self) -> Iterator[GradientCollection]:
        return (self.example(i) for i in range(self.batch_size))


def _sq_norm(grad: GradientCollection, params: Sequence[str]) -> float:
    return float(sum(np.sum(grad[p] * grad[p]) for p in params))


def flat_norm(grad: GradientCollection) -> float:
    """L2 norm over the concatenation of all parameters."""
    return math.sqrt(_sq_norm(grad, list(grad)))


def clip_flat(grad: GradientCollection, clip_norm: float) -> GradientCollection:
    """min(1, C/||g||) g over the concatenation of all groups.

    A zero gradient is returned unchanged; sub-threshold gradients come back
    bit-identical (scale factor exactly 1.0).
    """
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norm = flat_norm(grad)
    if norm <= clip_norm:
        return {p: g.copy() for p, g in grad.items()}
    scale = clip_norm / norm
    return {p: g * scale for p, g in grad.items()}


def clip_grouped(
    grad: GradientCollection, clip_norm: float, spec: ParamGroupSpec
) -> GradientCollection:
    """Clip each group independently to C/sqrt(k); total norm stays <= C."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    threshold = clip_norm / math.sqrt(spec.k)
    out: GradientCollection = {}
    for name, members in spec.groups:
        params = [p for p, _ in members]
        norm = math.sqrt(_sq_norm(grad, params))
        if norm <= threshold:
            for p in params:
                out[p] = grad[p].copy()
        else:
            scale = threshold / norm
            for p in params:
                out[p] = grad[p] * scale
    return out


def ghost_norm_linear(
    inputs: Sequence[np.ndarray], output_grads: Sequence[np.ndarray]
) -> np.ndarray:
    """Per-example ||S_i^T A_i||_F^2 for one linear layer.

    A_i is the [seq_len x d_in] activation, S_i the [seq_len x d_out] output
    gradient.  When 2 seq_len^2 < d_in * d_out this uses the Gram inner
    product <A A^T, S S^T> and never forms the weight-shaped product.
    """
    if len(inputs) != len(output_grads):
        raise ValueError("inputs and output_grads must pair up per example")
    norms = np.empty(len(inputs))
    for i, (a, s) in enumerate(zip(inputs, output_grads)):
        a = np.asarray(a, dtype=float)
        s = np.asarray(s, dtype=float)
        if a.ndim != 2 or s.ndim != 2 or a.shape[0] != s.shape[0]:
            raise ValueError(f"example {i}: incompatible shapes {a.shape} / {s.shape}")
        seq_len, d_in = a.shape
        d_out = s.shape[1]
        if 2 * seq_len * seq_len < d_in * d_out:
            norms[i] = float(np.sum((a @ a.T) * (s @ s.T)))
        else:
            w = s.T @ a
            norms[i] = float(np.sum(w * w))
    return norms


def ghost_norm_embedding(
    token_ids: Sequence[np.ndarray], output_grads: Sequence[np.ndarray]
) -> np.ndarray:
    """Per-example squared norm of the embedding-table gradient.

    Position gradients are summed per distinct token id and the squared row
    norms accumulated; the vocabulary-sized table is never materialised.
    Token ids must be non-negative (vocabulary membership is the caller's
    contract; negative ids are rejected here).
    """
    if len(token_ids) != len(output_grads):
        raise ValueError("token_ids and output_grads must pair up per example")
    norms = np.empty(len(token_ids))
    for i, (ids, grads) in enumerate(zip(token_ids, output_grads)):
        ids = np.asarray(ids)
        grads = np.asarray(grads, dtype=float)
        if ids.ndim != 1 or grads.ndim != 2 or len(ids) != grads.shape[0]:
            raise ValueError(f"example {i}: need one gradient row per position")
        if np.any(ids < 0):
            raise ValueError(f"example {i}: negative token id")
        uniq, inverse = np.unique(ids, return_inverse=True)
        rows = np.zeros((len(uniq), grads.shape[1]))
        np.add.at(rows, inverse, grads)
        norms[i] = float(np.sum(rows * rows))
    return norms


def clip_scales(norms: np.ndarray, clip_norm: float) -> np.ndarray:
    """min(1, C/norm) per example, with 0-norm examples left at scale 1."""
    norms = np.asarray(norms, dtype=float)
    safe = np.where(norms > 0, norms, 1.0)
    return np.minimum(1.0, clip_norm / safe)


def privatize_batch(
    grads: PerExampleGrads,
    cfg: ClipConfig,
    spec: ParamGroupSpec,
    nominal_batch_size: int,
    rng: np.random.Generator | None = None,
    precomputed_norms: np.ndarray | None = None,
) -> tuple[GradientCollection, dict]:
    """Clip every example, sum in ascending batch order, add N(0, (rho C)^2)
    per coordinate to the sum, divide by the nominal batch size.

    With noise_multiplier 0 this is exactly the mean of the clipped
    gradients over `nominal_batch_size`.  An empty Poisson batch is legal and
    yields pure noise / B, flagged in the diagnostics.  `precomputed_norms`
    (e.g. ghost norms) switches flat mode to scale-by-precomputed-norm, which
    matches the clip-then-sum path to within float roundoff.
    """
    if nominal_batch_size < 1:
        raise ValueError("nominal_batch_size must be >= 1")
    if rng is None:
        if cfg.rng_seed is None and cfg.noise_multiplier > 0:
            raise ValueError("noise requires an rng or a seed in ClipConfig")
        rng = np.random.default_rng(cfg.rng_seed)

    shapes = spec.param_shapes
    total: GradientCollection = {p: np.zeros(s) for p, s in shapes.items()}
    pre_norms: list[float] = []
    post_norms: list[float] = []
    for i, example in enumerate(grads):
        pre_norms.append(flat_norm(example))
        if cfg.mode == "grouped":
            clipped = clip_grouped(example, cfg.clip_norm, spec)
        elif precomputed_norms is not None:
            scale = float(clip_scales(precomputed_norms[i : i + 1], cfg.clip_norm)[0])
            clipped = {p: g * scale for p, g in example.items()}
        else:
            clipped = clip_flat(example, cfg.clip_norm)
        post_norms.append(flat_norm(clipped))
        for p in total:
            total[p] += clipped[p]

    if cfg.noise_multiplier > 0:
        std = cfg.noise_multiplier * cfg.clip_norm
        for p in total:
            total[p] += std * rng.standard_normal(shapes[p])

    out = {p: v / nominal_batch_size for p, v in total.items()}
    pre = np.array(pre_norms)
    diagnostics = {
        "batch_size": grads.batch_size,
        "nominal_batch_size": nominal_batch_size,
        "empty_batch": grads.batch_size == 0,
        "median_pre_clip_norm": float(np.median(pre)) if len(pre) else 0.0,
        "max_pre_clip_norm": float(np.max(pre)) if len(pre) else 0.0,
        "clipped_fraction": float(np.mean(pre > cfg.clip_norm)) if len(pre) else 0.0,
        "noise_std": cfg.noise_multiplier * cfg.clip_norm,
    }
    return out, diagnostics
