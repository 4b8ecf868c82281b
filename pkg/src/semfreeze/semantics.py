"""Vocabulary-defined semantics of the latent space.

Every vocabulary label owns a direction ("base") at both ends of the model:
its embedding row on the input side and its row of the pseudoinverted head
matrix on the output side. Straight-line interpolation between the two gives
a virtual per-layer anchor, and the per-layer gap between a factual latent
trajectory and those anchors is the transition-deviation profile that drives
freeze-boundary selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    NORM_FLOOR,
    DegenerateVectorError,
    as_matrix,
    as_vector,
    pseudoinverse,
    softmax_cross_entropy,
)

# Deviation measures. The first is the default; the other two are the
# ablation measures selectable per policy.
COSINE_TO_ANCHOR = "cosine_to_anchor"
COSINE_TO_OUTPUT_BASE = "cosine_to_output_base"
CE_TO_LABEL = "ce_to_label"
MEASURES = (COSINE_TO_ANCHOR, COSINE_TO_OUTPUT_BASE, CE_TO_LABEL)

SIDES = ("input", "output")


@dataclass(frozen=True)
class SemanticBases:
    """Per-label directions at both model ends.

    input_bases[j] is label j's embedding row; output_bases[j] is row j of
    the pseudoinverted head matrix. Built once, then shared read-only.
    """

    input_bases: np.ndarray   # (V, d)
    output_bases: np.ndarray  # (V, d)

    def __post_init__(self):
        ib = as_matrix(self.input_bases)
        ob = as_matrix(self.output_bases)
        if ib.shape != ob.shape:
            raise ValueError(f"base shape mismatch: {ib.shape} vs {ob.shape}")
        for name, m in (("input", ib), ("output", ob)):
            norms = np.linalg.norm(m, axis=1)
            if np.any(norms < NORM_FLOOR):
                j = int(np.argmin(norms))
                raise DegenerateVectorError(f"{name} base row {j} has zero norm")
        object.__setattr__(self, "input_bases", ib)
        object.__setattr__(self, "output_bases", ob)

    @property
    def vocab_size(self) -> int:
        return self.input_bases.shape[0]

    @property
    def dim(self) -> int:
        return self.input_bases.shape[1]


@dataclass
class TransitionTrace:
    """Per-layer latents of the medium token (the last input position).

    latents has m+1 rows: the post-embedding state followed by the state
    after each block. label is the ground-truth next token; None when the
    trace was captured without supervision.
    """

    medium_token: int
    label: int | None
    latents: np.ndarray  # (m+1, d)

    def __post_init__(self):
        self.latents = as_matrix(self.latents)
        if self.latents.shape[0] < 2:
            raise ValueError("a trace needs at least two layers of latents")

    @property
    def layer_count(self) -> int:
        return self.latents.shape[0] - 1


@dataclass
class DeviationProfile:
    """Per-layer deviation values d_0..d_m under one measure."""

    deviations: np.ndarray  # (m+1,)
    measure: str = COSINE_TO_ANCHOR

    def __post_init__(self):
        self.deviations = as_vector(self.deviations)
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}")

    @property
    def layer_count(self) -> int:
        return self.deviations.shape[0] - 1


def build_bases(embedding_matrix, lm_head_matrix, tol: float = 1e-6) -> SemanticBases:
    """Derive both base families from the model's end matrices.

    embedding_matrix is (V, d); lm_head_matrix maps d-dim latents to V
    logits, so it is (d, V) and its pseudoinverse is (V, d).
    """
    w_in = as_matrix(embedding_matrix)
    w_out = as_matrix(lm_head_matrix)
    v, d = w_in.shape
    if w_out.shape != (d, v):
        raise ValueError(
            f"head matrix shape {w_out.shape} does not match embedding {w_in.shape}"
        )
    return SemanticBases(input_bases=w_in.copy(), output_bases=pseudoinverse(w_out, tol))


def semantic_anchor(
    bases: SemanticBases, medium_token: int, label: int, k: int, m: int
) -> np.ndarray:
    """Virtual latent at layer k on the straight route from input to output base.

    Endpoints are returned as exact copies of the bases; interior points are
    (1 - k/m) * input_base + (k/m) * output_base.
    """
    if m < 1:
        raise ValueError("layer count must be at least 1")
    if not 0 <= k <= m:
        raise IndexError(f"layer index {k} outside [0, {m}]")
    if not 0 <= medium_token < bases.vocab_size:
        raise IndexError(f"medium token {medium_token} outside vocabulary")
    if not 0 <= label < bases.vocab_size:
        raise IndexError(f"label {label} outside vocabulary")
    if k == 0:
        return bases.input_bases[medium_token].copy()
    if k == m:
        return bases.output_bases[label].copy()
    t = k / m
    return (1.0 - t) * bases.input_bases[medium_token] + t * bases.output_bases[label]


def _cosine_rows(rows: np.ndarray, r: np.ndarray, what: str) -> np.ndarray:
    """Cosine of r against every row; rejects degenerate inputs."""
    rn = float(np.linalg.norm(r))
    if rn < NORM_FLOOR:
        raise DegenerateVectorError(f"{what}: query vector has zero norm")
    row_norms = np.linalg.norm(rows, axis=1)
    if np.any(row_norms < NORM_FLOOR):
        j = int(np.argmin(row_norms))
        raise DegenerateVectorError(f"{what}: base row {j} has zero norm")
    return np.clip((rows @ r) / (row_norms * rn), -1.0, 1.0)


def _anchor_rows(bases: SemanticBases, medium_token: int, k: int, m: int) -> np.ndarray:
    """All V anchors at layer k: each label interpolates toward its own output base."""
    t = k / m
    return (1.0 - t) * bases.input_bases[medium_token][None, :] + t * bases.output_bases


def similarity_logits(
    bases: SemanticBases,
    r,
    side: str = "output",
    *,
    k: int | None = None,
    m: int | None = None,
    medium_token: int | None = None,
) -> np.ndarray:
    """Vocabulary logits as cosines of r against one base family.

    side "input" or "output" uses that end's bases directly. side "anchor"
    uses, for each label, that label's own interpolated anchor at layer k of
    an m-layer model (medium_token fixes the shared input endpoint).
    """
    vec = as_vector(r)
    if vec.size != bases.dim:
        raise ValueError(f"latent dim {vec.size} does not match bases dim {bases.dim}")
    if side == "input":
        rows = bases.input_bases
    elif side == "output":
        rows = bases.output_bases
    elif side == "anchor":
        if k is None or m is None or medium_token is None:
            raise ValueError("anchor side needs k, m, and medium_token")
        if not 0 <= k <= m:
            raise IndexError(f"layer index {k} outside [0, {m}]")
        if not 0 <= medium_token < bases.vocab_size:
            raise IndexError(f"medium token {medium_token} outside vocabulary")
        rows = _anchor_rows(bases, medium_token, k, m)
    else:
        raise ValueError(f"unknown side {side!r}")
    return _cosine_rows(rows, vec, f"similarity_logits[{side}]")


def semantic_ce_loss(bases: SemanticBases, r, label: int) -> float:
    """Cross-entropy over output-side similarity logits (raw cosines)."""
    logits = similarity_logits(bases, r, "output")
    return softmax_cross_entropy(logits, label)


def semantic_cos_loss(bases: SemanticBases, r, label: int) -> float:
    """1 - cosine(r, output base of the label); lies in [0, 2]."""
    if not 0 <= label < bases.vocab_size:
        raise IndexError(f"label {label} outside vocabulary")
    vec = as_vector(r)
    c = _cosine_rows(bases.output_bases[label][None, :], vec, "semantic_cos_loss")
    return float(1.0 - c[0])


def deviation_profile(
    bases: SemanticBases, trace: TransitionTrace, measure: str = COSINE_TO_ANCHOR
) -> DeviationProfile:
    """Per-layer deviation of a factual trace from its virtual counterpart.

    cosine_to_anchor: 1 - cos(f_k, anchor_k) for the trace's (token, label).
    cosine_to_output_base: 1 - cos(f_k, output base of the label).
    ce_to_label: cross-entropy of the V anchor-side logits at k vs the label.
    """
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    if trace.label is None:
        raise ValueError("trace has no label; deviations need the ground truth")
    if trace.latents.shape[1] != bases.dim:
        raise ValueError(
            f"trace dim {trace.latents.shape[1]} does not match bases dim {bases.dim}"
        )
    m = trace.layer_count
    label = trace.label
    devs = np.empty(m + 1, dtype=np.float64)
    for k in range(m + 1):
        f_k = trace.latents[k]
        try:
            if measure == COSINE_TO_ANCHOR:
                anchor = semantic_anchor(bases, trace.medium_token, label, k, m)
                c = _cosine_rows(anchor[None, :], f_k, "deviation")
                devs[k] = 1.0 - c[0]
            elif measure == COSINE_TO_OUTPUT_BASE:
                c = _cosine_rows(bases.output_bases[label][None, :], f_k, "deviation")
                devs[k] = 1.0 - c[0]
            else:  # CE_TO_LABEL
                logits = _cosine_rows(
                    _anchor_rows(bases, trace.medium_token, k, m), f_k, "deviation"
                )
                devs[k] = softmax_cross_entropy(logits, label)
        except DegenerateVectorError as err:
            raise DegenerateVectorError(f"layer {k}: {err}") from None
    return DeviationProfile(deviations=devs, measure=measure)
