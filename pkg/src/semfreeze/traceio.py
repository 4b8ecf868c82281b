"""Bit-exact binary container for latent traces, end matrices, and model
checkpoints, plus the analysis pipeline for traces exported from real models.

Layout, little-endian throughout:

    8 bytes   magic "SEFTTRC1"
    u64       header length
    bytes     UTF-8 JSON header: {"version": 1, "model", "layers", "dim",
              "vocab", "records", "has_input_matrix", "has_output_pinv"}
              plus an optional "params": [{"name", "shape"}, ...] section
    f32[V*d]  input matrix, if flagged (row-major)
    f32[V*d]  pseudoinverted output matrix, if flagged
    records   each: u32 token, u32 label, f32[(m+1)*d] latents
    f32[...]  parameter payloads in header order, if declared

The output-side matrix is stored already pseudoinverted by the producer, so
consumers never decompose real head matrices. Files are immutable once
written; concurrent readers are safe. Payloads are 32-bit at this boundary
only; analysis happens in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import budget as budget_mod
from .freezing import seft_select_eof
from .model import ModelConfig, ModelParams, param_shapes
from .semantics import (
    COSINE_TO_ANCHOR,
    SemanticBases,
    TransitionTrace,
    deviation_profile,
)

MAGIC = b"SEFTTRC1"
VERSION = 1

_HEADER_KEYS = (
    "version",
    "model",
    "layers",
    "dim",
    "vocab",
    "records",
    "has_input_matrix",
    "has_output_pinv",
)


class TraceFormatError(Exception):
    """Base class for trace container violations."""


class BadMagicError(TraceFormatError):
    pass


class UnsupportedVersionError(TraceFormatError):
    pass


class TruncatedFileError(TraceFormatError):
    pass


class ShapeMismatchError(TraceFormatError):
    pass


@dataclass
class TraceFile:
    """In-memory form of one container file.

    latents is (records, m+1, d) float32; w_in / w_out_pinv are (V, d)
    float32 or None; params maps parameter names to float32 arrays.
    """

    model: str
    layers: int
    dim: int
    vocab: int
    tokens: np.ndarray
    labels: np.ndarray
    latents: np.ndarray
    w_in: np.ndarray | None = None
    w_out_pinv: np.ndarray | None = None
    params: dict[str, np.ndarray] | None = None

    @property
    def record_count(self) -> int:
        return int(self.tokens.shape[0])


def _coerce_f32(a, shape, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(a, dtype="<f4"))
    if arr.shape != shape:
        raise ShapeMismatchError(f"{what}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatchError(f"{what}: non-finite entries")
    return arr


def _validate(trace: TraceFile) -> TraceFile:
    if trace.layers < 1 or trace.dim < 1 or trace.vocab < 1:
        raise ShapeMismatchError("non-positive layer, dim, or vocab count")
    n = trace.record_count
    trace.tokens = np.ascontiguousarray(np.asarray(trace.tokens, dtype="<u4"))
    trace.labels = np.ascontiguousarray(np.asarray(trace.labels, dtype="<u4"))
    if trace.tokens.shape != (n,) or trace.labels.shape != (n,):
        raise ShapeMismatchError("token/label arrays must be flat and equal length")
    if n and (trace.tokens.max() >= trace.vocab or trace.labels.max() >= trace.vocab):
        raise ShapeMismatchError("token or label id outside the declared vocabulary")
    trace.latents = _coerce_f32(
        trace.latents, (n, trace.layers + 1, trace.dim), "latents"
    )
    for name in ("w_in", "w_out_pinv"):
        mat = getattr(trace, name)
        if mat is not None:
            setattr(
                trace, name, _coerce_f32(mat, (trace.vocab, trace.dim), name)
            )
    if trace.params is not None:
        trace.params = {
            k: np.ascontiguousarray(np.asarray(v, dtype="<f4"))
            for k, v in trace.params.items()
        }
    return trace


def write_trace(path, trace: TraceFile) -> None:
    """Serialize to the byte layout; read_trace(write_trace(x)) is x, bit for bit."""
    trace = _validate(trace)
    header = {
        "version": VERSION,
        "model": trace.model,
        "layers": trace.layers,
        "dim": trace.dim,
        "vocab": trace.vocab,
        "records": trace.record_count,
        "has_input_matrix": trace.w_in is not None,
        "has_output_pinv": trace.w_out_pinv is not None,
    }
    if trace.params is not None:
        header["params"] = [
            {"name": k, "shape": list(v.shape)} for k, v in trace.params.items()
        ]
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for mat in (trace.w_in, trace.w_out_pinv):
            if mat is not None:
                fh.write(mat.tobytes())
        for i in range(trace.record_count):
            fh.write(int(trace.tokens[i]).to_bytes(4, "little"))
            fh.write(int(trace.labels[i]).to_bytes(4, "little"))
            fh.write(trace.latents[i].tobytes())
        if trace.params is not None:
            for v in trace.params.values():
                fh.write(v.tobytes())


def _take(buf: memoryview, pos: int, n: int, what: str) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise TruncatedFileError(f"file ends inside {what}")
    return buf[pos : pos + n], pos + n


def read_trace(path) -> TraceFile:
    """Parse and fully validate a container file.

    Raises BadMagicError, UnsupportedVersionError, TruncatedFileError, or
    ShapeMismatchError; never returns partially valid data.
    """
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    pos = 0
    chunk, pos = _take(buf, pos, 8, "magic")
    if bytes(chunk) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(chunk)!r}")
    chunk, pos = _take(buf, pos, 8, "header length")
    hlen = int.from_bytes(chunk, "little")
    chunk, pos = _take(buf, pos, hlen, "header")
    try:
        header = json.loads(bytes(chunk).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ShapeMismatchError(f"unreadable header: {err}") from None
    if not isinstance(header, dict) or any(k not in header for k in _HEADER_KEYS):
        raise ShapeMismatchError("header missing required keys")
    if header["version"] != VERSION:
        raise UnsupportedVersionError(f"unsupported version {header['version']!r}")
    layers, dim, vocab = header["layers"], header["dim"], header["vocab"]
    n = header["records"]
    for k, v in (("layers", layers), ("dim", dim), ("vocab", vocab)):
        if not isinstance(v, int) or v < 1:
            raise ShapeMismatchError(f"header {k} must be a positive integer")
    if not isinstance(n, int) or n < 0:
        raise ShapeMismatchError("header records must be a nonnegative integer")

    def read_f32(count: int, what: str):
        nonlocal pos
        chunk_, pos = _take(buf, pos, 4 * count, what)
        return np.frombuffer(chunk_, dtype="<f4").copy()

    w_in = w_out = None
    if header["has_input_matrix"]:
        w_in = read_f32(vocab * dim, "input matrix").reshape(vocab, dim)
    if header["has_output_pinv"]:
        w_out = read_f32(vocab * dim, "output pseudoinverse").reshape(vocab, dim)

    tokens = np.empty(n, dtype="<u4")
    labels = np.empty(n, dtype="<u4")
    latents = np.empty((n, layers + 1, dim), dtype="<f4")
    for i in range(n):
        chunk_, pos = _take(buf, pos, 8, f"record {i} ids")
        tokens[i] = int.from_bytes(chunk_[:4], "little")
        labels[i] = int.from_bytes(chunk_[4:], "little")
        latents[i] = read_f32((layers + 1) * dim, f"record {i} latents").reshape(
            layers + 1, dim
        )

    params = None
    if "params" in header:
        if not isinstance(header["params"], list):
            raise ShapeMismatchError("header params section must be a list")
        params = {}
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            params[name] = read_f32(count, f"parameter {name}").reshape(shape)

    if pos != len(buf):
        raise ShapeMismatchError(f"{len(buf) - pos} trailing bytes after payload")
    return _validate(
        TraceFile(
            model=header["model"],
            layers=layers,
            dim=dim,
            vocab=vocab,
            tokens=tokens,
            labels=labels,
            latents=latents,
            w_in=w_in,
            w_out_pinv=w_out,
            params=params,
        )
    )


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams) -> None:
    """Model parameters in the container's params section (32-bit payloads)."""
    cfg = params.config
    trace = TraceFile(
        model=f"toy:{cfg.layers}x{cfg.dim}h{cfg.heads}ctx{cfg.context_len}seed{cfg.seed}",
        layers=cfg.layers,
        dim=cfg.dim,
        vocab=cfg.vocab,
        tokens=np.zeros(0, dtype="<u4"),
        labels=np.zeros(0, dtype="<u4"),
        latents=np.zeros((0, cfg.layers + 1, cfg.dim), dtype="<f4"),
        params={k: v.astype("<f4") for k, v in params.tensors.items()},
    )
    write_trace(path, trace)


def load_checkpoint(path, config: ModelConfig) -> ModelParams:
    trace = read_trace(path)
    if trace.params is None:
        raise ShapeMismatchError("file carries no parameter section")
    expected = param_shapes(config)
    if set(expected) != set(trace.params):
        raise ShapeMismatchError("parameter names do not match the model config")
    tensors = {}
    for name, shape in expected.items():
        arr = trace.params[name]
        if arr.shape != shape:
            raise ShapeMismatchError(f"parameter {name}: shape {arr.shape} != {shape}")
        tensors[name] = arr.astype(np.float64)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- analysis

@dataclass
class TraceAnalysis:
    """Per-record boundaries and aggregates for one trace file."""

    m: int
    measure: str
    tokens: np.ndarray
    labels: np.ndarray
    eofs: np.ndarray             # (n,) natural boundary per record
    deviations: np.ndarray       # (n, m+1) float64
    histogram: np.ndarray        # (m,) counts per boundary
    expected_saving: float       # mean(eof)/m if trained unrestricted
    plans: dict[str, tuple[int, ...]]
    plan_savings: dict[str, float]


def bases_from_trace(trace: TraceFile) -> SemanticBases:
    if trace.w_in is None or trace.w_out_pinv is None:
        raise ShapeMismatchError("trace carries no end matrices; supply bases")
    return SemanticBases(
        input_bases=trace.w_in.astype(np.float64),
        output_bases=trace.w_out_pinv.astype(np.float64),
    )


def analyze_trace(
    trace: TraceFile,
    measure: str = COSINE_TO_ANCHOR,
    bases: SemanticBases | None = None,
) -> TraceAnalysis:
    """Deviation profiles, natural boundaries, and plan recommendations.

    Record order only permutes the per-record rows; aggregates are
    order-independent.
    """
    if trace.record_count == 0:
        raise ShapeMismatchError("trace has no records to analyze")
    if bases is None:
        bases = bases_from_trace(trace)
    if bases.dim != trace.dim or bases.vocab_size != trace.vocab:
        raise ShapeMismatchError("bases do not match the trace dimensions")
    m = trace.layers
    n = trace.record_count
    devs = np.empty((n, m + 1), dtype=np.float64)
    eofs = np.empty(n, dtype=np.int64)
    for i in range(n):
        tr = TransitionTrace(
            medium_token=int(trace.tokens[i]),
            label=int(trace.labels[i]),
            latents=trace.latents[i].astype(np.float64),
        )
        profile = deviation_profile(bases, tr, measure)
        devs[i] = profile.deviations
        eofs[i] = seft_select_eof(profile, m)
    histogram = np.bincount(eofs, minlength=m)[:m]
    plans = {}
    savings = {}
    for growth in budget_mod.GROWTHS:
        plan = budget_mod.make_plan(growth, m, n)
        plans[growth] = plan.quotas
        savings[growth] = budget_mod.expected_saving(plan)
    return TraceAnalysis(
        m=m,
        measure=measure,
        tokens=trace.tokens.copy(),
        labels=trace.labels.copy(),
        eofs=eofs,
        deviations=devs,
        histogram=histogram,
        expected_saving=float(eofs.mean()) / m,
        plans=plans,
        plan_savings=savings,
    )
