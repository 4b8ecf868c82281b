"""A small decoder-only transformer with exact handwritten gradients.

Pre-norm blocks: RMSNorm -> rotary multi-head attention -> residual, then
RMSNorm -> SiLU feed-forward -> residual. Position enters only through the
rotary maps inside attention, so the post-embedding state of a token is
exactly its embedding row.

Shapes: activations (B, T, d); attention heads (B, h, T, dh). Parameters
live in a flat dict keyed by dotted names ("block2.attn.wq") and are float64
throughout; 32-bit appears only at the checkpoint boundary.

Backpropagation is freeze-aware: with boundary eof, blocks 0..eof-1 are
frozen and the backward traversal stops at block eof, which is what the
(m - eof)/m cost accounting charges for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import NORM_FLOOR, DegenerateVectorError
from .semantics import SemanticBases, TransitionTrace

LOSS_KINDS = ("standard_ce", "semantic_ce", "semantic_cos")
MODULE_MASKS = ("sam", "fcm", "both")

_NORM_EPS = 1e-6
_ROPE_BASE = 10000.0
_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or update."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    dim: int
    heads: int
    vocab: int
    context_len: int
    seed: int = 0

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("need at least 2 layers")
        if self.vocab < 2:
            raise ValueError("need at least 2 vocabulary entries")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary maps")
        if self.context_len < 1:
            raise ValueError("context_len must be positive")


@dataclass(frozen=True)
class FreezeDecision:
    """Trainability of one step: leading blocks below eof are frozen.

    module_mask narrows which sublayers of trainable blocks receive
    gradients; single_block restricts training to exactly block eof.
    """

    eof: int
    module_mask: str = "both"
    single_block: bool = False

    def __post_init__(self):
        if self.eof < 0:
            raise ValueError("eof must be nonnegative")
        if self.module_mask not in MODULE_MASKS:
            raise ValueError(f"unknown module mask {self.module_mask!r}")


class ModelParams:
    """Config plus the flat name -> float64 array parameter table."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _block_param_names(i: int) -> list[str]:
    return [
        f"block{i}.norm_attn.g",
        f"block{i}.attn.wq",
        f"block{i}.attn.wk",
        f"block{i}.attn.wv",
        f"block{i}.attn.wo",
        f"block{i}.norm_mlp.g",
        f"block{i}.mlp.w1",
        f"block{i}.mlp.w2",
    ]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared shape of every parameter, in creation order."""
    d, v = config.dim, config.vocab
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.layers):
        shapes[f"block{i}.norm_attn.g"] = (d,)
        shapes[f"block{i}.attn.wq"] = (d, d)
        shapes[f"block{i}.attn.wk"] = (d, d)
        shapes[f"block{i}.attn.wv"] = (d, d)
        shapes[f"block{i}.attn.wo"] = (d, d)
        shapes[f"block{i}.norm_mlp.g"] = (d,)
        shapes[f"block{i}.mlp.w1"] = (d, 4 * d)
        shapes[f"block{i}.mlp.w2"] = (4 * d, d)
    shapes["final_norm.g"] = (d,)
    shapes["head"] = (d, v)
    return shapes


def init_model(config: ModelConfig) -> ModelParams:
    """Deterministic initialization; equal configs give bit-identical tensors."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float64)
        elif name == "embed" or name == "head":
            tensors[name] = rng.normal(0.0, config.dim**-0.5, shape)
        else:
            tensors[name] = rng.normal(0.0, shape[0] ** -0.5, shape)
    return ModelParams(config, tensors)


def trainable_names(config: ModelConfig, freeze: FreezeDecision) -> list[str]:
    """Parameters that receive gradients under a freeze decision.

    Head and final norm are always trainable; the embedding only with
    eof = 0 (suffix mode). Norm gains follow their block regardless of the
    module mask.
    """
    if freeze.eof >= config.layers:
        raise ValueError(f"eof {freeze.eof} leaves no trainable block")
    if freeze.single_block:
        blocks = [freeze.eof]
    else:
        blocks = list(range(freeze.eof, config.layers))
    names: list[str] = []
    if freeze.eof == 0 and not freeze.single_block:
        names.append("embed")
    for i in blocks:
        names.append(f"block{i}.norm_attn.g")
        if freeze.module_mask in ("sam", "both"):
            names += [f"block{i}.attn.w{x}" for x in "qkvo"]
        names.append(f"block{i}.norm_mlp.g")
        if freeze.module_mask in ("fcm", "both"):
            names += [f"block{i}.mlp.w1", f"block{i}.mlp.w2"]
    names += ["final_norm.g", "head"]
    return names


# ---------------------------------------------------------------- kernels

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _rmsnorm_fwd(x, g):
    # x (..., d), g (d,). Returns y and the per-position rms for backward.
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return (x / rms) * g, rms


def _rmsnorm_bwd(dy, x, g, rms):
    d = x.shape[-1]
    dg = np.sum(dy * x / rms, axis=tuple(range(x.ndim - 1)))
    s = np.sum(dy * g * x, axis=-1, keepdims=True)
    dx = (dy * g) / rms - x * s / (d * rms**3)
    return dx, dg


def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _rope_tables(t_len: int, dh: int):
    half = dh // 2
    inv_freq = _ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(t_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)  # each (T, dh/2)


def _rope_fwd(x, cos, sin):
    # x (B, h, T, dh); rotate pairs (j, j + dh/2) by the position angle.
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rope_bwd(dy, cos, sin):
    half = dy.shape[-1] // 2
    g1, g2 = dy[..., :half], dy[..., half:]
    return np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1)


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


# ---------------------------------------------------------------- forward

def _forward(params: ModelParams, tokens: np.ndarray, want_caches: bool):
    """Causal forward pass over a (B, T) token batch.

    Returns (logits (B, V), latents list of m+1 (B, d) arrays, caches).
    Latents track the last position: post-embedding, then after each block.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"expected (B, T) tokens, got shape {tokens.shape}")
    b, t = tokens.shape
    if t < 1 or t > cfg.context_len:
        raise ValueError(f"sequence length {t} outside [1, {cfg.context_len}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token index outside vocabulary")

    p = params.tensors
    h, dh = cfg.heads, cfg.dim // cfg.heads
    scale = dh**-0.5
    cos, sin = _rope_tables(t, dh)
    mask = np.triu(np.full((t, t), -np.inf), k=1)

    x = p["embed"][tokens]  # (B, T, d)
    latents = [x[:, -1, :].copy()]
    caches = {"tokens": tokens, "x0": x, "rope": (cos, sin), "blocks": []}

    for i in range(cfg.layers):
        g1 = p[f"block{i}.norm_attn.g"]
        a, rms1 = _rmsnorm_fwd(x, g1)
        q = _split_heads(a @ p[f"block{i}.attn.wq"], h)
        k = _split_heads(a @ p[f"block{i}.attn.wk"], h)
        v = _split_heads(a @ p[f"block{i}.attn.wv"], h)
        qr = _rope_fwd(q, cos, sin)
        kr = _rope_fwd(k, cos, sin)
        scores = qr @ kr.transpose(0, 1, 3, 2) * scale + mask
        attn = _softmax_last(scores)
        ctx = _merge_heads(attn @ v)
        x1 = x + ctx @ p[f"block{i}.attn.wo"]

        g2 = p[f"block{i}.norm_mlp.g"]
        hn, rms2 = _rmsnorm_fwd(x1, g2)
        u = hn @ p[f"block{i}.mlp.w1"]
        su = _sigmoid(u)
        act = u * su
        x2 = x1 + act @ p[f"block{i}.mlp.w2"]

        latents.append(x2[:, -1, :].copy())
        if want_caches:
            caches["blocks"].append(
                {
                    "x": x, "a": a, "rms1": rms1, "qr": qr, "kr": kr, "v": v,
                    "attn": attn, "ctx": ctx, "x1": x1, "hn": hn, "rms2": rms2,
                    "u": u, "su": su, "act": act,
                }
            )
        x = x2

    xl = x[:, -1, :]
    y, rms_f = _rmsnorm_fwd(xl, p["final_norm.g"])
    logits = y @ p["head"]
    caches["final"] = {"xl": xl, "y": y, "rms_f": rms_f}
    return logits, latents, caches


def forward_with_latents(params: ModelParams, tokens, label: int | None = None):
    """Single-sequence forward returning next-token logits and the trace."""
    seq = np.asarray(tokens)
    if seq.ndim != 1:
        raise ValueError("expected a 1-D token sequence")
    logits, latents, _ = _forward(params, seq[None, :], want_caches=False)
    trace = TransitionTrace(
        medium_token=int(seq[-1]),
        label=label,
        latents=np.stack([l[0] for l in latents]),
    )
    return logits[0], trace


def batch_traces(params: ModelParams, tokens, labels) -> list[TransitionTrace]:
    """Per-item traces from one batched forward pass."""
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    _, latents, _ = _forward(params, tokens, want_caches=False)
    stacked = np.stack(latents, axis=1)  # (B, m+1, d)
    return [
        TransitionTrace(int(tokens[i, -1]), int(labels[i]), stacked[i])
        for i in range(tokens.shape[0])
    ]


def predict_next(params: ModelParams, tokens) -> np.ndarray:
    """Greedy next-token ids for a (B, T) batch."""
    logits, _, _ = _forward(params, np.asarray(tokens), want_caches=False)
    return np.argmax(logits, axis=-1)


# --------------------------------------------------------------- backward

def _matmul_bwd(a2d, w, dy2d, need_dw: bool, need_dx: bool):
    dw = a2d.T @ dy2d if need_dw else None
    dx = dy2d @ w.T if need_dx else None
    return dw, dx


def _loss_seed(params, logits, latents, caches, labels, loss_kind, bases):
    """Loss value, gradient wrt the final latent stream, and head/norm grads.

    Standard CE differentiates through the final norm and head. The semantic
    losses act directly on the last-layer latent with the bases held
    constant, so head and final-norm gradients are exactly zero there.
    """
    p = params.tensors
    b = labels.shape[0]
    final = caches["final"]
    xl = final["xl"]  # (B, d)
    head_grads: dict[str, np.ndarray] = {}

    if loss_kind == "standard_ce":
        probs = _softmax_last(logits)
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        loss = float(np.mean(lse - z[np.arange(b), labels]))
        dlogits = probs
        dlogits[np.arange(b), labels] -= 1.0
        dlogits /= b
        head_grads["head"] = final["y"].T @ dlogits
        dy = dlogits @ p["head"].T
        dxl, dgf = _rmsnorm_bwd(dy, xl, p["final_norm.g"], final["rms_f"])
        head_grads["final_norm.g"] = dgf
        return loss, dxl, head_grads

    if bases is None:
        raise ValueError(f"loss kind {loss_kind!r} needs semantic bases")
    norms = np.linalg.norm(xl, axis=1)
    if np.any(norms < NORM_FLOOR):
        raise DegenerateVectorError(
            f"last-layer latent of batch item {int(np.argmin(norms))} has zero norm"
        )
    unit = xl / norms[:, None]
    eb = bases.output_bases / np.linalg.norm(bases.output_bases, axis=1)[:, None]
    cosv = unit @ eb.T  # (B, V)

    if loss_kind == "semantic_ce":
        z = cosv - cosv.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        loss = float(np.mean(lse - z[np.arange(b), labels]))
        w = _softmax_last(cosv)
        w[np.arange(b), labels] -= 1.0
        w /= b
        dxl = (w @ eb - np.sum(w * cosv, axis=1, keepdims=True) * unit) / norms[:, None]
    elif loss_kind == "semantic_cos":
        c = cosv[np.arange(b), labels]
        loss = float(np.mean(1.0 - c))
        dxl = -(eb[labels] - c[:, None] * unit) / (b * norms[:, None])
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    head_grads["head"] = np.zeros_like(p["head"])
    head_grads["final_norm.g"] = np.zeros_like(p["final_norm.g"])
    return loss, dxl, head_grads


def _block_backward(params, i, cache, dx2, rope, grads, wanted, need_input_grad):
    """Backward through one block given the gradient of its output stream."""
    p = params.tensors
    cfg = params.config
    h = cfg.heads
    cos, sin = rope
    b, t, d = cache["x"].shape
    scale = (d // h) ** -0.5

    def flat(x):
        return x.reshape(-1, x.shape[-1])

    # feed-forward branch
    w2 = p[f"block{i}.mlp.w2"]
    dw2, dact = _matmul_bwd(flat(cache["act"]), w2, flat(dx2), f"block{i}.mlp.w2" in wanted, True)
    if dw2 is not None:
        grads[f"block{i}.mlp.w2"] = dw2
    dact = dact.reshape(b, t, -1)
    u, su = cache["u"], cache["su"]
    du = dact * (su * (1.0 + u * (1.0 - su)))
    w1 = p[f"block{i}.mlp.w1"]
    dw1, dhn = _matmul_bwd(flat(cache["hn"]), w1, flat(du), f"block{i}.mlp.w1" in wanted, True)
    if dw1 is not None:
        grads[f"block{i}.mlp.w1"] = dw1
    dhn = dhn.reshape(b, t, d)
    dx1_norm, dg2 = _rmsnorm_bwd(dhn, cache["x1"], p[f"block{i}.norm_mlp.g"], cache["rms2"])
    if f"block{i}.norm_mlp.g" in wanted:
        grads[f"block{i}.norm_mlp.g"] = dg2
    dx1 = dx2 + dx1_norm

    # attention branch
    wo = p[f"block{i}.attn.wo"]
    dwo, dctx = _matmul_bwd(flat(cache["ctx"]), wo, flat(dx1), f"block{i}.attn.wo" in wanted, True)
    if dwo is not None:
        grads[f"block{i}.attn.wo"] = dwo
    dctx = _split_heads(dctx.reshape(b, t, d), h)
    attn, v = cache["attn"], cache["v"]
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dscores *= scale
    dqr = dscores @ cache["kr"]
    dkr = dscores.transpose(0, 1, 3, 2) @ cache["qr"]
    dq = _merge_heads(_rope_bwd(dqr, cos, sin))
    dk = _merge_heads(_rope_bwd(dkr, cos, sin))
    dv = _merge_heads(dv)

    a2 = flat(cache["a"])
    da2 = np.zeros_like(a2)
    for nm, dy in (("wq", dq), ("wk", dk), ("wv", dv)):
        w = p[f"block{i}.attn.{nm}"]
        dw, dxp = _matmul_bwd(a2, w, flat(dy), f"block{i}.attn.{nm}" in wanted, True)
        if dw is not None:
            grads[f"block{i}.attn.{nm}"] = dw
        da2 += dxp
    da = da2.reshape(b, t, d)
    dx_norm, dg1 = _rmsnorm_bwd(da, cache["x"], p[f"block{i}.norm_attn.g"], cache["rms1"])
    if f"block{i}.norm_attn.g" in wanted:
        grads[f"block{i}.norm_attn.g"] = dg1
    if not need_input_grad:
        return None
    return dx1 + dx_norm


def loss_and_gradients(
    params: ModelParams,
    tokens,
    labels,
    loss_kind: str,
    freeze: FreezeDecision,
    bases: SemanticBases | None = None,
):
    """One supervised step's loss, gradients, and backprop cost.

    Gradients cover exactly trainable_names(config, freeze); entries the loss
    does not reach (head under semantic losses) are zero arrays. cost_units
    is (m - eof)/m per batch item: the traversal depth the backward pays,
    independent of the module mask.
    """
    cfg = params.config
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if freeze.eof >= cfg.layers:
        raise ValueError(f"eof {freeze.eof} leaves no trainable block")
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= cfg.vocab:
        raise ValueError("label outside vocabulary")

    logits, latents, caches = _forward(params, tokens, want_caches=True)
    loss, dxl, head_grads = _loss_seed(
        params, logits, latents, caches, labels, loss_kind, bases
    )
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite {loss_kind} loss at the output stage")

    wanted = set(trainable_names(cfg, freeze))
    grads: dict[str, np.ndarray] = {}
    for name, g in head_grads.items():
        if name in wanted:
            grads[name] = g

    b, t = tokens.shape
    dx = np.zeros((b, t, cfg.dim), dtype=np.float64)
    dx[:, -1, :] = dxl
    for i in range(cfg.layers - 1, freeze.eof - 1, -1):
        need_input = i > freeze.eof or freeze.eof == 0
        dx = _block_backward(
            params, i, caches["blocks"][i], dx, caches["rope"], grads, wanted, need_input
        )
    if "embed" in wanted:
        demb = np.zeros_like(params.tensors["embed"])
        np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, cfg.dim))
        grads["embed"] = demb

    # zero placeholders for trainable parameters the loss never touched
    for name in wanted:
        if name not in grads:
            grads[name] = np.zeros_like(params.tensors[name])

    cost_units = (cfg.layers - freeze.eof) / cfg.layers
    return loss, grads, cost_units


# -------------------------------------------------------------- optimizer

class AdamState:
    """Per-parameter first/second moments and step counts."""

    def __init__(self):
        self.slots: dict[str, dict] = {}

    def slot(self, name: str, shape) -> dict:
        if name not in self.slots:
            self.slots[name] = {
                "m": np.zeros(shape, dtype=np.float64),
                "v": np.zeros(shape, dtype=np.float64),
                "t": 0,
            }
        return self.slots[name]


def apply_update(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
):
    """Adam step over exactly the parameters present in grads (in place).

    Every parameter without a gradient is untouched, bit for bit.
    """
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        p = params.tensors[name]
        s = state.slot(name, p.shape)
        s["t"] += 1
        s["m"] = _ADAM_B1 * s["m"] + (1.0 - _ADAM_B1) * g
        s["v"] = _ADAM_B2 * s["v"] + (1.0 - _ADAM_B2) * g * g
        mhat = s["m"] / (1.0 - _ADAM_B1 ** s["t"])
        vhat = s["v"] / (1.0 - _ADAM_B2 ** s["t"])
        step = lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)
        if not np.all(np.isfinite(step)):
            raise DivergenceError(f"non-finite update for {name}")
        p -= step
    return params, state
