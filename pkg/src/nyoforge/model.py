"""Decoder-only transformer in float64 numpy with hand-written gradients.

Each block is pre-norm: ``x + Attn(LN(x))`` then ``x + MLP(LN(x))``. Queries
and keys are layer-normalized per head (gain and bias shared across heads)
and then rotated with RoPE before the scaled dot product. Attention is
causal and, when segment boundaries are given, block-diagonal so that no
position attends across a document boundary.

Parameters live in a plain dict keyed by dotted names; ``param_shapes``
fixes their order, which is also the on-disk order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from .errors import (
    AllMasked,
    BadConfig,
    CheckpointCorrupt,
    IdOutOfRange,
    LengthExceedsContext,
    OddHeadDim,
    TraceMismatch,
)

MODEL_MAGIC = b"NYOMODL1"
LOSS_MODES = ("maxz", "auxz", "none")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "maxz"
    maxz_coeff: float = 2e-4
    auxz_coeff: float = 1e-4

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise BadConfig(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    context_len: int = 128
    vocab_size: int = 512
    mlp_ratio: int = 4
    tie_embeddings: bool = True
    rope_base: float = 10000.0
    ln_eps: float = 1e-5
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "vocab_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise BadConfig(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_len < 2:
            raise BadConfig("context_len must be >= 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.mlp_ratio * self.d_model


PRESETS = {
    "wonton7b": ModelConfig(d_model=4096, n_heads=32, n_layers=32, context_len=2048, vocab_size=139_776),
    "desk": ModelConfig(),
}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, dh = config.d_model, config.d_ff, config.d_head
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.gain": (d,),
                p + "ln1.bias": (d,),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "attn.q_norm.gain": (dh,),
                p + "attn.q_norm.bias": (dh,),
                p + "attn.k_norm.gain": (dh,),
                p + "attn.k_norm.bias": (dh,),
                p + "ln2.gain": (d,),
                p + "ln2.bias": (d,),
                p + "mlp.w1": (d, f),
                p + "mlp.b1": (f,),
                p + "mlp.w2": (f, d),
                p + "mlp.b2": (d,),
            }
        )
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    if not config.tie_embeddings:
        shapes["head"] = (config.vocab_size, d)
    return shapes


def is_gain(name: str) -> bool:
    return name.endswith(".gain")


def is_bias(name: str) -> bool:
    return name.endswith((".bias", ".b1", ".b2"))


def init_params(config: ModelConfig, base_std: float = 0.02, seed: int = 0) -> dict[str, np.ndarray]:
    """Normal(0, base_std²) weights; MLP up-projections further scaled by 1/sqrt(n_layers)."""
    if not base_std > 0:
        raise BadConfig("base_std must be positive")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if is_gain(name):
            params[name] = np.ones(shape)
        elif is_bias(name):
            params[name] = np.zeros(shape)
        else:
            w = rng.normal(0.0, base_std, size=shape)
            if name.endswith("mlp.w1"):
                w /= math.sqrt(config.n_layers)
            params[name] = w
    return params


# primitives


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return _ln_forward(x, gain, bias, eps)[0]


def _ln_forward(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _ln_backward(dy, cache, gain):
    xhat, rstd = cache
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def rope_angles(n_positions: int, d_head: int, base: float = 10000.0, offset: int = 0):
    if d_head % 2:
        raise OddHeadDim(f"RoPE needs an even head dimension, got {d_head}")
    theta = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.arange(offset, offset + n_positions, dtype=np.float64)[:, None] * theta[None, :]
    return np.cos(ang), np.sin(ang)


def _rope(x, cos, sin):
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _rope_backward(dy, cos, sin):
    return _rope(dy, cos, -sin)


def rope_apply(v: np.ndarray, position: float, base: float = 10000.0) -> np.ndarray:
    """Rotate coordinate pairs (2i, 2i+1) of one head vector by position * base^(-2i/d)."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    if d % 2:
        raise OddHeadDim(f"RoPE needs an even head dimension, got {d}")
    theta = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = position * theta
    return _rope(v, np.cos(ang), np.sin(ang))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u**3)))


def _gelu_grad(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _softmax(s):
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def segment_ids(length: int, boundaries: Sequence[int] | None) -> np.ndarray:
    """Segment index of each position; positions past the last boundary form one more segment."""
    pos = np.arange(length)
    if boundaries is None or len(boundaries) == 0:
        return np.zeros(length, dtype=np.int64)
    return np.searchsorted(np.asarray(boundaries), pos, side="right")


def attention_mask(length: int, boundaries: Sequence[Sequence[int] | None] | None, batch: int = 1) -> np.ndarray:
    """Boolean (batch, 1, T, T): causal, and block-diagonal over segments when boundaries are given."""
    causal = np.tril(np.ones((length, length), dtype=bool))
    if boundaries is None:
        return np.broadcast_to(causal, (batch, 1, length, length))
    masks = []
    for b in boundaries:
        seg = segment_ids(length, b)
        masks.append(causal & (seg[:, None] == seg[None, :]))
    return np.stack(masks)[:, None]


# blocks


def attention_block(x, params, config: ModelConfig, layer: int, mask, rope_tables=None):
    """Pre-norm attention sublayer with QK-LayerNorm and RoPE; returns (x + attn, cache)."""
    B, T, D = x.shape
    H, dh = config.n_heads, config.d_head
    if T > config.context_len:
        raise LengthExceedsContext(f"sequence length {T} exceeds context {config.context_len}")
    p = f"layers.{layer}."
    cos, sin = rope_tables if rope_tables is not None else rope_angles(T, dh, config.rope_base)
    eps = config.ln_eps
    h, c_ln1 = _ln_forward(x, params[p + "ln1.gain"], params[p + "ln1.bias"], eps)

    def heads(t):
        return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = heads(h @ params[p + "attn.wq"])
    k = heads(h @ params[p + "attn.wk"])
    v = heads(h @ params[p + "attn.wv"])
    qn, c_qn = _ln_forward(q, params[p + "attn.q_norm.gain"], params[p + "attn.q_norm.bias"], eps)
    kn, c_kn = _ln_forward(k, params[p + "attn.k_norm.gain"], params[p + "attn.k_norm.bias"], eps)
    qr = _rope(qn, cos, sin)
    kr = _rope(kn, cos, sin)
    scale = 1.0 / math.sqrt(dh)
    scores = (qr @ kr.swapaxes(-1, -2)) * scale
    a = _softmax(np.where(mask, scores, -np.inf))
    ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    y = x + ctx @ params[p + "attn.wo"]
    cache = dict(
        h=h, c_ln1=c_ln1, v=v, c_qn=c_qn, c_kn=c_kn, qr=qr, kr=kr, scores=scores, a=a, ctx=ctx, mask=mask
    )
    return y, cache


def _attention_backward(dy, cache, params, config, layer, rope_tables, grads):
    p = f"layers.{layer}."
    B, T, D = dy.shape
    H, dh = config.n_heads, config.d_head
    cos, sin = rope_tables
    scale = 1.0 / math.sqrt(dh)
    h, a, v, qr, kr, ctx = cache["h"], cache["a"], cache["v"], cache["qr"], cache["kr"], cache["ctx"]
    dx = dy.copy()
    grads[p + "attn.wo"] = ctx.reshape(-1, D).T @ dy.reshape(-1, D)
    dctx = (dy @ params[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    da = dctx @ v.swapaxes(-1, -2)
    dv = a.swapaxes(-1, -2) @ dctx
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqr = ds @ kr
    dkr = ds.swapaxes(-1, -2) @ qr
    dqn = _rope_backward(dqr, cos, sin)
    dkn = _rope_backward(dkr, cos, sin)
    dq, grads[p + "attn.q_norm.gain"], grads[p + "attn.q_norm.bias"] = _ln_backward(
        dqn, cache["c_qn"], params[p + "attn.q_norm.gain"]
    )
    dk, grads[p + "attn.k_norm.gain"], grads[p + "attn.k_norm.bias"] = _ln_backward(
        dkn, cache["c_kn"], params[p + "attn.k_norm.gain"]
    )

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, T, D)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    hf = h.reshape(-1, D)
    grads[p + "attn.wq"] = hf.T @ dq.reshape(-1, D)
    grads[p + "attn.wk"] = hf.T @ dk.reshape(-1, D)
    grads[p + "attn.wv"] = hf.T @ dv.reshape(-1, D)
    dh_ = dq @ params[p + "attn.wq"].T + dk @ params[p + "attn.wk"].T + dv @ params[p + "attn.wv"].T
    dln, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _ln_backward(dh_, cache["c_ln1"], params[p + "ln1.gain"])
    return dx + dln


def mlp_block(x, params, config: ModelConfig, layer: int):
    p = f"layers.{layer}."
    h, c_ln2 = _ln_forward(x, params[p + "ln2.gain"], params[p + "ln2.bias"], config.ln_eps)
    u = h @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
    z = gelu(u)
    y = x + z @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
    return y, dict(h=h, c_ln2=c_ln2, u=u, z=z)


def _mlp_backward(dy, cache, params, config, layer, grads):
    p = f"layers.{layer}."
    D, F = config.d_model, config.d_ff
    z, u, h = cache["z"], cache["u"], cache["h"]
    grads[p + "mlp.b2"] = dy.sum(axis=(0, 1))
    grads[p + "mlp.w2"] = z.reshape(-1, F).T @ dy.reshape(-1, D)
    du = (dy @ params[p + "mlp.w2"].T) * _gelu_grad(u)
    grads[p + "mlp.b1"] = du.sum(axis=(0, 1))
    grads[p + "mlp.w1"] = h.reshape(-1, D).T @ du.reshape(-1, F)
    dh = du @ params[p + "mlp.w1"].T
    dln, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _ln_backward(dh, cache["c_ln2"], params[p + "ln2.gain"])
    return dy + dln


# full model


@dataclass
class ForwardTrace:
    config: ModelConfig
    params: dict[str, np.ndarray]
    tokens: np.ndarray
    mask: np.ndarray
    rope_tables: tuple[np.ndarray, np.ndarray]
    attn: list[dict]
    mlp: list[dict]
    block_outputs: list[np.ndarray]
    final_cache: tuple
    final_hidden: np.ndarray
    logits_shape: tuple[int, ...]
    squeezed: bool = False


def _output_head(params, config):
    return params["embed"] if config.tie_embeddings else params["head"]


def forward(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    tokens,
    boundaries=None,
    keep_trace: bool = True,
):
    """Logits of shape (..., T, vocab) and an optional trace for ``backward``.

    ``tokens`` is (T,) or (B, T). ``boundaries`` is one list of cumulative
    segment ends for a single sequence, or a list of such lists per row.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    squeezed = tokens.ndim == 1
    if squeezed:
        tokens = tokens[None]
        if boundaries is not None:
            boundaries = [boundaries]
    B, T = tokens.shape
    if T > config.context_len:
        raise LengthExceedsContext(f"sequence length {T} exceeds context {config.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise IdOutOfRange(f"token ids must lie in 0..{config.vocab_size - 1}")
    mask = attention_mask(T, boundaries, B)
    tables = rope_angles(T, config.d_head, config.rope_base)
    x = params["embed"][tokens]
    attn_caches, mlp_caches, outs = [], [], []
    for layer in range(config.n_layers):
        x, ac = attention_block(x, params, config, layer, mask, tables)
        x, mc = mlp_block(x, params, config, layer)
        attn_caches.append(ac)
        mlp_caches.append(mc)
        outs.append(x)
    hf, c_f = _ln_forward(x, params["ln_f.gain"], params["ln_f.bias"], config.ln_eps)
    logits = hf @ _output_head(params, config).T
    trace = None
    if keep_trace:
        trace = ForwardTrace(
            config, params, tokens, mask, tables, attn_caches, mlp_caches, outs, c_f, hf, logits.shape, squeezed
        )
    return (logits[0] if squeezed else logits), trace


def backward(trace: ForwardTrace, grad_logits) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of every parameter given dLoss/dlogits."""
    if isinstance(grad_logits, LossOutput):
        grad_logits = grad_logits.grad_logits
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if trace.squeezed and grad_logits.ndim == 2:
        grad_logits = grad_logits[None]
    if grad_logits.shape != trace.logits_shape:
        raise TraceMismatch(f"gradient shape {grad_logits.shape} does not match logits {trace.logits_shape}")
    config, params = trace.config, trace.params
    if set(params) != set(param_shapes(config)):
        raise TraceMismatch("trace parameters do not match its config")
    V, D = config.vocab_size, config.d_model
    grads: dict[str, np.ndarray] = {}
    W = _output_head(params, config)
    dW = grad_logits.reshape(-1, V).T @ trace.final_hidden.reshape(-1, D)
    dhf = grad_logits @ W
    dx, grads["ln_f.gain"], grads["ln_f.bias"] = _ln_backward(dhf, trace.final_cache, params["ln_f.gain"])
    for layer in reversed(range(config.n_layers)):
        dx = _mlp_backward(dx, trace.mlp[layer], params, config, layer, grads)
        dx = _attention_backward(dx, trace.attn[layer], params, config, layer, trace.rope_tables, grads)
    d_embed = np.zeros_like(params["embed"])
    np.add.at(d_embed, trace.tokens.reshape(-1), dx.reshape(-1, D))
    if config.tie_embeddings:
        d_embed += dW
    else:
        grads["head"] = dW
    grads["embed"] = d_embed
    return {name: grads[name] for name in param_shapes(config)}


# loss


@dataclass
class LossOutput:
    total: float
    ce: float
    reg: float
    maxz: float
    auxz: float
    n_tokens: int
    grad_logits: np.ndarray

    def breakdown(self) -> dict[str, float]:
        return {"total": self.total, "ce": self.ce, "reg": self.reg, "maxz_sq": self.maxz, "auxz_sq": self.auxz}


def compute_loss(logits, targets, loss: LossConfig = LossConfig()) -> LossOutput:
    """Mean cross-entropy over targets >= 0, plus the configured logit regularizer.

    The regularizer averages over every position, masked or not:
    ``maxz`` penalizes the squared max logit, ``auxz`` the squared log
    partition function. Max-z subgradient goes to the first argmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} disagree")
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    tgt = targets.reshape(-1)
    P = flat.shape[0]
    valid = tgt >= 0
    n = int(valid.sum())
    if n == 0:
        raise AllMasked("every target position is masked")
    if tgt.max() >= V:
        raise IdOutOfRange("target id outside vocab")
    mx = flat.max(axis=-1)
    e = np.exp(flat - mx[:, None])
    se = e.sum(axis=-1)
    lse = mx + np.log(se)
    probs = e / se[:, None]
    rows = np.nonzero(valid)[0]
    ce = float((lse[rows] - flat[rows, tgt[rows]]).sum() / n)
    grad = np.zeros_like(flat)
    grad[rows] = probs[rows] / n
    grad[rows, tgt[rows]] -= 1.0 / n
    maxz_sq = float((mx * mx).mean())
    auxz_sq = float((lse * lse).mean())
    reg = 0.0
    if loss.mode == "maxz":
        reg = loss.maxz_coeff * maxz_sq
        arg = flat.argmax(axis=-1)
        grad[np.arange(P), arg] += loss.maxz_coeff * 2.0 * mx / P
    elif loss.mode == "auxz":
        reg = loss.auxz_coeff * auxz_sq
        grad += loss.auxz_coeff * 2.0 * (lse / P)[:, None] * probs
    return LossOutput(ce + reg, ce, reg, maxz_sq, auxz_sq, n, grad.reshape(logits.shape))


# checkpoint file


def save_model(path: str | PathLike, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    ints = [
        config.d_model,
        config.n_heads,
        config.n_layers,
        config.context_len,
        config.vocab_size,
        config.mlp_ratio,
        int(config.tie_embeddings),
        LOSS_MODES.index(config.loss.mode),
    ]
    floats = [config.rope_base, config.ln_eps, config.loss.maxz_coeff, config.loss.auxz_coeff]
    shapes = param_shapes(config)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(ints)) + struct.pack(f"<{len(ints)}Q", *ints))
        f.write(struct.pack("<I", len(floats)) + struct.pack(f"<{len(floats)}d", *floats))
        f.write(struct.pack("<I", len(shapes)))
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            if arr.shape != shape:
                raise BadConfig(f"{name}: shape {arr.shape} != {shape}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", arr.size))
            f.write(arr.tobytes())


def load_model(path: str | PathLike) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    try:
        if data[:8] != MODEL_MAGIC:
            raise CheckpointCorrupt(f"{path}: not a model checkpoint")
        off = 8
        (ni,) = struct.unpack_from("<I", data, off)
        ints = struct.unpack_from(f"<{ni}Q", data, off + 4)
        off += 4 + 8 * ni
        (nf,) = struct.unpack_from("<I", data, off)
        floats = struct.unpack_from(f"<{nf}d", data, off + 4)
        off += 4 + 8 * nf
        d, h, n, ctx, vocab, ratio, tie, mode = ints
        config = ModelConfig(
            d_model=d,
            n_heads=h,
            n_layers=n,
            context_len=ctx,
            vocab_size=vocab,
            mlp_ratio=ratio,
            tie_embeddings=bool(tie),
            rope_base=floats[0],
            ln_eps=floats[1],
            loss=LossConfig(LOSS_MODES[mode], floats[2], floats[3]),
        )
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes = param_shapes(config)
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, off)
            name = data[off + 4 : off + 4 + ln].decode("utf-8")
            off += 4 + ln
            (size,) = struct.unpack_from("<Q", data, off)
            off += 8
            if name not in shapes or math.prod(shapes[name]) != size or off + 8 * size > len(data):
                raise CheckpointCorrupt(f"{path}: unexpected parameter {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shapes[name]).copy()
            off += 8 * size
        if off != len(data) or set(params) != set(shapes):
            raise CheckpointCorrupt(f"{path}: parameter table incomplete or trailing bytes")
    except (struct.error, IndexError, UnicodeDecodeError, BadConfig) as exc:
        raise CheckpointCorrupt(f"{path}: {exc}") from exc
    return config, params
