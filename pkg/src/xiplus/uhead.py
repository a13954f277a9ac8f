"""Frame-level uncertainty head.

A single pre-norm Transformer encoder layer (multi-head self-attention and a
GELU feed-forward block, both residual) runs over the frame sequence.  The
precision branch reads the concatenation ``[frame, attention output]`` and
emits clamped per-frame log-precisions; the mean branch is a plain affine map
of the frame features and bypasses attention.

There is no positional encoding, so the head is permutation equivariant along
the time axis.  All functions accept arbitrary leading batch dimensions in
front of ``(T, d_model)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ShapeError, StaleCacheError, DataError
from .gausscore import FrameSequence

LOG_PRECISION_MIN = -10.0
LOG_PRECISION_MAX = 10.0
LN_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(eq=False)
class UncertaintyHeadParams:
    """Weights of the attention layer and both output projections.

    Matrices are stored input-major, ``y = x @ w + b``.
    """

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_query: np.ndarray
    b_query: np.ndarray
    w_key: np.ndarray
    b_key: np.ndarray
    w_value: np.ndarray
    b_value: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    w_prec: np.ndarray
    b_prec: np.ndarray
    w_mean: np.ndarray
    b_mean: np.ndarray
    n_heads: int = 8
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        m = self.d_model
        if m % self.n_heads:
            raise ShapeError(f"model width {m} is not divisible by {self.n_heads} heads")
        for name, arr in self.named().items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"uhead parameter {name} has non-finite entries")
        if self.w_prec.shape[0] != 2 * m:
            raise ShapeError("precision projection must read [frame, attention output]")

    @property
    def d_model(self) -> int:
        return self.w_query.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_mean.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name (live references, not copies)."""
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in ("n_heads", "version")
        }

    def bump(self):
        self.version += 1


def init_uhead_params(d_model: int, d_out: int, n_heads: int = 8, rng=None,
                      d_ff: int | None = None) -> UncertaintyHeadParams:
    """Fan-in uniform weights, zero biases, unit layer-norm gains.

    The precision projection starts at zero, so every frame begins with unit
    precision (the prior's scale) and pooling starts as plain averaging.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d_ff = 4 * d_model if d_ff is None else d_ff

    def lin(n_in, n_out):
        bound = 1.0 / math.sqrt(n_in)
        return rng.uniform(-bound, bound, size=(n_in, n_out))

    m = d_model
    return UncertaintyHeadParams(
        ln1_gain=np.ones(m), ln1_bias=np.zeros(m),
        w_query=lin(m, m), b_query=np.zeros(m),
        w_key=lin(m, m), b_key=np.zeros(m),
        w_value=lin(m, m), b_value=np.zeros(m),
        w_out=lin(m, m), b_out=np.zeros(m),
        ln2_gain=np.ones(m), ln2_bias=np.zeros(m),
        w_ff1=lin(m, d_ff), b_ff1=np.zeros(d_ff),
        w_ff2=lin(d_ff, m), b_ff2=np.zeros(m),
        w_prec=np.zeros((2 * m, d_out)), b_prec=np.zeros(d_out),
        w_mean=lin(m, d_out), b_mean=np.zeros(d_out),
        n_heads=n_heads,
    )


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    x_hat = (x - mu) * inv_std
    return x_hat * gain + bias, x_hat, inv_std


def _layer_norm_backward(grad, x_hat, inv_std, gain):
    g_hat = grad * gain
    dx = inv_std * (
        g_hat - g_hat.mean(axis=-1, keepdims=True)
        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    return dx, grad * x_hat, grad


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    *lead, t, m = x.shape
    return np.swapaxes(x.reshape(*lead, t, n_heads, m // n_heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, t, n, h = x.shape
    return x.reshape(*lead, t, n * h)


def _sum_lead(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _outer_sum(a, g):
    """``sum over leading dims of a^T g`` for ``(..., n_in)`` and ``(..., n_out)``."""
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


@dataclass(eq=False)
class UheadCache:
    params: UncertaintyHeadParams
    version: int
    values: dict

    @property
    def attention(self) -> np.ndarray:
        """Attention weights, shape ``(..., n_heads, T, T)``."""
        return self.values["attn"]


@dataclass(frozen=True)
class FrameBeliefs:
    """Per-frame means and log-precisions, each ``(..., T, d)``."""

    means: np.ndarray
    log_precisions: np.ndarray

    @property
    def precisions(self) -> np.ndarray:
        return np.exp(self.log_precisions)


def _frames_array(frames, params):
    if isinstance(frames, FrameSequence):
        x = frames.frames
    else:
        x = np.asarray(frames, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"frames must have shape (..., T, d_in), got {x.shape}")
    if x.shape[-2] == 0:
        raise DataError("attention over an empty frame sequence is undefined")
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"frame width {x.shape[-1]} != model width {params.d_model}")
    return x


def attention_forward(params: UncertaintyHeadParams, frames):
    """Run the encoder layer.

    Returns:
        ``(hidden, cache)`` where ``hidden`` has the same shape as ``frames``.
    """
    p = params
    x = _frames_array(frames, p)
    n = p.n_heads
    head_dim = p.d_model // n

    a, a_hat, a_inv = _layer_norm(x, p.ln1_gain, p.ln1_bias)
    q = _split_heads(a @ p.w_query + p.b_query, n)
    k = _split_heads(a @ p.w_key + p.b_key, n)
    v = _split_heads(a @ p.w_value + p.b_value, n)
    attn = _softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(head_dim))
    ctx = _merge_heads(attn @ v)
    h1 = x + ctx @ p.w_out + p.b_out

    b, b_hat, b_inv = _layer_norm(h1, p.ln2_gain, p.ln2_bias)
    u = b @ p.w_ff1 + p.b_ff1
    g, g_tanh = _gelu(u)
    h2 = h1 + g @ p.w_ff2 + p.b_ff2

    values = dict(x=x, a=a, a_hat=a_hat, a_inv=a_inv, q=q, k=k, v=v, attn=attn,
                  ctx=ctx, b=b, b_hat=b_hat, b_inv=b_inv, u=u, g=g, g_tanh=g_tanh, h2=h2)
    return h2, UheadCache(params, params.version, values)


def estimate_beliefs(params: UncertaintyHeadParams, frames):
    """Per-frame Gaussian beliefs from frame features.

    Returns:
        ``(FrameBeliefs, cache)``.  Log-precisions are clamped to
        ``[LOG_PRECISION_MIN, LOG_PRECISION_MAX]``.
    """
    hidden, cache = attention_forward(params, frames)
    x = cache.values["x"]
    cat = np.concatenate([x, hidden], axis=-1)
    raw = cat @ params.w_prec + params.b_prec
    log_prec = np.clip(raw, LOG_PRECISION_MIN, LOG_PRECISION_MAX)
    means = x @ params.w_mean + params.b_mean
    cache.values.update(cat=cat, raw=raw)
    return FrameBeliefs(means, log_prec), cache


def uhead_backward(params: UncertaintyHeadParams, cache: UheadCache, grad_means, grad_log_precisions):
    """Backpropagate through :func:`estimate_beliefs`.

    Args:
        grad_means: upstream gradient on the frame means.
        grad_log_precisions: upstream gradient on the clamped log-precisions.

    Returns:
        ``(grads, grad_frames)`` with ``grads`` keyed like
        :meth:`UncertaintyHeadParams.named`.
    """
    if cache.params is not params or cache.version != params.version:
        raise StaleCacheError("uhead cache does not belong to these parameters")
    c = cache.values
    if "raw" not in c:
        raise StaleCacheError("cache comes from attention_forward, not estimate_beliefs")
    p = params
    x = c["x"]
    grad_means = np.asarray(grad_means, dtype=np.float64)
    grad_log_precisions = np.asarray(grad_log_precisions, dtype=np.float64)
    expected = x.shape[:-1] + (p.d_out,)
    if grad_means.shape != expected or grad_log_precisions.shape != expected:
        raise ShapeError(f"upstream gradients must have shape {expected}")
    m = p.d_model
    n = p.n_heads
    head_dim = m // n
    grads = {}

    # output projections
    inside = (c["raw"] > LOG_PRECISION_MIN) & (c["raw"] < LOG_PRECISION_MAX)
    g_raw = grad_log_precisions * inside
    grads["w_prec"] = _outer_sum(c["cat"], g_raw)
    grads["b_prec"] = _sum_lead(g_raw)
    g_cat = g_raw @ p.w_prec.T
    grads["w_mean"] = _outer_sum(x, grad_means)
    grads["b_mean"] = _sum_lead(grad_means)
    dx = grad_means @ p.w_mean.T + g_cat[..., :m]
    dh2 = g_cat[..., m:]

    # feed-forward block
    grads["w_ff2"] = _outer_sum(c["g"], dh2)
    grads["b_ff2"] = _sum_lead(dh2)
    du = (dh2 @ p.w_ff2.T) * _gelu_grad(c["u"], c["g_tanh"])
    grads["w_ff1"] = _outer_sum(c["b"], du)
    grads["b_ff1"] = _sum_lead(du)
    db, g_ln2g, g_ln2b = _layer_norm_backward(du @ p.w_ff1.T, c["b_hat"], c["b_inv"], p.ln2_gain)
    grads["ln2_gain"] = _sum_lead(g_ln2g)
    grads["ln2_bias"] = _sum_lead(g_ln2b)
    dh1 = dh2 + db

    # attention block
    grads["w_out"] = _outer_sum(c["ctx"], dh1)
    grads["b_out"] = _sum_lead(dh1)
    dctx = _split_heads(dh1 @ p.w_out.T, n)
    attn = c["attn"]
    dattn = dctx @ np.swapaxes(c["v"], -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dctx
    dscore = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) / math.sqrt(head_dim)
    dq = dscore @ c["k"]
    dk = np.swapaxes(dscore, -1, -2) @ c["q"]
    da = np.zeros_like(x)
    for name, d_proj in (("query", dq), ("key", dk), ("value", dv)):
        d_proj = _merge_heads(d_proj)
        grads[f"w_{name}"] = _outer_sum(c["a"], d_proj)
        grads[f"b_{name}"] = _sum_lead(d_proj)
        da += d_proj @ getattr(p, f"w_{name}").T
    dx_ln, g_ln1g, g_ln1b = _layer_norm_backward(da, c["a_hat"], c["a_inv"], p.ln1_gain)
    grads["ln1_gain"] = _sum_lead(g_ln1g)
    grads["ln1_bias"] = _sum_lead(g_ln1b)
    dx = dx + dh1 + dx_ln

    ordered = {name: grads[name] for name in p.named()}
    return ordered, dx
