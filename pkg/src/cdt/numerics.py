"""Dense float64 primitives and their hand-derived reverse-mode rules.

Every forward primitive that participates in the model graph returns its output
together with a small cache; the matching ``*_backward`` function consumes the
upstream gradient and that cache. Leading axes are treated as batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """Raised when a non-finite value shows up where it must not."""


@dataclass
class RngStream:
    """Seeded random stream with a draw counter.

    Identical ``(seed, algorithm)`` pairs give identical draw sequences.
    """

    seed: int
    algorithm: str = "PCG64"
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape) -> np.ndarray:
        out = self._gen.random(shape)
        self.counter += out.size
        return out

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        self.counter += out.size
        return out

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        out = self._gen.normal(0.0, scale, shape)
        self.counter += out.size
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream derived from this stream's seed and ``key``."""
        child_seed = int(np.random.SeedSequence([self.seed, key]).generate_state(1, np.uint64)[0])
        return RngStream(child_seed, self.algorithm)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite entry in {what}")


# ---------------------------------------------------------------- softmax

def softmax(v, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite(v, "softmax input")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------- layer norm

def layer_norm(x, gamma, beta_shift, eps: float = LN_EPS):
    """Normalize the last axis with population variance, then scale and shift.

    Returns ``(out, cache)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    beta_shift = np.asarray(beta_shift, dtype=DTYPE)
    if gamma.shape[-1:] != x.shape[-1:] or beta_shift.shape[-1:] != x.shape[-1:]:
        raise ValueError(
            f"layer_norm length mismatch: x {x.shape[-1]}, gamma {gamma.shape[-1]}, "
            f"shift {beta_shift.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    return gamma * xhat + beta_shift, (xhat, inv_std, gamma)


def layer_norm_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dgamma, dshift)``; parameter grads are summed over batch axes."""
    xhat, inv_std, gamma = cache
    n = xhat.shape[-1]
    dxhat = dout * gamma
    dx = inv_std * (
        dxhat
        - dxhat.sum(axis=-1, keepdims=True) / n
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    flat = dout.reshape(-1, n)
    return dx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)


# ---------------------------------------------------------------- gelu

def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=DTYPE)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# ---------------------------------------------------------------- dropout

def dropout(x, p: float, rng: RngStream | None, training: bool):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive.

    The mask already carries the ``1/(1-p)`` survivor scale, so the backward
    pass is ``dout * mask``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = np.asarray(x, dtype=DTYPE)
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an RngStream")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------- linear

def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    return x @ W + b, x


def linear_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, db)`` with weight grads summed over batch axes."""
    din, dout_dim = W.shape
    dW = x.reshape(-1, din).T @ dout.reshape(-1, dout_dim)
    db = dout.reshape(-1, dout_dim).sum(axis=0)
    return dout @ W.T, dW, db


# ---------------------------------------------------------------- attention

def scaled_dot_attention(Q, K, V, scale_dim: int):
    """``softmax(Q K^T / sqrt(scale_dim)) V``.

    Returns ``(output, weights)``; shapes ``(..., nq, dv)`` and ``(..., nq, nk)``.
    """
    Q = np.asarray(Q, dtype=DTYPE)
    K = np.asarray(K, dtype=DTYPE)
    V = np.asarray(V, dtype=DTYPE)
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    scale = 1.0 / math.sqrt(scale_dim)
    weights = softmax((Q @ np.swapaxes(K, -1, -2)) * scale)
    return weights @ V, weights


def scaled_dot_attention_backward(dout, Q, K, V, weights, scale_dim: int):
    """Returns ``(dQ, dK, dV)``."""
    scale = 1.0 / math.sqrt(scale_dim)
    dV = np.swapaxes(weights, -1, -2) @ dout
    dS = softmax_backward(dout @ np.swapaxes(V, -1, -2), weights) * scale
    return dS @ K, np.swapaxes(dS, -1, -2) @ Q, dV


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dk = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * dk)


def multi_head_attention(Qin, Kin, Vin, params: dict, heads: int):
    """Multi-head attention with input/output projections.

    ``params`` holds ``Wq, bq, Wk, Wv, bv, Wo, bo`` and optionally ``bk``; a key
    bias only adds a per-query constant to the logits, so it never changes the
    output. Head ``i`` uses the ``i``-th block of ``d/heads`` columns of each
    input projection.
    Returns ``(output, weights, cache)`` where ``weights`` has shape
    ``(..., heads, nq, nk)``.
    """
    d = params["Wq"].shape[1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    for name, x in (("query", Qin), ("key", Kin), ("value", Vin)):
        if x.shape[-1] != params["Wq"].shape[0]:
            raise ValueError(f"{name} input width {x.shape[-1]} != {params['Wq'].shape[0]}")
    q = _split_heads(Qin @ params["Wq"] + params["bq"], heads)
    k = Kin @ params["Wk"]
    if "bk" in params:
        k = k + params["bk"]
    k = _split_heads(k, heads)
    v = _split_heads(Vin @ params["Wv"] + params["bv"], heads)
    ctx, weights = scaled_dot_attention(q, k, v, d // heads)
    merged = _merge_heads(ctx)
    out = merged @ params["Wo"] + params["bo"]
    return out, weights, (Qin, Kin, Vin, q, k, v, weights, merged, heads)


def multi_head_attention_backward(dout, cache, params: dict):
    """Returns ``(dQin, dKin, dVin, grads)`` with ``grads`` keyed like ``params``."""
    Qin, Kin, Vin, q, k, v, weights, merged, heads = cache
    d = params["Wq"].shape[1]
    dmerged, dWo, dbo = linear_backward(dout, merged, params["Wo"])
    dq, dk, dv = scaled_dot_attention_backward(
        _split_heads(dmerged, heads), q, k, v, weights, d // heads
    )
    dQin, dWq, dbq = linear_backward(_merge_heads(dq), Qin, params["Wq"])
    dKin, dWk, dbk = linear_backward(_merge_heads(dk), Kin, params["Wk"])
    dVin, dWv, dbv = linear_backward(_merge_heads(dv), Vin, params["Wv"])
    grads = {"Wq": dWq, "bq": dbq, "Wk": dWk, "Wv": dWv, "bv": dbv, "Wo": dWo, "bo": dbo}
    if "bk" in params:
        grads["bk"] = dbk
    return dQin, dKin, dVin, grads


# ---------------------------------------------------------------- checking

def central_difference(f, x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``x`` (mutated in place).

    ``index`` restricts the probe to an iterable of flat indices; other entries
    of the result stay zero.
    """
    if not x.flags.c_contiguous:
        raise ValueError("central_difference needs a C-contiguous array to perturb in place")
    grad = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
