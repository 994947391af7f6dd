"""Dense numerics with hand-written reverse-mode gradients.

Every primitive comes as a ``*_forward`` / ``*_backward`` pair (or a single
function when the backward is a one-liner).  Forward functions return the
output plus whatever the backward needs; backward functions take the upstream
gradient and return gradients for inputs and parameters.

Arrays may carry leading batch dimensions.  Parameters are stored as float32
but all arithmetic runs in float64, so reductions accumulate in 64 bits.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

LN_EPS = 1e-5
COMPUTE_DTYPE = np.float64


class NumericHealthError(ArithmeticError):
    """Raised when a NaN or Inf appears in an activation or gradient."""


class ShapeError(ValueError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericHealthError(f"non-finite values in {where}")
    return x


def stream_key(*parts) -> int:
    """Stable 32-bit key for a named RNG substream."""
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream id).

    The same (seed, stream) always replays the same draws, independently of
    how many other streams were consumed before.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream_key(*stream)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# linear


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=COMPUTE_DTYPE)
    W = np.asarray(W, dtype=COMPUTE_DTYPE)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    y = x @ W
    if b is not None:
        if np.shape(b) != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {np.shape(b)} != ({W.shape[1]},)")
        y = y + np.asarray(b, dtype=COMPUTE_DTYPE)
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return (dx, dW, db) for y = xW + b; batch dims are summed out of dW, db."""
    x = np.asarray(x, dtype=COMPUTE_DTYPE)
    W = np.asarray(W, dtype=COMPUTE_DTYPE)
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dW, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


# --------------------------------------------------------------------------
# dropout


def dropout(x: np.ndarray, rate: float = 0.1, training: bool = False,
            rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns (y, scale) where scale is None in eval mode.

    ``scale`` holds 0 for dropped entries and 1/(1-rate) for survivors, and is
    what :func:`dropout_backward` multiplies by.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(np.shape(x)) >= rate
    scale = keep / (1.0 - rate)
    return x * scale, scale


def dropout_backward(dy: np.ndarray, scale: np.ndarray | None) -> np.ndarray:
    return dy if scale is None else dy * scale


# --------------------------------------------------------------------------
# layer norm


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    x = np.asarray(x, dtype=COMPUTE_DTYPE)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * np.asarray(gain, COMPUTE_DTYPE) + np.asarray(bias, COMPUTE_DTYPE)
    return y, (xhat, inv)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_backward(dy: np.ndarray, cache, gain: np.ndarray):
    xhat, inv = cache
    g = np.asarray(gain, COMPUTE_DTYPE)
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# --------------------------------------------------------------------------
# masked softmax


def softmax(scores: np.ndarray, mask: np.ndarray | None = None, axis: int = -1) -> np.ndarray:
    """Softmax over ``axis`` with masked entries forced to exactly 0.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    s = np.array(scores, dtype=COMPUTE_DTYPE)
    if mask is None:
        m = s.max(axis=axis, keepdims=True)
        np.exp(s - m, out=s)
        s /= s.sum(axis=axis, keepdims=True)
        return s
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("softmax: every entry masked")
    s += np.where(mask, 0.0, -np.inf)
    s -= s.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)
    return s


def softmax_backward(dp: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# multi-head self-attention


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    ``wq``, ``wk``, ``wv`` have shape (heads, d_model, d_model // heads);
    ``wz`` maps the concatenated head outputs back to d_model.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wz: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.wz.shape[0]

    def validate(self) -> None:
        h, d, dh = self.wq.shape
        if d % h or dh != d // h:
            raise ShapeError(f"d_model {d} not split evenly across {h} heads")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != self.wq.shape:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {self.wq.shape}")
        if self.wz.shape != (d, d):
            raise ShapeError(f"wz shape {self.wz.shape} != ({d}, {d})")


def attention_forward(E: np.ndarray, params: AttentionParams, mask: np.ndarray,
                      scaled: bool = False, z_scale: np.ndarray | None = None):
    """Residual self-attention ``E' = E + concat_h(A_h V_h) wz``.

    ``E`` is (..., n, d_model) and ``mask`` (..., n).  Returns (E', A, cache)
    with A of shape (..., heads, n, n).  Masked key columns of A are exactly
    zero; masked query rows get zero weights and pass E through unchanged.
    ``z_scale`` (a dropout scale) multiplies the attention branch before the
    residual add.
    """
    E = np.asarray(E, dtype=COMPUTE_DTYPE)
    params.validate()
    if E.shape[-1] != params.d_model:
        raise ShapeError(f"attention: width {E.shape[-1]} != d_model {params.d_model}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != E.shape[:-1]:
        raise ShapeError(f"attention: mask shape {mask.shape} != {E.shape[:-1]}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("attention: all positions masked")
    wq, wk, wv, wz = (np.asarray(w, COMPUTE_DTYPE) for w in (params.wq, params.wk, params.wv, params.wz))
    Eh = E[..., None, :, :]                      # (..., 1, n, d)
    Q = Eh @ wq                                  # (..., h, n, dh)
    K = Eh @ wk
    V = Eh @ wv
    S = Q @ np.swapaxes(K, -1, -2)
    if scaled:
        S = S / np.sqrt(wq.shape[-1])
    keymask = mask[..., None, None, :]
    A = softmax(S, keymask)
    A *= mask[..., None, :, None]
    O = A @ V                                    # (..., h, n, dh)
    C = np.moveaxis(O, -3, -2).reshape(*E.shape[:-1], -1)
    Z = C @ wz
    Z *= mask[..., None]
    if z_scale is not None:
        Z *= z_scale
    cache = (E, Q, K, V, A, C, mask, scaled, z_scale)
    return E + Z, A, cache


def attention_layer(E, params: AttentionParams, mask, scaled: bool = False):
    Eo, A, _ = attention_forward(E, params, mask, scaled)
    return Eo, A


def attention_backward(dEo: np.ndarray, cache, params: AttentionParams):
    """Return (dE, AttentionParams of gradients) for :func:`attention_forward`."""
    E, Q, K, V, A, C, mask, scaled, z_scale = cache
    wq, wk, wv, wz = (np.asarray(w, COMPUTE_DTYPE) for w in (params.wq, params.wk, params.wv, params.wz))
    h, d, dh = wq.shape
    dZ = dEo * mask[..., None]
    if z_scale is not None:
        dZ *= z_scale
    dwz = C.reshape(-1, C.shape[-1]).T @ dZ.reshape(-1, d)
    dC = dZ @ wz.T
    dO = np.moveaxis(dC.reshape(*dC.shape[:-1], h, dh), -2, -3)
    dA = dO @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dO
    dS = softmax_backward(dA, A)
    if scaled:
        dS = dS / np.sqrt(dh)
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    Eh = E[..., None, :, :]
    lead = tuple(range(E.ndim - 2))

    def _wgrad(dX):
        g = np.swapaxes(Eh, -1, -2) @ dX          # (..., h, d, dh)
        return g.sum(axis=lead) if lead else g

    dwq, dwk, dwv = _wgrad(dQ), _wgrad(dK), _wgrad(dV)
    dE = dEo + (dQ @ np.swapaxes(wq, -1, -2) + dK @ np.swapaxes(wk, -1, -2)
                + dV @ np.swapaxes(wv, -1, -2)).sum(axis=-3)
    return dE, AttentionParams(dwq, dwk, dwv, dwz)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params) -> (value, grads)`` must be pure.  The step for entry p is
    ``h * max(1, |p|)`` and the error is ``|g - fd| / max(1, |fd|)``.
    ``max_entries`` caps the entries probed per tensor (chosen at random).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = fn(base)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in base.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp, _ = fn(base)
            flat[i] = orig - step
            fm, _ = fn(base)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericHealthError(f"non-finite value while probing {name}[{i}]")
            err = abs(g.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
