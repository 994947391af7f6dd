"""Multi-scale sinusoidal relative-location encoding and the learned encoders.

Two learned variants sit on top of the sinusoidal features:

* ``rle_prime`` -- one branch: ``Linear -> ReLU -> Linear`` over the encoding
  built from the hexagonal basis ``a1=(1,0), a2=(-1/2, sqrt3/2), a3=(-1/2, -sqrt3/2)``.
* ``rle`` -- two such branches, the second using the basis rotated by pi/3,
  merged by ``ReLU(Linear(concat))``.

Learned parameters live in a flat ``{name: array}`` dict under the ``rle.``
prefix so they can be stored alongside the rest of the model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .nnkernel import ShapeError, linear, linear_backward, relu, relu_backward

VARIANTS = ("none", "rle", "rle_prime")


BASIS_A = np.array([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])


def rotated_basis(rotation: float, basis=BASIS_A) -> np.ndarray:
    """``basis`` rotated counter-clockwise by ``rotation`` radians."""
    c, s = math.cos(rotation), math.sin(rotation)
    return np.asarray(basis, dtype=np.float64) @ np.array([[c, s], [-s, c]])


BASIS_B = rotated_basis(math.pi / 3)


@dataclass
class EncoderConfig:
    lambda_min: float = 1.0
    lambda_max: float = 20_000.0
    n_scales: int = 16
    d_loc: int = 64
    hidden: int = 64
    two_branch: bool = True
    basis_b_rotation: float = math.pi / 3

    def __post_init__(self):
        self.validate()

    @property
    def g(self) -> float:
        return self.lambda_max / self.lambda_min

    @property
    def pe_dim(self) -> int:
        return 6 * self.n_scales

    @property
    def basis_a(self) -> np.ndarray:
        return BASIS_A

    @property
    def basis_b(self) -> np.ndarray | None:
        return rotated_basis(self.basis_b_rotation) if self.two_branch else None

    def validate(self) -> None:
        if not (0 < self.lambda_min < self.lambda_max):
            raise ValueError(f"need 0 < lambda_min < lambda_max, got {self.lambda_min}, {self.lambda_max}")
        if self.n_scales < 2:
            raise ValueError("n_scales must be >= 2")
        if self.d_loc < 1 or self.hidden < 1:
            raise ValueError("d_loc and hidden must be positive")
        for basis in (self.basis_a, self.basis_b):
            if basis is not None:
                check_basis(basis)


def check_basis(basis: np.ndarray, tol: float = 1e-9) -> None:
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape != (3, 2):
        raise ShapeError("basis must hold three 2-vectors")
    if np.any(np.abs(np.linalg.norm(basis, axis=1) - 1.0) > tol):
        raise ValueError("basis vectors must have unit norm")
    for i, j in ((0, 1), (1, 2), (0, 2)):
        ang = math.acos(np.clip(basis[i] @ basis[j], -1.0, 1.0))
        if abs(ang - 2 * math.pi / 3) > tol:
            raise ValueError("basis vectors must be 2*pi/3 apart")


# --------------------------------------------------------------------------
# sinusoidal encoding


def pe_scale(rl, s: int, basis, lambda_min: float, g: float, n_scales: int) -> np.ndarray:
    """Six features of scale ``s``: (cos, sin) of <rl, a_j> / lambda_s for j = 1..3."""
    rl = np.asarray(rl, dtype=np.float64)
    if not np.all(np.isfinite(rl)):
        raise ValueError("pe_scale: non-finite relative location")
    if n_scales < 2 or not 0 <= s < n_scales:
        raise ValueError(f"scale index {s} outside [0, {n_scales})")
    lam = lambda_min * g ** (s / (n_scales - 1))
    phase = np.asarray(basis, dtype=np.float64) @ rl / lam
    return np.column_stack([np.cos(phase), np.sin(phase)]).reshape(-1)


def multiscale_encode(rl, config: EncoderConfig, basis=None) -> np.ndarray:
    """Concatenated encodings over all scales.

    ``rl`` may be a single 2-vector (returns ``6 * n_scales`` values) or an
    (m, 2) array (returns (m, 6 * n_scales)).
    """
    basis = config.basis_a if basis is None else basis
    rl = np.asarray(rl, dtype=np.float64)
    if not np.all(np.isfinite(rl)):
        raise ValueError("multiscale_encode: non-finite relative location")
    out = kernels.multiscale_pe(rl.reshape(-1, 2), basis, config.lambda_min, config.g, config.n_scales)
    return out[0] if rl.ndim == 1 else out.reshape(*rl.shape[:-1], -1)


# --------------------------------------------------------------------------
# learned encoders


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_rle_params(config: EncoderConfig, rng: np.random.Generator, variant: str = "rle") -> dict:
    if variant not in ("rle", "rle_prime"):
        raise ValueError(f"no learned parameters for variant {variant!r}")
    p = {}
    branches = ("a", "b") if variant == "rle" else ("a",)
    for br in branches:
        p[f"rle.{br}.W1"] = _uniform(rng, config.pe_dim, (config.pe_dim, config.hidden))
        p[f"rle.{br}.b1"] = _uniform(rng, config.pe_dim, (config.hidden,))
        p[f"rle.{br}.W2"] = _uniform(rng, config.hidden, (config.hidden, config.d_loc))
        p[f"rle.{br}.b2"] = _uniform(rng, config.hidden, (config.d_loc,))
    if variant == "rle":
        p["rle.fuse.W"] = _uniform(rng, 2 * config.d_loc, (2 * config.d_loc, config.d_loc))
        p["rle.fuse.b"] = _uniform(rng, 2 * config.d_loc, (config.d_loc,))
    return p


def _branch_forward(pe, params, br):
    W1, b1, W2, b2 = (params[f"rle.{br}.{k}"] for k in ("W1", "b1", "W2", "b2"))
    if pe.shape[-1] != W1.shape[0]:
        raise ShapeError(f"encoder branch {br}: input width {pe.shape[-1]} != {W1.shape[0]}")
    h = relu(linear(pe, W1, b1))
    return linear(h, W2, b2), (pe, h)


def _branch_backward(dout, cache, params, br, grads):
    pe, h = cache
    dh, grads[f"rle.{br}.W2"], grads[f"rle.{br}.b2"] = linear_backward(dout, h, params[f"rle.{br}.W2"])
    dz = relu_backward(dh, h)
    _, grads[f"rle.{br}.W1"], grads[f"rle.{br}.b1"] = linear_backward(dz, pe, params[f"rle.{br}.W1"])


def rle_apply(pe_a: np.ndarray, pe_b: np.ndarray | None, params: dict, variant: str):
    """Encoder output over precomputed sinusoidal features; returns (out, cache)."""
    out_a, cache_a = _branch_forward(pe_a, params, "a")
    if variant == "rle_prime":
        return out_a, (variant, cache_a)
    if variant != "rle":
        raise ValueError(f"unknown encoder variant {variant!r}")
    if pe_b is None:
        raise ShapeError("two-branch encoder needs the second basis encoding")
    out_b, cache_b = _branch_forward(pe_b, params, "b")
    cat = np.concatenate([out_a, out_b], axis=-1)
    fused = relu(linear(cat, params["rle.fuse.W"], params["rle.fuse.b"]))
    return fused, (variant, cache_a, cache_b, cat, fused)


def rle_backward(dout: np.ndarray, cache, params: dict) -> dict:
    grads: dict = {}
    variant = cache[0]
    if variant == "rle_prime":
        _branch_backward(dout, cache[1], params, "a", grads)
        return grads
    _, cache_a, cache_b, cat, fused = cache
    dz = relu_backward(dout, fused)
    dcat, grads["rle.fuse.W"], grads["rle.fuse.b"] = linear_backward(dz, cat, params["rle.fuse.W"])
    d = dcat.shape[-1] // 2
    _branch_backward(dcat[..., :d], cache_a, params, "a", grads)
    _branch_backward(dcat[..., d:], cache_b, params, "b", grads)
    return grads


def encode_inputs(rl, config: EncoderConfig, variant: str):
    """Sinusoidal features for each basis the variant uses: (pe_a, pe_b or None)."""
    pe_a = multiscale_encode(rl, config, config.basis_a)
    if variant == "rle":
        basis_b = config.basis_b if config.basis_b is not None else BASIS_B
        pe_b = multiscale_encode(rl, config, basis_b)
    else:
        pe_b = None
    return pe_a, pe_b


def rle_prime_forward(rl, config: EncoderConfig, params: dict) -> np.ndarray:
    pe_a, _ = encode_inputs(rl, config, "rle_prime")
    return rle_apply(pe_a, None, params, "rle_prime")[0]


def rle_forward(rl, config: EncoderConfig, params: dict) -> np.ndarray:
    if config.basis_b is None:
        raise ValueError("two-branch encoder needs basis_b (config.two_branch=False)")
    pe_a, pe_b = encode_inputs(rl, config, "rle")
    return rle_apply(pe_a, pe_b, params, "rle")[0]
