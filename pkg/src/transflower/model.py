"""Geo-spatial flow encoder, transformer flow predictor and checkpoints.

Each candidate flow (origin, destination) is embedded as
``[ReLU(W_geo [x_o; x_d; r]); RLE(rl)]``, the embeddings of one origin's
candidates attend to one another through ``n_layers`` post-norm transformer
layers, and a linear head scores every slot.  A masked softmax over the
slots gives destination probabilities; volumes are probabilities times the
origin's total outflow.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .features import N_FLOW_FEATURES, BatchTensors, Featurizer, OriginBatch
from .locenc import VARIANTS, EncoderConfig, init_rle_params, rle_apply, rle_backward
from .nnkernel import (
    AttentionParams,
    NumericHealthError,
    ShapeError,
    attention_backward,
    attention_forward,
    check_finite,
    dropout,
    dropout_backward,
    layer_norm_backward,
    layer_norm_forward,
    linear,
    linear_backward,
    make_rng,
    relu,
    relu_backward,
    softmax,
)

PREDICTORS = ("transformer", "feedforward_only")


@dataclass
class ModelConfig:
    d_geo: int = 256
    d_loc: int = 64
    n_layers: int = 2
    n_heads: int = 8
    ffn_hidden: int = 256
    dropout: float = 0.1
    rle_variant: str = "rle"
    predictor_variant: str = "transformer"
    max_destinations: int = 256
    scaled_attention: bool = False
    lambda_min: float = 1.0
    lambda_max: float = 20_000.0
    n_scales: int = 16
    rle_hidden: int = 0           # 0 -> same as d_loc
    seed: int = 1234

    def __post_init__(self):
        self.validate()

    @property
    def d_model(self) -> int:
        return self.d_geo + self.d_loc

    def validate(self) -> None:
        if self.rle_variant not in VARIANTS:
            raise ValueError(f"rle_variant must be one of {VARIANTS}")
        if self.predictor_variant not in PREDICTORS:
            raise ValueError(f"predictor_variant must be one of {PREDICTORS}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_destinations < 1:
            raise ValueError("max_destinations must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            lambda_min=self.lambda_min,
            lambda_max=self.lambda_max,
            n_scales=self.n_scales,
            d_loc=self.d_loc,
            hidden=self.rle_hidden or self.d_loc,
            two_branch=self.rle_variant == "rle",
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in sorted(fields(self), key=lambda f: f.name))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            kw[key] = _parse_value(raw, types[key])
        return cls(**kw)


def _parse_value(raw: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        return raw == "True"
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw.strip("'\"")


@dataclass
class PredictionResult:
    probs: np.ndarray          # (n,)
    volumes: np.ndarray        # (n,)
    scores: np.ndarray         # (n,)
    attentions: np.ndarray     # (n_layers, n_heads, n, n)
    mask: np.ndarray


# --------------------------------------------------------------------------
# parameters


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(config: ModelConfig, seed: int | None = None) -> dict:
    """Fan-in scaled uniform initialization, fully determined by the seed."""
    rng = make_rng(config.seed if seed is None else seed, "init")
    d, h = config.d_model, config.n_heads
    p: dict[str, np.ndarray] = {
        "geo.W": _uniform(rng, N_FLOW_FEATURES, (N_FLOW_FEATURES, config.d_geo)),
        "geo.b": _uniform(rng, N_FLOW_FEATURES, (config.d_geo,)),
    }
    if config.rle_variant != "none":
        p.update(init_rle_params(config.encoder(), rng, config.rle_variant))
    if config.predictor_variant == "transformer":
        for layer in range(config.n_layers):
            pre = f"layers.{layer}."
            for w in ("wq", "wk", "wv"):
                p[pre + "attn." + w] = _uniform(rng, d, (h, d, d // h))
            p[pre + "attn.wz"] = _uniform(rng, d, (d, d))
            p[pre + "ln1.g"] = np.ones(d, np.float32)
            p[pre + "ln1.b"] = np.zeros(d, np.float32)
            p[pre + "ffn.W1"] = _uniform(rng, d, (d, config.ffn_hidden))
            p[pre + "ffn.b1"] = _uniform(rng, d, (config.ffn_hidden,))
            p[pre + "ffn.W2"] = _uniform(rng, config.ffn_hidden, (config.ffn_hidden, d))
            p[pre + "ffn.b2"] = _uniform(rng, config.ffn_hidden, (d,))
            p[pre + "ln2.g"] = np.ones(d, np.float32)
            p[pre + "ln2.b"] = np.zeros(d, np.float32)
    p["head.W"] = _uniform(rng, d, (d, 1))
    p["head.b"] = np.zeros(1, np.float32)
    return p


def learnable(params: dict) -> list[str]:
    return [k for k in params if not k.startswith("stats.")]


def _attn(params, layer) -> AttentionParams:
    pre = f"layers.{layer}.attn."
    return AttentionParams(params[pre + "wq"], params[pre + "wk"], params[pre + "wv"], params[pre + "wz"])


# --------------------------------------------------------------------------
# forward / backward


def encode_geo(x, params) -> np.ndarray:
    """Single linear layer + ReLU on the 41 flow features."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != N_FLOW_FEATURES:
        raise ShapeError(f"geo encoder expects {N_FLOW_FEATURES} inputs, got {x.shape[-1]}")
    return relu(linear(x, params["geo.W"], params["geo.b"]))


def forward(params: dict, config: ModelConfig, t: BatchTensors, training: bool = False,
            rng: np.random.Generator | None = None):
    """Batched forward pass.

    Returns (scores (B, n), probs (B, n), attentions (B, L, h, n, n), cache).
    """
    mask = t.mask
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every origin needs at least one unmasked destination")
    rate = config.dropout if training else 0.0
    geo = encode_geo(t.X, params)
    if config.rle_variant == "none":
        loc, rle_cache = np.zeros(geo.shape[:-1] + (config.d_loc,)), None
    else:
        loc, rle_cache = rle_apply(t.pe_a, t.pe_b, params, config.rle_variant)
    E = np.concatenate([geo, loc], axis=-1)
    E = np.where(mask[..., None], E, 0.0)
    E, emb_drop = dropout(E, rate, training, rng)

    layer_caches, attentions = [], []
    if config.predictor_variant == "transformer":
        for layer in range(config.n_layers):
            E, A, lc = _layer_forward(E, params, config, layer, mask, training, rng, rate)
            layer_caches.append(lc)
            attentions.append(A)
    scores = linear(E, params["head.W"], params["head.b"])[..., 0]
    check_finite(np.where(mask, scores, 0.0), "prediction scores")
    probs = softmax(scores, mask)
    if attentions:
        att = np.stack(attentions, axis=1)
    else:
        att = np.zeros(mask.shape[:1] + (0, 0) + mask.shape[1:] * 2)
    cache = (t, geo, rle_cache, emb_drop, layer_caches, E)
    return scores, probs, att, cache


def _layer_forward(E, params, config, layer, mask, training, rng, rate):
    pre = f"layers.{layer}."
    z_scale = dropout(np.ones(E.shape), rate, training, rng)[1] if rate > 0 else None
    E1, A, att_cache = attention_forward(E, _attn(params, layer), mask, config.scaled_attention, z_scale)
    X1, ln1 = layer_norm_forward(E1, params[pre + "ln1.g"], params[pre + "ln1.b"])
    H = relu(linear(X1, params[pre + "ffn.W1"], params[pre + "ffn.b1"]))
    F = linear(H, params[pre + "ffn.W2"], params[pre + "ffn.b2"])
    F, f_drop = dropout(F, rate, training, rng)
    X2, ln2 = layer_norm_forward(X1 + F, params[pre + "ln2.g"], params[pre + "ln2.b"])
    return X2, A, (att_cache, ln1, X1, H, f_drop, ln2)


def _layer_backward(dX2, cache, params, layer, grads):
    pre = f"layers.{layer}."
    att_cache, ln1, X1, H, f_drop, ln2 = cache
    dY, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(dX2, ln2, params[pre + "ln2.g"])
    dF = dropout_backward(dY, f_drop)
    dH, grads[pre + "ffn.W2"], grads[pre + "ffn.b2"] = linear_backward(dF, H, params[pre + "ffn.W2"])
    dZ = relu_backward(dH, H)
    dX1, grads[pre + "ffn.W1"], grads[pre + "ffn.b1"] = linear_backward(dZ, X1, params[pre + "ffn.W1"])
    dX1 = dX1 + dY
    dE1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(dX1, ln1, params[pre + "ln1.g"])
    dE, ag = attention_backward(dE1, att_cache, _attn(params, layer))
    grads[pre + "attn.wq"], grads[pre + "attn.wk"] = ag.wq, ag.wk
    grads[pre + "attn.wv"], grads[pre + "attn.wz"] = ag.wv, ag.wz
    return dE


def backward(dscores: np.ndarray, cache, params: dict, config: ModelConfig) -> dict:
    """Gradients of a scalar loss given its gradient w.r.t. the slot scores."""
    t, geo, rle_cache, emb_drop, layer_caches, E_last = cache
    grads: dict[str, np.ndarray] = {}
    dE, grads["head.W"], grads["head.b"] = linear_backward(dscores[..., None], E_last, params["head.W"])
    for layer in reversed(range(len(layer_caches))):
        dE = _layer_backward(dE, layer_caches[layer], params, layer, grads)
    dE = dropout_backward(dE, emb_drop)
    dE = np.where(t.mask[..., None], dE, 0.0)
    dgeo, dloc = dE[..., :config.d_geo], dE[..., config.d_geo:]
    dgeo = relu_backward(dgeo, geo)
    _, grads["geo.W"], grads["geo.b"] = linear_backward(dgeo, t.X, params["geo.W"])
    if rle_cache is not None:
        grads.update(rle_backward(dloc, rle_cache, params))
    for k, g in grads.items():
        check_finite(g, f"gradient of {k}")
    return grads


def forward_origin(batch: OriginBatch, params: dict, config: ModelConfig, featurizer: Featurizer,
                   mode: str = "eval", rng: np.random.Generator | None = None) -> PredictionResult:
    """Predict one origin's destination distribution over its (padded) slots."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if not batch.mask.any():
        raise ValueError(f"origin {batch.origin_id!r}: all destinations masked")
    n = len(batch.mask)
    t = featurizer.tensors([batch], width=n)
    scores, probs, att, _ = forward(params, config, t, training=mode == "train", rng=rng)
    return PredictionResult(probs[0], probs[0] * batch.outflow, scores[0], att[0], batch.mask.copy())


def embed_flow(origin_idx: int, dest_idx: int, params: dict, config: ModelConfig,
               featurizer: Featurizer) -> np.ndarray:
    """Embedding ``[x_od; loc_od]`` of a single flow (width d_model)."""
    b = OriginBatch(origin_idx, "", np.array([dest_idx]), [""], np.ones(1), np.ones(1, bool), 1.0)
    t = featurizer.tensors([b])
    geo = encode_geo(t.X, params)[0, 0]
    if config.rle_variant == "none":
        return np.concatenate([geo, np.zeros(config.d_loc)])
    loc, _ = rle_apply(t.pe_a, t.pe_b, params, config.rle_variant)
    return np.concatenate([geo, loc[0, 0]])


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"TFLW"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(params: dict, config: ModelConfig, path) -> None:
    """Write params + config; tensors are stored as little-endian float32.

    Parameters must already be float32 so that a reload is bit-exact.
    """
    meta = config.to_text().encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(meta)) + meta
    for name in sorted(params):
        arr = np.asarray(params[name])
        data = arr.astype("<f4")
        if not np.array_equal(data.astype(arr.dtype), arr):
            raise CheckpointError(f"tensor {name} is not float32-representable")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += data.tobytes(order="C")
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict, ModelConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        pos = 8
        (mlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        config = ModelConfig.from_text(body[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        params = {}
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(body):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return params, config


__all__ = [
    "ModelConfig", "PredictionResult", "init_params", "forward", "backward", "forward_origin",
    "encode_geo", "embed_flow", "save_checkpoint", "load_checkpoint", "CheckpointError",
    "NumericHealthError",
]
