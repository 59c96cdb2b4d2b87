"""Masked-attention convolutional encoder-decoder.

The encoder embeds the source frames and feeds a length-ratio head. The
decoder is a causal convolution stack over previous target frames; its state
queries the encoder states to form a masked attention vector, and each target
frame is predicted as the attention-weighted source frame plus a residual
computed from the decoder state.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grad as G
from .grad import Tensor
from .features import as_matrix
from .mask import AttentionMask, build_mask, clamp_length

RES_SCALE = math.sqrt(0.5)
CKPT_MAGIC = b"DBDM"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    d_in: int = 80
    d_model: int = 256
    n_enc_blocks: int = 10
    n_dec_blocks: int = 10
    kernel: int = 3
    slope: float = 1.25
    max_consec: int = 1

    def __post_init__(self):
        for name in ("d_in", "d_model", "n_enc_blocks", "n_dec_blocks", "kernel", "max_consec"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % 2:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel width must be odd, got {self.kernel}")
        if self.slope < 1:
            raise ValueError(f"slope must be >= 1, got {self.slope}")

    @property
    def receptive_field(self) -> int:
        return 1 + self.n_dec_blocks * (self.kernel - 1)


Params = dict  # name -> Tensor


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, D, k = cfg.d_model, cfg.d_in, cfg.kernel
    shapes = {"enc.in.W": (d, D), "enc.in.b": (d, 1)}
    for b in range(cfg.n_enc_blocks):
        shapes[f"enc.{b}.K"] = (2 * d, d, k)
        shapes[f"enc.{b}.b"] = (2 * d, 1)
    shapes["len.w"] = (1, d)
    shapes["len.b"] = (1, 1)
    shapes["dec.in.W"] = (d, D)
    shapes["dec.in.b"] = (d, 1)
    for b in range(cfg.n_dec_blocks):
        shapes[f"dec.{b}.K"] = (2 * d, d, k)
        shapes[f"dec.{b}.b"] = (2 * d, 1)
    shapes["dec.out.W"] = (D, d)
    shapes["dec.out.b"] = (D, 1)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Random projections and conv kernels; zero biases, length head and output layer.

    The zero length head starts the ratio at exactly 1 and the zero output
    layer starts every prediction at the attended source frame.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if name.startswith(("len.", "dec.out.")) or kind == "b":
            data = np.zeros(shape)
        elif kind == "K":
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[1] * shape[2]), shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def frozen(params: Params) -> Params:
    """Constant copies of ``params`` so inference builds no graph."""
    return {k: Tensor(v.data) for k, v in params.items()}


def config_from_params(params: Params, slope: float = 1.25, max_consec: int = 1) -> ModelConfig:
    d, D = params["enc.in.W"].shape
    n_enc = sum(1 for k in params if k.startswith("enc.") and k.endswith(".K"))
    n_dec = sum(1 for k in params if k.startswith("dec.") and k.endswith(".K"))
    return ModelConfig(d_in=D, d_model=d, n_enc_blocks=n_enc, n_dec_blocks=n_dec,
                       kernel=params["enc.0.K"].shape[2], slope=slope, max_consec=max_consec)


# -------------------------------------------------------------------- encoder


def encode(X, params: Params, cfg: ModelConfig) -> Tensor:
    X = as_matrix(X)
    if X.shape[0] != cfg.d_in:
        raise ValueError(f"input has {X.shape[0]} feature bands, model expects {cfg.d_in}")
    h = G.linear(X, params["enc.in.W"], params["enc.in.b"])
    for b in range(cfg.n_enc_blocks):
        c = G.conv1d(h, params[f"enc.{b}.K"], params[f"enc.{b}.b"], padding="same")
        h = G.scale(G.add(h, G.glu(c)), RES_SCALE)
    return h


def predict_length_ratio(z: Tensor, params: Params) -> Tensor:
    pooled = G.mean_pool_time(z)
    return G.exp(G.linear(pooled, params["len.w"], params["len.b"]))


def predicted_length(ratio: float, T_s: int, slope: float) -> int:
    return clamp_length(int(round(ratio * T_s)), T_s, slope)


# -------------------------------------------------------------------- decoder


def _decoder_states(Y_in: np.ndarray, params: Params, cfg: ModelConfig) -> Tensor:
    """Causal trunk over decoder inputs; returns the skip-sum of block outputs."""
    h = G.linear(Y_in, params["dec.in.W"], params["dec.in.b"])
    skip = None
    for b in range(cfg.n_dec_blocks):
        c = G.conv1d(h, params[f"dec.{b}.K"], params[f"dec.{b}.b"], padding="causal")
        h = G.scale(G.add(h, G.glu(c)), RES_SCALE)
        skip = h if skip is None else G.add(skip, h)
    return skip


def _shifted(Y: np.ndarray, D: int) -> np.ndarray:
    # zero start frame, then targets 0..T-2
    return np.concatenate([np.zeros((D, 1)), Y[:, :-1]], axis=1)


def _attend(X: np.ndarray, z: Tensor, d: Tensor, allowed: np.ndarray, params: Params,
            cfg: ModelConfig, mode: str, rng) -> tuple[Tensor, Tensor]:
    scores = G.scale(G.matmul(G.transpose(z), d), 1.0 / math.sqrt(cfg.d_model))
    A = G.masked_softmax(scores, allowed)
    if mode == "soft":
        weights = A
    elif mode == "sampled":
        weights = G.sample_one_hot(A, rng)
    elif mode == "argmax":
        weights = G.argmax_one_hot(A)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    Y_hat = G.add(G.matmul(X, weights), G.linear(d, params["dec.out.W"], params["dec.out.b"]))
    return A, Y_hat


def decode_step(X, z: Tensor, Y_prev: np.ndarray, allowed_col: np.ndarray, params: Params,
                cfg: ModelConfig, mode: str = "soft", rng=None) -> tuple[Tensor, Tensor]:
    """Attention vector and predicted frame for target step ``t = Y_prev.shape[1]``."""
    X = as_matrix(X)
    allowed_col = np.asarray(allowed_col, dtype=bool).reshape(-1, 1)
    if not allowed_col.any():
        raise ValueError("mask column has no allowed source frame")
    D = X.shape[0]
    Y_prev = np.zeros((D, 0)) if Y_prev is None else np.asarray(Y_prev, dtype=np.float64)
    Y_in = np.concatenate([np.zeros((D, 1)), Y_prev], axis=1)
    # the trunk is causal, so only the last receptive field matters
    Y_in = Y_in[:, -cfg.receptive_field:]
    d = _decoder_states(Y_in, params, cfg)
    d_t = G.slice_cols(d, d.shape[1] - 1, d.shape[1])
    A, Y_hat = _attend(X, z, d_t, allowed_col, params, cfg, mode, rng)
    return A, Y_hat


@dataclass
class ForwardResult:
    Y_hat: Tensor  # D x T
    attention: Tensor  # T_s x T
    ratio: Tensor  # 1 x 1
    mask: AttentionMask


def forward_teacher_forced(X, Y, params: Params, cfg: ModelConfig, mode: str = "soft",
                           rng=None, mask: AttentionMask | None = None) -> ForwardResult:
    """All decoder steps in one causal pass, with ground-truth history."""
    X = as_matrix(X)
    Y = as_matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"source has {X.shape[0]} bands, target has {Y.shape[0]}")
    T_s, T = X.shape[1], Y.shape[1]
    if mask is None:
        mask = build_mask(T_s, T, cfg.slope)
    z = encode(X, params, cfg)
    ratio = predict_length_ratio(z, params)
    d = _decoder_states(_shifted(Y, X.shape[0]), params, cfg)
    A, Y_hat = _attend(X, z, d, mask.allowed, params, cfg, mode, rng)
    return ForwardResult(Y_hat, A, ratio, mask)


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(params: Params, path) -> None:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(params))
    for name, t in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Params:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DBDM checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        rank = body[pos]
        dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
        pos += 1 + 4 * rank
        size = int(np.prod(dims))
        data = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    if pos != len(body):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
