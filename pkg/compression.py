"""
Gradient compressors with error feedback.

Two lossy codecs are provided next to the dense passthrough: sign bits with
a single mean-magnitude scale, and top-k sparsification. ef_compress_step
carries the compression error forward so nothing is lost over time.
"""
from dataclasses import dataclass
from enum import Enum
import math
import struct
from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from errors import CompressionError, ConfigError, ShapeError
from numerics import DenseVector, as_vector, l1_norm


class CompressorKind(str, Enum):
    NONE = "none"
    ONEBIT = "onebit"
    TOPK = "topk"


@dataclass(frozen=True)
class DenseMessage:
    vector: DenseVector

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True)
class SignBitMessage:
    signs: np.ndarray  # bool, True = positive
    scale: float
    dim: int

    def __post_init__(self):
        if self.scale < 0 or not math.isfinite(self.scale):
            raise CompressionError(f"sign-bit scale must be finite and >= 0, got {self.scale}")
        if self.signs.shape != (self.dim,):
            raise CompressionError(f"expected {self.dim} sign bits, got {self.signs.shape[0]}")


@dataclass(frozen=True)
class TopKMessage:
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray
    dim: int

    def __post_init__(self):
        if self.indices.shape != self.values.shape:
            raise CompressionError("top-k indices and values differ in length")
        if self.indices.size > self.dim:
            raise CompressionError(f"{self.indices.size} entries exceed dim {self.dim}")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise CompressionError(f"top-k index out of range [0, {self.dim})")
            if np.any(np.diff(self.indices) <= 0):
                raise CompressionError("top-k indices must be strictly increasing")


CompressedGradient = Union[DenseMessage, SignBitMessage, TopKMessage]


@dataclass(frozen=True)
class CompressorConfig:
    kind: CompressorKind = CompressorKind.NONE
    top_k: int | None = None
    top_k_ratio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", CompressorKind(self.kind))
        if self.kind is CompressorKind.TOPK:
            if (self.top_k is None) == (self.top_k_ratio is None):
                raise ConfigError("topk compressor needs exactly one of top_k or top_k_ratio")
            if self.top_k is not None and self.top_k < 1:
                raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
            if self.top_k_ratio is not None and not 0 < self.top_k_ratio <= 1:
                raise ConfigError(f"top_k_ratio must be in (0, 1], got {self.top_k_ratio}")

    def k_for(self, dim: int) -> int:
        """Entries kept for a vector of this size."""
        if self.top_k is not None:
            return self.top_k
        return max(1, math.ceil(self.top_k_ratio * dim))


@dataclass(frozen=True)
class ErrorFeedbackState:
    residual: DenseVector

    @classmethod
    def zeros(cls, dim: int) -> "ErrorFeedbackState":
        return cls(np.zeros(dim, dtype=np.float64))

    @property
    def dim(self) -> int:
        return int(self.residual.shape[0])


def compress_onebit(g: ArrayLike) -> SignBitMessage:
    gv = as_vector(g, "g")
    if gv.size == 0:
        raise ShapeError("cannot compress an empty gradient")
    # zero maps to the positive branch
    return SignBitMessage(signs=gv >= 0, scale=l1_norm(gv) / gv.size, dim=gv.size)


def compress_topk(g: ArrayLike, k: int) -> TopKMessage:
    gv = as_vector(g, "g")
    if not 1 <= k <= gv.size:
        raise CompressionError(f"k must be in [1, {gv.size}], got {k}")
    # stable sort keeps the lower index first among equal magnitudes
    order = np.argsort(-np.abs(gv), kind="stable")[:k]
    indices = np.sort(order).astype(np.int64)
    return TopKMessage(indices=indices, values=gv[indices].copy(), dim=gv.size)


def compress(g: ArrayLike, cfg: CompressorConfig) -> CompressedGradient:
    if cfg.kind is CompressorKind.ONEBIT:
        return compress_onebit(g)
    if cfg.kind is CompressorKind.TOPK:
        gv = as_vector(g, "g")
        return compress_topk(gv, min(cfg.k_for(gv.size), gv.size))
    return DenseMessage(as_vector(g, "g"))


def decompress(c: CompressedGradient) -> DenseVector:
    if isinstance(c, DenseMessage):
        return c.vector.copy()
    if isinstance(c, SignBitMessage):
        return np.where(c.signs, c.scale, -c.scale).astype(np.float64)
    if isinstance(c, TopKMessage):
        out = np.zeros(c.dim, dtype=np.float64)
        out[c.indices] = c.values
        return out
    raise CompressionError(f"unknown message type {type(c).__name__}")


def ef_compress_step(
    state: ErrorFeedbackState, g: ArrayLike, cfg: CompressorConfig
) -> tuple[CompressedGradient, ErrorFeedbackState]:
    """
    Compress g with error feedback

    The residual absorbs whatever the message does not carry:
    r_next = (r + g) - decompress(message).

    Args:
        state: Residual carried from the previous step
        g: Fresh gradient
        cfg: Compressor to apply

    Returns:
        (message, new state)
    """
    gv = as_vector(g, "g")
    if gv.shape != state.residual.shape:
        raise ShapeError(f"residual dim {state.dim} does not match gradient dim {gv.size}")
    if cfg.kind is CompressorKind.NONE:
        return DenseMessage(gv), state
    corrected = state.residual + gv
    message = compress(corrected, cfg)
    return message, ErrorFeedbackState(corrected - decompress(message))


def encoded_size(kind: CompressorKind | str, dim: int, k: int | None = None) -> int:
    """Wire size in bytes of a message of the given kind."""
    kind = CompressorKind(kind)
    if kind is CompressorKind.ONEBIT:
        return 8 + 8 + math.ceil(dim / 8)
    if kind is CompressorKind.TOPK:
        if k is None:
            raise CompressionError("top-k size needs k")
        return 8 + 8 + 16 * k
    return 8 + 8 * dim


def message_size(c: CompressedGradient) -> int:
    if isinstance(c, DenseMessage):
        return encoded_size(CompressorKind.NONE, c.dim)
    if isinstance(c, SignBitMessage):
        return encoded_size(CompressorKind.ONEBIT, c.dim)
    return encoded_size(CompressorKind.TOPK, c.dim, int(c.indices.size))


def compression_ratio(c: CompressedGradient) -> float:
    """Raw float payload (8 bytes per element) over this message's wire size; 1.0 for Dense."""
    if isinstance(c, DenseMessage):
        return 1.0
    return 8 * c.dim / message_size(c)


def wire_ratio(cfg: CompressorConfig, dim: int) -> float:
    """compression_ratio for a message cfg would produce on a dim-sized vector."""
    if cfg.kind is CompressorKind.NONE:
        return 1.0
    k = min(cfg.k_for(dim), dim) if cfg.kind is CompressorKind.TOPK else None
    return 8 * dim / encoded_size(cfg.kind, dim, k)


def encode(c: CompressedGradient) -> bytes:
    """Little-endian wire encoding."""
    if isinstance(c, DenseMessage):
        return struct.pack("<Q", c.dim) + c.vector.astype("<f8").tobytes()
    if isinstance(c, SignBitMessage):
        bits = np.packbits(c.signs.astype(np.uint8), bitorder="little")
        return struct.pack("<Qd", c.dim, c.scale) + bits.tobytes()
    pairs = np.empty(c.indices.size, dtype=[("index", "<u8"), ("value", "<f8")])
    pairs["index"] = c.indices
    pairs["value"] = c.values
    return struct.pack("<QQ", c.dim, c.indices.size) + pairs.tobytes()


def decode(kind: CompressorKind | str, payload: bytes) -> CompressedGradient:
    kind = CompressorKind(kind)
    try:
        if kind is CompressorKind.NONE:
            (dim,) = struct.unpack_from("<Q", payload)
            vec = np.frombuffer(payload, dtype="<f8", count=dim, offset=8).astype(np.float64)
            return DenseMessage(vec)
        if kind is CompressorKind.ONEBIT:
            dim, scale = struct.unpack_from("<Qd", payload)
            raw = np.frombuffer(payload, dtype=np.uint8, count=math.ceil(dim / 8), offset=16)
            signs = np.unpackbits(raw, bitorder="little")[:dim].astype(bool)
            return SignBitMessage(signs=signs, scale=float(scale), dim=int(dim))
        dim, count = struct.unpack_from("<QQ", payload)
        pairs = np.frombuffer(payload, dtype=[("index", "<u8"), ("value", "<f8")], count=count, offset=16)
        return TopKMessage(
            indices=pairs["index"].astype(np.int64), values=pairs["value"].astype(np.float64), dim=int(dim)
        )
    except (struct.error, ValueError) as e:
        if isinstance(e, CompressionError):
            raise
        raise CompressionError(f"truncated {kind.value} payload: {e}") from e
