import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import quad
from scipy.special import expit, logit

from config import DEFAULT_D_REL, DEFAULT_MU, DEFAULT_SOFT_A, FLOAT_BITS, SIGMOID_CLIP_EPS, logger
from errors import BitstreamError, EmptyInputError, NormalizationError, QuantizerMismatchError
from netcore import Layer

_PAYLOAD_HEADER = struct.Struct("<HB")  # n: u16, b: u8


def _bump(u: float) -> float:
    return math.exp(-1.0 / (1.0 - u * u)) if abs(u) < 1.0 else 0.0


# Integral of exp(-1/(1-u^2)) over (-1, 1); makes every cell's surrogate integrate to one
BUMP_NORMALIZER = quad(_bump, -1.0, 1.0, epsabs=1e-13, epsrel=1e-13)[0]


class QuantizerKind(str, Enum):
    NONE = "none"
    MU_LAW = "mu_law"
    PASSING_GRADIENT = "passing_gradient"
    SOFT_TO_HARD = "soft_to_hard"
    PQB = "pqb"


class QuantizerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: QuantizerKind = QuantizerKind.NONE
    bits: int = Field(default=5, ge=1, le=16)
    mu: float = Field(default=DEFAULT_MU, gt=0)
    a: float = Field(default=DEFAULT_SOFT_A, gt=0)
    d_rel: float = Field(default=DEFAULT_D_REL, gt=0, le=1)
    C: float = Field(default=BUMP_NORMALIZER, gt=0)

    @property
    def d(self) -> float:
        """Absolute half-width of the surrogate bump."""
        return self.d_rel / 2 ** (self.bits + 1)

    @property
    def levels(self) -> int:
        return 2 ** self.bits


# --- Scalar maps --------------------------------------------------------------

def sigmoid_map(x):
    return expit(x)


def inverse_sigmoid_map(y):
    """Logit of ``y`` clipped to [eps, 1 - eps]."""
    return logit(np.clip(y, SIGMOID_CLIP_EPS, 1.0 - SIGMOID_CLIP_EPS))


def quantize(x, b: int) -> np.ndarray:
    """Uniform b-bit quantizer: round(2^b x - 0.5), ties away from zero, clamped to [0, 2^b - 1]."""
    v = (2 ** b) * np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) - 0.5
    rounded = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(rounded, 0, 2 ** b - 1).astype(np.int64)


def dequantize(symbols, b: int) -> np.ndarray:
    symbols = np.asarray(symbols)
    if symbols.size and (symbols.min() < 0 or symbols.max() > 2 ** b - 1):
        raise BitstreamError(f"symbols outside [0, {2 ** b - 1}] for b={b}")
    return (symbols + 0.5) / 2 ** b


def pqb_surrogate_gradient(x, b: int, d: Optional[float] = None, C: float = BUMP_NORMALIZER) -> np.ndarray:
    """Bump-shaped stand-in for the derivative of the b-bit quantizer's symbol index.

    Centered on every quantization cell with half-width ``d``; integrates to one per cell
    when ``C`` is :data:`BUMP_NORMALIZER`.
    """
    half_cell = 1.0 / 2 ** (b + 1)
    if d is None:
        d = DEFAULT_D_REL * half_cell
    if not 0.0 < d <= half_cell:
        raise ValueError(f"d must lie in (0, {half_cell}], got {d}")
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    offset = np.mod(np.asarray(x, dtype=np.float64), 1.0 / 2 ** b) - half_cell
    u = offset / d
    inside = np.abs(u) < 1.0
    u2 = np.where(inside, u * u, 0.0)
    return np.where(inside, np.exp(-1.0 / (1.0 - u2)) / (C * d), 0.0)


def mu_law_compand(x, mu: float = DEFAULT_MU):
    return np.log1p(mu * np.asarray(x, dtype=np.float64)) / np.log1p(mu)


def mu_law_expand(y, mu: float = DEFAULT_MU):
    return np.expm1(np.asarray(y, dtype=np.float64) * np.log1p(mu)) / mu


def soft_quantize(x, b: int, a: float = DEFAULT_SOFT_A) -> np.ndarray:
    """Sum of 2^b - 1 shifted tanh steps approximating the b-bit staircase."""
    x = np.asarray(x, dtype=np.float64)
    steps = np.arange(1, 2 ** b)
    return np.sum(0.5 * (np.tanh(a * (2 ** b * x[..., None] - steps)) + 1.0), axis=-1)


def soft_quantize_derivative(x, b: int, a: float = DEFAULT_SOFT_A) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    steps = np.arange(1, 2 ** b)
    t = np.tanh(a * (2 ** b * x[..., None] - steps))
    return np.sum(0.5 * a * 2 ** b * (1.0 - t * t), axis=-1)


# --- Bitstreams ---------------------------------------------------------------

def empirical_entropy(symbols, b: int) -> float:
    """Entropy in bits/element of the observed symbol frequencies."""
    symbols = np.asarray(symbols).ravel()
    if symbols.size == 0:
        raise EmptyInputError("entropy of an empty symbol stream")
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return float(max(0.0, -np.sum(p * np.log2(p))))


def pack_bits(symbols, b: int) -> bytes:
    """Pack b-bit symbols MSB-first without padding between symbols."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size and (symbols.min() < 0 or symbols.max() > 2 ** b - 1):
        raise BitstreamError(f"symbols outside [0, {2 ** b - 1}] cannot be packed at b={b}")
    shifts = np.arange(b - 1, -1, -1)
    bits = ((symbols[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_bits(data: bytes, n: int, b: int) -> np.ndarray:
    needed = math.ceil(n * b / 8)
    if len(data) < needed:
        raise BitstreamError(f"stream holds {len(data)} bytes, {needed} needed for {n} symbols of {b} bits")
    bits = np.unpackbits(np.frombuffer(data[:needed], dtype=np.uint8))[:n * b].reshape(n, b)
    weights = 1 << np.arange(b - 1, -1, -1)
    return (bits.astype(np.int64) * weights).sum(axis=1)


@dataclass(frozen=True)
class QuantizedPayload:
    bits: bytes
    n: int
    b: int

    @classmethod
    def from_symbols(cls, symbols, b: int) -> "QuantizedPayload":
        symbols = np.asarray(symbols).ravel()
        return cls(bits=pack_bits(symbols, b), n=int(symbols.size), b=b)

    @property
    def symbols(self) -> np.ndarray:
        return unpack_bits(self.bits, self.n, self.b)

    def to_bytes(self) -> bytes:
        if self.n > 0xFFFF or self.b > 0xFF:
            raise BitstreamError(f"n={self.n}, b={self.b} do not fit the payload header")
        return _PAYLOAD_HEADER.pack(self.n, self.b) + self.bits

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedPayload":
        if len(data) < _PAYLOAD_HEADER.size:
            raise BitstreamError("payload shorter than its header")
        n, b = _PAYLOAD_HEADER.unpack_from(data, 0)
        body = data[_PAYLOAD_HEADER.size:]
        needed = math.ceil(n * b / 8)
        if len(body) != needed:
            raise BitstreamError(f"payload body holds {len(body)} bytes, expected {needed}")
        return cls(bits=bytes(body), n=n, b=b)


def payload_size_bytes(n: int, b: int) -> int:
    return _PAYLOAD_HEADER.size + math.ceil(n * b / 8)


def feedback_bits(n: int, b: int) -> int:
    return n * b


def bit_width_saving(b: int) -> float:
    """Fraction of feedback bits saved against 32-bit floats."""
    return 1.0 - b / FLOAT_BITS


def fit_range(codewords) -> Tuple[float, float]:
    values = np.asarray(codewords, dtype=np.float64)
    if values.size == 0:
        raise EmptyInputError("cannot fit a codeword range on no codewords")
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise NormalizationError(f"codewords span a zero range [{lo}, {hi}]")
    return lo, hi


# --- Quantizer stage ----------------------------------------------------------

_BOUNDED = (QuantizerKind.PQB, QuantizerKind.PASSING_GRADIENT, QuantizerKind.SOFT_TO_HARD)


class CodewordQuantizer(Layer):
    """Quantize/de-quantize stage between encoder and decoder.

    Sigmoid-bounded kinds (pqb, passing_gradient, soft_to_hard) map x -> S(x), quantize,
    de-quantize and map back with S^-1. mu_law rescales with a calibrated codeword range
    and compands before the uniform quantizer. Backward passes differ per kind; see
    :meth:`backward`.
    """

    def __init__(self, spec: QuantizerSpec, value_range: Optional[Tuple[float, float]] = None):
        super().__init__()
        self.spec = spec
        self.name = f"quantizer[{spec.kind.value}]"
        self.smooth = spec.kind in (QuantizerKind.NONE, QuantizerKind.SOFT_TO_HARD)
        if value_range is not None:
            self.buffers["value_range"] = np.asarray(value_range, dtype=np.float64)

    @property
    def calibrated(self) -> bool:
        return "value_range" in self.buffers

    def calibrate(self, codewords) -> Tuple[float, float]:
        """Store the codeword range used by the mu_law rescaling."""
        lo, hi = fit_range(codewords)
        self.buffers["value_range"] = np.array([lo, hi])
        logger.info(f"Calibrated mu-law codeword range to [{lo:.4f}, {hi:.4f}]")
        return lo, hi

    def astype(self, dtype) -> "CodewordQuantizer":
        return self

    def _range(self, x: np.ndarray) -> Tuple[float, float]:
        if not self.calibrated:
            logger.warning("⚠️ mu-law quantizer used before calibration; fitting range on this batch")
            self.calibrate(x)
        lo, hi = self.buffers["value_range"]
        return float(lo), float(hi)

    def symbols(self, x: np.ndarray) -> np.ndarray:
        """Hard b-bit symbols the feedback link would carry for ``x``."""
        kind, b = self.spec.kind, self.spec.bits
        if kind == QuantizerKind.NONE:
            raise ValueError("an unquantized codeword has no symbols")
        if kind == QuantizerKind.MU_LAW:
            lo, hi = self._range(x)
            return quantize(mu_law_compand(np.clip((x - lo) / (hi - lo), 0.0, 1.0), self.spec.mu), b)
        return quantize(sigmoid_map(x), b)

    def reconstruct(self, symbols: np.ndarray) -> np.ndarray:
        """Codeword values the receiver rebuilds from hard symbols."""
        y_hat = dequantize(symbols, self.spec.bits)
        if self.spec.kind == QuantizerKind.MU_LAW:
            lo, hi = self.buffers["value_range"]
            return lo + mu_law_expand(y_hat, self.spec.mu) * (hi - lo)
        return inverse_sigmoid_map(y_hat)

    def encode(self, prefix: np.ndarray) -> Optional[QuantizedPayload]:
        if self.spec.kind == QuantizerKind.NONE:
            return None
        return QuantizedPayload.from_symbols(self.symbols(np.asarray(prefix, dtype=np.float64)), self.spec.bits)

    def decode(self, payload: QuantizedPayload) -> np.ndarray:
        if payload.b != self.spec.bits:
            raise QuantizerMismatchError(f"payload carries b={payload.b}, quantizer uses b={self.spec.bits}")
        return self.reconstruct(payload.symbols)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        kind, b = self.spec.kind, self.spec.bits
        if kind == QuantizerKind.NONE:
            self._cache = (self.spec, None) if training else None
            return x
        x64 = np.asarray(x, dtype=np.float64)
        if kind == QuantizerKind.MU_LAW:
            lo, hi = self._range(x64)
            x_hat = self.reconstruct(self.symbols(x64))
            inside = (x64 >= lo) & (x64 <= hi)
            self._cache = (self.spec, inside) if training else None
            return x_hat.astype(x.dtype)

        y = sigmoid_map(x64)
        if kind == QuantizerKind.SOFT_TO_HARD and training:
            y_hat = (soft_quantize(y, b, self.spec.a) + 0.5) / 2 ** b
        else:
            y_hat = dequantize(quantize(y, b), b)
        x_hat = inverse_sigmoid_map(y_hat)
        self._cache = (self.spec, (y, y_hat)) if training else None
        return x_hat.astype(x.dtype)

    def backward(self, grad: np.ndarray, spec: Optional[QuantizerSpec] = None) -> np.ndarray:
        """Input gradient for the spec used in the last training-mode forward.

        none passes ``grad`` through; mu_law is straight-through inside the calibrated range
        and zero outside; the bounded kinds chain S'(x) and (S^-1)'(y_hat) around a middle
        factor: 1 for passing_gradient, the soft staircase derivative for soft_to_hard and the
        bump surrogate for pqb (both divided by 2^b).
        """
        forward_spec, state = self._require_cache()
        if (spec is not None and spec != forward_spec) or forward_spec != self.spec:
            raise QuantizerMismatchError(f"backward with {spec or self.spec} after forward with {forward_spec}")
        kind, b = forward_spec.kind, forward_spec.bits
        if kind == QuantizerKind.NONE:
            return grad
        if kind == QuantizerKind.MU_LAW:
            return grad * state

        y, y_hat = state
        y_hat_c = np.clip(y_hat, SIGMOID_CLIP_EPS, 1.0 - SIGMOID_CLIP_EPS)
        chain = y * (1.0 - y) / (y_hat_c * (1.0 - y_hat_c))
        if kind == QuantizerKind.SOFT_TO_HARD:
            chain = chain * soft_quantize_derivative(y, b, forward_spec.a) / 2 ** b
        elif kind == QuantizerKind.PQB:
            chain = chain * pqb_surrogate_gradient(y, b, forward_spec.d, forward_spec.C) / 2 ** b
        return (grad * chain).astype(grad.dtype)


def quantizer_forward(values, spec: QuantizerSpec,
                      value_range: Optional[Tuple[float, float]] = None) -> Tuple[Optional[QuantizedPayload], np.ndarray]:
    """Quantize one codeword prefix; returns its payload (None for kind none) and the
    values the receiver reconstructs from it."""
    values = np.asarray(values, dtype=np.float64).ravel()
    stage = CodewordQuantizer(spec, value_range)
    if spec.kind == QuantizerKind.NONE:
        return None, values.copy()
    payload = stage.encode(values)
    return payload, stage.decode(payload)
