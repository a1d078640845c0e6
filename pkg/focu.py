"""Feedback overhead control: truncation, zero-padding, overhead sampling and the
changeable-rate training loss."""
import struct
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import logger
from errors import CodewordLengthError, EmptyInputError, QuantizerMismatchError

_LENGTH_FIELD = struct.Struct("<H")


@dataclass(frozen=True)
class Codeword:
    """Codeword of capacity M whose first ``active_length`` entries are fed back."""
    values: np.ndarray
    active_length: int
    quantized: bool = False

    def __post_init__(self):
        if not 0 <= self.active_length <= self.values.shape[-1]:
            raise CodewordLengthError(
                f"active length {self.active_length} outside [0, {self.values.shape[-1]}]")

    @property
    def M(self) -> int:
        return int(self.values.shape[-1])

    @property
    def prefix(self) -> np.ndarray:
        return self.values[..., :self.active_length]


def _check_length(n: int, M: int) -> None:
    if not 0 <= n <= M:
        raise CodewordLengthError(f"kept length n={n} outside [0, {M}]")


def truncate(codeword: Codeword, n: int) -> Codeword:
    _check_length(n, codeword.M)
    return Codeword(values=codeword.values.copy(), active_length=n, quantized=codeword.quantized)


def zero_pad(prefix, M: int, quantized: bool = False) -> Codeword:
    """Place ``prefix`` in front of M - n zeros."""
    prefix = np.asarray(prefix)
    n = prefix.shape[-1]
    _check_length(n, M)
    values = np.zeros(prefix.shape[:-1] + (M,), dtype=prefix.dtype if prefix.size else np.float32)
    values[..., :n] = prefix
    return Codeword(values=values, active_length=n, quantized=quantized)


def length_mask(lengths, M: int) -> np.ndarray:
    """Boolean (B, M) mask keeping the first lengths[i] entries of row i."""
    lengths = np.asarray(lengths)
    if lengths.size and (lengths.min() < 0 or lengths.max() > M):
        raise CodewordLengthError(f"kept lengths must lie in [0, {M}], got {lengths.min()}..{lengths.max()}")
    return np.arange(M)[None, :] < lengths[:, None]


def float_payload(codeword: Codeword) -> bytes:
    """Unquantized payload: u16 length followed by little-endian float32 values."""
    prefix = np.asarray(codeword.prefix, dtype="<f4")
    return _LENGTH_FIELD.pack(codeword.active_length) + prefix.tobytes()


def parse_float_payload(data: bytes, M: int) -> Codeword:
    if len(data) < _LENGTH_FIELD.size:
        raise CodewordLengthError("payload shorter than its length field")
    (n,) = _LENGTH_FIELD.unpack_from(data, 0)
    body = data[_LENGTH_FIELD.size:]
    if len(body) != 4 * n:
        raise CodewordLengthError(f"payload announces {n} values but holds {len(body)} bytes")
    return zero_pad(np.frombuffer(body, dtype="<f4").astype(np.float32), M)


# --- Overhead policy ----------------------------------------------------------

class OverheadDistribution(str, Enum):
    UNIFORM = "uniform"
    FIXED = "fixed"


class OverheadPolicy(BaseModel):
    """How kept lengths are drawn during training, with loss weights λ over {0..M}."""
    model_config = ConfigDict(frozen=True)

    distribution: OverheadDistribution
    M: int = Field(ge=0)
    fixed_length: Optional[int] = None
    weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check(self) -> "OverheadPolicy":
        if self.distribution == OverheadDistribution.FIXED:
            if self.fixed_length is None or not 0 <= self.fixed_length <= self.M:
                raise ValueError(f"fixed policy needs a length in [0, {self.M}], got {self.fixed_length}")
        if self.weights is not None:
            if len(self.weights) != self.M + 1:
                raise ValueError(f"expected {self.M + 1} weights, got {len(self.weights)}")
            if min(self.weights) < 0 or max(self.weights) <= 0:
                raise ValueError("weights must be non-negative and not all zero")
        return self

    @classmethod
    def uniform(cls, M: int, weights: Optional[List[float]] = None) -> "OverheadPolicy":
        return cls(distribution=OverheadDistribution.UNIFORM, M=M, weights=weights)

    @classmethod
    def fixed(cls, n: int, M: Optional[int] = None) -> "OverheadPolicy":
        return cls(distribution=OverheadDistribution.FIXED, M=n if M is None else M, fixed_length=n)

    @property
    def lambdas(self) -> np.ndarray:
        if self.weights is not None:
            return np.asarray(self.weights, dtype=np.float64)
        if self.distribution == OverheadDistribution.FIXED:
            one_hot = np.zeros(self.M + 1)
            one_hot[self.fixed_length] = 1.0
            return one_hot
        return np.ones(self.M + 1)


def sample_overhead(policy: OverheadPolicy, rng: np.random.Generator) -> int:
    if policy.distribution == OverheadDistribution.FIXED:
        return policy.fixed_length
    return int(rng.integers(0, policy.M + 1))


def sample_overheads(policy: OverheadPolicy, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorized :func:`sample_overhead`, one kept length per batch element."""
    if policy.distribution == OverheadDistribution.FIXED:
        return np.full(size, policy.fixed_length, dtype=np.int64)
    return rng.integers(0, policy.M + 1, size=size)


# --- Loss ---------------------------------------------------------------------

def mse(target: np.ndarray, output: np.ndarray) -> float:
    return float(np.mean((output - target) ** 2))


def changeable_rate_loss_and_grad(target: np.ndarray, output: np.ndarray, lengths: np.ndarray,
                                  policy: OverheadPolicy) -> Tuple[float, np.ndarray]:
    """λ-weighted squared reconstruction error and its gradient w.r.t. ``output``.

    Each sample contributes λ[k] times its element-mean squared error, averaged over the
    batch. When every sample carries the same weight this is that weight times the plain
    mean over the whole batch.
    """
    if target.shape[0] == 0:
        raise EmptyInputError("changeable-rate loss of an empty batch")
    diff = output - target
    weights = policy.lambdas[np.asarray(lengths)]
    if np.all(weights == weights[0]):
        w = weights[0]
        loss = float(w * np.mean(diff ** 2))
        grad = (2.0 * w / diff.size) * diff
        return loss, grad.astype(output.dtype)
    per_sample = np.mean(diff.reshape(diff.shape[0], -1) ** 2, axis=1)
    loss = float(np.sum(weights * per_sample) / target.shape[0])
    scale = 2.0 * weights / (target.shape[0] * (diff.size // diff.shape[0]))
    grad = diff * scale.reshape((-1,) + (1,) * (diff.ndim - 1))
    return loss, grad.astype(output.dtype)


def changeable_rate_loss(batch: np.ndarray, model, quantizer, policy: OverheadPolicy,
                         rng: Optional[np.random.Generator] = None,
                         aux: Optional[np.ndarray] = None) -> float:
    """Evaluate the changeable-rate objective on one batch in evaluation mode.

    Args:
        batch: Normalized target tensors, which are also the model input.
        model: A feedback model exposing ``forward(x, lengths, aux, training)``.
        quantizer: Spec the model is expected to carry (None skips the check).
        policy: Overhead policy drawing one kept length per sample.
        rng: Generator for the length draws.
        aux: Auxiliary input for models that need one.

    Returns:
        The λ-weighted mean squared reconstruction error.
    """
    if batch.shape[0] == 0:
        raise EmptyInputError("changeable-rate loss of an empty batch")
    if quantizer is not None and quantizer != model.quantizer_spec:
        raise QuantizerMismatchError(f"model quantizer {model.quantizer_spec} differs from {quantizer}")
    rng = rng or np.random.default_rng(0)
    lengths = sample_overheads(policy, rng, batch.shape[0])
    output = model.forward(batch, lengths=lengths, aux=aux, training=False)
    loss, _ = changeable_rate_loss_and_grad(batch, output, lengths, policy)
    logger.debug(f"Changeable-rate loss {loss:.6f} over {batch.shape[0]} samples")
    return loss
