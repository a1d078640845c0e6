import copy
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, BATCH_NORM_ACCOUNTED_PARAMS, BATCH_NORM_EPSILON,
    BATCH_NORM_MOMENTUM, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC, LEAKY_RELU_SLOPE, logger
)
from errors import AuxiliaryInputError, CheckpointError, DimensionError, ForwardCacheError, NumericalError

_HEADER = struct.Struct("<4sII")


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    FULLY_CONNECTED = "fully_connected"
    BATCH_NORM = "batch_norm"
    ACTIVATION = "activation"
    RESHAPE = "reshape"


class ActivationKind(str, Enum):
    LINEAR = "linear"
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"


class LayerSpec(BaseModel):
    """Declarative description of one layer; only the fields of its kind are used."""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    in_channels: Optional[int] = Field(default=None, ge=1)
    out_channels: Optional[int] = Field(default=None, ge=1)
    kernel_size: Optional[int] = Field(default=None, ge=1)
    in_features: Optional[int] = Field(default=None, ge=1)
    out_features: Optional[int] = Field(default=None, ge=1)
    num_features: Optional[int] = Field(default=None, ge=1)
    activation: Optional[ActivationKind] = None
    shape: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "LayerSpec":
        required = {
            LayerKind.CONV2D: ("in_channels", "out_channels", "kernel_size"),
            LayerKind.FULLY_CONNECTED: ("in_features", "out_features"),
            LayerKind.BATCH_NORM: ("num_features",),
            LayerKind.ACTIVATION: ("activation",),
            LayerKind.RESHAPE: ("shape",),
        }[self.kind]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind.value} layer needs {', '.join(missing)}")
        if self.kind == LayerKind.CONV2D and self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd for same padding, got {self.kernel_size}")
        if self.kind == LayerKind.RESHAPE and any(d < 1 for d in self.shape):
            raise ValueError(f"reshape target must be positive, got {self.shape}")
        return self

    @classmethod
    def conv(cls, in_channels: int, out_channels: int, kernel_size: int) -> "LayerSpec":
        return cls(kind=LayerKind.CONV2D, in_channels=in_channels,
                   out_channels=out_channels, kernel_size=kernel_size)

    @classmethod
    def fc(cls, in_features: int, out_features: int) -> "LayerSpec":
        return cls(kind=LayerKind.FULLY_CONNECTED, in_features=in_features, out_features=out_features)

    @classmethod
    def batch_norm(cls, num_features: int) -> "LayerSpec":
        return cls(kind=LayerKind.BATCH_NORM, num_features=num_features)

    @classmethod
    def act(cls, activation: Union[ActivationKind, str]) -> "LayerSpec":
        return cls(kind=LayerKind.ACTIVATION, activation=ActivationKind(activation))

    @classmethod
    def reshape(cls, *shape: int) -> "LayerSpec":
        return cls(kind=LayerKind.RESHAPE, shape=tuple(shape))


class NetworkConfig(BaseModel):
    """Encoder/decoder layer stacks around an M-length codeword."""
    model_config = ConfigDict(frozen=True)

    encoder: List[LayerSpec]
    decoder: List[LayerSpec]
    M: int = Field(ge=1)
    input_shape: Tuple[int, int, int]
    auxiliary_input: bool = False
    auxiliary_shape: Optional[Tuple[int, int, int]] = None

    @model_validator(mode="after")
    def _codeword_interface(self) -> "NetworkConfig":
        encoder_fc = [s for s in self.encoder if s.kind == LayerKind.FULLY_CONNECTED]
        decoder_fc = [s for s in self.decoder if s.kind == LayerKind.FULLY_CONNECTED]
        if not encoder_fc or encoder_fc[-1].out_features != self.M:
            raise ValueError(f"encoder must end in an FC layer producing M={self.M} values")
        if not decoder_fc or decoder_fc[0].in_features != self.M:
            raise ValueError(f"decoder must start from an FC layer consuming M={self.M} values")
        if self.auxiliary_input and self.auxiliary_shape is None:
            raise ValueError("auxiliary_input requires auxiliary_shape")
        return self


# --- Layers -------------------------------------------------------------------

class Layer:
    """Base layer: ``forward`` caches what ``backward`` needs, in training mode only."""
    name = "layer"
    smooth = True

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise ForwardCacheError(f"{self.name}: backward() without a training-mode forward()")
        return self._cache

    def zero_grad(self) -> None:
        for key, value in self.params.items():
            self.grads[key] = np.zeros_like(value)

    def astype(self, dtype) -> "Layer":
        for store in (self.params, self.grads, self.buffers):
            for key in store:
                store[key] = store[key].astype(dtype)
        return self

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


def _glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2D(Layer):
    """Stride-1 same-padded 2-D convolution over (B, C, H, W) tensors."""
    name = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel_size % 2 == 0:
            raise DimensionError(f"kernel_size must be odd, got {kernel_size}")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        fan = kernel_size * kernel_size
        self.params["W"] = _glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                           in_channels * fan, out_channels * fan)
        self.params["b"] = np.zeros(out_channels)
        self.zero_grad()

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p = self.kernel_size // 2
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        return sliding_window_view(padded, (self.kernel_size, self.kernel_size), axis=(2, 3))

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"conv2d expects (B, {self.in_channels}, H, W), got {x.shape}")
        windows = self._windows(x)
        out = np.einsum("bihwkl,oikl->bohw", windows, self.params["W"], optimize=True)
        out += self.params["b"][None, :, None, None]
        self._cache = windows if training else None
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        windows = self._require_cache()
        self.grads["W"] = np.einsum("bihwkl,bohw->oikl", windows, grad, optimize=True)
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        # Full correlation of the output gradient with the flipped kernel
        grad_windows = self._windows(grad)
        flipped = self.params["W"][:, :, ::-1, ::-1]
        return np.einsum("bohwkl,oikl->bihw", grad_windows, flipped, optimize=True)


class FullyConnected(Layer):
    name = "fully_connected"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["W"] = _glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        self.params["b"] = np.zeros(out_features)
        self.zero_grad()

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"fully_connected expects (B, {self.in_features}), got {x.shape}")
        self._cache = x if training else None
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._require_cache()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class BatchNorm(Layer):
    """Batch normalization over the feature axis (axis 1) of 2-D or 4-D input.

    Training mode normalizes with batch statistics and updates the running averages;
    evaluation mode uses the running averages and leaves all state untouched.
    """
    name = "batch_norm"

    def __init__(self, num_features: int, momentum: float = BATCH_NORM_MOMENTUM,
                 epsilon: float = BATCH_NORM_EPSILON):
        super().__init__()
        self.num_features = num_features
        self.momentum, self.epsilon = momentum, epsilon
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.buffers["running_mean"] = np.zeros(num_features)
        self.buffers["running_var"] = np.ones(num_features)
        self.zero_grad()

    @staticmethod
    def _axes_and_shape(x: np.ndarray) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        if x.ndim == 2:
            return (0,), (1, -1)
        return (0, 2, 3), (1, -1, 1, 1)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise DimensionError(f"batch_norm expects {self.num_features} features on axis 1, got {x.shape}")
        axes, shape = self._axes_and_shape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self._cache = (x_hat, inv_std, axes, shape) if training else None
        return self.params["gamma"].reshape(shape) * x_hat + self.params["beta"].reshape(shape)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x_hat, inv_std, axes, shape = self._require_cache()
        count = grad.size // grad.shape[1]
        self.grads["gamma"] = np.sum(grad * x_hat, axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        d_hat = grad * self.params["gamma"].reshape(shape)
        sum_d = d_hat.sum(axis=axes).reshape(shape)
        sum_dx = (d_hat * x_hat).sum(axis=axes).reshape(shape)
        return inv_std.reshape(shape) / count * (count * d_hat - sum_d - x_hat * sum_dx)


class Activation(Layer):
    name = "activation"

    def __init__(self, kind: Union[ActivationKind, str], slope: float = LEAKY_RELU_SLOPE):
        super().__init__()
        self.kind = ActivationKind(kind)
        self.slope = slope
        self.name = f"activation[{self.kind.value}]"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if self.kind == ActivationKind.LINEAR:
            out = x
        elif self.kind == ActivationKind.SIGMOID:
            out = 1.0 / (1.0 + np.exp(-x))
        else:
            out = np.where(x > 0, x, self.slope * x)
        self._cache = (x, out) if training else None
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, out = self._require_cache()
        if self.kind == ActivationKind.LINEAR:
            return grad
        if self.kind == ActivationKind.SIGMOID:
            return grad * out * (1.0 - out)
        return grad * np.where(x > 0, 1.0, self.slope)


class Reshape(Layer):
    name = "reshape"

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if int(np.prod(x.shape[1:])) != int(np.prod(self.shape)):
            raise DimensionError(f"cannot reshape {x.shape[1:]} into {self.shape}")
        self._cache = x.shape if training else None
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._require_cache())


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.kind == LayerKind.CONV2D:
        return Conv2D(spec.in_channels, spec.out_channels, spec.kernel_size, rng)
    if spec.kind == LayerKind.FULLY_CONNECTED:
        return FullyConnected(spec.in_features, spec.out_features, rng)
    if spec.kind == LayerKind.BATCH_NORM:
        return BatchNorm(spec.num_features)
    if spec.kind == LayerKind.ACTIVATION:
        return Activation(spec.activation)
    return Reshape(spec.shape)


# --- Network ------------------------------------------------------------------

class Network:
    """Sequential stack of layers.

    When ``aux_after`` is set, an auxiliary (B, C_aux, H, W) tensor is concatenated on the
    channel axis right after layer ``aux_after``; forward then requires ``aux``.
    """

    def __init__(self, layers: Sequence[Layer], aux_after: Optional[int] = None):
        self.layers = list(layers)
        self.aux_after = aux_after
        self._aux_split: Optional[int] = None

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], rng: np.random.Generator,
                   aux_after: Optional[int] = None, dtype=np.float32) -> "Network":
        network = cls([build_layer(spec, rng) for spec in specs], aux_after=aux_after)
        return network.astype(dtype)

    def forward(self, x: np.ndarray, training: bool = False, aux: Optional[np.ndarray] = None) -> np.ndarray:
        if self.aux_after is not None and aux is None:
            raise AuxiliaryInputError("this network needs the auxiliary uplink input")
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training)
            if i == self.aux_after:
                if aux.shape[0] != x.shape[0] or aux.shape[2:] != x.shape[2:]:
                    raise DimensionError(f"auxiliary input {aux.shape} does not fit activations {x.shape}")
                self._aux_split = x.shape[1]
                x = np.concatenate([x, aux.astype(x.dtype)], axis=1)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(self.layers))):
            if i == self.aux_after:
                grad = grad[:, :self._aux_split]
            grad = self.layers[i].backward(grad)
        return grad

    __call__ = forward

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield f"{i}.{layer.name}", layer

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{i}.{k}", v) for i, layer in enumerate(self.layers) for k, v in layer.params.items())

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{i}.{k}", v) for i, layer in enumerate(self.layers) for k, v in layer.grads.items())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = self.parameters()
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                state[f"{i}.{k}"] = v
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointError(f"state mismatch (missing={missing}, unexpected={extra})")
        for key, current in expected.items():
            if state[key].shape != current.shape:
                raise CheckpointError(f"{key}: shape {state[key].shape} != {current.shape}")
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for k in store:
                    store[k] = np.array(state[f"{i}.{k}"], dtype=store[k].dtype)
            layer.zero_grad()

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def smooth(self) -> bool:
        return all(layer.smooth for layer in self.layers)

    def runtime_param_count(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))


def forward(network: Network, x: np.ndarray, mode: str = "eval", aux: Optional[np.ndarray] = None) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return network.forward(x, training=(mode == "train"), aux=aux)


def backward(network: Network, grad: np.ndarray) -> Tuple[np.ndarray, "OrderedDict[str, np.ndarray]"]:
    """Back-propagate ``grad``; returns the input gradient and the parameter gradients."""
    input_grad = network.backward(grad)
    return input_grad, network.gradients()


# --- Accounting ---------------------------------------------------------------

class ParamBreakdown(BaseModel):
    encoder: List[int]
    decoder: List[int]
    encoder_total: int = Field(ge=0)
    decoder_total: int = Field(ge=0)
    total: int = Field(ge=0)
    runtime_encoder_total: int = Field(ge=0)
    runtime_decoder_total: int = Field(ge=0)


def layer_param_count(spec: LayerSpec, accounting: bool = True) -> int:
    """Trainable parameters of one layer.

    With ``accounting`` every batch-norm layer counts a fixed 64; otherwise its real
    scale and shift vectors are counted.
    """
    if spec.kind == LayerKind.CONV2D:
        return (spec.in_channels * spec.kernel_size ** 2 + 1) * spec.out_channels
    if spec.kind == LayerKind.FULLY_CONNECTED:
        return spec.out_features * (spec.in_features + 1)
    if spec.kind == LayerKind.BATCH_NORM:
        return BATCH_NORM_ACCOUNTED_PARAMS if accounting else 2 * spec.num_features
    return 0


def count_params(config: NetworkConfig) -> ParamBreakdown:
    encoder = [layer_param_count(s) for s in config.encoder]
    decoder = [layer_param_count(s) for s in config.decoder]
    return ParamBreakdown(
        encoder=encoder,
        decoder=decoder,
        encoder_total=sum(encoder),
        decoder_total=sum(decoder),
        total=sum(encoder) + sum(decoder),
        runtime_encoder_total=sum(layer_param_count(s, accounting=False) for s in config.encoder),
        runtime_decoder_total=sum(layer_param_count(s, accounting=False) for s in config.decoder),
    )


def count_fc_flops(I: int, O: int) -> int:
    """FLOPs of a fully connected layer with I inputs and O outputs: 2·I·O."""
    if I < 0 or O < 0:
        raise ValueError(f"feature counts must be non-negative, got I={I}, O={O}")
    return 2 * I * O


# --- Optimizer ----------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer updating parameter arrays in place."""

    def __init__(self, learning_rate: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 epsilon: float = ADAM_EPSILON):
        if learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {learning_rate}")
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self._m:
                self._m[key] = np.zeros_like(p)
                self._v[key] = np.zeros_like(p)
            m, v = self._m[key], self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.learning_rate == 0.0:
                continue
            p -= (self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)).astype(p.dtype)


# --- Checkpoints --------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], state: Dict[str, np.ndarray], meta: dict) -> Path:
    """Write named arrays as little-endian float32 after a JSON header.

    Layout: ``<magic><u32 version><u32 header length><JSON {meta, arrays}>`` then the arrays in
    header order.
    """
    path = Path(path)
    header = json.dumps({
        "meta": meta,
        "arrays": [[name, list(array.shape)] for name, array in state.items()],
    }).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, len(header)))
        f.write(header)
        for array in state.values():
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    logger.info(f"💾 Checkpoint saved to {path} ({len(state)} arrays)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        logger.error(f"❌ Cannot read checkpoint {path}: {e}")
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: too short for a checkpoint header")
    magic, version, header_len = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_FORMAT_VERSION} checkpoint")
    try:
        header = json.loads(raw[_HEADER.size:_HEADER.size + header_len].decode("utf-8"))
        layout = [(name, tuple(shape)) for name, shape in header["arrays"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupted header ({e})") from e

    offset = _HEADER.size + header_len
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in layout:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        state[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["meta"], state


# --- Gradient check -----------------------------------------------------------

@dataclass
class GradientCheckReport:
    max_rel_error: float = 0.0
    checked: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    coordinates: int = 0

    def merge(self, other: "GradientCheckReport") -> None:
        self.max_rel_error = max(self.max_rel_error, other.max_rel_error)
        self.checked.extend(other.checked)
        self.skipped.extend(other.skipped)
        self.coordinates += other.coordinates


def _check_layer(layer: Layer, x: np.ndarray, label: str, epsilon: float,
                 num_coords: int, rng: np.random.Generator) -> GradientCheckReport:
    out = layer.forward(x, training=True)
    projection = rng.standard_normal(out.shape)
    layer.zero_grad()
    analytic_x = layer.backward(projection)
    analytic = {"input": analytic_x}
    analytic.update({name: g.copy() for name, g in layer.grads.items()})
    for name, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"{label}: non-finite analytic gradient for {name}")

    def loss() -> float:
        return float(np.sum(projection * layer.forward(x, training=True)))

    targets = {"input": x}
    targets.update(layer.params)
    pool = [(name, idx) for name, array in targets.items() for idx in range(array.size)]
    if len(pool) > num_coords:
        picks = rng.choice(len(pool), size=num_coords, replace=False)
        pool = [pool[i] for i in sorted(picks)]

    pairs = []
    for name, idx in pool:
        flat = targets[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + epsilon
        plus = loss()
        flat[idx] = original - epsilon
        minus = loss()
        flat[idx] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        if not np.isfinite(numeric):
            raise NumericalError(f"{label}: non-finite numerical gradient for {name}[{idx}]")
        pairs.append((analytic[name].reshape(-1)[idx], numeric))

    if not pairs:
        return GradientCheckReport(checked=[label])
    values = np.array(pairs)
    scale = max(float(np.max(np.abs(values))), 1e-12)
    denom = np.maximum(np.maximum(np.abs(values[:, 0]), np.abs(values[:, 1])), 1e-3 * scale)
    rel = float(np.max(np.abs(values[:, 0] - values[:, 1]) / denom))
    return GradientCheckReport(max_rel_error=rel, checked=[label], coordinates=len(pairs))


def gradient_check(target: Union[Layer, Network], x: np.ndarray, epsilon: float = 1e-5,
                   num_coords: int = 100, seed: int = 0,
                   aux: Optional[np.ndarray] = None) -> GradientCheckReport:
    """Compare analytic gradients with central finite differences in double precision.

    The target is deep-copied and cast to float64. A random projection of the output serves
    as the scalar loss. Networks are checked layer by layer at the activations they actually
    see; layers that are not smooth (hard quantizers) are skipped and listed in the report.

    Args:
        target: A single layer or a network.
        x: Input batch.
        epsilon: Finite-difference step, in [1e-6, 1e-3].
        num_coords: Coordinates sampled per layer (all of them when fewer exist).
        seed: Seed for the projection and the coordinate sample.
        aux: Auxiliary input for networks that need one.

    Returns:
        GradientCheckReport with the maximum relative error over all checked coordinates.

    Raises:
        NumericalError: when an analytic or numerical gradient is non-finite.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    layers = target.layers if isinstance(target, Network) else [target]
    aux_after = target.aux_after if isinstance(target, Network) else None

    report = GradientCheckReport()
    for i, original in enumerate(layers):
        layer = copy.deepcopy(original).astype(np.float64)
        label = f"{i}.{layer.name}"
        if layer.smooth:
            report.merge(_check_layer(layer, x.copy(), label, epsilon, num_coords, rng))
        else:
            logger.warning(f"⚠️ Skipping gradient check for non-smooth layer {label}")
            report.skipped.append(label)
        x = layer.forward(x, training=True)
        if i == aux_after:
            x = np.concatenate([x, np.asarray(aux, dtype=np.float64)], axis=1)
    logger.info(f"🔍 Gradient check: max relative error {report.max_rel_error:.3e} over "
                f"{report.coordinates} coordinates ({len(report.skipped)} layers skipped)")
    return report
