from collections import OrderedDict
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import (
    CSINETPRO_MAPS, DUALNETSPH_MAPS, FIXED_RATE_LENGTHS, FULL_DIMS, FULL_M, KERNEL_SIZE, TOY_DIMS, TOY_M, logger
)
from errors import AuxiliaryInputError, CodewordLengthError, QuantizerMismatchError
from focu import length_mask, zero_pad
from netcore import LayerKind, LayerSpec, Network, NetworkConfig, count_fc_flops, count_params
from quant import CodewordQuantizer, QuantizedPayload, QuantizerKind, QuantizerSpec


class Family(str, Enum):
    CSINETPRO = "csinetpro"
    DUALNETSPH = "dualnetsph"


class Scale(str, Enum):
    FULL = "full"
    TOY = "toy"


_DISPLAY = {Family.CSINETPRO: "CsiNetPro", Family.DUALNETSPH: "DualNetSph"}
_QUANT_SUFFIX = {
    QuantizerKind.NONE: "",
    QuantizerKind.PQB: "-PQB",
    QuantizerKind.MU_LAW: "-MuLaw",
    QuantizerKind.PASSING_GRADIENT: "-PG",
    QuantizerKind.SOFT_TO_HARD: "-S2H",
}


def _dims(scale: Scale) -> Dict[str, int]:
    return FULL_DIMS if Scale(scale) == Scale.FULL else TOY_DIMS


def _conv_stack(in_channels: int, maps: Sequence[int], norm_last: bool, final_activation: str) -> List[LayerSpec]:
    specs = []
    channels = in_channels
    for i, out_channels in enumerate(maps):
        specs.append(LayerSpec.conv(channels, out_channels, KERNEL_SIZE))
        last = i == len(maps) - 1
        if last and not norm_last:
            specs.append(LayerSpec.act(final_activation))
        else:
            specs.append(LayerSpec.batch_norm(out_channels))
            specs.append(LayerSpec.act("leaky_relu"))
        channels = out_channels
    return specs


def _build(M: int, scale: Scale, in_channels: int, maps: Sequence[int], auxiliary: bool) -> NetworkConfig:
    if M < 1:
        raise CodewordLengthError(f"M must be at least 1, got {M}")
    dims = _dims(scale)
    h, w = dims["n_s_kept"], dims["n_t"]
    flat = maps[-1] * h * w
    encoder = _conv_stack(in_channels, maps, norm_last=True, final_activation="leaky_relu")
    encoder += [LayerSpec.reshape(flat), LayerSpec.fc(flat, M), LayerSpec.act("linear")]

    reshaped = flat // (h * w)
    decoder = [LayerSpec.fc(M, flat), LayerSpec.reshape(reshaped, h, w)]
    decoder += _conv_stack(reshaped + (1 if auxiliary else 0), maps[:-1] + (in_channels,),
                           norm_last=False, final_activation="sigmoid")
    return NetworkConfig(
        encoder=encoder, decoder=decoder, M=M, input_shape=(in_channels, h, w),
        auxiliary_input=auxiliary, auxiliary_shape=(1, h, w) if auxiliary else None,
    )


def build_csinetpro(M: int, scale: Scale = Scale.TOY) -> NetworkConfig:
    """Real/imaginary two-channel autoencoder with four 7x7 conv stages on each side."""
    maps = CSINETPRO_MAPS[Scale(scale).value]
    return _build(M, Scale(scale), in_channels=2, maps=maps, auxiliary=False)


def build_dualnetsph(M: int, scale: Scale = Scale.TOY) -> NetworkConfig:
    """Magnitude autoencoder whose decoder also sees the uplink magnitude as a second channel."""
    maps = DUALNETSPH_MAPS[Scale(scale).value]
    return _build(M, Scale(scale), in_channels=1, maps=maps, auxiliary=True)


_BUILDERS = {Family.CSINETPRO: build_csinetpro, Family.DUALNETSPH: build_dualnetsph}


class ModelVariant(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Family
    changeable_rate: bool = False
    quantizer: QuantizerSpec = QuantizerSpec()
    M: Optional[int] = Field(default=None, ge=1)
    scale: Scale = Scale.TOY

    @model_validator(mode="after")
    def _m_within_family_limit(self) -> "ModelVariant":
        if self.scale == Scale.FULL and self.M is not None and self.M > FULL_M[self.family.value]:
            raise ValueError(f"{self.family.value} supports M <= {FULL_M[self.family.value]} at full scale")
        return self

    @property
    def codeword_length(self) -> int:
        if self.M is not None:
            return self.M
        return (FULL_M if self.scale == Scale.FULL else TOY_M)[self.family.value]

    @property
    def name(self) -> str:
        prefix = "CH-" if self.changeable_rate else ""
        return f"{prefix}{_DISPLAY[self.family]}{_QUANT_SUFFIX[self.quantizer.kind]}"

    def network_config(self) -> NetworkConfig:
        return _BUILDERS[self.family](self.codeword_length, self.scale)


class FeedbackModel:
    """Encoder, quantizer stage and decoder around an M-length codeword.

    With ``changeable_rate`` the codeword is truncated to a per-sample kept length after
    quantization and zero-padded back to M before decoding.
    """

    def __init__(self, variant: ModelVariant, config: NetworkConfig, encoder: Network, decoder: Network,
                 quantizer: CodewordQuantizer):
        self.variant = variant
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.quantizer = quantizer
        self._mask: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return self.config.M

    @property
    def changeable_rate(self) -> bool:
        return self.variant.changeable_rate

    @property
    def quantizer_spec(self) -> QuantizerSpec:
        return self.quantizer.spec

    @property
    def name(self) -> str:
        return self.variant.name

    def _lengths(self, lengths, batch: int) -> Optional[np.ndarray]:
        if lengths is None:
            return None
        lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (batch,))
        if not self.changeable_rate and np.any(lengths != self.M):
            raise CodewordLengthError(f"{self.name} only feeds back full-length codewords (M={self.M})")
        return lengths

    def encode(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Unquantized codewords."""
        return self.encoder.forward(x, training)

    def forward(self, x: np.ndarray, lengths=None, aux: Optional[np.ndarray] = None,
                training: bool = False, train_encoder: bool = True) -> np.ndarray:
        """Reconstruct from ``x``; with ``train_encoder=False`` the encoder and quantizer run in
        evaluation mode while the decoder trains."""
        if self.config.auxiliary_input and aux is None:
            raise AuxiliaryInputError(f"{self.name} needs the uplink magnitude as auxiliary input")
        lengths = self._lengths(lengths, x.shape[0])
        upstream = training and train_encoder
        codeword = self.quantizer.forward(self.encoder.forward(x, upstream), upstream)
        mask = None
        if lengths is not None:
            mask = length_mask(lengths, self.M)
            codeword = codeword * mask
        self._mask = mask if training else None
        return self.decoder.forward(codeword, training, aux=aux if self.config.auxiliary_input else None)

    __call__ = forward

    def backward(self, grad: np.ndarray, train_encoder: bool = True) -> Optional[np.ndarray]:
        grad = self.decoder.backward(grad)
        if not train_encoder:
            return None
        if self._mask is not None:
            grad = grad * self._mask
        grad = self.quantizer.backward(grad)
        return self.encoder.backward(grad)

    # --- feedback link ---

    def feedback_payloads(self, x: np.ndarray, n: int) -> List[QuantizedPayload]:
        """Quantized payloads of the first ``n`` codeword entries, one per sample."""
        if self.quantizer_spec.kind == QuantizerKind.NONE:
            raise QuantizerMismatchError(f"{self.name} has no quantizer; use focu.float_payload")
        self._lengths(n, x.shape[0])
        codewords = self.encode(x)
        return [self.quantizer.encode(row[:n]) for row in codewords]

    def reconstruct_from_payloads(self, payloads: Sequence[QuantizedPayload],
                                  aux: Optional[np.ndarray] = None) -> np.ndarray:
        dtype = self.decoder.layers[0].params["W"].dtype
        padded = np.stack([zero_pad(self.quantizer.decode(p).astype(dtype), self.M).values for p in payloads])
        if self.config.auxiliary_input and aux is None:
            raise AuxiliaryInputError(f"{self.name} needs the uplink magnitude as auxiliary input")
        return self.decoder.forward(padded, training=False, aux=aux if self.config.auxiliary_input else None)

    # --- parameters ---

    def parameters(self, include_encoder: bool = True) -> "OrderedDict[str, np.ndarray]":
        params = OrderedDict()
        if include_encoder:
            params.update((f"encoder.{k}", v) for k, v in self.encoder.parameters().items())
        params.update((f"decoder.{k}", v) for k, v in self.decoder.parameters().items())
        return params

    def gradients(self, include_encoder: bool = True) -> "OrderedDict[str, np.ndarray]":
        grads = OrderedDict()
        if include_encoder:
            grads.update((f"encoder.{k}", v) for k, v in self.encoder.gradients().items())
        grads.update((f"decoder.{k}", v) for k, v in self.decoder.gradients().items())
        return grads

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        state.update((f"encoder.{k}", v) for k, v in self.encoder.state_dict().items())
        state.update((f"decoder.{k}", v) for k, v in self.decoder.state_dict().items())
        state.update((f"quantizer.{k}", v) for k, v in self.quantizer.buffers.items())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        def part(prefix: str) -> Dict[str, np.ndarray]:
            return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}

        self.encoder.load_state_dict(part("encoder."))
        self.decoder.load_state_dict(part("decoder."))
        quantizer_state = part("quantizer.")
        if "value_range" in quantizer_state:
            self.quantizer.buffers["value_range"] = quantizer_state["value_range"].astype(np.float64)

    def copy_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.state_dict().items())

    def astype(self, dtype) -> "FeedbackModel":
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)
        return self

    def param_count(self) -> int:
        return count_params(self.config).total


def _decoder_aux_index(config: NetworkConfig) -> Optional[int]:
    if not config.auxiliary_input:
        return None
    return next(i for i, spec in enumerate(config.decoder) if spec.kind == LayerKind.RESHAPE)


def build_model(variant: ModelVariant, seed: int = 0, dtype=np.float32) -> FeedbackModel:
    """Instantiate a trainable model for ``variant`` with seeded Glorot-uniform weights."""
    config = variant.network_config()
    rng = np.random.default_rng(seed)
    encoder = Network.from_specs(config.encoder, rng, dtype=dtype)
    decoder = Network.from_specs(config.decoder, rng, aux_after=_decoder_aux_index(config), dtype=dtype)
    logger.info(f"🚀 Built {variant.name} ({variant.scale.value}, M={config.M}, "
                f"{encoder.runtime_param_count() + decoder.runtime_param_count()} trainable scalars)")
    return FeedbackModel(variant, config, encoder, decoder, CodewordQuantizer(variant.quantizer))


def attach_focu(model: FeedbackModel) -> FeedbackModel:
    """Changeable-rate view of ``model``; every layer and parameter is shared."""
    variant = model.variant.model_copy(update={"changeable_rate": True})
    return FeedbackModel(variant, model.config, model.encoder, model.decoder, model.quantizer)


def attach_pqb(model: FeedbackModel, spec: QuantizerSpec) -> FeedbackModel:
    """View of ``model`` with ``spec`` quantizing the codeword; network parameters are shared."""
    current = model.quantizer_spec.kind
    if current != QuantizerKind.NONE and spec.kind not in (QuantizerKind.NONE, current):
        raise QuantizerMismatchError(f"{model.name} is already quantized with {current.value}")
    value_range = None
    if spec.kind == QuantizerKind.MU_LAW and model.quantizer.calibrated:
        value_range = tuple(model.quantizer.buffers["value_range"])
    variant = model.variant.model_copy(update={"quantizer": spec})
    return FeedbackModel(variant, model.config, model.encoder, model.decoder,
                         CodewordQuantizer(spec, value_range))


# --- Accounting ---------------------------------------------------------------

class StorageSavings(BaseModel):
    family: Family
    fixed_rate_lengths: List[int]
    fixed_encoder: int
    fixed_decoder: int
    fixed_total: int
    changeable_encoder: int
    changeable_decoder: int
    changeable_total: int
    reduction_encoder: float
    reduction_decoder: float
    reduction_total: float


def parameter_table(family: Family, lengths: Optional[Sequence[int]] = None,
                    scale: Scale = Scale.FULL) -> List[Dict[str, int]]:
    """Encoder/decoder/total parameter counts for each codeword length."""
    family = Family(family)
    lengths = lengths or FIXED_RATE_LENGTHS[family.value]
    rows = []
    for M in lengths:
        breakdown = count_params(_BUILDERS[family](M, scale))
        rows.append({"M": M, "encoder": breakdown.encoder_total,
                     "decoder": breakdown.decoder_total, "total": breakdown.total})
    return rows


def storage_savings(family: Family, lengths: Optional[Sequence[int]] = None,
                    scale: Scale = Scale.FULL) -> StorageSavings:
    """Parameters stored for a bank of fixed-rate models against one changeable-rate model
    sized for the largest length."""
    family = Family(family)
    rows = parameter_table(family, lengths, scale)
    largest = max(rows, key=lambda r: r["M"])
    fixed = {key: sum(r[key] for r in rows) for key in ("encoder", "decoder", "total")}
    return StorageSavings(
        family=family,
        fixed_rate_lengths=[r["M"] for r in rows],
        fixed_encoder=fixed["encoder"], fixed_decoder=fixed["decoder"], fixed_total=fixed["total"],
        changeable_encoder=largest["encoder"], changeable_decoder=largest["decoder"],
        changeable_total=largest["total"],
        reduction_encoder=1.0 - largest["encoder"] / fixed["encoder"],
        reduction_decoder=1.0 - largest["decoder"] / fixed["decoder"],
        reduction_total=1.0 - largest["total"] / fixed["total"],
    )


class FlopCount(BaseModel):
    ue: int
    bs: int


def fc_flops(config: NetworkConfig, L: int, changeable_rate: bool) -> FlopCount:
    """FC FLOPs at the UE (encoder) and BS (decoder) when L codeword entries are active.

    A changeable-rate network only computes and consumes the first L codeword entries, so
    its codeword layers count as L-wide; a fixed-rate network must have M = L.
    """
    if not 0 <= L <= config.M:
        raise CodewordLengthError(f"active length L={L} outside [0, {config.M}]")
    if not changeable_rate and L != config.M:
        raise CodewordLengthError(f"fixed-rate network with M={config.M} cannot run at L={L}")

    def total(specs, codeword_side: str) -> int:
        flops = 0
        for spec in specs:
            if spec.kind != LayerKind.FULLY_CONNECTED:
                continue
            i, o = spec.in_features, spec.out_features
            if codeword_side == "out" and o == config.M:
                o = L
            if codeword_side == "in" and i == config.M:
                i = L
            flops += count_fc_flops(i, o)
        return flops

    return FlopCount(ue=total(config.encoder, "out"), bs=total(config.decoder, "in"))
