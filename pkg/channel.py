import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import (
    DATASET_FORMAT_VERSION, DATASET_MAGIC, FULL_DIMS, MIN_DELAY_BINS,
    SCENARIO_PRESETS, TOY_DIMS, UPLINK_GAIN_PERTURBATION, logger
)
from errors import DatasetFormatError, DimensionError, NormalizationError

_HEADER = struct.Struct("<4sII")  # magic, format version, JSON header length
_SAMPLE_DTYPE = np.dtype("<c8")   # little-endian float32 real/imag pairs


class Scenario(str, Enum):
    INDOOR = "indoor"
    OUTDOOR = "outdoor"


class DatasetConfig(BaseModel):
    """Parameters of a synthetic bidirectional channel dataset."""
    model_config = ConfigDict(frozen=True)

    n_t: int = Field(ge=1, description="transmit antennas at the BS (ULA)")
    n_s: int = Field(ge=1, description="subcarriers")
    n_s_kept: int = Field(ge=1, description="delay rows kept after the 2-D DFT")
    num_paths: int = Field(ge=1)
    sample_count: int = Field(ge=0)
    scenario: Scenario = Scenario.INDOOR
    master_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _kept_rows_fit(self) -> "DatasetConfig":
        if self.n_s_kept > self.n_s:
            raise ValueError(f"n_s_kept={self.n_s_kept} exceeds n_s={self.n_s}")
        return self

    @classmethod
    def preset(cls, scale: str = "toy", scenario: Union[Scenario, str] = Scenario.INDOOR,
               sample_count: int = 2000, master_seed: int = 0) -> "DatasetConfig":
        dims = FULL_DIMS if scale == "full" else TOY_DIMS
        scenario = Scenario(scenario)
        return cls(
            n_t=dims["n_t"], n_s=dims["n_s"], n_s_kept=dims["n_s_kept"],
            num_paths=SCENARIO_PRESETS[scenario.value]["num_paths"],
            sample_count=sample_count, scenario=scenario, master_seed=master_seed,
        )


@dataclass(eq=False)
class ChannelSample:
    """Paired downlink/uplink spatial-frequency channels (N_s x N_t)."""
    downlink: np.ndarray
    uplink: np.ndarray
    scenario: Scenario
    seed: int

    def __post_init__(self):
        if self.downlink.shape != self.uplink.shape or self.downlink.ndim != 2:
            raise DimensionError(
                f"downlink {self.downlink.shape} and uplink {self.uplink.shape} must be equal 2-D shapes")
        if not (np.all(np.isfinite(self.downlink)) and np.all(np.isfinite(self.uplink))):
            raise ValueError("channel sample holds non-finite entries")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelSample):
            return NotImplemented
        return (self.scenario == other.scenario and self.seed == other.seed
                and self.downlink.dtype == other.downlink.dtype
                and np.array_equal(self.downlink, other.downlink)
                and np.array_equal(self.uplink, other.uplink))


@dataclass(frozen=True)
class NormalizationStats:
    """Affine map x -> (x + offset) / scale, fitted on the training split."""
    offset: float
    scale: float


@dataclass
class AngularDelayChannel:
    matrix: np.ndarray
    norm_offset: float
    norm_scale: float

    @property
    def stats(self) -> NormalizationStats:
        return NormalizationStats(self.norm_offset, self.norm_scale)


# --- Generation ---------------------------------------------------------------

def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample seed, independent of generation order and worker count."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _path_geometry(config: DatasetConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    preset = SCENARIO_PRESETS[config.scenario.value]
    spread = preset["delay_spread_fraction"] * config.n_s_kept
    first_arrival = MIN_DELAY_BINS if spread > MIN_DELAY_BINS else 0.0
    delays = first_arrival + rng.uniform(0.0, spread - first_arrival, size=config.num_paths)

    # Exponentially decaying delay power profile
    decay = max(spread - first_arrival, 1.0) / 3.0
    power = np.exp(-(delays - first_arrival) / decay)
    power /= power.sum()

    half_spread = np.deg2rad(preset["angle_spread_deg"]) / 2.0
    mean_angle = rng.uniform(-np.pi / 3, np.pi / 3)
    angles = np.clip(mean_angle + rng.uniform(-half_spread, half_spread, size=config.num_paths),
                     -np.pi / 2, np.pi / 2)
    return delays, power, angles


def _generate_sample(config: DatasetConfig, index: int) -> ChannelSample:
    seed = sample_seed(config.master_seed, index)
    rng = np.random.default_rng(seed)
    delays, power, angles = _path_geometry(config, rng)

    gains = np.sqrt(power / 2.0) * (rng.standard_normal(config.num_paths)
                                    + 1j * rng.standard_normal(config.num_paths))
    # Uplink keeps angles and delays, perturbs magnitudes and redraws phases
    uplink_magnitude = np.abs(gains) * np.abs(
        1.0 + UPLINK_GAIN_PERTURBATION * rng.standard_normal(config.num_paths))
    uplink_gains = uplink_magnitude * np.exp(1j * rng.uniform(-np.pi, np.pi, size=config.num_paths))

    subcarriers = np.arange(config.n_s)[:, None]
    antennas = np.arange(config.n_t)[:, None]
    frequency_response = np.exp(2j * np.pi * subcarriers * delays[None, :] / config.n_s)  # (N_s, P)
    steering = np.exp(1j * np.pi * antennas * np.sin(angles)[None, :])                     # (N_t, P)

    downlink = (frequency_response * gains[None, :]) @ steering.T
    uplink = (frequency_response * uplink_gains[None, :]) @ steering.T
    return ChannelSample(
        downlink=downlink.astype(np.complex64),
        uplink=uplink.astype(np.complex64),
        scenario=config.scenario,
        seed=seed,
    )


def generate_dataset(config: DatasetConfig, workers: int = 1) -> List[ChannelSample]:
    """Generate ``config.sample_count`` multipath ULA channel samples.

    Each sample is a sum of ``num_paths`` specular paths with circular Gaussian gains,
    an exponentially decaying delay power profile and half-wavelength ULA steering vectors.
    The uplink shares angles and delays with the downlink but redraws path phases.

    Args:
        config: Validated dataset configuration.
        workers: Thread count for generation; results do not depend on it.

    Returns:
        Samples in index order.
    """
    if config.sample_count == 0:
        return []
    logger.info(f"Generating {config.sample_count} {config.scenario.value} samples "
                f"(N_t={config.n_t}, N_s={config.n_s}, paths={config.num_paths}, seed={config.master_seed})")
    indices = range(config.sample_count)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda i: _generate_sample(config, i), indices))
    else:
        samples = [_generate_sample(config, i) for i in indices]
    logger.info(f"✅ Generated {len(samples)} channel samples")
    return samples


# --- Transforms ---------------------------------------------------------------

def _check_matrix(H: np.ndarray) -> None:
    if H.ndim < 2:
        raise DimensionError(f"expected a matrix (or batch of matrices), got shape {H.shape}")


def to_angular_delay(H_sf: np.ndarray, n_s_kept: int) -> np.ndarray:
    """Compute F_d H F_a^H with unitary DFTs and keep the first ``n_s_kept`` delay rows.

    Works on a single (N_s, N_t) matrix or a batch (..., N_s, N_t).
    """
    H_sf = np.asarray(H_sf)
    _check_matrix(H_sf)
    n_s = H_sf.shape[-2]
    if not 0 <= n_s_kept <= n_s:
        raise DimensionError(f"cannot keep {n_s_kept} delay rows out of {n_s}")
    delay = np.fft.fft(H_sf, axis=-2, norm="ortho")
    # Right-multiplying by F_a^H is an orthonormal inverse DFT along antennas
    angular_delay = np.fft.ifft(delay, axis=-1, norm="ortho")
    return angular_delay[..., :n_s_kept, :]


def from_angular_delay(H_ad: np.ndarray, n_s: int) -> np.ndarray:
    """Zero-pad the delay rows back to ``n_s`` and invert :func:`to_angular_delay`."""
    H_ad = np.asarray(H_ad)
    _check_matrix(H_ad)
    kept = H_ad.shape[-2]
    if kept > n_s:
        raise DimensionError(f"{kept} delay rows do not fit into n_s={n_s}")
    padded = np.zeros(H_ad.shape[:-2] + (n_s, H_ad.shape[-1]), dtype=np.result_type(H_ad, np.complex64))
    padded[..., :kept, :] = H_ad
    spatial = np.fft.fft(padded, axis=-1, norm="ortho")
    return np.fft.ifft(spatial, axis=-2, norm="ortho")


def energy_fraction(H_sf: np.ndarray, n_s_kept: int) -> float:
    """Share of angular-delay energy inside the first ``n_s_kept`` delay rows."""
    total = float(np.sum(np.abs(H_sf) ** 2))
    if total == 0.0:
        return 1.0
    kept = float(np.sum(np.abs(to_angular_delay(H_sf, n_s_kept)) ** 2))
    return kept / total


def to_polar(H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise magnitude and phase in (-pi, pi]; zero entries get phase 0."""
    H = np.asarray(H)
    magnitude = np.abs(H)
    phase = np.angle(H)
    phase = np.where(phase == -np.pi, np.pi, phase)
    return magnitude, phase


def from_polar(magnitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return magnitude * np.exp(1j * phase)


# --- Normalization ------------------------------------------------------------

def fit_normalization(matrices: Union[np.ndarray, Sequence[np.ndarray]]) -> NormalizationStats:
    """Fit the dataset-wide affine map onto [0, 1].

    Complex input is mapped jointly over its real and imaginary parts; real input
    (e.g. magnitudes) over its values.

    Raises:
        NormalizationError: when the values span a zero (or non-finite) range.
    """
    values = np.asarray(matrices)
    if values.size == 0:
        raise NormalizationError("cannot fit normalization on an empty dataset")
    if np.iscomplexobj(values):
        values = np.concatenate([values.real.ravel(), values.imag.ravel()])
    values = values.astype(np.float64)
    lo, hi = float(np.min(values)), float(np.max(values))
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi - lo <= 0.0:
        logger.error(f"Degenerate normalization range [{lo}, {hi}]")
        raise NormalizationError(f"zero dynamic range: min={lo}, max={hi}")
    return NormalizationStats(offset=-lo, scale=hi - lo)


def normalize(H: np.ndarray, stats: Optional[NormalizationStats] = None) -> AngularDelayChannel:
    """Map ``H`` into [0, 1] with training-split statistics (fitted on ``H`` when absent)."""
    H = np.asarray(H)
    if not np.all(np.isfinite(H)):
        raise NormalizationError("cannot normalize non-finite values")
    if stats is None:
        stats = fit_normalization(H)
    if np.iscomplexobj(H):
        H = H.astype(np.complex128)
        matrix = ((H.real + stats.offset) / stats.scale) + 1j * ((H.imag + stats.offset) / stats.scale)
    else:
        matrix = (H.astype(np.float64) + stats.offset) / stats.scale
    return AngularDelayChannel(matrix=matrix, norm_offset=stats.offset, norm_scale=stats.scale)


def denormalize(channel: AngularDelayChannel) -> np.ndarray:
    matrix = channel.matrix
    if np.iscomplexobj(matrix):
        return ((matrix.real * channel.norm_scale - channel.norm_offset)
                + 1j * (matrix.imag * channel.norm_scale - channel.norm_offset))
    return matrix * channel.norm_scale - channel.norm_offset


def split_indices(count: int, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint train/test index sets whose union is ``range(count)``."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(count)
    n_test = int(round(count * test_fraction))
    if count >= 2 and test_fraction > 0.0:
        n_test = min(max(n_test, 1), count - 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# --- Persistence --------------------------------------------------------------

def save_dataset(path: Union[str, Path], samples: Sequence[ChannelSample], config: DatasetConfig) -> Path:
    """Write samples to a single container file.

    Layout: ``<magic><u32 version><u32 header length><JSON header>`` followed by, per sample,
    the downlink then the uplink matrix as little-endian float32 real/imag pairs.
    """
    path = Path(path)
    shape = (config.n_s, config.n_t)
    for sample in samples:
        if sample.downlink.shape != shape:
            raise DimensionError(f"sample shape {sample.downlink.shape} does not match config {shape}")
    header = json.dumps({
        "config": config.model_dump(mode="json"),
        "sample_count": len(samples),
    }).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_FORMAT_VERSION, len(header)))
        f.write(header)
        for sample in samples:
            f.write(np.ascontiguousarray(sample.downlink, dtype=_SAMPLE_DTYPE).tobytes())
            f.write(np.ascontiguousarray(sample.uplink, dtype=_SAMPLE_DTYPE).tobytes())
    logger.info(f"💾 Saved {len(samples)} samples to {path}")
    return path


def load_dataset(path: Union[str, Path]) -> Tuple[DatasetConfig, List[ChannelSample]]:
    """Read a dataset container written by :func:`save_dataset`.

    Raises:
        DatasetFormatError: bad magic, unsupported version, corrupt header or truncated body.
    """
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for a dataset header")
    magic, version, header_len = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (magic {magic!r})")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[_HEADER.size:_HEADER.size + header_len].decode("utf-8"))
        config = DatasetConfig.model_validate(header["config"])
        count = int(header["sample_count"])
    except (ValueError, KeyError, TypeError) as e:
        logger.error(f"Corrupted dataset header in {path}: {e}")
        raise DatasetFormatError(f"{path}: corrupted header ({e})") from e

    body = raw[_HEADER.size + header_len:]
    per_matrix = config.n_s * config.n_t
    expected = count * 2 * per_matrix * _SAMPLE_DTYPE.itemsize
    if len(body) != expected:
        raise DatasetFormatError(f"{path}: body holds {len(body)} bytes, expected {expected}")
    planes = np.frombuffer(body, dtype=_SAMPLE_DTYPE).reshape(count, 2, config.n_s, config.n_t)
    samples = [
        ChannelSample(
            downlink=planes[i, 0].astype(np.complex64),
            uplink=planes[i, 1].astype(np.complex64),
            scenario=config.scenario,
            seed=sample_seed(config.master_seed, i),
        )
        for i in range(count)
    ]
    logger.info(f"Loaded {count} samples from {path}")
    return config, samples
