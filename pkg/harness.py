import json
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from channel import (
    ChannelSample, DatasetConfig, NormalizationStats, fit_normalization, generate_dataset, load_dataset,
    normalize, split_indices, to_angular_delay
)
from config import (
    FULL_TRAINING, NMSE_FLOOR_DB, RETRAIN_EPOCHS, TIMEZONE, TOOLKIT_VERSION, TOY_TRAINING,
    EXPERIMENT_SCHEMA_VERSION, logger, resolve_seed
)
from errors import CodewordLengthError, EmptyInputError, NumericalError, QuantizerMismatchError
from focu import OverheadPolicy, changeable_rate_loss_and_grad, sample_overheads
from models import Family, FeedbackModel, ModelVariant, attach_pqb, build_model, fc_flops
from netcore import Adam, ParamBreakdown, count_params, load_checkpoint, save_checkpoint
from quant import QuantizerKind, QuantizerSpec, bit_width_saving, empirical_entropy, feedback_bits

EVAL_BATCH_SIZE = 256


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=TOY_TRAINING["epochs"], ge=0)
    batch_size: int = Field(default=TOY_TRAINING["batch_size"], ge=1)
    learning_rate: float = Field(default=TOY_TRAINING["learning_rate"], ge=0)
    optimizer: Literal["adam"] = "adam"
    seed: int = 0
    overhead_policy: Optional[OverheadPolicy] = None
    quantizer: Optional[QuantizerSpec] = None
    restore_best: bool = True

    @classmethod
    def preset(cls, scale: str = "toy", **overrides) -> "TrainConfig":
        values = dict(FULL_TRAINING if scale == "full" else TOY_TRAINING)
        values.update(overrides)
        return cls(**values)


# --- Dataset preparation ------------------------------------------------------

@dataclass
class PreparedDataset:
    """Network-ready tensors with the statistics needed to undo the normalization.

    CsiNetPro tensors hold real and imaginary planes as two channels; DualNetSph tensors hold
    the downlink magnitude with the uplink magnitude as auxiliary input.
    """
    family: Family
    x: np.ndarray
    aux: Optional[np.ndarray]
    train_idx: np.ndarray
    test_idx: np.ndarray
    stats: NormalizationStats
    aux_stats: Optional[NormalizationStats] = None

    def split(self, name: str) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        idx = self.train_idx if name == "train" else self.test_idx
        return self.x[idx], (self.aux[idx] if self.aux is not None else None)

    def denormalize(self, tensors: np.ndarray) -> np.ndarray:
        """Map network tensors back to angular-delay matrices (complex, or magnitudes)."""
        values = tensors.astype(np.float64) * self.stats.scale - self.stats.offset
        if self.family == Family.CSINETPRO:
            return values[:, 0] + 1j * values[:, 1]
        return values[:, 0]


def prepare_dataset(samples: Sequence[ChannelSample], config: DatasetConfig, family: Union[Family, str],
                    test_fraction: float = 0.1, seed: int = 0) -> PreparedDataset:
    """Truncate to the angular-delay domain, split, and normalize with train-split statistics."""
    if len(samples) == 0:
        raise EmptyInputError("cannot prepare an empty dataset")
    family = Family(family)
    train_idx, test_idx = split_indices(len(samples), test_fraction, seed)
    downlink = to_angular_delay(np.stack([s.downlink for s in samples]), config.n_s_kept)

    if family == Family.CSINETPRO:
        stats = fit_normalization(downlink[train_idx])
        normalized = normalize(downlink, stats).matrix
        x = np.stack([normalized.real, normalized.imag], axis=1).astype(np.float32)
        return PreparedDataset(family, x, None, train_idx, test_idx, stats)

    magnitude = np.abs(downlink)
    stats = fit_normalization(magnitude[train_idx])
    x = normalize(magnitude, stats).matrix[:, None].astype(np.float32)
    uplink = np.abs(to_angular_delay(np.stack([s.uplink for s in samples]), config.n_s_kept))
    aux_stats = fit_normalization(uplink[train_idx])
    aux = normalize(uplink, aux_stats).matrix[:, None].astype(np.float32)
    return PreparedDataset(family, x, aux, train_idx, test_idx, stats, aux_stats)


# --- Metrics ------------------------------------------------------------------

def nmse(H: np.ndarray, H_hat: np.ndarray) -> float:
    """Mean over samples of ||H - H_hat||^2 / ||H||^2."""
    if H.shape[0] == 0:
        raise EmptyInputError("NMSE of an empty set")
    axes = tuple(range(1, H.ndim))
    power = np.sum(np.abs(H) ** 2, axis=axes)
    error = np.sum(np.abs(H - H_hat) ** 2, axis=axes)
    if np.any(power == 0):
        raise NumericalError("NMSE undefined for an all-zero channel")
    return float(np.mean(error / power))


def to_db(value: float) -> float:
    if value <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(value), NMSE_FLOOR_DB)


def _predict(model: FeedbackModel, x: np.ndarray, aux: Optional[np.ndarray], lengths) -> np.ndarray:
    lengths = np.broadcast_to(np.asarray(lengths), (x.shape[0],)) if lengths is not None else None
    outputs = []
    for start in range(0, x.shape[0], EVAL_BATCH_SIZE):
        sl = slice(start, start + EVAL_BATCH_SIZE)
        outputs.append(model.forward(
            x[sl], lengths=lengths[sl] if lengths is not None else None,
            aux=aux[sl] if aux is not None else None, training=False))
    return np.concatenate(outputs) if outputs else np.empty_like(x)


def _default_policy(model: FeedbackModel) -> OverheadPolicy:
    return OverheadPolicy.uniform(model.M) if model.changeable_rate else OverheadPolicy.fixed(model.M)


def objective(model: FeedbackModel, x: np.ndarray, aux: Optional[np.ndarray], policy: OverheadPolicy,
              seed: int = 0) -> float:
    """Evaluation-mode training objective over a whole split.

    Kept lengths for a uniform policy come from a generator seeded with ``seed`` so that the
    value is comparable across epochs.
    """
    lengths = sample_overheads(policy, np.random.default_rng(seed), x.shape[0])
    output = _predict(model, x, aux, lengths if model.changeable_rate else None)
    loss, _ = changeable_rate_loss_and_grad(x, output, lengths, policy)
    return loss


def _with_quantizer(model: FeedbackModel, quantizer: Optional[QuantizerSpec]) -> FeedbackModel:
    if quantizer is None or quantizer == model.quantizer_spec:
        return model
    return attach_pqb(model, quantizer)


def evaluate_nmse(model: FeedbackModel, dataset: PreparedDataset, n: Optional[int] = None,
                  quantizer: Optional[QuantizerSpec] = None, split: str = "test") -> float:
    """NMSE in dB of the de-normalized reconstructions with ``n`` codeword entries kept.

    Args:
        model: Trained model.
        dataset: Prepared dataset.
        n: Kept length; None keeps all M entries.
        quantizer: Evaluate with this quantizer instead of the model's own.
        split: "test" or "train".

    Returns:
        NMSE in dB, floored at -100 dB.
    """
    model = _with_quantizer(model, quantizer)
    x, aux = dataset.split(split)
    if x.shape[0] == 0:
        raise EmptyInputError(f"the {split} split is empty")
    if n is not None and not 0 <= n <= model.M:
        raise CodewordLengthError(f"kept length n={n} outside [0, {model.M}]")
    lengths = n if (n is not None and model.changeable_rate) else None
    if n is not None and not model.changeable_rate and n != model.M:
        raise CodewordLengthError(f"{model.name} is fixed-rate; only n={model.M} can be evaluated")
    output = _predict(model, x, aux, lengths)
    value = to_db(nmse(dataset.denormalize(x), dataset.denormalize(output)))
    logger.info(f"🔍 {model.name} NMSE at n={n if n is not None else model.M}: {value:.2f} dB")
    return value


@dataclass
class CodewordStatistics:
    mean: np.ndarray
    sd: np.ndarray
    box: pd.DataFrame
    first_quartile_sd: float
    last_quartile_sd: float


def codeword_statistics(model: FeedbackModel, dataset: PreparedDataset, split: str = "test") -> CodewordStatistics:
    """Per-index mean, SD and box statistics of the unquantized codewords."""
    x, _ = dataset.split(split)
    if x.shape[0] == 0:
        raise EmptyInputError(f"the {split} split is empty")
    codewords = np.concatenate([model.encode(x[i:i + EVAL_BATCH_SIZE]) for i in range(0, x.shape[0], EVAL_BATCH_SIZE)])
    codewords = codewords.astype(np.float64)
    mean = codewords.mean(axis=0)
    sd = codewords.std(axis=0)
    q = np.percentile(codewords, [0, 25, 50, 75, 100], axis=0)
    box = pd.DataFrame({"index": np.arange(model.M), "min": q[0], "q1": q[1], "median": q[2],
                        "q3": q[3], "max": q[4]})
    quarter = max(model.M // 4, 1)
    if not np.any(sd > 0):
        logger.warning(f"⚠️ All codeword SDs of {model.name} are zero")
    return CodewordStatistics(mean=mean, sd=sd, box=box,
                              first_quartile_sd=float(sd[:quarter].mean()),
                              last_quartile_sd=float(sd[-quarter:].mean()))


def compare_fixed_and_changeable(changeable: FeedbackModel, fixed_models: Dict[int, FeedbackModel],
                                 dataset: PreparedDataset) -> pd.DataFrame:
    """NMSE of each fixed-rate model next to the changeable-rate model at the same length."""
    rows = []
    for n in sorted(fixed_models):
        fixed_db = evaluate_nmse(fixed_models[n], dataset)
        ch_db = evaluate_nmse(changeable, dataset, n=n)
        rows.append({"n": n, "fixed_nmse_db": fixed_db, "changeable_nmse_db": ch_db, "gap_db": ch_db - fixed_db})
    return pd.DataFrame(rows, columns=["n", "fixed_nmse_db", "changeable_nmse_db", "gap_db"])


# --- Training -----------------------------------------------------------------

def _fit(model: FeedbackModel, dataset: PreparedDataset, config: TrainConfig,
         train_encoder: bool) -> Tuple[FeedbackModel, pd.DataFrame]:
    if config.quantizer is not None and config.quantizer != model.quantizer_spec:
        raise QuantizerMismatchError(f"{model.name} carries {model.quantizer_spec}, config asks {config.quantizer}")
    policy = config.overhead_policy or _default_policy(model)
    if policy.M != model.M:
        raise CodewordLengthError(f"overhead policy covers M={policy.M}, model has M={model.M}")
    seed = resolve_seed(config.seed)
    rng = np.random.default_rng(seed)
    x_train, aux_train = dataset.split("train")
    x_test, aux_test = dataset.split("test")
    if x_train.shape[0] == 0:
        raise EmptyInputError("the train split is empty")
    has_validation = x_test.shape[0] > 0

    params = model.parameters(include_encoder=train_encoder)
    optimizer = Adam(config.learning_rate)

    def snapshot(epoch: int, batch_loss: float) -> Dict[str, float]:
        train_loss = objective(model, x_train, aux_train, policy, seed)
        val_loss = objective(model, x_test, aux_test, policy, seed) if has_validation else train_loss
        return {"epoch": epoch, "batch_loss": batch_loss, "train_loss": train_loss, "val_loss": val_loss}

    records = [snapshot(0, float("nan"))]
    best_loss, best_epoch, best_state = records[0]["val_loss"], 0, model.copy_state()
    stage = "full model" if train_encoder else "decoder"
    logger.info(f"🚀 Training {model.name} {stage}: {config.epochs} epochs, batch {config.batch_size}, "
                f"lr {config.learning_rate}, seed {seed}")

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(x_train.shape[0])
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x_train[idx]
            auxb = aux_train[idx] if aux_train is not None else None
            lengths = sample_overheads(policy, rng, len(idx))
            output = model.forward(xb, lengths=lengths if model.changeable_rate else None, aux=auxb,
                                   training=True, train_encoder=train_encoder)
            loss, grad = changeable_rate_loss_and_grad(xb, output, lengths, policy)
            if not math.isfinite(loss):
                logger.error(f"❌ Non-finite loss at epoch {epoch} (batch starting {start})")
                raise NumericalError(f"training diverged at epoch {epoch}: loss={loss}")
            model.zero_grad()
            model.backward(grad, train_encoder=train_encoder)
            grads = model.gradients(include_encoder=train_encoder)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                logger.error(f"❌ Non-finite gradient at epoch {epoch}")
                raise NumericalError(f"non-finite gradient at epoch {epoch}")
            optimizer.step(params, grads)
            losses.append(loss)
            logger.debug(f"epoch {epoch} batch {start // config.batch_size}: loss {loss:.6f}")

        record = snapshot(epoch, float(np.mean(losses)))
        records.append(record)
        if record["val_loss"] < best_loss:
            best_loss, best_epoch, best_state = record["val_loss"], epoch, model.copy_state()
        if epoch == config.epochs or epoch % 10 == 0:
            logger.info(f"Epoch {epoch}/{config.epochs}: batch {record['batch_loss']:.6f}, "
                        f"train {record['train_loss']:.6f}, val {record['val_loss']:.6f}")

    if config.restore_best and best_epoch != config.epochs:
        model.load_state_dict(best_state)
    history = pd.DataFrame(records, columns=["epoch", "batch_loss", "train_loss", "val_loss"])
    history.attrs["best_epoch"] = best_epoch if config.restore_best else config.epochs
    logger.info(f"✅ Finished {model.name} {stage}; best validation loss {best_loss:.6f} at epoch {best_epoch}")
    return model, history


def train(model: FeedbackModel, dataset: PreparedDataset, config: TrainConfig) -> Tuple[FeedbackModel, pd.DataFrame]:
    """Train encoder and decoder with Adam on the changeable-rate objective.

    The history holds one row per epoch (epoch 0 is the initial state) with the mean
    mini-batch loss, the evaluation-mode objective on the whole train split and the
    validation loss on the test split. The state with the lowest validation loss is
    restored at the end unless ``config.restore_best`` is off.

    Raises:
        NumericalError: when a loss or gradient becomes non-finite.
    """
    return _fit(model, dataset, config, train_encoder=True)


def retrain_decoder(model: FeedbackModel, dataset: PreparedDataset,
                    config: TrainConfig) -> Tuple[FeedbackModel, pd.DataFrame]:
    """Retrain only the decoder on the codewords of a frozen encoder.

    A mu-law quantizer that has not been calibrated gets its range from the train-split
    codewords first.
    """
    if model.quantizer_spec.kind == QuantizerKind.MU_LAW and not model.quantizer.calibrated:
        x_train, _ = dataset.split("train")
        model.quantizer.calibrate(model.encode(x_train))
    if config.epochs == 0:
        logger.info(f"No decoder retraining requested for {model.name}")
        return model, pd.DataFrame(columns=["epoch", "batch_loss", "train_loss", "val_loss"])
    return _fit(model, dataset, config, train_encoder=False)


# --- Experiments --------------------------------------------------------------

class GridPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=0)
    b: int = Field(default=0, ge=0, le=16)


class ExperimentConfig(BaseModel):
    """Experiment file contents; ``b=0`` grid points are evaluated without quantization."""
    schema_version: Literal[1] = EXPERIMENT_SCHEMA_VERSION
    name: str
    dataset: Optional[DatasetConfig] = None
    dataset_path: Optional[str] = None
    variant: ModelVariant
    train: TrainConfig = TrainConfig()
    retrain_epochs: int = Field(default=RETRAIN_EPOCHS["toy"], ge=0)
    test_fraction: float = Field(default=0.1, ge=0, lt=1)
    grid: List[GridPoint] = []
    checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if (self.dataset is None) == (self.dataset_path is None):
            raise ValueError("give exactly one of dataset and dataset_path")
        M = self.variant.codeword_length
        for point in self.grid:
            if point.n > M:
                raise ValueError(f"grid length n={point.n} exceeds M={M}")
            if not self.variant.changeable_rate and point.n != M:
                raise ValueError(f"fixed-rate {self.variant.name} can only be evaluated at n={M}")
            if point.b > 0 and self.variant.quantizer.kind == QuantizerKind.NONE:
                raise ValueError(f"{self.variant.name} is unquantized; use b=0 grid points")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        with open(path, "r") as f:
            return cls.model_validate(json.load(f))


class GridResult(BaseModel):
    n: int
    b: int
    nmse_db: float
    entropy_bits: Optional[float] = None
    feedback_bits: Optional[int] = None
    bit_width_saving: Optional[float] = None


class ExperimentResult(BaseModel):
    name: str
    model: str
    family: Family
    toolkit_version: str = TOOLKIT_VERSION
    created_at: str
    seed: int
    grid: List[GridResult]
    param_breakdown: ParamBreakdown
    flops: List[Dict[str, int]]
    codeword_mean: List[float]
    codeword_sd: List[float]
    history: List[Dict[str, Union[float, str, None]]]
    config: dict

    def nmse_table(self) -> Dict[Tuple[int, int], float]:
        return {(g.n, g.b): g.nmse_db for g in self.grid}

    def entropy_table(self) -> Dict[Tuple[int, int], float]:
        return {(g.n, g.b): g.entropy_bits for g in self.grid if g.entropy_bits is not None}


def _grid_quantizer(variant: ModelVariant, b: int) -> QuantizerSpec:
    if b == 0:
        return QuantizerSpec()
    return variant.quantizer.model_copy(update={"bits": b})


def _evaluate_grid(model: FeedbackModel, dataset: PreparedDataset, variant: ModelVariant,
                   grid: Sequence[GridPoint]) -> List[GridResult]:
    results = []
    x_test, _ = dataset.split("test")
    codewords = model.encode(x_test) if len(grid) else None
    for point in grid:
        spec = _grid_quantizer(variant, point.b)
        value = evaluate_nmse(model, dataset, n=point.n, quantizer=spec)
        entry = GridResult(n=point.n, b=point.b, nmse_db=value)
        if point.b > 0:
            quantized = _with_quantizer(model, spec)
            if point.n > 0 and codewords.shape[0] > 0:
                entry.entropy_bits = empirical_entropy(quantized.quantizer.symbols(codewords[:, :point.n]), point.b)
            entry.feedback_bits = feedback_bits(point.n, point.b)
            entry.bit_width_saving = bit_width_saving(point.b)
        results.append(entry)
    return results


HISTORY_COLUMNS = ["phase", "epoch", "batch_loss", "train_loss", "val_loss"]


def _tag_phase(history: pd.DataFrame, phase: str) -> pd.DataFrame:
    tagged = history.copy()
    tagged.insert(0, "phase", phase)
    return tagged


def _history_records(history: pd.DataFrame) -> List[Dict[str, Union[float, str, None]]]:
    records = []
    for row in history.to_dict(orient="records"):
        records.append({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
    return records


def run_experiment(config: Union[ExperimentConfig, str, Path], output_dir: Union[str, Path]) -> ExperimentResult:
    """Train (or load) the configured model, evaluate its (n, b) grid and persist the results.

    Writes ``result.json``, ``history.csv`` and ``checkpoint.bin`` into ``output_dir``.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_file(config)
    output_dir = Path(output_dir)
    seed = resolve_seed(config.train.seed)
    logger.info(f"🚀 Running experiment '{config.name}' ({config.variant.name}, seed {seed})")

    if config.dataset_path is not None:
        path = Path(config.dataset_path)
        if not path.exists():
            logger.error(f"❌ Dataset {path} not found")
            raise FileNotFoundError(f"dataset {path} not found")
        dataset_config, samples = load_dataset(path)
    else:
        dataset_config = config.dataset
        samples = generate_dataset(dataset_config)
    dataset = prepare_dataset(samples, dataset_config, config.variant.family, config.test_fraction, seed)

    model = build_model(config.variant, seed)
    train_config = config.train.model_copy(update={"seed": seed})
    history = pd.DataFrame(columns=HISTORY_COLUMNS)
    if config.checkpoint is not None:
        _, state = load_checkpoint(config.checkpoint)
        model.load_state_dict(state)
    elif config.variant.quantizer.kind == QuantizerKind.MU_LAW:
        # Two phases: unquantized training, then decoder retraining on companded codewords
        plain = attach_pqb(model, QuantizerSpec())
        plain, first = train(plain, dataset, train_config.model_copy(update={"quantizer": None}))
        retrain = train_config.model_copy(update={"epochs": config.retrain_epochs, "quantizer": None})
        model, second = retrain_decoder(model, dataset, retrain)
        phases = [_tag_phase(first, "train")]
        if not second.empty:
            phases.append(_tag_phase(second, "retrain_decoder"))
        history = pd.concat(phases, ignore_index=True)
    else:
        model, history = train(model, dataset, train_config)
        history = _tag_phase(history, "train")

    grid = _evaluate_grid(model, dataset, config.variant, config.grid)
    stats = codeword_statistics(model, dataset)
    lengths = sorted({p.n for p in config.grid}) or [model.M]
    flops = [{"n": n, **fc_flops(model.config, n, model.changeable_rate).model_dump()} for n in lengths]

    result = ExperimentResult(
        name=config.name,
        model=model.name,
        family=config.variant.family,
        created_at=datetime.now(TIMEZONE).isoformat(),
        seed=seed,
        grid=grid,
        param_breakdown=count_params(model.config),
        flops=flops,
        codeword_mean=stats.mean.tolist(),
        codeword_sd=stats.sd.tolist(),
        history=_history_records(history),
        config=config.model_dump(mode="json"),
    )
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "result.json", "w") as f:
        json.dump(result.model_dump(mode="json"), f, indent=2)
    history.to_csv(output_dir / "history.csv", index=False)
    save_checkpoint(output_dir / "checkpoint.bin", model.state_dict(),
                    {"variant": config.variant.model_dump(mode="json"), "toolkit_version": TOOLKIT_VERSION})
    logger.info(f"✅ Experiment '{config.name}' saved to {output_dir}")
    return result


def load_result(path: Union[str, Path]) -> ExperimentResult:
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    with open(path, "r") as f:
        return ExperimentResult.model_validate(json.load(f))
