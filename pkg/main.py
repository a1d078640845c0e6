import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

from channel import DatasetConfig, Scenario, generate_dataset, load_dataset, save_dataset
from config import DATA_DIR, FULL_SCALE, RESULTS_DIR, RETRAIN_EPOCHS, TOOLKIT_VERSION, logger, resolve_seed
from errors import VarirateError
from harness import (
    TrainConfig, evaluate_nmse, load_result, prepare_dataset, retrain_decoder, run_experiment, train
)
from models import Family, ModelVariant, Scale, attach_pqb, build_model, build_csinetpro, build_dualnetsph
from netcore import count_params, load_checkpoint, save_checkpoint
from quant import (
    QuantizerKind, QuantizerSpec, dequantize, mu_law_compand, pqb_surrogate_gradient,
    quantize, soft_quantize, soft_quantize_derivative
)
from report import emit_report, render_parameter_table, render_storage_savings

DEFAULT_SCALE = "full" if FULL_SCALE else "toy"


def cli_errors(func):
    """Turn toolkit errors into a one-line message and a non-zero exit."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (VarirateError, ValidationError, FileNotFoundError) as e:
            logger.error(f"❌ {func.__name__}: {e}")
            raise click.ClickException(str(e))
    return wrapper


def _save_model(model, out: Path, meta: dict, history: pd.DataFrame) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", model.state_dict(),
                    {**meta, "variant": model.variant.model_dump(mode="json"), "toolkit_version": TOOLKIT_VERSION})
    history.to_csv(out / "history.csv", index=False)


def _load_model(checkpoint: str):
    meta, state = load_checkpoint(checkpoint)
    variant = ModelVariant.model_validate(meta["variant"])
    model = build_model(variant, meta.get("seed", 0))
    model.load_state_dict(state)
    return model, meta


def _prepare(data: str, family: Family, test_fraction: float, seed: int):
    dataset_config, samples = load_dataset(data)
    return prepare_dataset(samples, dataset_config, family, test_fraction, seed)


@click.group()
@click.version_option(TOOLKIT_VERSION, prog_name="varirate")
def cli():
    """Changeable-rate CSI feedback and codeword quantization toolkit."""


@cli.command("gen-data")
@click.option("--scale", type=click.Choice(["toy", "full"]), default=DEFAULT_SCALE, show_default=True)
@click.option("--scenario", type=click.Choice([s.value for s in Scenario]), default="indoor", show_default=True)
@click.option("--samples", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Dataset file (default under the data dir)")
@cli_errors
def gen_data(scale, scenario, samples, seed, workers, out):
    """Generate a synthetic downlink/uplink channel dataset."""
    config = DatasetConfig.preset(scale, scenario, samples, seed)
    out = Path(out) if out else Path(DATA_DIR) / f"{scenario}_{scale}_{samples}_seed{seed}.vrcd"
    save_dataset(out, generate_dataset(config, workers=workers), config)
    click.echo(str(out))


def _variant_options(func):
    options = [
        click.option("--family", type=click.Choice([f.value for f in Family]), required=True),
        click.option("--changeable/--fixed", default=True, show_default=True),
        click.option("--quantizer", "kind", type=click.Choice([k.value for k in QuantizerKind]), default="none"),
        click.option("--bits", type=int, default=5, show_default=True),
        click.option("--m", "M", type=int, default=None, help="Codeword capacity (family default when omitted)"),
        click.option("--scale", type=click.Choice(["toy", "full"]), default=DEFAULT_SCALE, show_default=True),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@cli.command("train")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@_variant_options
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-fraction", type=float, default=0.1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@cli_errors
def train_cmd(data, family, changeable, kind, bits, M, scale, epochs, batch_size, lr, seed, test_fraction, out):
    """Train a model and save checkpoint.bin and history.csv."""
    seed = resolve_seed(seed)
    variant = ModelVariant(family=family, changeable_rate=changeable, M=M, scale=scale,
                           quantizer=QuantizerSpec(kind=kind, bits=bits))
    overrides = {k: v for k, v in {"epochs": epochs, "batch_size": batch_size, "learning_rate": lr}.items()
                 if v is not None}
    config = TrainConfig.preset(scale, seed=seed, **overrides)
    dataset = _prepare(data, variant.family, test_fraction, seed)
    model, history = train(build_model(variant, seed), dataset, config)
    _save_model(model, Path(out), {"seed": seed, "test_fraction": test_fraction}, history)
    best = history.attrs["best_epoch"]
    click.echo(f"{model.name}: best validation loss {history['val_loss'].iloc[best]:.6f} (epoch {best})")


@cli.command("retrain-decoder")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--quantizer", "kind", type=click.Choice([k.value for k in QuantizerKind]), default="mu_law")
@click.option("--bits", type=int, default=5, show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@cli_errors
def retrain_decoder_cmd(data, checkpoint, kind, bits, epochs, out):
    """Retrain the decoder of a trained model on quantized codewords."""
    model, meta = _load_model(checkpoint)
    model = attach_pqb(model, QuantizerSpec(kind=kind, bits=bits))
    scale = model.variant.scale.value
    seed = resolve_seed(meta.get("seed", 0))
    config = TrainConfig.preset(scale, seed=seed, epochs=epochs if epochs is not None else RETRAIN_EPOCHS[scale])
    dataset = _prepare(data, model.variant.family, meta.get("test_fraction", 0.1), seed)
    model, history = retrain_decoder(model, dataset, config)
    _save_model(model, Path(out), meta, history)
    click.echo(f"{model.name}: decoder retrained for {config.epochs} epochs")


@cli.command("eval")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--n", "lengths", type=int, multiple=True, help="Kept lengths (default: M)")
@click.option("--unquantized", is_flag=True, help="Bypass the model's quantizer")
@cli_errors
def eval_cmd(data, checkpoint, lengths, unquantized):
    """Print NMSE (dB) on the test split as JSON."""
    model, meta = _load_model(checkpoint)
    dataset = _prepare(data, model.variant.family, meta.get("test_fraction", 0.1), resolve_seed(meta.get("seed", 0)))
    quantizer = QuantizerSpec() if unquantized else None
    results = {str(n): evaluate_nmse(model, dataset, n=n, quantizer=quantizer) for n in (lengths or (model.M,))}
    click.echo(json.dumps({"model": model.name, "nmse_db": results}, indent=2))


@cli.command("run")
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@cli_errors
def run_cmd(config_file, out):
    """Run an experiment file and persist result.json, history.csv and checkpoint.bin."""
    out = Path(out) if out else Path(RESULTS_DIR) / Path(config_file).stem
    result = run_experiment(config_file, out)
    click.echo(f"{result.model}: {len(result.grid)} grid points saved to {out}")


@cli.command("count-params")
@click.option("--model", "family", type=click.Choice([f.value for f in Family]), default="csinetpro")
@click.option("--m", "M", type=int, default=32, show_default=True)
@click.option("--scale", type=click.Choice(["toy", "full"]), default="full", show_default=True)
@click.option("--table", is_flag=True, help="Print the full accounting and storage tables instead")
@cli_errors
def count_params_cmd(family, M, scale, table):
    """Print the parameter breakdown of one network as JSON."""
    if table:
        click.echo(render_parameter_table())
        click.echo(render_storage_savings())
        return
    builder = build_csinetpro if family == Family.CSINETPRO.value else build_dualnetsph
    breakdown = count_params(builder(M, Scale(scale)))
    click.echo(json.dumps(breakdown.model_dump(), indent=2))


@cli.command("quantize-demo")
@click.option("--bits", type=int, default=3, show_default=True)
@click.option("--points", type=int, default=101, show_default=True)
@click.option("--a", type=float, default=None, help="Soft-to-hard sharpness")
@click.option("--mu", type=float, default=None, help="Mu-law coefficient")
def quantize_demo(bits, points, a, mu):
    """Print quantizer curves and surrogate gradients on [0, 1] as CSV."""
    spec = QuantizerSpec(bits=bits, **{k: v for k, v in {"a": a, "mu": mu}.items() if v is not None})
    y = np.linspace(0.0, 1.0, points)
    symbols = quantize(y, bits)
    frame = pd.DataFrame({
        "y": y,
        "symbol": symbols,
        "dequantized": dequantize(symbols, bits),
        "soft": soft_quantize(y, bits, spec.a),
        "soft_derivative": soft_quantize_derivative(y, bits, spec.a),
        "pqb_surrogate": pqb_surrogate_gradient(y, bits, spec.d, spec.C),
        "mu_law": mu_law_compand(y, spec.mu),
    })
    frame.to_csv(sys.stdout, index=False)


@cli.command("report")
@click.argument("result_dirs", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@cli_errors
def report_cmd(result_dirs, out):
    """Render tables for one or more experiment results."""
    report = emit_report([load_result(path) for path in result_dirs], out)
    click.echo(report.text)


if __name__ == "__main__":
    cli()
