import pytest
import numpy as np
from pydantic import ValidationError

from errors import AuxiliaryInputError, CodewordLengthError, QuantizerMismatchError
from models import (
    Family, ModelVariant, Scale, attach_focu, attach_pqb, build_csinetpro, build_dualnetsph, build_model,
    fc_flops, parameter_table, storage_savings
)
from netcore import LayerKind, count_params, layer_param_count, load_checkpoint, save_checkpoint
from quant import QuantizerSpec

CSINETPRO_TABLE = {
    32: (75654, 77606),
    64: (141222, 143142),
    128: (272358, 274214),
    256: (534630, 536358),
    512: (1059174, 1060646),
}
DUALNETSPH_TABLE = {
    16: (25505, 27233),
    32: (41905, 43617),
    64: (74705, 76385),
    128: (140305, 141921),
    256: (271505, 272993),
}


# --- Parameter accounting ---

@pytest.mark.unit
@pytest.mark.parametrize("M, expected", CSINETPRO_TABLE.items())
def test_csinetpro_parameter_counts(M, expected):
    breakdown = count_params(build_csinetpro(M, Scale.FULL))
    assert (breakdown.encoder_total, breakdown.decoder_total) == expected


@pytest.mark.unit
@pytest.mark.parametrize("M, expected", DUALNETSPH_TABLE.items())
def test_dualnetsph_parameter_counts(M, expected):
    breakdown = count_params(build_dualnetsph(M, Scale.FULL))
    assert (breakdown.encoder_total, breakdown.decoder_total) == expected


@pytest.mark.unit
def test_changeable_rate_totals():
    assert count_params(build_csinetpro(512, Scale.FULL)).total == 2119820
    assert count_params(build_dualnetsph(256, Scale.FULL)).total == 544498


@pytest.mark.unit
def test_decoder_first_conv_sees_uplink_channel():
    config = build_dualnetsph(16, Scale.FULL)
    first_conv = next(s for s in config.decoder if s.kind == LayerKind.CONV2D)
    assert first_conv.in_channels == 2
    assert layer_param_count(first_conv) == 1584
    assert config.auxiliary_shape == (1, 32, 32)


@pytest.mark.unit
def test_batch_norm_placement():
    config = build_csinetpro(32, Scale.FULL)
    assert sum(s.kind == LayerKind.BATCH_NORM for s in config.encoder) == 4
    assert sum(s.kind == LayerKind.BATCH_NORM for s in config.decoder) == 3
    assert config.decoder[-1].activation.value == "sigmoid"


@pytest.mark.unit
def test_parameter_table_rows():
    rows = parameter_table(Family.CSINETPRO)
    assert [r["M"] for r in rows] == [32, 64, 128, 256, 512]
    assert all(r["total"] == r["encoder"] + r["decoder"] for r in rows)


@pytest.mark.unit
def test_storage_savings_csinetpro():
    s = storage_savings(Family.CSINETPRO)
    assert s.fixed_total == 4175004
    assert s.changeable_total == 2119820
    assert 100 * s.reduction_encoder == pytest.approx(49.152, abs=1e-3)
    assert (s.fixed_decoder, s.changeable_decoder) == (2091966, 1060646)
    assert s.reduction_decoder == 1.0 - 1060646 / 2091966
    assert 100 * s.reduction_decoder == pytest.approx(49.29908, abs=1e-5)
    # published to one decimal
    assert round(100 * s.reduction_decoder, 1) == 49.3
    assert 100 * s.reduction_total == pytest.approx(49.226, abs=1e-3)


@pytest.mark.unit
def test_storage_savings_dualnetsph():
    s = storage_savings(Family.DUALNETSPH)
    assert s.fixed_total == 1116074
    assert s.changeable_total == 544498
    assert 100 * s.reduction_encoder == pytest.approx(50.985, abs=1e-3)
    assert 100 * s.reduction_decoder == pytest.approx(51.438, abs=1e-3)
    assert 100 * s.reduction_total == pytest.approx(51.213, abs=1e-3)


# --- FLOPs ---

@pytest.mark.unit
@pytest.mark.parametrize("L", [32, 64, 256, 512])
def test_fc_flops_match_between_changeable_and_fixed(L):
    changeable = fc_flops(build_csinetpro(512, Scale.FULL), L, changeable_rate=True)
    fixed = fc_flops(build_csinetpro(L, Scale.FULL), L, changeable_rate=False)
    assert changeable == fixed
    assert changeable.ue == 4 * 32 * 32 * L
    assert changeable.bs == 4 * 32 * 32 * L


@pytest.mark.unit
def test_fc_flops_rejects_bad_lengths():
    config = build_dualnetsph(64, Scale.FULL)
    with pytest.raises(CodewordLengthError):
        fc_flops(config, 65, changeable_rate=True)
    with pytest.raises(CodewordLengthError):
        fc_flops(config, 32, changeable_rate=False)
    assert fc_flops(config, 0, changeable_rate=True).ue == 0


# --- Variants ---

@pytest.mark.unit
def test_variant_names():
    assert ModelVariant(family="csinetpro").name == "CsiNetPro"
    assert ModelVariant(family="csinetpro", changeable_rate=True, quantizer=QuantizerSpec(kind="pqb")).name == \
        "CH-CsiNetPro-PQB"
    assert ModelVariant(family="dualnetsph", changeable_rate=True,
                        quantizer=QuantizerSpec(kind="mu_law")).name == "CH-DualNetSph-MuLaw"


@pytest.mark.unit
def test_variant_codeword_length_defaults_and_limits():
    assert ModelVariant(family="csinetpro").codeword_length == 64
    assert ModelVariant(family="dualnetsph", scale="full").codeword_length == 256
    with pytest.raises(ValidationError):
        ModelVariant(family="dualnetsph", scale="full", M=512)
    with pytest.raises(CodewordLengthError):
        build_csinetpro(0)


# --- Feedback model ---

@pytest.mark.unit
def test_runtime_parameters_match_accounting():
    model = build_model(ModelVariant(family="dualnetsph", M=8), seed=1)
    breakdown = count_params(model.config)
    assert model.encoder.runtime_param_count() == breakdown.runtime_encoder_total
    assert model.decoder.runtime_param_count() == breakdown.runtime_decoder_total


@pytest.mark.unit
def test_build_model_is_seed_deterministic():
    variant = ModelVariant(family="csinetpro", M=16)
    a, b = build_model(variant, seed=4), build_model(variant, seed=4)
    for key, value in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[key], value)


@pytest.mark.unit
def test_forward_shapes(toy_csinetpro_data, toy_dualnetsph_data):
    model = build_model(ModelVariant(family="csinetpro", changeable_rate=True, M=16))
    x = toy_csinetpro_data.x[:3]
    assert model.forward(x, lengths=8).shape == x.shape
    assert model.encode(x).shape == (3, 16)

    dual = build_model(ModelVariant(family="dualnetsph", M=8))
    x, aux = toy_dualnetsph_data.x[:3], toy_dualnetsph_data.aux[:3]
    assert dual.forward(x, aux=aux).shape == x.shape
    with pytest.raises(AuxiliaryInputError):
        dual.forward(x)


@pytest.mark.unit
def test_fixed_rate_model_rejects_shorter_lengths(toy_csinetpro_data):
    model = build_model(ModelVariant(family="csinetpro", M=16))
    x = toy_csinetpro_data.x[:2]
    model.forward(x, lengths=16)
    with pytest.raises(CodewordLengthError):
        model.forward(x, lengths=8)


@pytest.mark.unit
def test_zero_length_output_does_not_depend_on_input(toy_csinetpro_data):
    model = build_model(ModelVariant(family="csinetpro", changeable_rate=True, M=16))
    a = model.forward(toy_csinetpro_data.x[:1], lengths=0)
    b = model.forward(toy_csinetpro_data.x[1:2], lengths=0)
    np.testing.assert_array_equal(a, b)


@pytest.mark.unit
def test_dropped_entries_get_no_gradient(toy_csinetpro_data):
    model = build_model(ModelVariant(family="csinetpro", changeable_rate=True, M=16))
    x = toy_csinetpro_data.x[:4]
    out = model.forward(x, lengths=np.zeros(4, dtype=int), training=True)
    model.zero_grad()
    model.backward(out - x)
    grads = model.gradients()
    assert all(np.all(g == 0) for k, g in grads.items() if k.startswith("encoder."))
    assert any(np.any(g != 0) for k, g in grads.items() if k.startswith("decoder."))


@pytest.mark.unit
def test_payload_path_matches_forward(toy_csinetpro_data):
    model = build_model(ModelVariant(family="csinetpro", changeable_rate=True, M=16,
                                     quantizer=QuantizerSpec(kind="pqb", bits=4)))
    x = toy_csinetpro_data.x[:3]
    payloads = model.feedback_payloads(x, 6)
    assert all(p.n == 6 and p.b == 4 for p in payloads)
    np.testing.assert_allclose(model.reconstruct_from_payloads(payloads), model.forward(x, lengths=6), rtol=1e-6)


@pytest.mark.unit
def test_feedback_payloads_need_a_quantizer(toy_csinetpro_data):
    model = build_model(ModelVariant(family="csinetpro", changeable_rate=True, M=16))
    with pytest.raises(QuantizerMismatchError):
        model.feedback_payloads(toy_csinetpro_data.x[:1], 4)


@pytest.mark.unit
def test_attach_focu_shares_parameters():
    model = build_model(ModelVariant(family="csinetpro", M=16))
    changeable = attach_focu(model)
    assert changeable.changeable_rate and not model.changeable_rate
    assert changeable.name == "CH-CsiNetPro"
    for key, value in model.parameters().items():
        assert changeable.parameters()[key] is value


@pytest.mark.unit
def test_attach_focu_at_full_length_matches_fixed_model(toy_csinetpro_data):
    model = build_model(ModelVariant(family="csinetpro", M=16), seed=5)
    changeable = attach_focu(model)
    x = toy_csinetpro_data.x[:4]
    expected = model.forward(x)
    assert changeable.forward(x, lengths=16).tobytes() == expected.tobytes()
    assert changeable.forward(x, lengths=np.full(4, 16)).tobytes() == expected.tobytes()


@pytest.mark.unit
@pytest.mark.parametrize("changeable_rate", [False, True])
def test_attach_unquantized_stage_leaves_outputs_unchanged(toy_csinetpro_data, changeable_rate):
    model = build_model(ModelVariant(family="csinetpro", changeable_rate=changeable_rate, M=16), seed=5)
    view = attach_pqb(model, QuantizerSpec())
    x = toy_csinetpro_data.x[:4]
    lengths = np.array([0, 5, 11, 16]) if changeable_rate else None
    assert view.forward(x, lengths=lengths).tobytes() == model.forward(x, lengths=lengths).tobytes()


@pytest.mark.unit
def test_attach_pqb_rules():
    model = build_model(ModelVariant(family="csinetpro", M=16))
    quantized = attach_pqb(model, QuantizerSpec(kind="pqb", bits=3))
    assert quantized.name == "CsiNetPro-PQB"
    assert attach_pqb(quantized, QuantizerSpec(kind="pqb", bits=5)).quantizer_spec.bits == 5
    assert attach_pqb(quantized, QuantizerSpec()).name == "CsiNetPro"
    with pytest.raises(QuantizerMismatchError):
        attach_pqb(quantized, QuantizerSpec(kind="mu_law"))


@pytest.mark.unit
def test_checkpoint_keeps_quantizer_range(tmp_path, toy_csinetpro_data):
    variant = ModelVariant(family="csinetpro", changeable_rate=True, M=16, quantizer=QuantizerSpec(kind="mu_law"))
    model = build_model(variant, seed=3)
    lo, hi = model.quantizer.calibrate(model.encode(toy_csinetpro_data.x))
    # checkpoints store float32
    model.quantizer.buffers["value_range"] = np.array([lo, hi], dtype=np.float32).astype(np.float64)
    path = save_checkpoint(tmp_path / "model.bin", model.state_dict(), {})

    restored = build_model(variant, seed=8)
    restored.load_state_dict(load_checkpoint(path)[1])
    assert restored.quantizer.calibrated
    np.testing.assert_array_equal(restored.quantizer.buffers["value_range"], model.quantizer.buffers["value_range"])
    x = toy_csinetpro_data.x[:2]
    np.testing.assert_array_equal(restored.forward(x, lengths=16), model.forward(x, lengths=16))
