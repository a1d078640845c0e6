import pytest
import numpy as np
from pydantic import ValidationError
from scipy.integrate import quad

from errors import BitstreamError, EmptyInputError, NormalizationError, QuantizerMismatchError
from netcore import gradient_check
from quant import (
    BUMP_NORMALIZER, CodewordQuantizer, QuantizedPayload, QuantizerSpec, bit_width_saving, dequantize,
    empirical_entropy, feedback_bits, fit_range, inverse_sigmoid_map, mu_law_compand, mu_law_expand,
    pack_bits, payload_size_bytes, pqb_surrogate_gradient, quantize, quantizer_forward, sigmoid_map,
    soft_quantize, unpack_bits
)


# --- Uniform quantizer ---

@pytest.mark.unit
@pytest.mark.parametrize("b", range(1, 9))
def test_quantization_error_is_bounded_by_half_a_cell(b):
    y = np.linspace(0.0, 1.0, 4097)
    symbols = quantize(y, b)
    assert symbols.min() >= 0 and symbols.max() <= 2 ** b - 1
    assert np.max(np.abs(dequantize(symbols, b) - y)) <= 2.0 ** -(b + 1) + 1e-12


@pytest.mark.unit
def test_quantize_edges_and_ties():
    assert quantize(0.0, 3) == 0
    assert quantize(1.0, 3) == 7
    # 2^2 * 0.5 - 0.5 = 1.5 rounds away from zero
    assert quantize(0.5, 2) == 2
    assert quantize(-0.3, 2) == 0
    assert quantize(1.7, 2) == 3


@pytest.mark.unit
def test_dequantize_returns_cell_centers():
    np.testing.assert_allclose(dequantize(np.arange(4), 2), [0.125, 0.375, 0.625, 0.875])
    with pytest.raises(BitstreamError):
        dequantize(np.array([4]), 2)


@pytest.mark.unit
def test_sigmoid_maps_are_inverse(rng):
    x = rng.standard_normal(100) * 4
    np.testing.assert_allclose(inverse_sigmoid_map(sigmoid_map(x)), x, atol=1e-8)
    assert np.isfinite(inverse_sigmoid_map(np.array([0.0, 1.0]))).all()


# --- Surrogate gradients ---

@pytest.mark.unit
@pytest.mark.parametrize("b", [2, 3, 4, 5])
def test_pqb_surrogate_integrates_to_one_per_cell(b):
    spec = QuantizerSpec(kind="pqb", bits=b)
    width = 1.0 / 2 ** b
    for k in (0, 2 ** b // 2, 2 ** b - 1):
        center = (k + 0.5) * width
        total, _ = quad(lambda t: float(pqb_surrogate_gradient(t, b, spec.d)), center - spec.d, center + spec.d,
                        epsabs=1e-13, epsrel=1e-12, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.unit
def test_pqb_surrogate_support_and_peak():
    b = 3
    spec = QuantizerSpec(kind="pqb", bits=b)
    boundaries = np.arange(2 ** b + 1) / 2 ** b
    np.testing.assert_array_equal(pqb_surrogate_gradient(boundaries[:-1], b, spec.d), 0.0)
    center = 0.5 / 2 ** b
    assert pqb_surrogate_gradient(center, b, spec.d) == pytest.approx(np.exp(-1.0) / (BUMP_NORMALIZER * spec.d))
    assert np.all(pqb_surrogate_gradient(np.linspace(0, 1, 1001), b, spec.d) >= 0.0)


@pytest.mark.unit
def test_pqb_surrogate_rejects_wide_bump():
    with pytest.raises(ValueError):
        pqb_surrogate_gradient(0.5, 2, d=0.2)
    with pytest.raises(ValueError):
        pqb_surrogate_gradient(0.5, 2, d=0.1, C=0.0)


@pytest.mark.unit
def test_bump_normalizer_value():
    assert BUMP_NORMALIZER == pytest.approx(0.443994, abs=1e-6)
    assert QuantizerSpec(bits=4).d == pytest.approx(0.5 / 32)


@pytest.mark.unit
def test_soft_staircase_sharpens_with_a():
    b = 3
    x = np.linspace(0.0, 1.0, 1000)
    hard = quantize(x, b)
    errors = [np.max(np.abs(soft_quantize(x, b, a) - hard)) for a in (1, 2, 4, 8, 16)]
    assert all(later < earlier for earlier, later in zip(errors, errors[1:]))
    midpoints = (np.arange(2 ** b) + 0.5) / 2 ** b
    np.testing.assert_allclose(soft_quantize(midpoints, b, 16), np.arange(2 ** b), atol=1e-6)


# --- Mu-law ---

@pytest.mark.unit
def test_mu_law_round_trip():
    x = np.linspace(0.0, 1.0, 1001)
    np.testing.assert_allclose(mu_law_expand(mu_law_compand(x)), x, atol=1e-9)


@pytest.mark.unit
def test_mu_law_known_value():
    assert mu_law_compand(0.01, 255) == pytest.approx(np.log(3.55) / np.log(256))
    assert mu_law_compand(0.01, 255) == pytest.approx(0.2285, abs=1e-3)
    assert mu_law_compand(0.0) == 0.0 and mu_law_compand(1.0) == pytest.approx(1.0)


# --- Bitstreams ---

@pytest.mark.unit
def test_pack_bits_msb_first():
    assert pack_bits([3, 1], 2) == bytes([0b11010000])
    assert pack_bits([], 5) == b""


@pytest.mark.unit
def test_unpack_bits_inverts_pack(rng):
    symbols = rng.integers(0, 32, size=37)
    np.testing.assert_array_equal(unpack_bits(pack_bits(symbols, 5), 37, 5), symbols)


@pytest.mark.unit
def test_bitstream_errors():
    with pytest.raises(BitstreamError):
        pack_bits([4], 2)
    with pytest.raises(BitstreamError):
        unpack_bits(b"\x00", 3, 5)
    with pytest.raises(BitstreamError):
        QuantizedPayload.from_bytes(b"\x01")
    with pytest.raises(BitstreamError):
        QuantizedPayload.from_bytes(QuantizedPayload.from_symbols([1, 2, 3], 4).to_bytes() + b"\x00")


@pytest.mark.unit
def test_payload_bytes_round_trip():
    payload = QuantizedPayload.from_symbols([5, 0, 31, 7], 5)
    raw = payload.to_bytes()
    assert len(raw) == payload_size_bytes(4, 5) == 3 + 3
    assert QuantizedPayload.from_bytes(raw) == payload
    np.testing.assert_array_equal(payload.symbols, [5, 0, 31, 7])


@pytest.mark.unit
def test_feedback_bit_counts():
    assert feedback_bits(32, 5) == 160
    assert bit_width_saving(5) == pytest.approx(0.84375)
    assert bit_width_saving(32) == 0.0


@pytest.mark.unit
def test_empirical_entropy():
    assert empirical_entropy(np.arange(4).repeat(25), 2) == pytest.approx(2.0)
    assert empirical_entropy(np.zeros(10, dtype=int), 3) == 0.0
    assert 0.0 < empirical_entropy([0, 0, 0, 1], 1) < 1.0
    with pytest.raises(EmptyInputError):
        empirical_entropy([], 4)


@pytest.mark.unit
def test_fit_range_errors():
    assert fit_range([[-1.0, 2.0], [0.5, 0.0]]) == (-1.0, 2.0)
    with pytest.raises(EmptyInputError):
        fit_range([])
    with pytest.raises(NormalizationError):
        fit_range([1.0, 1.0])


# --- Quantizer stage ---

@pytest.mark.unit
def test_quantizer_spec_validation():
    with pytest.raises(ValidationError):
        QuantizerSpec(bits=0)
    with pytest.raises(ValidationError):
        QuantizerSpec(kind="rounding")


@pytest.mark.unit
@pytest.mark.parametrize("kind", ["pqb", "passing_gradient", "soft_to_hard"])
def test_bounded_kinds_share_the_hard_eval_path(rng, kind):
    x = rng.standard_normal((4, 16))
    out = CodewordQuantizer(QuantizerSpec(kind=kind, bits=4)).forward(x)
    expected = inverse_sigmoid_map(dequantize(quantize(sigmoid_map(x), 4), 4))
    np.testing.assert_allclose(out, expected)


@pytest.mark.unit
def test_forward_matches_payload_reconstruction(rng):
    stage = CodewordQuantizer(QuantizerSpec(kind="pqb", bits=5))
    x = rng.standard_normal(24)
    payload = stage.encode(x)
    assert payload.n == 24 and payload.b == 5
    np.testing.assert_allclose(stage.decode(payload), stage.forward(x))


@pytest.mark.unit
def test_passing_gradient_backward_is_near_identity(rng):
    stage = CodewordQuantizer(QuantizerSpec(kind="passing_gradient", bits=8))
    x = rng.uniform(-2, 2, size=50)
    stage.forward(x, training=True)
    np.testing.assert_allclose(stage.backward(np.ones_like(x)), 1.0, atol=0.05)


@pytest.mark.unit
def test_pqb_backward_uses_bump_at_cell_center():
    b = 3
    spec = QuantizerSpec(kind="pqb", bits=b)
    stage = CodewordQuantizer(spec)
    center_y = np.array([2.5 / 2 ** b])
    x = inverse_sigmoid_map(center_y)
    stage.forward(x, training=True)
    expected = np.exp(-1.0) / (BUMP_NORMALIZER * spec.d * 2 ** b)
    np.testing.assert_allclose(stage.backward(np.ones(1)), expected, rtol=1e-6)

    boundary = inverse_sigmoid_map(np.array([3.0 / 2 ** b]))
    stage.forward(boundary, training=True)
    np.testing.assert_array_equal(stage.backward(np.ones(1)), 0.0)


@pytest.mark.unit
def test_soft_to_hard_passes_gradient_check(rng):
    stage = CodewordQuantizer(QuantizerSpec(kind="soft_to_hard", bits=2, a=2.0))
    report = gradient_check(stage, rng.standard_normal((3, 8)), epsilon=1e-5)
    assert report.skipped == []
    assert report.max_rel_error < 1e-4


@pytest.mark.unit
def test_mu_law_stage_is_straight_through_inside_range():
    stage = CodewordQuantizer(QuantizerSpec(kind="mu_law", bits=8), value_range=(-1.0, 1.0))
    x = np.array([-2.0, -0.5, 0.0, 0.7, 2.0])
    out = stage.forward(x, training=True)
    np.testing.assert_allclose(out[1:4], x[1:4], atol=0.05)
    np.testing.assert_array_equal(stage.backward(np.ones(5)), [0.0, 1.0, 1.0, 1.0, 0.0])


@pytest.mark.unit
def test_mu_law_stage_calibrates_on_first_use(rng):
    stage = CodewordQuantizer(QuantizerSpec(kind="mu_law", bits=6))
    assert not stage.calibrated
    x = rng.standard_normal(40)
    stage.forward(x)
    assert stage.calibrated
    np.testing.assert_allclose(stage.buffers["value_range"], [x.min(), x.max()])


@pytest.mark.unit
def test_backward_with_other_spec_raises(rng):
    stage = CodewordQuantizer(QuantizerSpec(kind="pqb", bits=4))
    stage.forward(rng.standard_normal(8), training=True)
    with pytest.raises(QuantizerMismatchError):
        stage.backward(np.ones(8), spec=QuantizerSpec(kind="pqb", bits=5))


@pytest.mark.unit
def test_decode_rejects_other_bit_width():
    stage = CodewordQuantizer(QuantizerSpec(kind="pqb", bits=5))
    with pytest.raises(QuantizerMismatchError):
        stage.decode(QuantizedPayload.from_symbols([1, 2], 4))


@pytest.mark.unit
def test_quantizer_forward_helper(rng):
    values = rng.standard_normal(10)
    payload, rebuilt = quantizer_forward(values, QuantizerSpec())
    assert payload is None
    np.testing.assert_array_equal(rebuilt, values)

    payload, rebuilt = quantizer_forward(values, QuantizerSpec(kind="pqb", bits=6))
    assert len(payload.to_bytes()) == payload_size_bytes(10, 6)
    assert np.max(np.abs(sigmoid_map(rebuilt) - sigmoid_map(values))) <= 2.0 ** -7 + 1e-12
