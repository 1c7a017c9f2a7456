import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatstego.bitcodec import (
    MODE_FLOATBITS,
    BitPlan,
    QuantParams,
    bits_to_float,
    dequantize,
    embed_cloud,
    embed_coeff,
    extract_cloud,
    extract_coeff,
    fit_quant_params,
    float_bits,
    freq_order,
    paper_parity_plan,
    quantize,
)
from splatstego.errors import (
    IndexOutOfRangeError,
    OutOfRangeError,
    ShapeMismatchError,
    ShiftOverflowError,
)

from conftest import random_cloud

QP = QuantParams()  # c_min=-8, delta=2^-20, gamma=24
PLAN = BitPlan()    # k=13, n=16, gamma=24


def test_freq_order_values():
    assert freq_order(0) == 0
    assert freq_order(3) == 1
    assert freq_order(15) == 3
    # against a float-sqrt oracle
    for j in range(16):
        assert freq_order(j) == int(math.floor(math.sqrt(j)))
    with pytest.raises(IndexOutOfRangeError):
        freq_order(16)
    with pytest.raises(IndexOutOfRangeError):
        freq_order(-1)


def test_quantize_examples():
    assert quantize(QP.c_min, QP) == 0
    assert quantize(0.0, QP) == 8 * 2 ** 20 == 8388608
    assert quantize(QP.c_min + 5 * QP.delta, QP) == 5
    with pytest.raises(OutOfRangeError):
        quantize(8.0, QP)
    with pytest.raises(OutOfRangeError):
        quantize(-8.0 - QP.delta, QP)


def test_quantize_round_half_to_even():
    assert quantize(QP.c_min + 2.5 * QP.delta, QP) == 2
    assert quantize(QP.c_min + 3.5 * QP.delta, QP) == 4


def test_dequantize_examples():
    assert dequantize(0, QP) == QP.c_min
    top = dequantize(2 ** 24 - 1, QP)
    assert top == pytest.approx(7.999999046325684, abs=1e-12)


def test_quant_roundtrip_exact_through_float32():
    rng = np.random.default_rng(0)
    q = rng.integers(0, 2 ** 24, size=100_000, dtype=np.uint64)
    c = dequantize(q, QP)
    c32 = c.astype(np.float32)
    assert np.array_equal(c32.astype(np.float64), c)  # float32 storage is lossless
    assert np.array_equal(quantize(c32.astype(np.float64), QP), q)


def test_quant_params_validation():
    with pytest.raises(OutOfRangeError):
        QuantParams(delta=3e-7)      # not a power of two
    with pytest.raises(OutOfRangeError):
        QuantParams(gamma_bits=16)


def test_embed_extract_worked_example():
    plan = BitPlan(k=13, n=16, gamma_bits=24)
    stego = embed_coeff(0xABCDEF, 0x123456, 15, plan)   # shift = 13+3 = 16
    assert stego == 0xAB1234
    est = extract_coeff(stego, 15, plan)
    assert est == 0x123400
    assert abs(est - 0x123456) <= 2 ** 8 - 1


def test_embed_zero_hidden_nullifies_low_bits():
    plan = BitPlan(k=13)
    for j in (0, 7, 15):
        shift = plan.shift(j)
        assert embed_coeff(0xFFFFFF, 0, j, plan) == (0xFFFFFF >> shift) << shift


def test_shift_overflow():
    plan = BitPlan(k=24, n=16, gamma_bits=24)
    with pytest.raises(ShiftOverflowError):
        embed_coeff(1, 1, 0, plan)
    with pytest.raises(ShiftOverflowError):
        extract_coeff(1, 5, plan)
    with pytest.raises(ShiftOverflowError):
        plan.validate()


def test_monotone_capacity():
    shifts = [PLAN.shift(j) for j in range(16)]
    assert shifts == sorted(shifts)
    assert shifts[0] == 13 and shifts[15] == 16


@settings(max_examples=200, deadline=None)
@given(c=st.integers(0, 255), h=st.integers(0, 255), j=st.integers(0, 15),
       k=st.integers(1, 4))
def test_roundtrip_property_gamma8(c, h, j, k):
    plan = BitPlan(k=k, n=16, gamma_bits=8)
    shift = plan.shift(j)
    est = extract_coeff(embed_coeff(c, h, j, plan), j, plan)
    kept = (h >> (8 - shift)) << (8 - shift)
    assert est == kept


def test_float_bits_roundtrip():
    vals = np.array([0.0, -1.5, 3.25, 1e-8], dtype=np.float32)
    assert np.array_equal(bits_to_float(float_bits(vals)), vals)


def test_paper_parity_plan():
    plan = paper_parity_plan()
    assert plan.k == 17 and plan.gamma_bits == 32 and plan.mode == MODE_FLOATBITS
    plan.validate()


def test_fit_quant_params():
    qp = fit_quant_params(np.array([1.0, -7.5]), gamma_bits=24)
    assert qp.c_min == -8.0 and qp.delta == 2.0 ** -20
    qp = fit_quant_params(np.array([9.5]), gamma_bits=24)
    assert qp.c_min == -16.0 and qp.delta == 2.0 ** -19
    qp = fit_quant_params(np.array([8.0]), gamma_bits=24)  # 8.0 itself not representable
    assert qp.c_min == -16.0


class TestEmbedCloud:
    def setup_method(self):
        self.public = random_cloud(n=6, seed=11, sh_scale=0.6)
        rng = np.random.default_rng(12)
        self.hidden = rng.normal(scale=0.6, size=(6, 16, 3)).astype(np.float32)
        self.stego = embed_cloud(self.public, self.hidden, PLAN, QP)

    def test_carrier_preservation(self):
        for name in ("positions", "rotations", "log_scales", "opacity_logits"):
            assert np.array_equal(getattr(self.stego, name), getattr(self.public, name))

    def test_perturbation_bound(self):
        diff = np.abs(self.stego.sh.astype(np.float64) - self.public.sh.astype(np.float64))
        for j in range(16):
            bound = 2.0 ** PLAN.shift(j) * QP.delta
            assert np.all(diff[:, j, :] <= bound)

    def test_extraction_error_bound(self):
        est = extract_cloud(self.stego, PLAN, QP)
        err = np.abs(est.astype(np.float64) - self.hidden.astype(np.float64))
        for m in range(16):
            # hidden index m is carried by stego slot n-1-m
            shift = PLAN.shift(15 - m)
            bound = 2.0 ** (24 - shift) * QP.delta
            assert np.all(err[:, m, :] <= bound), (m, err[:, m, :].max(), bound)

    def test_all_zero_hidden(self):
        est = extract_cloud(embed_cloud(self.public, np.zeros((6, 16, 3), np.float32),
                                        PLAN, QP), PLAN, QP)
        assert np.allclose(est, 0.0, atol=QP.delta)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            embed_cloud(self.public, self.hidden[:3], PLAN, QP)

    def test_out_of_range(self):
        bad = self.hidden.copy()
        bad[0, 0, 0] = 100.0
        with pytest.raises(OutOfRangeError):
            embed_cloud(self.public, bad, PLAN, QP)

    def test_wrong_key_decorrelates(self):
        est_ok = extract_cloud(self.stego, PLAN, QP)
        err_ok = np.abs(est_ok - self.hidden).mean()
        for dk in (-1, 1):
            wrong = BitPlan(k=PLAN.k + dk)
            est_bad = extract_cloud(self.stego, wrong, QP)
            err_bad = np.abs(est_bad - self.hidden).mean()
            assert err_bad >= 10 * max(err_ok, 2.0 ** (24 - 16) * QP.delta)

    def test_float_bit_pattern_mode_roundtrip(self):
        plan = paper_parity_plan()
        stego = embed_cloud(self.public, self.hidden, plan)
        est = extract_cloud(stego, plan)
        # top shift bits of the hidden pattern survive
        for j in range(16):
            shift = plan.shift(j)
            kept = (float_bits(self.hidden[:, 15 - j, :]) >> np.uint64(32 - shift)) << np.uint64(32 - shift)
            assert np.array_equal(float_bits(est[:, 15 - j, :]), kept)

    def test_parallel_schedule_independence(self):
        # per-primitive independence: embedding a sub-cloud matches the slice
        sub = embed_cloud(self.public.select(np.array([2, 4])),
                          self.hidden[[2, 4]], PLAN, QP)
        assert np.array_equal(sub.sh, self.stego.sh[[2, 4]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_embed_extract_cloud_property(seed):
    rng = np.random.default_rng(seed)
    public = random_cloud(n=3, seed=seed)
    hidden = rng.normal(scale=1.0, size=(3, 16, 3)).astype(np.float32)
    stego = embed_cloud(public, hidden, PLAN, QP)
    est = extract_cloud(stego, PLAN, QP)
    err = np.abs(est.astype(np.float64) - hidden.astype(np.float64))
    bounds = np.array([2.0 ** (24 - PLAN.shift(15 - m)) * QP.delta for m in range(16)])
    assert np.all(err <= bounds[None, :, None])
