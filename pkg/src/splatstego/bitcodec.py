"""Quantization and importance-graded bit-plane embedding for SH coefficients.

Carrier coefficient j donates its low k + floor(sqrt(j)) bits; the hidden
coefficient stored there is index n-1-j, so the hidden DC term (most
important) lands in the highest-order carrier slot (least perceptible, most
bits). Integers live on a power-of-two lattice so that 24-bit values survive
float32 PLY storage exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    IndexOutOfRangeError,
    OutOfRangeError,
    ShapeMismatchError,
    ShiftOverflowError,
)
from .gaussians import GaussianCloud

MODE_QUANTIZED = "quantized-integer"
MODE_FLOATBITS = "float-bit-pattern"


@dataclass(frozen=True)
class QuantParams:
    """Fixed-point lattice: value = c_min + q * delta, q in [0, 2**gamma_bits)."""

    c_min: float = -8.0
    delta: float = 2.0 ** -20
    gamma_bits: int = 24

    def __post_init__(self):
        m, _ = math.frexp(self.delta)
        if m != 0.5:
            raise OutOfRangeError(f"delta must be a power of two, got {self.delta}")
        if self.gamma_bits not in (24, 32):
            raise OutOfRangeError(f"gamma_bits must be 24 or 32, got {self.gamma_bits}")

    @property
    def c_max(self) -> float:
        # exclusive upper bound of the representable range
        return self.c_min + self.delta * 2.0 ** self.gamma_bits


@dataclass(frozen=True)
class BitPlan:
    """Shift schedule of the codec.

    graded=False is the uniform-shift ablation: every coefficient donates
    exactly k bits instead of k + floor(sqrt(j)).
    """

    k: int = 13
    n: int = 16
    gamma_bits: int = 24
    mode: str = MODE_QUANTIZED
    graded: bool = True

    def __post_init__(self):
        if self.mode not in (MODE_QUANTIZED, MODE_FLOATBITS):
            raise OutOfRangeError(f"unknown bit-plan mode {self.mode!r}")
        root = math.isqrt(self.n)
        if root * root != self.n:
            raise OutOfRangeError(f"n must be a perfect square, got {self.n}")

    def shift(self, j: int) -> int:
        return self.k + (freq_order(j, self.n) if self.graded else 0)

    def validate(self) -> "BitPlan":
        for j in range(self.n):
            if self.shift(j) >= self.gamma_bits:
                raise ShiftOverflowError(
                    f"shift {self.shift(j)} at j={j} >= gamma_bits {self.gamma_bits}"
                )
        return self


def paper_parity_plan() -> BitPlan:
    """Bit plan operating directly on IEEE-754 float32 bit patterns (k=17)."""
    return BitPlan(k=17, n=16, gamma_bits=32, mode=MODE_FLOATBITS)


def freq_order(j: int, n: int = 16) -> int:
    """floor(sqrt(j)): frequency order of coefficient index j."""
    if not 0 <= j < n:
        raise IndexOutOfRangeError(f"coefficient index {j} outside [0, {n})")
    return math.isqrt(j)


def quantize(c, qp: QuantParams):
    """Map coefficients onto the lattice, round-half-to-even.

    Raises OutOfRangeError if any value falls outside [c_min, c_max); the
    rounding edge at the top of the range is clamped to 2**gamma - 1.
    """
    arr = np.asarray(c, dtype=np.float64)
    if np.any(arr < qp.c_min) or np.any(arr >= qp.c_max):
        raise OutOfRangeError(
            f"coefficient outside [{qp.c_min}, {qp.c_max}); widen the quantization range"
        )
    q = np.rint((arr - qp.c_min) / qp.delta)
    q = np.minimum(q, 2.0 ** qp.gamma_bits - 1).astype(np.uint64)
    return int(q) if np.ndim(c) == 0 else q


def dequantize(q, qp: QuantParams):
    """c_min + q * delta. Exact in float64, and exact in float32 for gamma=24."""
    arr = np.asarray(q, dtype=np.float64)
    out = qp.c_min + arr * qp.delta
    return float(out) if np.ndim(q) == 0 else out


def float_bits(c) -> np.ndarray:
    """IEEE-754 bit pattern of float32 values as unsigned integers."""
    return np.asarray(c, dtype=np.float32).view(np.uint32).astype(np.uint64)


def bits_to_float(q) -> np.ndarray:
    return np.asarray(q, dtype=np.uint64).astype(np.uint32).view(np.float32)


def _check_embed_args(j: int, plan: BitPlan) -> int:
    if not 0 <= j < plan.n:
        raise IndexOutOfRangeError(f"coefficient index {j} outside [0, {plan.n})")
    shift = plan.shift(j)
    if shift >= plan.gamma_bits:
        raise ShiftOverflowError(f"shift {shift} >= gamma_bits {plan.gamma_bits}")
    return shift


def embed_coeff(c_q: int, hidden_q: int, j: int, plan: BitPlan) -> int:
    """Nullify the low bits of the carrier and XOR in the hidden top bits."""
    shift = _check_embed_args(j, plan)
    low_mask = (1 << shift) - 1
    return (c_q & ~low_mask) ^ (hidden_q >> (plan.gamma_bits - shift))


def extract_coeff(stego_q: int, j: int, plan: BitPlan) -> int:
    """Isolate the embedded low bits and restore their magnitude."""
    shift = _check_embed_args(j, plan)
    low_mask = (1 << shift) - 1
    return (stego_q & low_mask) << (plan.gamma_bits - shift)


def fit_quant_params(*coeff_arrays, gamma_bits: int = 24, min_half_range: float = 8.0) -> QuantParams:
    """Smallest power-of-two range [-R, R) covering every given coefficient.

    The returned lattice keeps 2**gamma quanta across the range, so widening
    doubles delta. Used by the embedding pipeline before quantization; the
    fitted parameters travel inside the key.
    """
    peak = 0.0
    for a in coeff_arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.size:
            peak = max(peak, float(np.max(np.abs(a))))
    half = min_half_range
    # strict upper bound: c == R itself is not representable
    while peak >= half:
        half *= 2.0
    return QuantParams(c_min=-half, delta=half * 2.0 ** (1 - gamma_bits), gamma_bits=gamma_bits)


def _sh_to_ints(sh: np.ndarray, plan: BitPlan, qp: QuantParams | None) -> np.ndarray:
    if plan.mode == MODE_FLOATBITS:
        return float_bits(sh)
    if qp is None:
        raise OutOfRangeError("quantized-integer mode requires QuantParams")
    return quantize(sh.astype(np.float64), qp)


def _ints_to_sh(q: np.ndarray, plan: BitPlan, qp: QuantParams | None) -> np.ndarray:
    if plan.mode == MODE_FLOATBITS:
        return bits_to_float(q)
    return dequantize(q, qp).astype(np.float32)


def embed_cloud(
    public: GaussianCloud,
    hidden_sh: np.ndarray,
    plan: BitPlan,
    qp: QuantParams | None = None,
) -> GaussianCloud:
    """Embed a hidden (N, 16, 3) coefficient block into a carrier cloud's SH.

    Enforces the reversed importance order: carrier slot j receives hidden
    coefficient n-1-j. Every attribute other than sh is byte-identical to
    the carrier.
    """
    hidden_sh = np.asarray(hidden_sh, dtype=np.float32)
    if hidden_sh.shape != public.sh.shape:
        raise ShapeMismatchError(
            f"hidden coefficients {hidden_sh.shape} do not match carrier {public.sh.shape}"
        )
    plan.validate()
    carrier_q = _sh_to_ints(public.sh, plan, qp)
    hidden_q = _sh_to_ints(hidden_sh, plan, qp)
    stego_q = np.empty_like(carrier_q)
    n = plan.n
    for j in range(n):
        shift = plan.shift(j)
        low_mask = np.uint64((1 << shift) - 1)
        down = np.uint64(plan.gamma_bits - shift)
        stego_q[:, j, :] = (carrier_q[:, j, :] & ~low_mask) ^ (hidden_q[:, n - 1 - j, :] >> down)
    out = public.copy()
    out.sh = _ints_to_sh(stego_q, plan, qp)
    return out


def extract_cloud(
    stego: GaussianCloud,
    plan: BitPlan,
    qp: QuantParams | None = None,
) -> np.ndarray:
    """Recover the (N, 16, 3) hidden coefficient estimate from a stego cloud."""
    plan.validate()
    stego_q = _sh_to_ints(stego.sh, plan, qp)
    est_q = np.empty_like(stego_q)
    n = plan.n
    for j in range(n):
        shift = plan.shift(j)
        low_mask = np.uint64((1 << shift) - 1)
        up = np.uint64(plan.gamma_bits - shift)
        est_q[:, n - 1 - j, :] = (stego_q[:, j, :] & low_mask) << up
    return _ints_to_sh(est_q, plan, qp)
