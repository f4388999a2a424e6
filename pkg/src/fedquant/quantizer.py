"""Unbiased stochastic vector quantization.

A vector y with ||y||_2 <= delta is compressed by quantizing its magnitude
on an (s_tilde+1)-point grid over [0, delta] and each normalized coordinate
|y_d|/||y||_2 on an (s+1)-point grid over [0, 1], with one sign bit per
coordinate.  Both scalar quantizers randomize between the two neighbouring
grid points so that the expectation equals the input.

All functions are pure; randomness comes in through an explicit
numpy Generator, so calls are thread-safe and reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Inputs may overshoot their declared range by accumulated float rounding.
# Overshoot up to this relative amount is clamped, anything larger is a bug
# in the caller's scaling and raises.
RANGE_SLACK = 1e-9


class RangeViolation(ValueError):
    """Quantizer input lies outside [0, delta] beyond float slack."""


class BitstreamError(ValueError):
    """Encoded bitstring is truncated or carries out-of-range fields."""


@dataclass(frozen=True)
class QuantizerParams:
    """Levels for magnitude (s_tilde) and coordinates (s), plus input range."""

    s_tilde: int
    s: int
    delta: float

    def __post_init__(self):
        if self.s_tilde < 1 or self.s < 1:
            raise ValueError("quantization levels must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class QuantConstants:
    """Error constants driving the quantization terms of the convergence bound."""

    q_tilde_s_s: float
    q_s: float


@dataclass(frozen=True)
class QuantizedVector:
    """Compressed representation: shared magnitude level + per-coordinate levels."""

    magnitude_level: int
    signs: np.ndarray        # int8, +-1, length D
    coord_levels: np.ndarray # int64 in [0, s], length D
    params: QuantizerParams
    dim: int

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return (
            self.magnitude_level == other.magnitude_level
            and self.dim == other.dim
            and self.params == other.params
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.coord_levels, other.coord_levels)
        )


def _clamp(u: float, delta: float) -> float:
    if u < 0.0 or u > delta * (1.0 + RANGE_SLACK):
        raise RangeViolation(f"input {u!r} outside [0, {delta!r}]")
    return min(u, delta)


def _cell(u: float, levels: int, delta: float):
    """Grid cell index j and probability of rounding up, for u in (the closure of) C_j."""
    x = levels * u / delta
    j = math.ceil(x)
    if j == 0:
        return 0, 0.0
    return j, x - (j - 1)


def scalar_support(u: float, levels: int, delta: float):
    """Exact outcome distribution of the scalar quantizer: list of (value, prob)."""
    u = _clamp(float(u), float(delta))
    j, p_up = _cell(u, levels, delta)
    if j == 0:
        return [(0.0, 1.0)]
    lo = (j - 1) * delta / levels
    hi = j * delta / levels
    if p_up >= 1.0:
        return [(hi, 1.0)]
    if p_up <= 0.0:
        return [(lo, 1.0)]
    return [(lo, 1.0 - p_up), (hi, p_up)]


def quantize_scalar(u: float, levels: int, delta: float, rng: np.random.Generator) -> float:
    """Randomized rounding of u in [0, delta] onto the (levels+1)-point grid.

    Returns (j-1)*delta/levels or j*delta/levels for the cell containing u,
    with probabilities chosen so the expectation is exactly u.
    """
    u = _clamp(float(u), float(delta))
    j, p_up = _cell(u, levels, delta)
    if j == 0:
        return 0.0
    if rng.random() < p_up:
        return j * delta / levels
    return (j - 1) * delta / levels


def _level_draw(u: float, levels: int, delta: float, rng: np.random.Generator) -> int:
    j, p_up = _cell(u, levels, delta)
    if j == 0:
        return 0
    return j if rng.random() < p_up else j - 1


def quantize_vector(y: np.ndarray, params: QuantizerParams, rng: np.random.Generator) -> QuantizedVector:
    """Quantize a D-vector with ||y||_2 <= params.delta.

    Stream discipline (stable): one uniform for the magnitude, then D uniforms
    for the coordinates, in coordinate order.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("y must be a non-empty 1-D vector")
    d = y.size
    norm = float(np.linalg.norm(y))
    norm = _clamp(norm, params.delta)

    mag_level = _level_draw(norm, params.s_tilde, params.delta, rng)
    signs = np.where(y < 0, -1, 1).astype(np.int8)
    if norm == 0.0:
        # all coordinates sit in the zero cell; skip drawing
        coord_levels = np.zeros(d, dtype=np.int64)
        return QuantizedVector(0, signs, coord_levels, params, d)

    u = np.abs(y) / norm
    x = params.s * np.minimum(u, 1.0)
    j = np.ceil(x)
    p_up = x - (j - 1)
    draws = rng.random(d)
    coord_levels = np.where(j == 0, 0, np.where(draws < p_up, j, j - 1)).astype(np.int64)
    return QuantizedVector(int(mag_level), signs, coord_levels, params, d)


def decode(qv: QuantizedVector) -> np.ndarray:
    """Reconstruct the real vector a QuantizedVector represents."""
    p = qv.params
    mag = p.delta * qv.magnitude_level / p.s_tilde
    return mag * qv.signs * (qv.coord_levels / p.s)


def bit_count(params: QuantizerParams, dim: int) -> float:
    """Message size log2(s_tilde+1) + D*(log2(s+1)+1), real-valued.

    This is the continuous-relaxation value used by the cost model; the
    on-the-wire size is encoded_bit_length.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return math.log2(params.s_tilde + 1) + dim * (math.log2(params.s + 1) + 1)


def message_bits(s_tilde: float, s: float, dim: int):
    """bit_count for real-valued (relaxed) level counts; accepts arrays."""
    s_tilde = np.asarray(s_tilde, dtype=float)
    s = np.asarray(s, dtype=float)
    return np.log2(s_tilde + 1.0) + dim * (np.log2(s + 1.0) + 1.0)


def encoded_bit_length(params: QuantizerParams, dim: int) -> int:
    """Exact on-the-wire size: ceil field widths, one sign bit per coordinate."""
    wm = max(1, math.ceil(math.log2(params.s_tilde + 1)))
    wc = max(1, math.ceil(math.log2(params.s + 1)))
    return wm + dim * (1 + wc)


def quant_constants(s_tilde: float, s: float, dim: int) -> QuantConstants:
    """Error constants; levels may be real-valued (the optimizer's relaxation)."""
    if s_tilde <= 0 or s <= 0:
        raise ValueError("levels must be positive")
    q_s = min(dim / s**2, math.sqrt(dim) / s)
    return QuantConstants(q_tilde_s_s=(1.0 + q_s) / (4.0 * s_tilde**2), q_s=q_s)


# ---------------------------------------------------------------------------
# bit-exact encoding
# ---------------------------------------------------------------------------
# Layout (stable): magnitude field, then per coordinate a sign bit ('1' = +1)
# followed by the level field; every field MSB first.


def encode_bits(qv: QuantizedVector) -> str:
    wm = max(1, math.ceil(math.log2(qv.params.s_tilde + 1)))
    wc = max(1, math.ceil(math.log2(qv.params.s + 1)))
    parts = [format(qv.magnitude_level, f"0{wm}b")]
    for sign, lev in zip(qv.signs, qv.coord_levels):
        parts.append("1" if sign > 0 else "0")
        parts.append(format(int(lev), f"0{wc}b"))
    return "".join(parts)


def decode_bits(bits: str, params: QuantizerParams, dim: int) -> QuantizedVector:
    wm = max(1, math.ceil(math.log2(params.s_tilde + 1)))
    wc = max(1, math.ceil(math.log2(params.s + 1)))
    expected = wm + dim * (1 + wc)
    if len(bits) != expected:
        raise BitstreamError(f"expected {expected} bits, got {len(bits)}")
    mag = int(bits[:wm], 2)
    if mag > params.s_tilde:
        raise BitstreamError(f"magnitude level {mag} exceeds {params.s_tilde}")
    signs = np.empty(dim, dtype=np.int8)
    levels = np.empty(dim, dtype=np.int64)
    pos = wm
    for d in range(dim):
        signs[d] = 1 if bits[pos] == "1" else -1
        lev = int(bits[pos + 1 : pos + 1 + wc], 2)
        if lev > params.s:
            raise BitstreamError(f"coordinate level {lev} exceeds {params.s}")
        levels[d] = lev
        pos += 1 + wc
    return QuantizedVector(mag, signs, levels, params, dim)


# ---------------------------------------------------------------------------
# vectorized Monte-Carlo sampling
# ---------------------------------------------------------------------------


def sample_quantized(y: np.ndarray, params: QuantizerParams, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw `size` independent decoded quantizations of a fixed y, shape (size, D).

    For fixed y every scalar quantizer is a two-point distribution, so a draw
    costs one uint32 threshold comparison per field.  Intended for the
    large-sample distribution checks; chunk at the call site for big D*size.
    """
    y = np.asarray(y, dtype=float)
    d = y.size
    norm = float(np.linalg.norm(y))
    norm = _clamp(norm, params.delta)
    if norm == 0.0:
        return np.zeros((size, d))

    jm, pm = _cell(norm, params.s_tilde, params.delta)
    mag_hi = jm * params.delta / params.s_tilde
    mag_lo = (jm - 1) * params.delta / params.s_tilde if jm > 0 else 0.0

    u = np.minimum(np.abs(y) / norm, 1.0)
    x = params.s * u
    j = np.ceil(x)
    p_up = np.where(j == 0, 0.0, x - (j - 1))
    hi = np.where(j == 0, 0.0, j / params.s)
    lo = np.where(j == 0, 0.0, (j - 1) / params.s)
    sign = np.where(y < 0, -1.0, 1.0)
    hi *= sign
    lo *= sign

    scale = 2.0**32
    thr_m = np.uint64(round(pm * scale))
    thr = np.minimum(np.round(p_up * scale), scale).astype(np.uint64)

    um = rng.integers(0, 2**32, size=size, dtype=np.uint32).astype(np.uint64)
    mags = np.where(um < thr_m, mag_hi, mag_lo)
    uc = rng.integers(0, 2**32, size=(size, d), dtype=np.uint32)
    coords = np.where(uc.astype(np.uint64) < thr[None, :], hi[None, :], lo[None, :])
    coords *= mags[:, None]
    return coords
