"""Wireless corruption of model parameters.

Additive white Gaussian noise whose variance follows from a model SNR,
layer-wise uniform quantization, and the data-weighted aggregation done
at the parameter server.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, DegenerateModelError

NO_NOISE = math.inf


@dataclass(frozen=True)
class LinkSpec:
    snr_db: float = NO_NOISE
    quant_bits: int | None = None
    stream: str = "link"

    def __post_init__(self):
        if self.quant_bits is not None and not 1 <= int(self.quant_bits) <= 32:
            raise ConfigurationError(f"quant_bits must be in [1, 32] or None, got {self.quant_bits}")


@dataclass(frozen=True)
class NoiseBudget:
    uplink_var: float
    downlink_var: float

    @property
    def active_var(self) -> float:
        return self.uplink_var + self.downlink_var

    @property
    def inactive_var(self) -> float:
        return self.uplink_var


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and a tuple of names.

    String names are mapped through crc32, so the same (seed, names) pair
    always yields the same draws regardless of what other streams exist.
    """
    key = tuple(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def noise_variance_from_snr(theta, snr_db: float) -> float:
    """Noise variance for ``SNR = 20 log10(|theta|^2 / var)``.

    Returns ``|theta|^2 * 10^(-snr_db / 20)``; an infinite SNR gives 0.
    """
    snr_db = float(snr_db)
    if snr_db == math.inf:
        return 0.0
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ConfigurationError(f"snr_db must be a real number or +inf, got {snr_db}")
    sq = float(np.dot(theta, theta))
    if sq == 0.0:
        raise DegenerateModelError("cannot derive a noise level from an all-zero model")
    return sq * 10.0 ** (-snr_db / 20.0)


def perturb(theta, var: float, rng: np.random.Generator | None) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if var < 0:
        raise ConfigurationError(f"noise variance must be >= 0, got {var}")
    if var == 0.0:
        return theta.copy()
    return theta + rng.normal(0.0, math.sqrt(var), size=theta.shape)


def quantize(theta, bits: int | None, spans: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
    """Round each span onto ``2**bits`` evenly spaced levels between its min and max.

    ``bits=None`` is the unquantized sentinel. Spans default to the whole
    vector; constant spans pass through untouched.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if bits is None:
        return theta.copy()
    bits = int(bits)
    if bits < 1:
        raise ConfigurationError(f"bits must be >= 1, got {bits}")
    if spans is None:
        spans = [(0, theta.shape[0])]
    out = theta.copy()
    top = float(2 ** bits - 1)
    for offset, length in spans:
        seg = theta[offset:offset + length]
        if seg.size == 0:
            continue
        lo, hi = float(seg.min()), float(seg.max())
        if hi == lo:
            continue
        step = (hi - lo) / top
        levels = np.clip(np.rint((seg - lo) / step), 0.0, top)
        q = lo + levels * step
        q[levels == top] = hi
        out[offset:offset + length] = q
    return out


def quantization_error_bound(theta, bits: int, spans=None) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    spans = spans or [(0, theta.shape[0])]
    widths = [float(np.ptp(theta[o:o + n])) for o, n in spans if n > 0]
    return max(widths, default=0.0) / (2.0 * (2 ** bits - 1))


def aggregate(weighted: Iterable[tuple[float, np.ndarray]]) -> np.ndarray:
    """Data-size weighted average ``sum(D_k theta_k) / sum(D_k)``.

    Computed as an offset from the first vector, which keeps the result
    bit-identical to the input when every client sends the same model.
    """
    items = list(weighted)
    if not items:
        raise ConfigurationError("aggregate needs at least one client")
    sizes = np.array([float(d) for d, _ in items])
    if np.any(sizes <= 0):
        raise ConfigurationError("all data sizes must be positive")
    vectors = [np.asarray(v, dtype=np.float64) for _, v in items]
    ref = vectors[0]
    for v in vectors[1:]:
        if v.shape != ref.shape:
            raise ConfigurationError(f"parameter length mismatch: {v.shape} vs {ref.shape}")
    weights = sizes / sizes.sum()
    acc = np.zeros_like(ref)
    for w, v in zip(weights[1:], vectors[1:]):
        acc += w * (v - ref)
    return ref + acc


def aggregated_uplink_variance(active: Iterable[tuple[float, float]], d_total: float,
                               mass_weighted: bool = False) -> float:
    """Per-element variance of ``(1/D) sum_k D_k noise_k`` over active clients.

    The exact value is ``sum(D_k^2 var_k) / D^2``. ``mass_weighted=True``
    returns ``sum(D_k var_k) / D`` instead, for side-by-side comparison.
    """
    active = list(active)
    if not active:
        return 0.0
    if d_total <= 0:
        raise ConfigurationError("total data size must be positive")
    if mass_weighted:
        return sum(d * v for d, v in active) / d_total
    return sum(d * d * v for d, v in active) / (d_total * d_total)
