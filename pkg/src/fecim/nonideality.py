"""Stochastic injectors and drift models for device non-idealities.

Covers device-to-device conductance variation, per-read current
fluctuation (cycle-to-cycle and flicker), one-shot aging, log-time
retention extrapolation, and a time-domain flicker/RTS trace generator
for characterization plots.  All injectors are multiplicative and own
independently seedable streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

G_FLOOR_FRACTION = 1e-6  # positive floor for sampled conductance, x nominal
MAX_TRACE_SAMPLES = 2**24


class FitIllConditionedError(ValueError):
    """Time samples too degenerate for a log-time line fit."""


@dataclass(frozen=True)
class VariationSpec:
    """Relative sigmas of the random variation sources."""

    d2d_sigma_rel: float = 0.15
    c2c_sigma_rel: float = 0.012
    flicker_sigma_rel: float = 0.007
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("d2d_sigma_rel", "c2c_sigma_rel", "flicker_sigma_rel"):
            v = getattr(self, name)
            if not (0.0 <= v < 0.5):
                raise ValueError(f"{name} must be in [0, 0.5)")

    @classmethod
    def from_dict(cls, d: dict) -> "VariationSpec":
        return cls(**d)


@dataclass(frozen=True)
class AgingSpec:
    """Retained conductance fractions after the aging horizon."""

    retain_hrs: float = 0.226
    retain_lrs: float = 0.743

    def __post_init__(self):
        for name in ("retain_hrs", "retain_lrs"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "AgingSpec":
        return cls(**d)


@dataclass(frozen=True)
class NoisePsdSpec:
    """Low-frequency noise description: RTS Lorentzians plus 1/f^gamma.

    lorentzians: list of (corner_hz, amplitude_rel_rms) pairs
    one_over_f_amp: rms of the 1/f^gamma component (relative units)
    gamma: spectral exponent, physical flicker range [0.8, 1.2]
    """

    lorentzians: tuple = ()
    one_over_f_amp: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if not (0.8 <= self.gamma <= 1.2):
            raise ValueError("gamma must be in [0.8, 1.2]")
        for fc, _amp in self.lorentzians:
            if fc <= 0:
                raise ValueError("corner frequencies must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePsdSpec":
        d = dict(d)
        if "lorentzians" in d:
            d["lorentzians"] = tuple(tuple(pair) for pair in d["lorentzians"])
        return cls(**d)


def _indexed_uniforms(seed: int, indices: np.ndarray) -> np.ndarray:
    """Counter-style uniforms: value i of stream(seed), order-independent.

    One Philox draw per index so a device's draw never depends on how many
    other devices were sampled before it.
    """
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    out = np.empty(len(indices), dtype=float)
    # Philox supports O(1) advance, so per-index jumps stay cheap even for
    # large scattered index sets.
    for k, idx in enumerate(indices):
        bg = np.random.Philox(key=seed)
        bg.advance(int(idx))
        out[k] = np.random.Generator(bg).random()
    return out


def _indexed_uniforms_block(seed: int, start: int, count: int) -> np.ndarray:
    """Fast path for a contiguous index block [start, start+count)."""
    bg = np.random.Philox(key=seed)
    bg.advance(int(start))
    return np.random.Generator(bg).random(count)


def sample_d2d(nominal_g, spec: VariationSpec, device_index) -> np.ndarray | float:
    """Per-device conductance draw: N(g, (sigma_rel*g)^2), clamped at 3 sigma.

    Deterministic for fixed (rng_seed, device_index); the draw is a single
    inverse-CDF transform of a counter-indexed uniform, so any subset of
    devices can be sampled in any order with identical results.
    """
    nominal_g = np.asarray(nominal_g, dtype=float)
    if np.any(nominal_g <= 0):
        raise ValueError("nominal_g must be positive")
    if spec.d2d_sigma_rel == 0.0:
        out = nominal_g.copy()
        return float(out) if out.ndim == 0 else out
    u = _indexed_uniforms(spec.rng_seed, device_index)
    z = np.clip(ndtri(u), -3.0, 3.0)
    g = nominal_g * (1.0 + spec.d2d_sigma_rel * z.reshape(np.shape(nominal_g)))
    g = np.maximum(g, G_FLOOR_FRACTION * nominal_g)
    return float(g) if g.ndim == 0 else g


def d2d_factors(spec: VariationSpec, start_index: int, count: int, sigma_rel=None) -> np.ndarray:
    """Multiplicative D2D factors for a contiguous device-index block.

    sigma_rel may be a scalar or a per-device array (e.g. per-level
    measured sigmas)."""
    sigma = spec.d2d_sigma_rel if sigma_rel is None else np.asarray(sigma_rel, dtype=float)
    if np.all(sigma == 0.0):
        return np.ones(count)
    u = _indexed_uniforms_block(spec.rng_seed, start_index, count)
    z = np.clip(ndtri(u), -3.0, 3.0)
    return np.maximum(1.0 + sigma * z, G_FLOOR_FRACTION)


@dataclass
class ReadNoiseStream:
    """Fresh multiplicative read perturbations from an owned RNG stream."""

    spec: VariationSpec
    purpose: str = "read"
    _rng: np.random.Generator = field(default=None, repr=False)
    draw_count: int = 0

    def __post_init__(self):
        if self._rng is None:
            ss = np.random.SeedSequence([self.spec.rng_seed, _purpose_id(self.purpose)])
            self._rng = np.random.default_rng(ss)

    def perturb(self, i_nominal, kind: str):
        self.draw_count += 1
        return perturb_read(i_nominal, self.spec, kind, self._rng)


def _purpose_id(purpose: str) -> int:
    return int.from_bytes(purpose.encode()[:8].ljust(8, b"\0"), "little") & 0x7FFFFFFF


def perturb_read(i_nominal, spec: VariationSpec, kind: str, rng: np.random.Generator):
    """Multiply a read current by (1 + eps), eps ~ N(0, sigma^2)."""
    if kind == "flicker":
        sigma = spec.flicker_sigma_rel
    elif kind == "c2c":
        sigma = spec.c2c_sigma_rel
    else:
        raise ValueError("kind must be 'flicker' or 'c2c'")
    i_nominal = np.asarray(i_nominal, dtype=float)
    if not np.all(np.isfinite(i_nominal)):
        raise ValueError("i_nominal must be finite")
    if sigma == 0.0:
        out = i_nominal.copy()
        return float(out) if out.ndim == 0 else out
    eps = rng.normal(0.0, sigma, size=i_nominal.shape)
    out = i_nominal * (1.0 + eps)
    return float(out) if out.ndim == 0 else out


def aging_factor(level: int, n_levels: int, spec: AgingSpec) -> float:
    """Retained fraction, affine in level; endpoints pinned exactly."""
    if not 0 <= level <= n_levels - 1:
        raise ValueError("level out of range")
    frac = level / (n_levels - 1)
    return spec.retain_hrs + (spec.retain_lrs - spec.retain_hrs) * frac


def retention_extrapolate(samples, horizon_s: float):
    """Least-squares line in (log10 t, G), evaluated at the horizon.

    samples: iterable of (time_s, conductance), >= 3 points spanning
    >= 3 decades, all within the measured window t <= 1e4 s.
    Returns (g_at_horizon, slope_per_decade).
    """
    samples = sorted((float(t), float(g)) for t, g in samples)
    if len(samples) < 3:
        raise ValueError("need at least 3 retention samples")
    times = np.array([t for t, _ in samples])
    gs = np.array([g for _, g in samples])
    if np.any(times <= 0):
        raise ValueError("sample times must be positive")
    if times.max() > 1.0e4:
        raise ValueError("retention samples beyond the 1e4 s measured window")
    span_decades = np.log10(times.max() / times.min())
    if span_decades < 3.0 - 1e-12:
        raise FitIllConditionedError(
            f"retention samples span {span_decades:.2f} decades; need >= 3"
        )
    logt = np.log10(times)
    slope, intercept = np.polyfit(logt, gs, 1)
    return float(intercept + slope * np.log10(horizon_s)), float(slope)


TEN_YEARS_S = 10.0 * 365.25 * 24 * 3600


def generate_noise_trace(
    psd: NoisePsdSpec,
    duration_s: float,
    sample_rate_hz: float,
    seed: int,
    target_sigma: float | None = None,
) -> np.ndarray:
    """Zero-mean relative current-fluctuation trace.

    Superposes one symmetric random-telegraph process per Lorentzian
    (corner fc maps to total flip rate pi*fc) and a 1/f^gamma component
    synthesized by spectral shaping of white noise.  ``target_sigma``
    rescales the finished trace to a requested rms.
    """
    n = int(round(duration_s * sample_rate_hz))
    if n <= 0:
        raise ValueError("empty trace requested")
    if n > MAX_TRACE_SAMPLES:
        raise ValueError(f"trace of {n} samples exceeds {MAX_TRACE_SAMPLES}")
    if not psd.lorentzians and psd.one_over_f_amp == 0.0:
        raise ValueError("empty PSD spec: no Lorentzians and zero 1/f amplitude")

    rng = np.random.default_rng(seed)
    dt = 1.0 / sample_rate_hz
    trace = np.zeros(n)

    for fc, amp in psd.lorentzians:
        if amp == 0.0:
            continue
        # symmetric RTS: autocorr a^2 exp(-2 nu |t|) gives a Lorentzian
        # with corner fc = nu / pi
        nu = np.pi * fc
        p_flip = -np.expm1(-nu * dt)
        flips = rng.random(n) < p_flip
        state = np.where(np.cumsum(flips) % 2 == 0, 1.0, -1.0)
        if rng.random() < 0.5:
            state = -state
        trace += amp * state

    if psd.one_over_f_amp > 0.0:
        white = rng.standard_normal(n)
        spec_w = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=dt)
        shape = np.zeros_like(freqs)
        shape[1:] = freqs[1:] ** (-psd.gamma / 2.0)
        colored = np.fft.irfft(spec_w * shape, n=n)
        colored_std = colored.std()
        if colored_std > 0:
            trace += psd.one_over_f_amp * colored / colored_std

    trace -= trace.mean()
    if target_sigma is not None:
        std = trace.std()
        if std > 0:
            trace *= target_sigma / std
    return trace
