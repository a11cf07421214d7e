"""FE-FinFET compact drain-current/conductance model.

Single-expression charge-sheet interpolation that stays smooth from
subthreshold to strong inversion, with a polarization-state-dependent
threshold voltage and BSIM-style temperature scaling (mobility power law
plus linear vth shift).  All functions are pure and accept numpy arrays
for the bias/threshold arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

# Boltzmann constant over electron charge (V/K)
KB_OVER_Q = 8.617333262e-5

# Currents below this are clamped (avoids denormals and keeps the
# HRS->conductance division well-conditioned downstream).
MIN_CURRENT_A = 1e-15

SUPPORTED_TEMP_RANGE = (233.0, 300.0)


class InvalidBiasError(ValueError):
    """Raised on non-finite or out-of-contract bias inputs."""


class DivisionGuardError(ZeroDivisionError):
    """Raised when a conductance would divide by zero drain bias."""


@dataclass(frozen=True)
class DeviceParams:
    """Electrical and temperature-scaling parameters of one FE-FinFET.

    k_gain     transconductance gain factor (A/V^2) at nominal temperature
    n_slope    subthreshold slope factor (>= 1)
    vth_lrs    threshold voltage of the lowest-resistance state (V)
    vth_hrs    threshold voltage of the highest-resistance state (V)
    n_levels   number of programmable states (2 for BNN, 4 for MLC)
    ute        mobility-temperature exponent; mobility scales as
               (T/t_nom)**ute, so ute < 0 means mobility rises on cooling
    kt1        threshold-temperature coefficient (V per unit T/t_nom)
    t_nom      nominal temperature (K)
    vds_read   drain read bias (V)
    """

    k_gain: float = 5.0e-4
    n_slope: float = 1.3
    vth_lrs: float = 0.2
    vth_hrs: float = 1.1
    n_levels: int = 4
    ute: float = -3.3
    kt1: float = -0.9
    t_nom: float = 300.0
    vds_read: float = 0.1

    def __post_init__(self):
        if not self.vth_hrs > self.vth_lrs:
            raise ValueError("vth_hrs must exceed vth_lrs")
        if self.n_levels not in (2, 4):
            raise ValueError("n_levels must be 2 or 4")
        if self.t_nom <= 0 or self.vds_read <= 0:
            raise ValueError("t_nom and vds_read must be positive")
        if self.n_slope < 1.0:
            raise ValueError("n_slope must be >= 1")
        if self.k_gain <= 0:
            raise ValueError("k_gain must be positive")

    def vth_of_level(self, level) -> np.ndarray | float:
        """Nominal threshold for a polarization level (affine in level)."""
        frac = np.asarray(level, dtype=float) / (self.n_levels - 1)
        out = self.vth_hrs + (self.vth_lrs - self.vth_hrs) * frac
        return float(out) if out.ndim == 0 else out

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown device parameter keys: {sorted(unknown)}")
        return cls(**d)

    def with_updates(self, **kw) -> "DeviceParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class PolarizationState:
    """Discrete polarization level; 0 = HRS ('00'), n_levels-1 = LRS ('11')."""

    level: int

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("level must be non-negative")


@dataclass(frozen=True)
class BiasPoint:
    """Gate/drain bias plus temperature for one evaluation point."""

    vgs: float
    vds: float
    temp: float = 300.0

    def __post_init__(self):
        if not (np.isfinite(self.vgs) and np.isfinite(self.vds) and np.isfinite(self.temp)):
            raise InvalidBiasError("non-finite bias point")
        if self.temp <= 0:
            raise InvalidBiasError("temperature must be positive")


def thermal_voltage(temp) -> np.ndarray | float:
    return KB_OVER_Q * np.asarray(temp, dtype=float)


def mobility_factor(p: DeviceParams, temp) -> np.ndarray | float:
    """Relative mobility (T/t_nom)**ute; 1 at t_nom."""
    return (np.asarray(temp, dtype=float) / p.t_nom) ** p.ute


def threshold_at_temperature(p: DeviceParams, s: PolarizationState, temp) -> float:
    """vth(level) shifted linearly in T/t_nom; exact vth(level) at t_nom."""
    return threshold_shifted(p, p.vth_of_level(s.level), temp)


def threshold_shifted(p: DeviceParams, vth_nominal, temp):
    """Apply the linear temperature shift to an arbitrary base threshold."""
    t = np.asarray(temp, dtype=float)
    return vth_nominal + p.kt1 * (t / p.t_nom - 1.0)


def _softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def interp_charge(u):
    """Unified interpolation F(u) = ln^2(1 + e^(u/2)).

    Tends to e^u in deep subthreshold (u << 0) and (u/2)^2 in strong
    inversion (u >> 0), so the current expression below covers both
    regimes with one C-infinity formula.
    """
    sp = _softplus(np.asarray(u, dtype=float) / 2.0)
    return sp * sp


def interp_charge_derivative(u):
    """dF/du = ln(1 + e^(u/2)) * logistic(u/2)."""
    u = np.asarray(u, dtype=float) / 2.0
    sp = np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
    # logistic(u) computed stably for both signs
    sig = np.where(u >= 0, 1.0 / (1.0 + np.exp(-u)), np.exp(u) / (1.0 + np.exp(u)))
    return sp * sig


def current_from_threshold(p: DeviceParams, vth_eff, vgs, vds, temp, clamp: bool = True):
    """Drain current for an explicit effective threshold (array-friendly).

    Id = k_gain * mu_r(T) * n_slope * phi_t(T)^2 * [F(uf) - F(ur)]
    with uf = (vgs - vth_eff)/(n_slope*phi_t), ur = uf - vds/phi_t.
    vth_eff must already include any temperature shift.
    """
    phi_t = thermal_voltage(temp)
    uf = (np.asarray(vgs, dtype=float) - np.asarray(vth_eff, dtype=float)) / (p.n_slope * phi_t)
    ur = uf - np.asarray(vds, dtype=float) / phi_t
    mu_r = mobility_factor(p, temp)
    idrain = p.k_gain * mu_r * p.n_slope * phi_t**2 * (interp_charge(uf) - interp_charge(ur))
    idrain = np.maximum(idrain, 0.0)
    if clamp:
        zero_bias = np.asarray(vds, dtype=float) == 0.0
        idrain = np.where((idrain < MIN_CURRENT_A) & ~zero_bias, MIN_CURRENT_A, idrain)
        if np.ndim(idrain) == 0:
            return float(idrain)
        return idrain
    return float(idrain) if np.ndim(idrain) == 0 else idrain


def drain_current(p: DeviceParams, s: PolarizationState, b: BiasPoint) -> float:
    """Drain current at a bias point for a settled polarization state."""
    if b.vds < 0:
        raise InvalidBiasError("vds must be >= 0")
    vth_eff = threshold_at_temperature(p, s, b.temp)
    return float(current_from_threshold(p, vth_eff, b.vgs, b.vds, b.temp))


def drain_current_derivative(p: DeviceParams, s: PolarizationState, b: BiasPoint) -> float:
    """Analytic dId/dVgs (used by the finite-difference model checks)."""
    phi_t = thermal_voltage(b.temp)
    vth_eff = threshold_at_temperature(p, s, b.temp)
    uf = (b.vgs - vth_eff) / (p.n_slope * phi_t)
    ur = uf - b.vds / phi_t
    mu_r = mobility_factor(p, b.temp)
    dF = interp_charge_derivative(uf) - interp_charge_derivative(ur)
    return float(p.k_gain * mu_r * phi_t * dF)


def conductance_from_threshold(p: DeviceParams, vth_eff, vgs, temp, vds=None):
    """Channel conductance Id/vds at the read drain bias (array-friendly)."""
    vds = p.vds_read if vds is None else vds
    if np.any(np.asarray(vds) == 0.0):
        raise DivisionGuardError("vds = 0 in conductance evaluation")
    return current_from_threshold(p, vth_eff, vgs, vds, temp) / vds


def channel_conductance(p: DeviceParams, s: PolarizationState, b: BiasPoint) -> float:
    """G_ch = Id/vds at constant drain read bias."""
    if b.vds == 0.0:
        raise DivisionGuardError("vds = 0: conductance undefined")
    return drain_current(p, s, b) / b.vds


def nominal_level_conductance(p: DeviceParams, level, vg_read, temp):
    """Conductance of the nominal (exactly-programmed) level states."""
    vth_eff = threshold_shifted(p, p.vth_of_level(level), temp)
    return conductance_from_threshold(p, vth_eff, vg_read, temp)


@dataclass
class OnOffResult:
    ratio: float
    capped: bool = False

    def __float__(self):
        return self.ratio


def on_off_ratio(p: DeviceParams, vg_read: float, temp: float) -> OnOffResult:
    """G(LRS)/G(HRS) at the read bias.

    If the HRS current underflows the clamp floor the returned ratio is
    the clamp-limited maximum and ``capped`` is set.
    """
    if vg_read <= 0:
        raise InvalidBiasError("vg_read must be positive")
    b = BiasPoint(vgs=vg_read, vds=p.vds_read, temp=temp)
    lrs = PolarizationState(p.n_levels - 1)
    hrs = PolarizationState(0)
    i_on = drain_current(p, lrs, b)
    i_off_raw = current_from_threshold(
        p, threshold_at_temperature(p, hrs, temp), vg_read, p.vds_read, temp, clamp=False
    )
    capped = bool(i_off_raw < MIN_CURRENT_A)
    i_off = max(i_off_raw, MIN_CURRENT_A)
    return OnOffResult(ratio=float(i_on / i_off), capped=capped)


@dataclass
class DeviceInstance:
    """One physical cell: shared params, per-device offsets, and state.

    ``vth_offset`` is the programming residual relative to the nominal
    level threshold (set by apply_pulse / the closed-loop controller);
    ``g_factor`` is the multiplicative device-to-device conductance
    factor (set by the variation injector, 1.0 when disabled).
    """

    params: DeviceParams
    level: int = 0
    vth_offset: float = 0.0
    g_factor: float = 1.0
    seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    @property
    def state(self) -> PolarizationState:
        return PolarizationState(self.level)

    def effective_vth(self, temp: float) -> float:
        """Realized threshold: nominal level vth + residual + T shift."""
        base = self.params.vth_of_level(self.level) + self.vth_offset
        return float(threshold_shifted(self.params, base, temp))

    def read_conductance(self, vg_read: float, temp: float) -> float:
        """Noiseless conductance of this cell at the given read bias."""
        g = conductance_from_threshold(self.params, self.effective_vth(temp), vg_read, temp)
        return float(g) * self.g_factor
