"""Program/erase pulse response and the closed-loop write controller.

Pulse model: amplitude maps affinely onto a commanded threshold between
the two polarization rails; the realized post-pulse threshold is a
Gaussian draw whose sigma scales with the commanded polarization swing
(full-rail writes are noisy, small trims are fine-grained).  The
closed-loop controller reads the cell, and on a miss alternates its two
knobs: re-pulse with a trimmed amplitude (coarse grid) and nudge the
read voltage inside the stable window (fine grid), until the measured
conductance falls inside the fixed target band.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .device import (
    DeviceInstance,
    DeviceParams,
    conductance_from_threshold,
    interp_charge,
    mobility_factor,
    nominal_level_conductance,
    thermal_voltage,
)

COERCIVE_V = 1.5
FULL_AMPLITUDE_V = 4.5
PULSE_WIDTH_NS = 100.0


class NoStableReadError(RuntimeError):
    """No read-voltage candidate passed the sanity check."""


@dataclass(frozen=True)
class PulseSpec:
    """One gate pulse: signed amplitude (V) and width (ns)."""

    amplitude: float
    width_ns: float = PULSE_WIDTH_NS

    def __post_init__(self):
        if abs(self.amplitude) > 5.0:
            raise ValueError("|amplitude| must be <= 5 V")
        if self.width_ns <= 0:
            raise ValueError("pulse width must be positive")


@dataclass(frozen=True)
class TargetBand:
    """Fixed conductance acceptance window for one level.

    g_target is the aim point inside the band (the nominal state's
    conductance); it differs from the midpoint when a band edge was
    clamped at zero.
    """

    level: int
    g_lo: float
    g_hi: float
    g_target: float = None

    def __post_init__(self):
        if not self.g_lo < self.g_hi:
            raise ValueError("g_lo must be < g_hi")
        if self.g_target is None:
            object.__setattr__(self, "g_target", 0.5 * (self.g_lo + self.g_hi))

    def contains(self, g) -> bool:
        return bool(np.all((self.g_lo <= g) & (g <= self.g_hi)))


@dataclass
class ProgramOutcome:
    achieved_g: float
    iterations: int
    vg_read_used: float
    converged: bool
    transcript: list = field(default_factory=list)  # (iteration, amplitude, g_read)


@dataclass(frozen=True)
class ProgramConfig:
    """Controller knobs (values frozen at fit time)."""

    sigma_prog: float = 0.04  # vth sigma of a full-rail pulse (V)
    sigma_floor: float = 0.005  # vth sigma floor for small trims (V)
    budget: int = 16
    band_frac: float = 0.2  # band half-width / adjacent level spacing
    guard_frac: float = 0.1  # guard gap / adjacent level spacing
    amp_step: float = 0.1  # pulse amplitude trim granularity (V)
    vg_step: float = 0.010  # read-voltage adjustment granularity (V)
    vg_window: tuple = (0.6, 0.9)
    adjust_vg: bool = True
    read_noise_bound_rel: float = 1.5  # accept vg if sigma <= bound * base flicker

    @classmethod
    def from_dict(cls, d: dict) -> "ProgramConfig":
        d = dict(d)
        if "vg_window" in d:
            d["vg_window"] = tuple(d["vg_window"])
        return cls(**d)


def amplitude_to_vth_target(p: DeviceParams, amplitude: float):
    """Commanded threshold for a pulse amplitude; None below coercive.

    Positive amplitudes drive the cell toward the LRS rail, negative
    toward HRS, affinely between the coercive edge and the full-swing
    amplitude.
    """
    mag = abs(amplitude)
    if mag < COERCIVE_V:
        return None
    frac = min(1.0, (mag - COERCIVE_V) / (FULL_AMPLITUDE_V - COERCIVE_V))
    if amplitude > 0:
        return p.vth_hrs + (p.vth_lrs - p.vth_hrs) * frac
    return p.vth_lrs + (p.vth_hrs - p.vth_lrs) * frac


def vth_target_to_amplitude(p: DeviceParams, vth_target: float, toward_lrs: bool) -> float:
    """Inverse of amplitude_to_vth_target on the requested polarity branch."""
    if toward_lrs:
        frac = (vth_target - p.vth_hrs) / (p.vth_lrs - p.vth_hrs)
    else:
        frac = (vth_target - p.vth_lrs) / (p.vth_hrs - p.vth_lrs)
    frac = float(np.clip(frac, 0.0, 1.0))
    amp = COERCIVE_V + frac * (FULL_AMPLITUDE_V - COERCIVE_V)
    return amp if toward_lrs else -amp


def quantize_amplitude(amp: float, step: float) -> float:
    """Snap an amplitude command onto the trim grid (coercive-anchored)."""
    sign = 1.0 if amp >= 0 else -1.0
    mag = min(abs(amp), FULL_AMPLITUDE_V)
    snapped = COERCIVE_V + round((mag - COERCIVE_V) / step) * step
    return sign * float(np.clip(snapped, COERCIVE_V, FULL_AMPLITUDE_V))


def pulse_sigma(p: DeviceParams, cfg: ProgramConfig, commanded_swing: float) -> float:
    """Write stochasticity scales with the commanded polarization swing."""
    rail_swing = p.vth_hrs - p.vth_lrs
    frac = min(1.0, abs(commanded_swing) / rail_swing)
    return max(cfg.sigma_floor, cfg.sigma_prog * frac)


def apply_pulse(
    device: DeviceInstance,
    pulse: PulseSpec,
    cfg: ProgramConfig | None = None,
    rng: np.random.Generator | None = None,
):
    """Apply one pulse; returns the new PolarizationState.

    Sub-coercive amplitudes leave the state untouched.  A potentiating
    (positive) pulse never raises vth, a depressing pulse never lowers
    it; within that constraint the realized vth is a Gaussian draw
    around the commanded target.
    """
    cfg = cfg or ProgramConfig()
    rng = rng if rng is not None else device.rng
    p = device.params
    target = amplitude_to_vth_target(p, pulse.amplitude)
    if target is None:
        return device.state

    current = p.vth_of_level(device.level) + device.vth_offset
    sigma = pulse_sigma(p, cfg, target - current)
    realized = rng.normal(target, sigma)
    if pulse.amplitude > 0:
        realized = min(current, realized)
    else:
        realized = max(current, realized)
    realized = float(np.clip(realized, p.vth_lrs - 3 * cfg.sigma_prog, p.vth_hrs + 3 * cfg.sigma_prog))

    levels = np.arange(p.n_levels)
    new_level = int(levels[np.argmin(np.abs(p.vth_of_level(levels) - target))])
    device.level = new_level
    device.vth_offset = realized - p.vth_of_level(new_level)
    return device.state


def read_flicker_sigma_rel(vg_read: float, base_sigma_rel: float) -> float:
    """Bias-dependent relative read noise.

    Low gate voltages sit in the RTS/Lorentzian regime where single traps
    dominate and the relative fluctuation blows up; at higher bias the
    trap ensemble averages out to the smooth 1/f floor.
    """
    rts_corner_v = 0.3
    rts_weight = 4.0
    excess = rts_weight / (1.0 + (vg_read / rts_corner_v) ** 2)
    return base_sigma_rel * (1.0 + excess)


def verify_read_voltage(
    device: DeviceInstance,
    candidates,
    cfg: ProgramConfig | None = None,
    base_flicker_rel: float = 0.007,
    n_check_reads: int = 8,
) -> float:
    """Sanity-check read-voltage candidates; returns the first stable one.

    A candidate is stable when (a) it is sub-coercive, so repeated reads
    cannot flip polarization, and (b) its relative read noise is within
    the configured bound of the smooth-flicker floor.
    """
    cfg = cfg or ProgramConfig()
    if not candidates:
        raise NoStableReadError("empty candidate list")
    for vg in candidates:
        if vg <= 0:
            continue
        if abs(vg) >= COERCIVE_V:
            continue  # would disturb the state
        if read_flicker_sigma_rel(vg, base_flicker_rel) > cfg.read_noise_bound_rel * base_flicker_rel:
            continue
        level_before = device.level
        offset_before = device.vth_offset
        for _ in range(n_check_reads):
            device.read_conductance(vg, device.params.t_nom)
        if device.level != level_before or device.vth_offset != offset_before:
            continue
        return float(vg)
    raise NoStableReadError(f"no stable read voltage among {list(candidates)}")


def target_bands(
    p: DeviceParams,
    vg_read: float,
    temp: float = None,
    cfg: ProgramConfig | None = None,
    mode: str = "nominal",
) -> list:
    """Acceptance bands for every level at the given read point.

    mode="nominal": centers at the conductances of the nominal
    (affine-in-vth) polarization states.  mode="affine": centers equally
    spaced in conductance between the two rail states (analog-weight
    programming).  Half-width is band_frac of the smaller adjacent gap,
    which with band_frac + guard_frac/2 < 0.5 keeps bands disjoint with
    guard gaps.
    """
    cfg = cfg or ProgramConfig()
    temp = p.t_nom if temp is None else temp
    levels = np.arange(p.n_levels)
    if mode == "nominal":
        centers = np.array([nominal_level_conductance(p, l, vg_read, temp) for l in levels])
    elif mode == "affine":
        g0 = nominal_level_conductance(p, 0, vg_read, temp)
        g_top = nominal_level_conductance(p, p.n_levels - 1, vg_read, temp)
        centers = g0 + (g_top - g0) * levels / (p.n_levels - 1)
    else:
        raise ValueError("mode must be 'nominal' or 'affine'")
    gaps = np.diff(centers)
    bands = []
    for l in levels:
        if l == 0:
            half = cfg.band_frac * gaps[0]
        elif l == p.n_levels - 1:
            half = cfg.band_frac * gaps[-1]
        else:
            half = cfg.band_frac * min(gaps[l - 1], gaps[l])
        bands.append(
            TargetBand(
                level=int(l),
                g_lo=max(centers[l] - half, 0.0),
                g_hi=centers[l] + half,
                g_target=centers[l],
            )
        )
    return bands


def invert_conductance_to_vth(p: DeviceParams, g: float, vg: float, temp: float) -> float:
    """Exact inverse of the conductance model at fixed (vg, vds_read, T)."""
    phi_t = thermal_voltage(temp)
    pref = p.k_gain * mobility_factor(p, temp) * p.n_slope * phi_t**2 / p.vds_read
    # G = pref*(F(uf)-F(ur)); solve scalar-monotone in vth by bisection on
    # uf (F is simple enough that 80 bisection steps are exact to double
    # precision and branch-free).
    lo, hi = -200.0, 400.0

    def g_of_uf(uf):
        ur = uf - p.vds_read / phi_t
        return pref * (interp_charge(uf) - interp_charge(ur))

    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if g_of_uf(mid) < g:
            lo = mid
        else:
            hi = mid
    uf = 0.5 * (lo + hi)
    return float(vg - uf * p.n_slope * phi_t)


def program_levels(
    p: DeviceParams,
    levels: np.ndarray,
    vg_nominal: float,
    cfg: ProgramConfig,
    rng: np.random.Generator,
    bands: list | None = None,
    temp: float = None,
    single_pulse: bool = False,
    record_transcript: bool = False,
):
    """Vectorized closed-loop programming of a batch of cells.

    Every cell is erased to the HRS rail first, then pulsed toward its
    target level and verified against the fixed conductance band.  On a
    miss the controller re-centers: it computes the threshold needed to
    hit the band center at the current read voltage, snaps the pulse
    command onto the amplitude grid, and when the snap error exceeds
    half a read step it nudges the read voltage instead (band fixed, so
    in threshold space the window tracks the read bias one-to-one).
    Overshoots are erased and re-programmed; sigma scales with commanded
    swing, so retries are progressively finer.

    Returns a dict of arrays: vth (absolute realized thresholds),
    vth_offset, converged, iterations, vg_used, achieved_g.
    """
    temp = p.t_nom if temp is None else temp
    levels = np.asarray(levels, dtype=int).ravel()
    n = levels.size
    vg_lo, vg_hi = cfg.vg_window
    if not (vg_lo <= vg_nominal <= vg_hi):
        # stable window re-centered for off-default read points, held
        # safely below the coercive edge
        vg_lo = vg_nominal - 0.15
        vg_hi = min(vg_nominal + 0.05, COERCIVE_V - 0.05)
    bands = bands if bands is not None else target_bands(p, vg_nominal, temp, cfg)
    g_lo = np.array([bands[l].g_lo for l in levels])
    g_hi = np.array([bands[l].g_hi for l in levels])
    g_center = 0.5 * (g_lo + g_hi)
    rail_swing = p.vth_hrs - p.vth_lrs

    # exact vth needed to sit at the band's aim point, per level, at nominal vg
    vth_needed_by_level = np.array(
        [invert_conductance_to_vth(p, b.g_target, vg_nominal, temp) for b in bands]
    )

    transcript = [] if record_transcript else None

    # erase to HRS rail (full-swing stochastic reset)
    vth = rng.normal(p.vth_hrs, cfg.sigma_prog, size=n)
    vg = np.full(n, float(vg_nominal))
    converged = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=int)

    budget = 1 if single_pulse else cfg.budget
    for it in range(budget):
        active = ~converged
        if not active.any():
            break
        # window center in vth-space tracks the read-bias offset 1:1
        needed = vth_needed_by_level[levels[active]] + (vg[active] - vg_nominal)
        cmd_amp = np.array(
            [quantize_amplitude(vth_target_to_amplitude(p, v, toward_lrs=True), cfg.amp_step) for v in needed]
        )
        cmd_vth = np.array([amplitude_to_vth_target(p, a) for a in cmd_amp])

        if cfg.adjust_vg and not single_pulse:
            err = cmd_vth - needed
            need_shift = np.abs(err) > cfg.vg_step / 2.0
            steps = np.round(err[need_shift] / cfg.vg_step)
            vg_active = vg[active]
            vg_active[need_shift] = np.clip(
                vg_active[need_shift] + steps * cfg.vg_step, vg_lo, vg_hi
            )
            vg[active] = vg_active
            needed = vth_needed_by_level[levels[active]] + (vg[active] - vg_nominal)

        cur = vth[active]
        # erase-first where the current vth sits below the command
        # (positive pulses cannot raise vth)
        must_erase = cur < cmd_vth - 1e-12
        if must_erase.any():
            k = int(must_erase.sum())
            erase_sigma = np.maximum(
                cfg.sigma_floor, cfg.sigma_prog * np.abs(p.vth_hrs - cur[must_erase]) / rail_swing
            )
            draw = p.vth_hrs + rng.standard_normal(k) * erase_sigma
            # depressing pulse only raises vth
            cur[must_erase] = np.minimum(np.maximum(cur[must_erase], draw), p.vth_hrs + 3 * cfg.sigma_prog)

        swing = cmd_vth - cur
        sigma = np.maximum(cfg.sigma_floor, cfg.sigma_prog * np.abs(swing) / rail_swing)
        realized = rng.normal(0.0, 1.0, size=cur.size) * sigma + cmd_vth
        realized = np.minimum(cur, realized)  # potentiating pulse only lowers vth
        vth[active] = realized
        iterations[active] += 1

        g_meas = conductance_from_threshold(p, vth[active], vg[active], temp)
        hit = (g_meas >= g_lo[active]) & (g_meas <= g_hi[active])
        if record_transcript:
            idx_active = np.flatnonzero(active)
            for j, gi in zip(idx_active, range(g_meas.size)):
                transcript.append((int(iterations[j]), float(cmd_amp[gi]), float(g_meas[gi]), float(vg[j])))
        conv_idx = np.flatnonzero(active)[hit]
        converged[conv_idx] = True

    achieved_g = conductance_from_threshold(p, vth, vg, temp) if n else np.array([])
    return {
        "vth": vth,
        "vth_offset": vth - p.vth_of_level(levels),
        "converged": converged,
        "iterations": iterations,
        "vg_used": vg,
        "achieved_g": np.atleast_1d(achieved_g),
        "transcript": transcript,
    }


def adaptive_program(
    device: DeviceInstance,
    target: TargetBand,
    vg_read: float,
    budget: int | None = None,
    cfg: ProgramConfig | None = None,
) -> ProgramOutcome:
    """Closed-loop program one device into its target band."""
    cfg = cfg or ProgramConfig()
    if budget is not None:
        cfg = ProgramConfig(**{**cfg.__dict__, "budget": budget})
    p = device.params
    bands = target_bands(p, vg_read, p.t_nom, cfg)
    bands[target.level] = target
    res = program_levels(
        p,
        np.array([target.level]),
        vg_read,
        cfg,
        device.rng,
        bands=bands,
        record_transcript=True,
    )
    device.level = int(target.level)
    device.vth_offset = float(res["vth_offset"][0])
    return ProgramOutcome(
        achieved_g=float(res["achieved_g"][0]),
        iterations=int(res["iterations"][0]),
        vg_read_used=float(res["vg_used"][0]),
        converged=bool(res["converged"][0]),
        transcript=res["transcript"],
    )


def program_state_sequence(p: DeviceParams, vg_read: float, cfg: ProgramConfig, seed: int):
    """Characterization protocol: program 11 first, erase to 00, then 01, 10.

    Returns a list of (state_code, ProgramOutcome) in protocol order,
    running the closed loop on a fresh cell for each state.
    """
    order = [p.n_levels - 1, 0] + list(range(1, p.n_levels - 1))
    results = []
    for k, level in enumerate(order):
        dev = DeviceInstance(params=p, seed=seed + k)
        bands = target_bands(p, vg_read, p.t_nom, cfg)
        outcome = adaptive_program(dev, bands[level], vg_read, cfg=cfg)
        code = format(level, "02b") if p.n_levels == 4 else str(level)
        results.append((code, outcome))
    return results


# ---------------------------------------------------------------------------
# Analog LTP/LTD update model


@dataclass(frozen=True)
class LtpLtdConfig:
    n_pulses: int = 32
    a_ltp: float = 0.12  # bounded-exponential nonlinearity, ~0 = linear
    a_ltd: float = 0.15

    @classmethod
    def from_dict(cls, d: dict) -> "LtpLtdConfig":
        return cls(**d)


def _bounded_exp(x, a):
    """(1 - e^(-a x)) / (1 - e^(-a)) on normalized pulse axis x in [0,1]."""
    x = np.asarray(x, dtype=float)
    if abs(a) < 1e-12:
        return x
    return np.expm1(-a * x) / np.expm1(-a)


def ltp_ltd_update(
    device: DeviceInstance,
    direction: str,
    pulse_index: int,
    cfg: LtpLtdConfig | None = None,
    vg_read: float = 0.75,
) -> float:
    """Conductance after pulse ``pulse_index`` of a potentiation or
    depression train (deterministic bounded-exponential staircase)."""
    cfg = cfg or LtpLtdConfig()
    if not 0 <= pulse_index <= cfg.n_pulses:
        raise ValueError("pulse_index outside the pulse train")
    p = device.params
    g_min = nominal_level_conductance(p, 0, vg_read, p.t_nom)
    g_max = nominal_level_conductance(p, p.n_levels - 1, vg_read, p.t_nom)
    x = pulse_index / cfg.n_pulses
    if direction == "potentiate":
        return float(g_min + (g_max - g_min) * _bounded_exp(x, cfg.a_ltp))
    if direction == "depress":
        return float(g_max - (g_max - g_min) * _bounded_exp(x, cfg.a_ltd))
    raise ValueError("direction must be 'potentiate' or 'depress'")


def ltp_ltd_traces(device: DeviceInstance, cfg: LtpLtdConfig | None = None, vg_read: float = 0.75):
    cfg = cfg or LtpLtdConfig()
    idx = np.arange(cfg.n_pulses + 1)
    ltp = np.array([ltp_ltd_update(device, "potentiate", int(i), cfg, vg_read) for i in idx])
    ltd = np.array([ltp_ltd_update(device, "depress", int(i), cfg, vg_read) for i in idx])
    return ltp, ltd


@dataclass
class LinearityResult:
    a_ltp: float
    a_ltd: float
    asymmetry: float
    fit_warning: bool = False


def _fit_bounded_exp(trace: np.ndarray) -> tuple:
    """Least-squares fit of the bounded-exponential staircase.

    Returns (a, monotonic).  gmin/gmax are taken from the model family
    evaluated at the endpoints; only the nonlinearity parameter is free,
    found by golden-section on the 1-D residual.
    """
    g0, g1 = trace[0], trace[-1]
    x = np.linspace(0.0, 1.0, len(trace))
    y = (trace - g0) / (g1 - g0)
    deltas = np.diff(trace) * np.sign(g1 - g0)
    monotonic = bool(np.all(deltas >= -1e-12 * abs(g1 - g0)))

    def sse(a):
        return float(np.sum((_bounded_exp(x, a) - y) ** 2))

    lo, hi = -30.0, 30.0
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = hi - invphi * (hi - lo), lo + invphi * (hi - lo)
    fc, fd = sse(c), sse(d)
    for _ in range(200):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = sse(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = sse(d)
    return 0.5 * (lo + hi), monotonic


def linearity_metric(ltp_trace, ltd_trace) -> LinearityResult:
    """Fit nonlinearity for both staircases plus their mirrored asymmetry."""
    ltp_trace = np.asarray(ltp_trace, dtype=float)
    ltd_trace = np.asarray(ltd_trace, dtype=float)
    if len(ltp_trace) != len(ltd_trace) or len(ltp_trace) < 8:
        raise ValueError("traces must be the same length, >= 8 points")
    a_ltp, mono_p = _fit_bounded_exp(ltp_trace)
    a_ltd, mono_d = _fit_bounded_exp(ltd_trace)
    g_range = max(ltp_trace.max(), ltd_trace.max()) - min(ltp_trace.min(), ltd_trace.min())
    asym = float(np.max(np.abs(ltp_trace - ltd_trace[::-1])) / g_range)
    return LinearityResult(
        a_ltp=float(a_ltp), a_ltd=float(a_ltd), asymmetry=asym, fit_warning=not (mono_p and mono_d)
    )
