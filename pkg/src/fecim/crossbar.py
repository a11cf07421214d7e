"""Differential-pair crossbar tiles and analog matrix-vector products.

Quantized weights map onto (positive, negative) device pairs; a column
output is the current sum over rows at the tile's read bias.  Every
conductance is re-evaluated from the compact model at the tile's
current (vg_read, temp), times frozen per-device D2D factors and aging
retention, with one multiplicative flicker and one C2C perturbation per
column-read.  Current-to-weight calibration (gain and, for unipolar
mappings, the input-sum offset) is frozen at programming time from the
nominal 300 K model and is deliberately never updated afterward:
deployment without recalibration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .device import DeviceParams, conductance_from_threshold, nominal_level_conductance, threshold_shifted
from .nonideality import AgingSpec, VariationSpec, aging_factor, d2d_factors
from .programming import ProgramConfig, program_levels, target_bands

TILE_FILE_VERSION = 1
DEFAULT_MAX_CELLS = 1 << 20


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class WeightMapping:
    """Codebook from quantized weight values to device-pair levels.

    span_tracking marks readouts whose sense references track the rail
    span (digital-style readout with scheduled re-zeroing); analog
    accumulation readouts lack it and need full system-level
    recalibration instead.
    """

    levels_per_device: int
    codebook: tuple  # ((weight_value, (level_pos, level_neg)), ...)
    offset_coef: float = 0.0  # digital input-sum offset, weight units
    target_mode: str = "nominal"  # band centers: 'nominal' | 'affine'
    span_tracking: bool = False
    name: str = "custom"

    def __post_init__(self):
        pairs = [pair for _, pair in self.codebook]
        if len(set(pairs)) != len(pairs):
            raise MappingError("codebook must be injective")
        for w, (lp, lm) in self.codebook:
            if not (0 <= lp < self.levels_per_device and 0 <= lm < self.levels_per_device):
                raise MappingError("codebook level out of range")
            if w == 0.0 and (lp, lm) != (0, 0):
                raise MappingError("zero weight must map to (0, 0)")

    @property
    def values(self) -> np.ndarray:
        return np.array([w for w, _ in self.codebook])

    def encode(self, weights: np.ndarray):
        """Weights (codebook units) -> (level_pos, level_neg) arrays."""
        vals = self.values
        flat = np.asarray(weights, dtype=float).ravel()
        idx = np.argmin(np.abs(flat[:, None] - vals[None, :]), axis=1)
        if not np.allclose(vals[idx], flat, atol=1e-9):
            bad = flat[~np.isclose(vals[idx], flat, atol=1e-9)][:5]
            raise MappingError(f"weight values outside codebook domain, e.g. {bad}")
        lp = np.array([self.codebook[i][1][0] for i in idx]).reshape(np.shape(weights))
        lm = np.array([self.codebook[i][1][1] for i in idx]).reshape(np.shape(weights))
        return lp.astype(np.int8), lm.astype(np.int8)


def binary_mapping() -> WeightMapping:
    return WeightMapping(
        levels_per_device=2,
        codebook=((1.0, (1, 0)), (-1.0, (0, 1))),
        span_tracking=True,
        name="binary",
    )


def mlc4_mapping() -> WeightMapping:
    return WeightMapping(
        levels_per_device=4,
        codebook=(
            (1.0, (3, 0)),
            (1.0 / 3.0, (2, 1)),
            (-1.0 / 3.0, (1, 2)),
            (-1.0, (0, 3)),
        ),
        name="mlc4",
    )


def binary_unipolar_mapping() -> WeightMapping:
    """Single-device binary storage: the positive device carries HRS or
    LRS, the negative device is parked at HRS, and the sign is recovered
    digitally via the input-sum offset.  Identical to the symmetric pair
    at the optimized read point (where HRS conducts nothing) but exposed
    to calibration error wherever the rail span drifts."""
    return WeightMapping(
        levels_per_device=2,
        codebook=((-1.0, (0, 0)), (1.0, (1, 0))),
        offset_coef=1.0,
        span_tracking=True,
        name="binary_unipolar",
    )


def analog4_mapping() -> WeightMapping:
    """Unipolar 'analog weight' mapping: conductance proportional to
    weight on the positive device, negative device parked at level 0,
    sign recovered by a digital input-sum offset calibrated at write
    time.  Levels are programmed to equally-spaced conductance targets."""
    return WeightMapping(
        levels_per_device=4,
        codebook=(
            (-1.0, (0, 0)),
            (-1.0 / 3.0, (1, 0)),
            (1.0 / 3.0, (2, 0)),
            (1.0, (3, 0)),
        ),
        offset_coef=1.0,
        target_mode="affine",
        name="analog4",
    )


MAPPINGS = {
    "binary": binary_mapping,
    "binary_unipolar": binary_unipolar_mapping,
    "mlc4": mlc4_mapping,
    "analog4": analog4_mapping,
}


@dataclass
class InjectorFlags:
    """Which non-ideality injectors are live during a read."""

    d2d: bool = False
    aging: bool = False
    flicker: bool = False
    c2c: bool = False

    def label(self) -> str:
        active = [k for k in ("d2d", "aging", "flicker", "c2c") if getattr(self, k)]
        return "+".join(active) if active else "none"


@dataclass
class ProgramStats:
    n_devices: int = 0
    n_converged: int = 0
    iteration_histogram: dict = field(default_factory=dict)

    @property
    def convergence_rate(self) -> float:
        return self.n_converged / self.n_devices if self.n_devices else 1.0

    def absorb(self, converged: np.ndarray, iterations: np.ndarray):
        self.n_devices += converged.size
        self.n_converged += int(converged.sum())
        vals, counts = np.unique(iterations, return_counts=True)
        for v, c in zip(vals, counts):
            self.iteration_histogram[int(v)] = self.iteration_histogram.get(int(v), 0) + int(c)


class CrossbarTile:
    """One programmed rows x cols array of differential pairs."""

    def __init__(
        self,
        params: DeviceParams,
        mapping: WeightMapping,
        level_pos: np.ndarray,
        level_neg: np.ndarray,
        vthoff_pos: np.ndarray,
        vthoff_neg: np.ndarray,
        gfac_pos: np.ndarray,
        gfac_neg: np.ndarray,
        vg_read: float,
        temp: float,
        aging_spec: AgingSpec | None = None,
        noise_spec: VariationSpec | None = None,
        seed: int = 0,
        max_cells: int = DEFAULT_MAX_CELLS,
    ):
        rows, cols = level_pos.shape
        if rows * cols > max_cells:
            raise MappingError(f"tile {rows}x{cols} exceeds max cells {max_cells}")
        self.params = params
        self.mapping = mapping
        self.level_pos, self.level_neg = level_pos, level_neg
        self.vthoff_pos, self.vthoff_neg = vthoff_pos, vthoff_neg
        self.gfac_pos, self.gfac_neg = gfac_pos, gfac_neg
        self.vg_read = float(vg_read)
        self.vds_read = params.vds_read
        self.temp = float(temp)
        self.aging_spec = aging_spec or AgingSpec()
        self.noise_spec = noise_spec or VariationSpec()
        self.seed = seed
        self._noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x72EAD]))
        self.noise_draws = 0
        self._g_cache = {}
        # current-to-weight calibration, frozen at the nominal model
        self.unit_current = self._nominal_unit_current(self.vg_read)
        self.offset_coef = mapping.offset_coef
        self.aging_recal = self._aging_recal_factor(self.vg_read)

    @property
    def rows(self) -> int:
        return self.level_pos.shape[0]

    @property
    def cols(self) -> int:
        return self.level_pos.shape[1]

    def _nominal_unit_current(self, vg: float) -> float:
        p = self.params
        g_top = nominal_level_conductance(p, p.n_levels - 1, vg, p.t_nom)
        g_bot = nominal_level_conductance(p, 0, vg, p.t_nom)
        span = g_top - g_bot
        if self.mapping.offset_coef != 0.0:
            return span * self.vds_read / 2.0
        return span * self.vds_read

    def _aging_recal_factor(self, vg: float) -> float:
        """Single-scalar maintenance re-zero of the decode gain.

        Stored weights drift over the device's life, so deployments track
        the rail-pair span with a scheduled recalibration.  One scalar
        only: the unipolar offset reference is not re-measured (that
        would take a full system-level calibration).
        """
        p = self.params
        g_top = nominal_level_conductance(p, p.n_levels - 1, vg, p.t_nom)
        g_bot = nominal_level_conductance(p, 0, vg, p.t_nom)
        a_top = aging_factor(p.n_levels - 1, p.n_levels, self.aging_spec)
        a_bot = aging_factor(0, p.n_levels, self.aging_spec)
        return (a_top * g_top - a_bot * g_bot) / (g_top - g_bot)

    def set_temperature(self, temp: float):
        """Move the tile to a new ambient; calibration stays frozen."""
        self.temp = float(temp)
        self._g_cache.clear()

    def set_read_voltage(self, vg: float, recalibrate: bool = True):
        """Change the read bias; deployment re-derives its gain from the
        nominal-temperature model (it knows its bias, not its ambient)."""
        self.vg_read = float(vg)
        self._g_cache.clear()
        if recalibrate:
            self.unit_current = self._nominal_unit_current(vg)
            self.aging_recal = self._aging_recal_factor(vg)

    def _aging_matrix(self, levels: np.ndarray) -> np.ndarray:
        n = self.params.n_levels
        table = np.array([aging_factor(l, n, self.aging_spec) for l in range(n)])
        return table[levels]

    def conductances(self, flags: InjectorFlags | None = None):
        """Per-cell (G+, G-) at the tile's current bias and temperature."""
        flags = flags or InjectorFlags()
        key = (self.vg_read, self.temp, flags.d2d, flags.aging)
        if key in self._g_cache:
            return self._g_cache[key]
        p = self.params
        out = []
        for levels, vthoff, gfac in (
            (self.level_pos, self.vthoff_pos, self.gfac_pos),
            (self.level_neg, self.vthoff_neg, self.gfac_neg),
        ):
            vth_eff = threshold_shifted(p, p.vth_of_level(levels) + vthoff, self.temp)
            g = conductance_from_threshold(p, vth_eff, self.vg_read, self.temp)
            if flags.d2d:
                g = g * gfac
            if flags.aging:
                g = g * self._aging_matrix(levels)
            out.append(g)
        self._g_cache[key] = tuple(out)
        return self._g_cache[key]

    def matvec(self, x: np.ndarray, flags: InjectorFlags | None = None) -> np.ndarray:
        """Column currents for activations x in [0,1].

        x: (rows,) or (batch, rows).  Returns currents (batch, cols) or
        (cols,).  One flicker and one C2C multiplicative draw per
        column-read (i.e. per batch item and column).
        """
        flags = flags or InjectorFlags()
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(np.clip(x, 0.0, 1.0))
        if xb.shape[1] != self.rows:
            raise ValueError(f"input length {xb.shape[1]} != rows {self.rows}")
        gp, gm = self.conductances(flags)
        currents = xb @ (gp - gm) * self.vds_read
        if flags.flicker and self.noise_spec.flicker_sigma_rel > 0:
            currents = currents * (
                1.0 + self._noise_rng.normal(0.0, self.noise_spec.flicker_sigma_rel, currents.shape)
            )
            self.noise_draws += currents.size
        if flags.c2c and self.noise_spec.c2c_sigma_rel > 0:
            currents = currents * (
                1.0 + self._noise_rng.normal(0.0, self.noise_spec.c2c_sigma_rel, currents.shape)
            )
            self.noise_draws += currents.size
        return currents[0] if single else currents

    def read_conductance_matrix(self, noiseless: bool = True, flags: InjectorFlags | None = None):
        """Per-cell (G+, G-); noisy mode adds one read draw per cell."""
        flags = flags or InjectorFlags()
        gp, gm = self.conductances(flags)
        if noiseless:
            return gp.copy(), gm.copy()
        sigma = float(np.hypot(self.noise_spec.c2c_sigma_rel, self.noise_spec.flicker_sigma_rel))
        out = []
        for g in (gp, gm):
            draw = self._noise_rng.normal(0.0, sigma, g.shape)
            self.noise_draws += g.size
            out.append(g * (1.0 + draw))
        return tuple(out)

    def save(self, path: str):
        meta = {
            "version": TILE_FILE_VERSION,
            "params": self.params.__dict__,
            "mapping": self.mapping.name,
            "vg_read": self.vg_read,
            "temp": self.temp,
            "seed": self.seed,
            "unit_current": self.unit_current,
            "offset_coef": self.offset_coef,
            "aging": self.aging_spec.__dict__,
            "noise": self.noise_spec.__dict__,
        }
        np.savez_compressed(
            path,
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            level_pos=self.level_pos,
            level_neg=self.level_neg,
            vthoff_pos=self.vthoff_pos,
            vthoff_neg=self.vthoff_neg,
            gfac_pos=self.gfac_pos,
            gfac_neg=self.gfac_neg,
        )

    @classmethod
    def load(cls, path: str) -> "CrossbarTile":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta["version"] != TILE_FILE_VERSION:
                raise ValueError(f"unsupported tile file version {meta['version']}")
            if meta["mapping"] not in MAPPINGS:
                raise ValueError(f"unknown mapping {meta['mapping']}")
            tile = cls(
                params=DeviceParams.from_dict(meta["params"]),
                mapping=MAPPINGS[meta["mapping"]](),
                level_pos=data["level_pos"],
                level_neg=data["level_neg"],
                vthoff_pos=data["vthoff_pos"],
                vthoff_neg=data["vthoff_neg"],
                gfac_pos=data["gfac_pos"],
                gfac_neg=data["gfac_neg"],
                vg_read=meta["vg_read"],
                temp=meta["temp"],
                aging_spec=AgingSpec.from_dict(meta["aging"]),
                noise_spec=VariationSpec.from_dict(meta["noise"]),
                seed=meta["seed"],
            )
        tile.unit_current = meta["unit_current"]
        tile.offset_coef = meta["offset_coef"]
        return tile


def map_weights(
    weights: np.ndarray,
    mapping: WeightMapping,
    params: DeviceParams,
    prog_cfg: ProgramConfig,
    vg_read: float,
    variation: VariationSpec | None = None,
    aging: AgingSpec | None = None,
    d2d_sigma_by_level: list | None = None,
    device_index_start: int = 0,
    seed: int = 0,
    max_cells: int = DEFAULT_MAX_CELLS,
):
    """Program a weight matrix into one tile via the closed-loop writer.

    Returns (tile, stats, next_device_index).  Non-converged cells keep
    their best-effort state and are only recorded in the statistics
    (write failures are part of the simulation).
    """
    if params.n_levels != mapping.levels_per_device:
        raise MappingError("device n_levels does not match mapping")
    variation = variation or VariationSpec()
    lp, lm = mapping.encode(weights)
    rows, cols = lp.shape
    if rows * cols > max_cells:
        raise MappingError("use map_layer for matrices above the tile capacity")

    bands = target_bands(params, vg_read, params.t_nom, prog_cfg, mode=mapping.target_mode)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9C0FFEE]))
    stats = ProgramStats()
    planes = {}
    idx = device_index_start
    for name, levels in (("pos", lp), ("neg", lm)):
        res = program_levels(params, levels.ravel(), vg_read, prog_cfg, rng, bands=bands)
        stats.absorb(res["converged"], res["iterations"])
        n = levels.size
        if d2d_sigma_by_level is not None:
            sigma = np.asarray(d2d_sigma_by_level, dtype=float)[levels.ravel()]
        else:
            sigma = variation.d2d_sigma_rel
        gfac = d2d_factors(variation, idx, n, sigma_rel=sigma)
        idx += n
        planes[name] = (
            res["vth_offset"].reshape(rows, cols),
            gfac.reshape(rows, cols),
        )

    tile = CrossbarTile(
        params=params,
        mapping=mapping,
        level_pos=lp,
        level_neg=lm,
        vthoff_pos=planes["pos"][0],
        vthoff_neg=planes["neg"][0],
        gfac_pos=planes["pos"][1],
        gfac_neg=planes["neg"][1],
        vg_read=vg_read,
        temp=params.t_nom,
        aging_spec=aging,
        noise_spec=variation,
        seed=seed,
        max_cells=max_cells,
    )
    return tile, stats, idx


class MappedLayer:
    """One dense layer as a row-partitioned list of tiles."""

    def __init__(self, tiles: list, row_slices: list):
        self.tiles = tiles
        self.row_slices = row_slices

    @property
    def unit_current(self) -> float:
        return self.tiles[0].unit_current

    @property
    def offset_coef(self) -> float:
        return self.tiles[0].offset_coef

    def matvec(self, x: np.ndarray, flags: InjectorFlags | None = None) -> np.ndarray:
        total = None
        for tile, sl in zip(self.tiles, self.row_slices):
            part = tile.matvec(x[..., sl], flags)
            total = part if total is None else total + part
        return total

    def weight_units(self, x: np.ndarray, flags: InjectorFlags | None = None) -> np.ndarray:
        """Column currents decoded into weight-units via the frozen
        calibration: I/unit - offset_coef * sum(x).  When the aging
        injector is live the gain carries the maintenance re-zero scalar."""
        unit = self.unit_current
        if flags is not None and flags.aging:
            unit = unit * self.tiles[0].aging_recal
        z = self.matvec(x, flags) / unit
        if self.offset_coef != 0.0:
            z = z - self.offset_coef * np.sum(np.clip(x, 0.0, 1.0), axis=-1, keepdims=x.ndim > 1)
        return z

    def set_temperature(self, temp: float):
        for t in self.tiles:
            t.set_temperature(temp)

    def set_read_voltage(self, vg: float, recalibrate: bool = True):
        for t in self.tiles:
            t.set_read_voltage(vg, recalibrate)

    @property
    def noise_draws(self) -> int:
        return sum(t.noise_draws for t in self.tiles)


def map_layer(
    weights: np.ndarray,
    mapping: WeightMapping,
    params: DeviceParams,
    prog_cfg: ProgramConfig,
    vg_read: float,
    max_cells: int = DEFAULT_MAX_CELLS,
    device_index_start: int = 0,
    seed: int = 0,
    **kw,
) -> tuple:
    """Tile a (fan_in x fan_out) weight matrix, splitting rows as needed."""
    rows, cols = weights.shape
    rows_per_tile = max(1, max_cells // cols)
    if rows_per_tile < 1 or cols > max_cells:
        raise MappingError(f"layer with {cols} columns cannot fit any tile")
    tiles, slices = [], []
    stats = ProgramStats()
    idx = device_index_start
    for start in range(0, rows, rows_per_tile):
        sl = slice(start, min(start + rows_per_tile, rows))
        tile, tstats, idx = map_weights(
            weights[sl],
            mapping,
            params,
            prog_cfg,
            vg_read,
            device_index_start=idx,
            seed=seed + len(tiles),
            max_cells=max_cells,
            **kw,
        )
        tiles.append(tile)
        slices.append(sl)
        stats.n_devices += tstats.n_devices
        stats.n_converged += tstats.n_converged
        for k, v in tstats.iteration_histogram.items():
            stats.iteration_histogram[k] = stats.iteration_histogram.get(k, 0) + v
    return MappedLayer(tiles, slices), stats, idx
