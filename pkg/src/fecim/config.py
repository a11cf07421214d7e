"""Configuration loading: one YAML file drives every subsystem.

Key names match the dataclass fields exactly; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
from dataclasses import dataclass, field

import yaml

from .device import DeviceParams
from .nonideality import AgingSpec, NoisePsdSpec, VariationSpec
from .programming import LtpLtdConfig, ProgramConfig
from .network import Hyperparams


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    device: DeviceParams
    variation: VariationSpec
    aging: AgingSpec
    noise_psd: NoisePsdSpec
    programming: ProgramConfig
    ltp_ltd: LtpLtdConfig
    hyperparams: Hyperparams
    topology: list
    training_seed: int
    d2d_sigma_by_level: list
    readout: dict
    sweep: dict
    retention: dict
    scenarios: dict
    raw: dict = field(repr=False, default_factory=dict)

    def device_for_levels(self, levels: int) -> DeviceParams:
        return self.device.with_updates(n_levels=levels)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]


def default_config_text() -> str:
    return importlib.resources.files("fecim").joinpath("default_config.yaml").read_text()


def load_config(path: str | None = None) -> SimConfig:
    """Load a YAML config; None loads the packaged defaults."""
    if path is None:
        raw = yaml.safe_load(default_config_text())
    else:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    try:
        training = raw["training"]
        return SimConfig(
            device=DeviceParams.from_dict(raw["device"]),
            variation=VariationSpec.from_dict(raw["variation"]),
            aging=AgingSpec.from_dict(raw["aging"]),
            noise_psd=NoisePsdSpec.from_dict(raw["noise_psd"]),
            programming=ProgramConfig.from_dict(raw["programming"]),
            ltp_ltd=LtpLtdConfig.from_dict(raw["ltp_ltd"]),
            hyperparams=Hyperparams.from_dict(training["hyperparams"]),
            topology=list(training["topology"]),
            training_seed=int(training["seed"]),
            d2d_sigma_by_level=list(raw["d2d_sigma_by_level"]),
            readout=dict(raw["readout"]),
            sweep=dict(raw["sweep"]),
            retention=dict(raw["retention"]),
            scenarios=dict(raw["scenarios"]),
            raw=raw,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc
