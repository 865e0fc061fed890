"""JSON experiment configs and the packaged parameter presets.

Files use lab units (frequencies in MHz, i.e. value/2pi; times in us;
lengths in um) and 1-based site labels. Everything is converted to rad/us
and 0-based indices on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .design import CHANNELS, QuenchConfig
from .evolution import NOISE_PRESETS, NoiseModel, PropagatorConfig
from .protocol import MAX_ORACLE_ATOMS, ButterflyOperator, OtocExperiment
from .pulses import AtomGeometry, HardwareProfile, mhz

DEFAULT_SHOTS = 500
PRESET_PACKAGE = "rydberg_otoc.presets"


class ConfigError(ValueError):
    pass


_TOP_KEYS = {
    "name", "description", "geometry", "drive", "quench", "butterfly", "times", "n_instances", "n_shots",
    "seed", "noise_preset", "noise", "mask_sites", "scatter_times", "analysis", "profile", "propagator",
    "scan", "output_dir", "observable",
}


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"'{section}' must be an object")
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(extra)}")


def time_grid(spec) -> tuple[float, ...]:
    """Explicit list, or {start, stop, step} inclusive of ``stop``."""
    if isinstance(spec, dict):
        _check_keys("times", spec, {"start", "stop", "step"})
        start, stop, step = float(spec.get("start", 0.0)), float(spec["stop"]), float(spec["step"])
        if step <= 0 or stop < start:
            raise ConfigError("time grid needs step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(np.round(start + k * step, 10)) for k in range(n))
    if isinstance(spec, (list, tuple)) and spec:
        return tuple(float(t) for t in spec)
    raise ConfigError("'times' must be a non-empty list or {start, stop, step}")


@dataclass(frozen=True)
class ScanSettings:
    n_atoms: int = 5
    spacing_um: float = 9.5
    n_quench_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    n_instances: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    experiment: OtocExperiment
    mask_sites: tuple[int, ...] = ()  # 0-based
    scatter_times: tuple[float, ...] = ()
    threshold: float = 0.5
    cutoff_time: float = 4.0
    noise_preset: str = "none"
    scan: ScanSettings = ScanSettings()
    output_dir: str | None = None
    source: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def config_hash(self) -> str:
        return self.experiment.config_hash()

    def with_overrides(self, seed: int | None = None, noise_preset: str | None = None,
                       mask_sites: list[int] | None = None, threshold: float | None = None,
                       cutoff_time: float | None = None, n_shots: int | None = None,
                       n_instances: int | None = None) -> "ExperimentConfig":
        exp = self.experiment
        if seed is not None:
            exp = replace(exp, seed=int(seed))
        if noise_preset is not None:
            exp = replace(exp, noise=resolve_noise(noise_preset))
        if n_shots is not None:
            exp = replace(exp, n_shots=int(n_shots))
        if n_instances is not None:
            exp = replace(exp, n_instances=int(n_instances))
        out = replace(self, experiment=exp)
        if noise_preset is not None:
            out = replace(out, noise_preset=noise_preset)
        if mask_sites is not None:
            out = replace(out, mask_sites=tuple(_zero_based(s, exp.n_atoms, "mask site") for s in mask_sites))
        if threshold is not None:
            out = replace(out, threshold=float(threshold))
        if cutoff_time is not None:
            out = replace(out, cutoff_time=float(cutoff_time))
        out.validate()
        return out

    def validate(self) -> None:
        try:
            self.experiment.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        for t in self.scatter_times:
            if not any(abs(t - s) < 1e-9 for s in self.experiment.times):
                raise ConfigError(f"scatter time {t} is not on the time grid")


def resolve_noise(name: str) -> NoiseModel | None:
    if name not in NOISE_PRESETS:
        raise ConfigError(f"unknown noise preset '{name}'; choose from {sorted(NOISE_PRESETS)}")
    return NOISE_PRESETS[name]


def _zero_based(site, n_atoms: int, what: str) -> int:
    if not isinstance(site, int) or isinstance(site, bool):
        raise ConfigError(f"{what} must be an integer, got {site!r}")
    if not 1 <= site <= n_atoms:
        raise ConfigError(f"{what} {site} outside 1..{n_atoms}")
    return site - 1


def _geometry(data: dict) -> AtomGeometry:
    _check_keys("geometry", data, {"n_atoms", "spacing_um", "positions_um"})
    if "positions_um" in data:
        pos = np.asarray(data["positions_um"], dtype=float)
        return AtomGeometry(pos if pos.ndim == 2 else np.column_stack([pos, np.zeros_like(pos)]))
    n = data.get("n_atoms")
    if not isinstance(n, int) or n < 1:
        raise ConfigError("geometry.n_atoms must be a positive integer")
    return AtomGeometry.chain(n, float(data.get("spacing_um", 9.5)))


_QUENCH_MAP = {
    "n_quench": ("n_quench", int),
    "t_quench_us": ("t_quench", float),
    "spacing_us": ("spacing", float),
    "ramp_us": ("ramp_time", float),
    "budget_us": ("stage_budget", float),
    "mean_mhz": ("mean", mhz),
    "sigma_mhz": ("sigma", mhz),
    "rabi_mean_mhz": ("rabi_mean", mhz),
    "rabi_sigma_mhz": ("rabi_sigma", mhz),
    "start_delta_mhz": ("start_delta", mhz),
    "channel": ("channel", str),
}


def _quench(data: dict, drive_omega: float) -> QuenchConfig:
    _check_keys("quench", data, set(_QUENCH_MAP))
    if "channel" in data and data["channel"] not in CHANNELS:
        raise ConfigError(f"quench.channel must be one of {CHANNELS}")
    kwargs = {dst: conv(data[src]) for src, (dst, conv) in _QUENCH_MAP.items() if src in data}
    return QuenchConfig(drive_omega=drive_omega, **kwargs)


def _butterfly(data: dict, n_atoms: int) -> ButterflyOperator:
    _check_keys("butterfly", data, {"site", "phase_rad", "pulse_amplitude_mhz", "pulse_duration_us"})
    site = _zero_based(data.get("site", n_atoms), n_atoms, "butterfly site")
    if "pulse_amplitude_mhz" in data:
        return ButterflyOperator.from_pulse(site, mhz(data["pulse_amplitude_mhz"]),
                                            float(data.get("pulse_duration_us", 0.05)))
    return ButterflyOperator(site, phase=float(data.get("phase_rad", math.pi)))


def _noise(data: dict) -> NoiseModel:
    allowed = {"gamma_depol", "gamma_rg", "detuning_sigma_mhz", "rabi_rel_sigma", "position_sigma_um",
               "local_site_multiplier", "n_trajectories", "depol_channels"}
    _check_keys("noise", data, allowed)
    return NoiseModel(
        gamma_depol=float(data.get("gamma_depol", 0.0)),
        gamma_rg=float(data.get("gamma_rg", 0.0)),
        detuning_sigma=mhz(data.get("detuning_sigma_mhz", 0.0)),
        rabi_rel_sigma=float(data.get("rabi_rel_sigma", 0.0)),
        position_sigma=float(data.get("position_sigma_um", 0.0)),
        local_site_multiplier=float(data.get("local_site_multiplier", 2.0)),
        n_trajectories=int(data.get("n_trajectories", 1)),
        depol_channels=str(data.get("depol_channels", "single")),
    )


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and fully validate an experiment config from its JSON form."""
    _check_keys("config", data, _TOP_KEYS)
    try:
        geom = _geometry(data.get("geometry", {"n_atoms": 8}))
        n = geom.n_atoms
        drive = data.get("drive", {})
        _check_keys("drive", drive, {"omega_mhz", "delta_mhz"})
        omega, delta = mhz(drive.get("omega_mhz", 2.5)), mhz(drive.get("delta_mhz", 1.5))
        profile = HardwareProfile.from_dict(data.get("profile", {}))
        prop = PropagatorConfig(**data.get("propagator", {}))
        noise_name = data.get("noise_preset", "none")
        noise = _noise(data["noise"]) if "noise" in data else resolve_noise(noise_name)
        exp = OtocExperiment(
            geometry=geom,
            drive_omega=omega,
            drive_delta=delta,
            quench=_quench(data.get("quench", {}), omega),
            butterfly=_butterfly(data.get("butterfly", {}), n),
            times=time_grid(data.get("times", {"start": 0.0, "stop": 3.2, "step": 0.1})),
            n_instances=int(data.get("n_instances", 200)),
            n_shots=int(data.get("n_shots", DEFAULT_SHOTS)),
            noise=noise,
            seed=int(data.get("seed", 0)),
            profile=profile,
            propagator=prop,
            observable=data.get("observable", "centered"),
        )
        scan_data = data.get("scan", {})
        _check_keys("scan", scan_data, {"n_atoms", "spacing_um", "n_quench_values", "n_instances"})
        scan = ScanSettings(
            n_atoms=int(scan_data.get("n_atoms", 5)),
            spacing_um=float(scan_data.get("spacing_um", geom.lattice_spacing or 9.5)),
            n_quench_values=tuple(int(v) for v in scan_data.get("n_quench_values", (1, 2, 3, 4, 5, 6))),
            n_instances=int(scan_data.get("n_instances", 200)),
        )
        analysis = data.get("analysis", {})
        _check_keys("analysis", analysis, {"threshold", "cutoff_time_us"})
        cfg = ExperimentConfig(
            name=str(data.get("name", "custom")),
            experiment=exp,
            mask_sites=tuple(_zero_based(s, n, "mask site") for s in data.get("mask_sites", [])),
            scatter_times=tuple(float(t) for t in data.get("scatter_times", [])),
            threshold=float(analysis.get("threshold", 0.5)),
            cutoff_time=float(analysis.get("cutoff_time_us", 4.0)),
            noise_preset=noise_name if "noise" not in data else "custom",
            scan=scan,
            output_dir=data.get("output_dir"),
            source=data,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    cfg.validate()
    return cfg


def parse_json(text: str, origin: str = "<config>") -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def preset_names() -> list[str]:
    files = resources.files(PRESET_PACKAGE).iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json"))


def read_preset_text(name: str) -> str:
    fname = name if name.endswith(".json") else f"{name}.json"
    res = resources.files(PRESET_PACKAGE).joinpath(fname)
    if not res.is_file():
        raise ConfigError(f"no preset named '{name}'; available: {preset_names()}")
    return res.read_text()


def load_config(path_or_name: str | Path) -> ExperimentConfig:
    """Load a config file, falling back to a packaged preset of the same name.

    ``presets/fiducial.json``, ``fiducial.json`` and ``fiducial`` all resolve
    to the packaged fiducial preset when no such file exists locally.
    """
    path = Path(path_or_name)
    if path.is_file():
        text, origin = path.read_text(), str(path)
    else:
        text, origin = read_preset_text(path.name), f"preset:{path.stem}"
    return config_from_dict(parse_json(text, origin))


def load_preset(name: str) -> ExperimentConfig:
    return config_from_dict(parse_json(read_preset_text(name), f"preset:{name}"))


def check_oracle_size(n_atoms: int) -> None:
    if n_atoms > MAX_ORACLE_ATOMS:
        raise ConfigError(f"exact oracle limited to N <= {MAX_ORACLE_ATOMS} atoms (got {n_atoms}); "
                          f"the {2**n_atoms}-dimensional propagator is out of reach")
