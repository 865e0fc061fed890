"""Atom geometry, hardware limits, piecewise-linear control waveforms and the
time-dependent Rydberg Hamiltonian.

All angular frequencies are rad/us, times are us, lengths are um. User-facing
configs quote frequencies as value/2pi in MHz; :func:`mhz` converts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .quantum import Operator, flip_indices, occupation_diagonals, sum_x

TWO_PI = 2 * math.pi
# C6/2pi = 862690 MHz um^6 for the 70S Rb-87 Rydberg level
DEFAULT_C6 = TWO_PI * 862690.0
_EPS = 1e-9


def mhz(value: float) -> float:
    """Convert a frequency quoted as value/2pi in MHz to rad/us."""
    return TWO_PI * value


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareProfile:
    omega_max: float = 15.8
    delta_min: float = -125.0
    delta_max: float = 125.0
    local_delta_min: float = -125.0
    local_delta_max: float = 125.0
    omega_slew: float = 400.0  # rad/us^2
    delta_slew: float = 2500.0
    local_delta_slew: float = 2500.0
    max_duration: float = 4.0
    min_spacing: float = 4.0
    c6: float = DEFAULT_C6
    rabi_half_convention: bool = False

    def __post_init__(self):
        positive = ("omega_max", "omega_slew", "delta_slew", "local_delta_slew", "max_duration", "min_spacing", "c6")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.delta_min <= 0 <= self.delta_max:
            raise ValueError("delta range must contain 0")
        if not self.local_delta_min <= 0 <= self.local_delta_max:
            raise ValueError("local delta range must contain 0")

    @property
    def rabi_factor(self) -> float:
        return 0.5 if self.rabi_half_convention else 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareProfile":
        return cls(**data)


@dataclass(frozen=True)
class AtomGeometry:
    positions: np.ndarray = field(repr=False)
    lattice_spacing: float | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[1] not in (1, 2) or pos.shape[0] < 1:
            raise ValueError("positions must be an (N, 1) or (N, 2) array")
        if pos.shape[1] == 1:
            pos = np.hstack([pos, np.zeros_like(pos)])
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def chain(cls, n_atoms: int, spacing: float) -> "AtomGeometry":
        return cls(np.arange(n_atoms) * spacing, lattice_spacing=spacing)

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def distances(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def min_distance(self) -> float:
        if self.n_atoms < 2:
            return math.inf
        d = self.distances()
        return float(d[np.triu_indices(self.n_atoms, 1)].min())

    def jittered(self, rng: np.random.Generator, sigma: float) -> "AtomGeometry":
        if sigma == 0:
            return self
        return AtomGeometry(self.positions + rng.normal(0.0, sigma, self.positions.shape), self.lattice_spacing)

    def to_dict(self) -> dict:
        return {"positions": self.positions.tolist(), "lattice_spacing": self.lattice_spacing}

    @classmethod
    def from_dict(cls, data: dict) -> "AtomGeometry":
        return cls(np.array(data["positions"], dtype=float), data.get("lattice_spacing"))


@dataclass(frozen=True)
class Waveform:
    """Piecewise-linear waveform through ``(times[k], values[k])``."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        t = tuple(float(x) for x in self.times)
        v = tuple(float(x) for x in self.values)
        if len(t) == 0 or len(t) != len(v):
            raise ValueError("waveform needs matching, nonempty times and values")
        if t[0] != 0.0:
            raise ValueError("waveform must start at t=0")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("waveform times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float, duration: float) -> "Waveform":
        if duration == 0:
            return cls((0.0,), (value,))
        return cls((0.0, duration), (value, value))

    @classmethod
    def from_durations(cls, durations: Sequence[float], values: Sequence[float]) -> "Waveform":
        """Breakpoint values joined by segments of the given durations."""
        if len(values) != len(durations) + 1:
            raise ValueError("need one more value than durations")
        return cls(tuple(np.concatenate([[0.0], np.cumsum(durations)])), tuple(values))

    @property
    def duration(self) -> float:
        return self.times[-1]

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.times)

    def then(self, other: "Waveform") -> "Waveform":
        """Append ``other`` after this waveform; the joint values must coincide."""
        if not math.isclose(self.values[-1], other.values[0], rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"discontinuous join: {self.values[-1]} -> {other.values[0]}")
        shift = self.duration
        times = self.times + tuple(shift + t for t in other.times[1:])
        return Waveform(times, self.values + other.values[1:])

    def scaled(self, factor: float) -> "Waveform":
        if factor == 1.0:
            return self
        return Waveform(self.times, tuple(factor * v for v in self.values))

    def shifted(self, offset: float) -> "Waveform":
        if offset == 0.0:
            return self
        return Waveform(self.times, tuple(v + offset for v in self.values))

    def to_dict(self) -> dict:
        return {"times": list(self.times), "values": list(self.values)}

    @classmethod
    def from_dict(cls, data: dict) -> "Waveform":
        return cls(tuple(data["times"]), tuple(data["values"]))


@dataclass(frozen=True)
class LocalDetuning:
    mask: tuple[bool, ...]
    waveform: Waveform

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))

    def to_dict(self) -> dict:
        return {"mask": list(self.mask), "waveform": self.waveform.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "LocalDetuning":
        return cls(tuple(data["mask"]), Waveform.from_dict(data["waveform"]))


@dataclass(frozen=True)
class PulseSchedule:
    omega: Waveform
    delta: Waveform
    local: LocalDetuning | None = None

    def __post_init__(self):
        spans = {self.omega.duration, self.delta.duration}
        if self.local is not None:
            spans.add(self.local.waveform.duration)
        if len(spans) != 1:
            raise ScheduleError(f"channel waveforms span different durations: {sorted(spans)}")

    @classmethod
    def constant(cls, omega: float, delta: float, duration: float) -> "PulseSchedule":
        return cls(Waveform.constant(omega, duration), Waveform.constant(delta, duration))

    @property
    def total_time(self) -> float:
        return self.omega.duration

    def waveforms(self) -> dict[str, Waveform]:
        out = {"omega": self.omega, "delta": self.delta}
        if self.local is not None:
            out["local"] = self.local.waveform
        return out

    def breakpoints(self) -> np.ndarray:
        """Sorted union of all channel breakpoints."""
        pts = set()
        for wf in self.waveforms().values():
            pts.update(wf.times)
        return np.array(sorted(pts))

    def values_at(self, t: float) -> tuple[float, float, float]:
        local = 0.0 if self.local is None else float(self.local.waveform(t))
        return float(self.omega(t)), float(self.delta(t)), local

    def then(self, other: "PulseSchedule") -> "PulseSchedule":
        local = None
        if self.local is not None or other.local is not None:
            masks = [s.local.mask for s in (self, other) if s.local is not None]
            if len(set(masks)) > 1:
                raise ScheduleError("cannot join schedules with different local masks")
            a = self.local.waveform if self.local else Waveform.constant(0.0, self.total_time)
            b = other.local.waveform if other.local else Waveform.constant(0.0, other.total_time)
            local = LocalDetuning(masks[0], a.then(b))
        return PulseSchedule(self.omega.then(other.omega), self.delta.then(other.delta), local)

    def perturbed(self, rabi_scale: float = 1.0, detuning_offset: float = 0.0) -> "PulseSchedule":
        """Static laser noise: scale the Rabi channel, offset the global detuning."""
        if rabi_scale == 1.0 and detuning_offset == 0.0:
            return self
        return replace(self, omega=self.omega.scaled(rabi_scale), delta=self.delta.shifted(detuning_offset))

    def to_dict(self) -> dict:
        out = {"omega": self.omega.to_dict(), "delta": self.delta.to_dict()}
        if self.local is not None:
            out["local"] = self.local.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PulseSchedule":
        local = LocalDetuning.from_dict(data["local"]) if data.get("local") else None
        return cls(Waveform.from_dict(data["omega"]), Waveform.from_dict(data["delta"]), local)


@dataclass(frozen=True)
class Violation:
    kind: str  # slew | range | duration | spacing | mask
    channel: str
    message: str


def validate_schedule(
    sched: PulseSchedule, profile: HardwareProfile, geometry: AtomGeometry | None = None
) -> list[Violation]:
    """Every hardware violation of ``sched`` (and ``geometry``); empty means valid."""
    out: list[Violation] = []
    if sched.total_time > profile.max_duration + _EPS:
        out.append(Violation("duration", "all", f"total time {sched.total_time:.4g} us exceeds {profile.max_duration} us"))
    limits = {
        "omega": (0.0, profile.omega_max, profile.omega_slew),
        "delta": (profile.delta_min, profile.delta_max, profile.delta_slew),
        "local": (profile.local_delta_min, profile.local_delta_max, profile.local_delta_slew),
    }
    for name, wf in sched.waveforms().items():
        lo, hi, slew = limits[name]
        vals = np.asarray(wf.values)
        bad = (vals < lo - _EPS) | (vals > hi + _EPS)
        if bad.any():
            k = int(np.argmax(bad))
            out.append(Violation("range", name, f"value {vals[k]:.4g} at t={wf.times[k]:.4g} outside [{lo}, {hi}]"))
        if len(vals) > 1:
            slopes = np.abs(wf.slopes())
            over = slopes > slew * (1 + _EPS)
            if over.any():
                k = int(np.argmax(over))
                out.append(Violation("slew", name, f"slope {slopes[k]:.4g} after t={wf.times[k]:.4g} exceeds {slew}"))
    if geometry is not None:
        if geometry.min_distance() < profile.min_spacing - _EPS:
            out.append(
                Violation("spacing", "geometry", f"atoms {geometry.min_distance():.4g} um apart, minimum {profile.min_spacing}")
            )
        if sched.local is not None and len(sched.local.mask) != geometry.n_atoms:
            out.append(Violation("mask", "local", "local mask length does not match atom count"))
    return out


def require_valid(sched: PulseSchedule, profile: HardwareProfile, geometry: AtomGeometry | None = None) -> None:
    problems = validate_schedule(sched, profile, geometry)
    if problems:
        raise ScheduleError("; ".join(f"{v.kind}/{v.channel}: {v.message}" for v in problems))


def blockade_radius(omega: float, c6: float = DEFAULT_C6) -> float:
    if omega <= 0:
        raise ValueError("omega must be positive")
    return (c6 / omega) ** (1 / 6)


class RydbergHamiltonian:
    """Precomputed terms of H(t) for one geometry and hardware profile.

    H = f * Omega(t) sum_j X_j - sum_j Delta_j(t) n_j + sum_{j<k} C6/r_jk^6 n_j n_k,
    with f = 1 (default) or 1/2 under ``rabi_half_convention``.
    """

    def __init__(self, geometry: AtomGeometry, profile: HardwareProfile):
        self.geometry = geometry
        self.profile = profile
        self.n_atoms = geometry.n_atoms
        self.dim = 2**self.n_atoms
        self.occupations = occupation_diagonals(self.n_atoms)
        self.number = self.occupations.sum(axis=0)
        self.sx = sum_x(self.n_atoms)
        self.flips = np.stack([flip_indices(self.n_atoms, j) for j in range(self.n_atoms)])
        self.interaction = self._interaction_diagonal()
        self._local_cache: dict[tuple[bool, ...], np.ndarray] = {}

    def _interaction_diagonal(self) -> np.ndarray:
        dist = self.geometry.distances()
        diag = np.zeros(self.dim)
        for j in range(self.n_atoms):
            for k in range(j + 1, self.n_atoms):
                diag += self.profile.c6 / dist[j, k] ** 6 * self.occupations[j] * self.occupations[k]
        return diag

    def local_number(self, mask: Sequence[bool]) -> np.ndarray:
        key = tuple(bool(m) for m in mask)
        if key not in self._local_cache:
            if len(key) != self.n_atoms:
                raise ScheduleError("local mask length does not match atom count")
            self._local_cache[key] = self.occupations[np.array(key, dtype=bool)].sum(axis=0)
        return self._local_cache[key]

    def diagonal(self, delta: float, local: float = 0.0, mask: Sequence[bool] | None = None) -> np.ndarray:
        diag = self.interaction - delta * self.number
        if mask is not None and local != 0.0:
            diag = diag - local * self.local_number(mask)
        return diag

    def matrix(self, omega: float, delta: float, local: float = 0.0, mask: Sequence[bool] | None = None) -> np.ndarray:
        h = (self.profile.rabi_factor * omega) * self.sx
        h[np.diag_indices(self.dim)] += self.diagonal(delta, local, mask)
        return h

    def apply(self, coef: float, diag: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """(coef * sum_j X_j + diag(diag)) @ psi without forming the matrix."""
        hx = np.add.reduce(psi[self.flips], axis=0)
        hx *= coef
        hx += (diag[:, None] if psi.ndim == 2 else diag) * psi
        return hx

    def at(self, sched: PulseSchedule, t: float) -> np.ndarray:
        omega, delta, local = sched.values_at(t)
        mask = sched.local.mask if sched.local is not None else None
        return self.matrix(omega, delta, local, mask)


def build_hamiltonian(geom: AtomGeometry, sched: PulseSchedule, profile: HardwareProfile, t: float) -> Operator:
    require_valid(sched, profile, geom)
    if not -_EPS <= t <= sched.total_time + _EPS:
        raise ValueError(f"t={t} outside [0, {sched.total_time}]")
    return Operator(RydbergHamiltonian(geom, profile).at(sched, t), hermitian=True)


def dump_setup(path, geometry: AtomGeometry, schedule: PulseSchedule, profile: HardwareProfile) -> None:
    """Write geometry, schedule and profile as one JSON document (rad/us, us, um)."""
    doc = {
        "units": {"frequency": "rad/us", "time": "us", "length": "um"},
        "geometry": geometry.to_dict(),
        "profile": profile.to_dict(),
        "schedule": schedule.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_setup(path) -> tuple[AtomGeometry, PulseSchedule, HardwareProfile]:
    with open(path) as fh:
        doc = json.load(fh)
    return (
        AtomGeometry.from_dict(doc["geometry"]),
        PulseSchedule.from_dict(doc["schedule"]),
        HardwareProfile.from_dict(doc["profile"]),
    )
