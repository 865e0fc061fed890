"""Randomized global-quench ensembles and their second-moment (2-design) diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .evolution import Propagator, PropagatorConfig
from .pulses import AtomGeometry, HardwareProfile, PulseSchedule, Waveform, mhz, require_valid
from .quantum import StateVector, as_distribution, outcome_counts

log = logging.getLogger(__name__)

CHANNELS = ("detuning", "rabi", "both")


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class QuenchConfig:
    """Quench-stage layout and sampling law. Times in us, amplitudes in rad/us.

    The fragment is: ramp-up (Omega 0 -> drive), ``n_quench`` flat plateaus of
    length ``t_quench`` joined by linear transitions of length ``spacing``, and
    a ramp-down that lands on (``final_omega``, ``final_delta``).
    """

    n_quench: int = 4
    t_quench: float = 0.1
    spacing: float = 0.1
    ramp_time: float = 0.05
    stage_budget: float = 1.0
    mean: float = 0.0
    sigma: float = mhz(3.0)
    channel: str = "detuning"
    drive_omega: float = mhz(2.5)
    rabi_mean: float | None = None  # defaults to drive_omega / 2
    rabi_sigma: float | None = None  # defaults to drive_omega / 2
    start_delta: float = 0.0
    final_omega: float | None = None  # defaults to drive_omega
    final_delta: float = 0.0

    def __post_init__(self):
        if self.n_quench < 1:
            raise ValueError("n_quench must be >= 1")
        if not (self.t_quench > 0 and self.spacing > 0 and self.ramp_time > 0):
            raise ValueError("t_quench, spacing and ramp_time must be positive")
        if self.sigma < 0 or (self.rabi_sigma is not None and self.rabi_sigma < 0):
            raise ValueError("sigma must be >= 0")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")

    @property
    def duration(self) -> float:
        return self.n_quench * self.t_quench + (self.n_quench - 1) * self.spacing + 2 * self.ramp_time

    def check_budget(self) -> None:
        if self.duration > self.stage_budget + 1e-9:
            raise BudgetError(f"quench stage lasts {self.duration:.4g} us, budget is {self.stage_budget} us")

    @property
    def landing_omega(self) -> float:
        return self.drive_omega if self.final_omega is None else self.final_omega

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "QuenchConfig":
        return cls(**data)


@dataclass(frozen=True)
class QuenchInstance:
    instance_id: int
    seed: int
    delta_amplitudes: np.ndarray = field(repr=False)
    omega_amplitudes: np.ndarray = field(repr=False)
    schedule: PulseSchedule = field(repr=False)
    n_clipped: int = 0

    def fingerprint(self) -> str:
        import hashlib

        blob = np.concatenate([self.delta_amplitudes, self.omega_amplitudes]).tobytes()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class QuenchEnsemble:
    config: QuenchConfig
    instances: tuple[QuenchInstance, ...]
    master_seed: int

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def clip_fraction(self) -> float:
        total = sum(len(i.delta_amplitudes) for i in self.instances)
        return sum(i.n_clipped for i in self.instances) / max(total, 1)


def instance_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def _clip_sequence(values: np.ndarray, lo: float, hi: float, start: float, end: float,
                   edge_reach: float, step_reach: float) -> tuple[np.ndarray, int]:
    """Clip draws into the channel range and the slew-reachable window."""
    out = np.array(values, dtype=float)
    n_clip = 0
    for k in range(len(out)):
        a, b = lo, hi
        if k == 0:
            a, b = max(a, start - edge_reach), min(b, start + edge_reach)
        else:
            a, b = max(a, out[k - 1] - step_reach), min(b, out[k - 1] + step_reach)
        if k == len(out) - 1:
            a, b = max(a, end - edge_reach), min(b, end + edge_reach)
        clipped = min(max(out[k], a), b)
        if clipped != out[k]:
            n_clip += 1
            out[k] = clipped
    return out, n_clip


def build_fragment(config: QuenchConfig, deltas: Sequence[float], omegas: Sequence[float]) -> PulseSchedule:
    n = config.n_quench
    durations = [config.ramp_time]
    for k in range(n):
        durations.append(config.t_quench)
        durations.append(config.spacing if k < n - 1 else config.ramp_time)
    d_vals = [config.start_delta]
    o_vals = [0.0]
    for k in range(n):
        d_vals += [deltas[k], deltas[k]]
        o_vals += [omegas[k], omegas[k]]
    d_vals.append(config.final_delta)
    o_vals.append(config.landing_omega)
    return PulseSchedule(Waveform.from_durations(durations, o_vals), Waveform.from_durations(durations, d_vals))


def sample_instance(config: QuenchConfig, instance_id: int, seed: int,
                    profile: HardwareProfile = HardwareProfile()) -> QuenchInstance:
    rng = np.random.default_rng(seed)
    n = config.n_quench
    if config.channel in ("detuning", "both"):
        raw_d = rng.normal(config.mean, config.sigma, n)
    else:
        raw_d = np.full(n, config.mean)
    if config.channel in ("rabi", "both"):
        mu = config.drive_omega / 2 if config.rabi_mean is None else config.rabi_mean
        sd = config.drive_omega / 2 if config.rabi_sigma is None else config.rabi_sigma
        raw_o = rng.normal(mu, sd, n)
    else:
        raw_o = np.full(n, config.drive_omega)
    # fixed channels go through the same clip so every fragment stays valid
    deltas, c_d = _clip_sequence(
        raw_d, profile.delta_min, profile.delta_max, config.start_delta, config.final_delta,
        profile.delta_slew * config.ramp_time, profile.delta_slew * config.spacing,
    )
    omegas, c_o = _clip_sequence(
        raw_o, 0.0, profile.omega_max, 0.0, config.landing_omega,
        profile.omega_slew * config.ramp_time, profile.omega_slew * config.spacing,
    )
    n_clip = c_d + c_o
    sched = build_fragment(config, deltas, omegas)
    return QuenchInstance(instance_id, seed, deltas, omegas, sched, n_clip)


def sample_ensemble(config: QuenchConfig, n_instances: int, master_seed: int,
                    profile: HardwareProfile = HardwareProfile()) -> QuenchEnsemble:
    """Draw ``n_instances`` reproducible quench instances; instance ``u`` is seeded from (master_seed, u)."""
    config.check_budget()
    if n_instances < 1:
        raise ValueError("need at least one instance")
    seeds = [instance_seed(master_seed, u) for u in range(n_instances)]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("instance seed collision")
    instances = tuple(sample_instance(config, u, s, profile) for u, s in enumerate(seeds))
    for inst in instances:
        require_valid(inst.schedule, profile)
    ens = QuenchEnsemble(config, instances, int(master_seed))
    if ens.clip_fraction > 0:
        log.info("quench amplitudes clipped: fraction %.4f", ens.clip_fraction)
    return ens


def second_moment(probs) -> float:
    p = as_distribution(probs)
    return float(np.sum(p**2))


def second_moment_from_shots(shots: Sequence[str]) -> float:
    """Unbiased collision estimator of sum_s P(s)^2."""
    n = len(shots)
    if n < 2:
        raise ValueError("need at least 2 shots")
    counts = np.array(list(outcome_counts(shots).values()), dtype=float)
    return float(np.sum(counts * (counts - 1)) / (n * (n - 1)))


def haar_second_moment(dimension: int, purity: float = 1.0, per_outcome: bool = False) -> float:
    """Haar average of sum_s P(s)^2 for a state of the given purity, (1 + Tr rho^2)/(D + 1).

    ``per_outcome=True`` returns the average of a single P(s)^2 instead,
    (1 + Tr rho^2)/(D (D + 1)).
    """
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    if not 1.0 / dimension - 1e-12 <= purity <= 1.0 + 1e-12:
        raise ValueError(f"purity must lie in [1/D, 1], got {purity}")
    total = (1.0 + purity) / (dimension + 1)
    return total / dimension if per_outcome else total


@dataclass(frozen=True)
class ScanRow:
    n_quench: int
    m2_mean: float
    m2_haar: float
    abs_diff: float
    stderr: float
    n_instances: int
    seed: int
    within_budget: bool = True


SCAN_COLUMNS = ("n_quench", "m2_mean", "m2_haar", "abs_diff", "stderr", "N_U", "seed")


def ensemble_second_moments(ensemble: QuenchEnsemble, propagator: Propagator) -> np.ndarray:
    psi0 = StateVector.ground(propagator.n_atoms).amplitudes
    out = np.empty(len(ensemble))
    for k, inst in enumerate(ensemble.instances):
        psi, _ = propagator.run(psi0, inst.schedule)
        out[k] = second_moment(np.abs(psi) ** 2 / np.vdot(psi, psi).real)
    return out


def convergence_scan(
    template: QuenchConfig,
    n_quench_values: Sequence[int],
    n_instances: int,
    geometry: AtomGeometry,
    profile: HardwareProfile = HardwareProfile(),
    seed: int = 0,
    propagator: Propagator | None = None,
    prop_config: PropagatorConfig = PropagatorConfig(),
) -> list[ScanRow]:
    """|mean M2 - Haar M2| versus the number of quenches, starting from |0...0>.

    Rows whose quench stage overflows the template budget are still computed
    (with the budget lifted) and flagged ``within_budget=False``.
    """
    if n_instances < 10:
        raise ValueError("convergence scan needs at least 10 instances")
    prop = propagator or Propagator(geometry, profile, prop_config)
    m2_haar = haar_second_moment(2**geometry.n_atoms)
    rows = []
    for nq in n_quench_values:
        cfg = replace(template, n_quench=int(nq))
        fits = cfg.duration <= cfg.stage_budget + 1e-9
        if not fits:
            log.warning("n_quench=%d needs %.3g us > budget %.3g us; budget lifted for this row",
                        nq, cfg.duration, cfg.stage_budget)
            cfg = replace(cfg, stage_budget=cfg.duration)
        ens = sample_ensemble(cfg, n_instances, seed, profile)
        m2 = ensemble_second_moments(ens, prop)
        mean = float(m2.mean())
        rows.append(ScanRow(int(nq), mean, m2_haar, abs(mean - m2_haar),
                            float(m2.std(ddof=1) / math.sqrt(len(m2))), n_instances, int(seed), fits))
    return rows
