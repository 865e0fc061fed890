"""Randomized-measurement OTOC protocol and the exact infinite-temperature oracle.

For every quench instance u two branches are run from |0...0>: the quench
fragment followed by the drive (plain), and the same fragment, the butterfly
kick V, then the drive (butterflied). Per-site observables measured in both
branches are correlated over instances.

Observables: with ``observable="centered"`` (default) the per-site observable
is z_i = 2 n_i - 1, read off the same occupation measurement. Its ensemble
correlation converges to the normalized infinite-temperature OTOC of z_i for a
unitary 2-design. ``observable="occupation"`` uses n_i itself.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .design import QuenchConfig, QuenchInstance, instance_seed, sample_instance
from .evolution import (
    NoiseModel,
    Propagator,
    PropagatorConfig,
    derive_rng,
    noisy_probabilities,
)
from .pulses import AtomGeometry, HardwareProfile, PulseSchedule, ScheduleError, require_valid
from .quantum import StateVector, occupation_diagonals, sample_shots, shots_to_array

log = logging.getLogger(__name__)

MAX_ORACLE_ATOMS = 11
OBSERVABLES = ("centered", "occupation")
BRANCHES = ("plain", "butterflied")


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ButterflyOperator:
    """Local perturbation V on ``site``.

    ``kind="phase"``: V = exp(i phase n_site), realized as a local detuning
    pulse with amplitude * duration = phase. ``kind="projector"``: V = n_site
    (not unitary; usable in the oracle only).
    """

    site: int
    kind: str = "phase"
    phase: float = math.pi
    pulse_amplitude: float = 20 * math.pi  # rad/us
    pulse_duration: float = 0.05  # us

    def __post_init__(self):
        if self.kind not in ("phase", "projector"):
            raise ValueError("butterfly kind must be 'phase' or 'projector'")
        if self.site < 0:
            raise ValueError("butterfly site must be >= 0")

    @classmethod
    def from_pulse(cls, site: int, amplitude: float, duration: float) -> "ButterflyOperator":
        return cls(site, "phase", amplitude * duration, amplitude, duration)

    @property
    def unitary(self) -> bool:
        return self.kind == "phase"

    def diagonal(self, n_atoms: int) -> np.ndarray:
        if not 0 <= self.site < n_atoms:
            raise IndexError(f"butterfly site {self.site} out of range")
        occ = occupation_diagonals(n_atoms)[self.site]
        if self.kind == "projector":
            return occ.astype(complex)
        return np.exp(1j * self.phase * occ)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OtocExperiment:
    geometry: AtomGeometry
    drive_omega: float
    drive_delta: float
    quench: QuenchConfig
    butterfly: ButterflyOperator
    times: tuple[float, ...]
    n_instances: int = 200
    n_shots: int = 0
    noise: NoiseModel | None = None
    seed: int = 0
    profile: HardwareProfile = HardwareProfile()
    propagator: PropagatorConfig = PropagatorConfig()
    observable: str = "centered"

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    @property
    def n_atoms(self) -> int:
        return self.geometry.n_atoms

    @property
    def t_max(self) -> float:
        return max(self.times)

    def resolved_quench(self) -> QuenchConfig:
        """Quench config whose ramp-down lands on the drive point."""
        return replace(self.quench, final_delta=self.drive_delta,
                       final_omega=self.drive_omega if self.quench.final_omega is None else self.quench.final_omega)

    def drive_schedule(self) -> PulseSchedule:
        return PulseSchedule.constant(self.drive_omega, self.drive_delta, max(self.t_max, 1e-6))

    def validate(self) -> None:
        if not self.times:
            raise ExperimentError("empty time grid")
        if min(self.times) < 0:
            raise ExperimentError("negative time in grid")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ExperimentError("time grid must be strictly increasing")
        if not 0 <= self.butterfly.site < self.n_atoms:
            raise ExperimentError(f"butterfly site {self.butterfly.site} out of range")
        if not self.butterfly.unitary:
            raise ExperimentError("projector butterflies are oracle-only")
        if self.n_instances < 2:
            raise ExperimentError("need at least 2 instances")
        if self.n_shots < 0 or self.n_shots == 1:
            raise ExperimentError("n_shots must be 0 (exact) or >= 2")
        if self.observable not in OBSERVABLES:
            raise ExperimentError(f"observable must be one of {OBSERVABLES}")
        q = self.resolved_quench()
        try:
            q.check_budget()
            probe = sample_instance(q, 0, instance_seed(self.seed, 0), self.profile)
            require_valid(probe.schedule.then(self.drive_schedule()), self.profile, self.geometry)
        except (ValueError, ScheduleError) as exc:
            raise ExperimentError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "drive_omega": self.drive_omega,
            "drive_delta": self.drive_delta,
            "quench": self.quench.to_dict(),
            "butterfly": self.butterfly.to_dict(),
            "times": list(self.times),
            "n_instances": self.n_instances,
            "n_shots": self.n_shots,
            "noise": None if self.noise is None else asdict(self.noise),
            "seed": self.seed,
            "profile": self.profile.to_dict(),
            "propagator": asdict(self.propagator),
            "observable": self.observable,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class BranchResult:
    instance_id: int
    branch: str
    occupations: np.ndarray  # (T, N) estimates of <n_i(t)>
    fingerprint: str = ""
    shots: list[list[str]] | None = field(default=None, repr=False)


@dataclass
class OtocSeries:
    sites: np.ndarray
    times: np.ndarray
    raw: np.ndarray  # (S, T)
    norm: np.ndarray
    otoc: np.ndarray
    stderr: np.ndarray
    metadata: dict = field(default_factory=dict)

    def value(self, site: int, t: float) -> float:
        i = int(np.flatnonzero(self.sites == site)[0])
        k = int(np.argmin(np.abs(self.times - t)))
        return float(self.otoc[i, k])


def _branch_observable(occ: np.ndarray, observable: str) -> np.ndarray:
    return 2.0 * occ - 1.0 if observable == "centered" else occ


def _unbiased_square(est: np.ndarray, n_shots: int, observable: str) -> np.ndarray:
    """Per-instance unbiased estimate of (true mean)^2 from an n_shots average."""
    if n_shots == 0:
        return est**2
    if observable == "centered":
        # E[z_hat^2] = z^2 + (1 - z^2)/N_S
        return (n_shots * est**2 - 1.0) / (n_shots - 1)
    # E[n_hat^2] = p^2 + p(1 - p)/N_S
    return (n_shots * est**2 - est) / (n_shots - 1)


def estimate_otoc(plain: np.ndarray, butterflied: np.ndarray, n_shots: int = 0,
                  observable: str = "centered") -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ensemble estimator from per-instance occupations of shape (U, T, N).

    Returns (raw, norm, otoc, stderr), each (N, T); stderr is the jackknife
    error of ``otoc`` over instances.
    """
    a = _branch_observable(np.asarray(plain, dtype=float), observable)
    b = _branch_observable(np.asarray(butterflied, dtype=float), observable)
    if a.shape != b.shape:
        raise ValueError("branch shapes differ")
    u = a.shape[0]
    cross = a * b
    square = _unbiased_square(a, n_shots, observable)
    raw = cross.mean(axis=0)
    norm = square.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        otoc = raw / norm
        loo = (cross.sum(axis=0) - cross) / (square.sum(axis=0) - square)
    jack = np.sqrt((u - 1) / u * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return raw.T, norm.T, otoc.T, jack.T


def _probabilities_at(exp: OtocExperiment, prop: Propagator, inst: QuenchInstance,
                      branch: int, vdiag: np.ndarray) -> np.ndarray:
    """Outcome probabilities (T, D) of one branch at the experiment times."""
    psi0 = StateVector.ground(exp.n_atoms).amplitudes
    t_q = inst.schedule.total_time
    if exp.noise is None or exp.noise.is_noiseless:
        psi_q, _ = prop.run(psi0, inst.schedule)
        if branch == 1:
            psi_q = vdiag * psi_q
        _, rec = prop.run(psi_q, exp.drive_schedule(), record=exp.times)
        return np.abs(rec) ** 2
    full = inst.schedule.then(exp.drive_schedule())
    kicks = [(t_q, vdiag)] if branch == 1 else []
    return noisy_probabilities(
        psi0, exp.geometry, full, exp.profile, exp.propagator, exp.noise, exp.seed,
        stream=(inst.instance_id, branch), boosted_sites=[exp.butterfly.site],
        record=[t_q + t for t in exp.times], kicks=kicks, propagator=prop,
    )


def run_instance(exp: OtocExperiment, u: int, keep_shots: bool = False,
                 prop: Propagator | None = None) -> tuple[BranchResult, BranchResult]:
    prop = prop or Propagator(exp.geometry, exp.profile, exp.propagator)
    inst = sample_instance(exp.resolved_quench(), u, instance_seed(exp.seed, u), exp.profile)
    vdiag = exp.butterfly.diagonal(exp.n_atoms)
    occ_diag = prop.ham.occupations
    results = []
    for branch, name in enumerate(BRANCHES):
        probs = _probabilities_at(exp, prop, inst, branch, vdiag)
        shots = None
        if exp.n_shots == 0:
            occ = probs @ occ_diag.T
        else:
            rng = derive_rng(exp.seed, u, branch, 1_000_003)
            shots = []
            occ = np.empty((len(exp.times), exp.n_atoms))
            for k, p in enumerate(probs):
                state = StateVector(exp.n_atoms, np.sqrt(p / p.sum()))
                s = sample_shots(state, exp.n_shots, rng)
                occ[k] = shots_to_array(s).mean(axis=0)
                shots.append(s)
        results.append(BranchResult(u, name, np.clip(occ, 0.0, 1.0), inst.fingerprint(),
                                    shots if keep_shots else None))
    return results[0], results[1]


def _instance_worker(args):
    exp, chunk, keep = args
    prop = Propagator(exp.geometry, exp.profile, exp.propagator)
    return [run_instance(exp, u, keep, prop) for u in chunk]


def run_experiment(
    exp: OtocExperiment,
    workers: int = 1,
    keep_shots: bool = False,
    progress: Callable[[int, int], None] | None = None,
) -> tuple[list[BranchResult], OtocSeries]:
    """Run every instance of ``exp`` and aggregate the OTOC estimator."""
    exp.validate()
    pairs: list[tuple[BranchResult, BranchResult]] = []
    if workers <= 1:
        prop = Propagator(exp.geometry, exp.profile, exp.propagator)
        for u in range(exp.n_instances):
            try:
                pairs.append(run_instance(exp, u, keep_shots, prop))
            except Exception as exc:
                raise RuntimeError(f"instance {u} failed: {exc}") from exc
            if progress:
                progress(u, exp.n_instances)
    else:
        chunks = [list(range(w, exp.n_instances, workers)) for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk_result in pool.map(_instance_worker, [(exp, c, keep_shots) for c in chunks]):
                for pair in chunk_result:
                    pairs.append(pair)
                    if progress:
                        progress(pair[0].instance_id, exp.n_instances)
        pairs.sort(key=lambda p: p[0].instance_id)
    branches = [b for pair in pairs for b in pair]
    series = series_from_branches(branches, exp)
    return branches, series


def series_from_branches(branches: Sequence[BranchResult], exp: OtocExperiment) -> OtocSeries:
    plain, butter = _paired(branches)
    raw, norm, otoc, err = estimate_otoc(plain, butter, exp.n_shots, exp.observable)
    meta = {
        "config_hash": exp.config_hash(),
        "seed": exp.seed,
        "n_instances": exp.n_instances,
        "n_shots": exp.n_shots,
        "observable": exp.observable,
        "butterfly_site": exp.butterfly.site,
        "source": "randomized",
    }
    return OtocSeries(np.arange(exp.n_atoms), np.asarray(exp.times), raw, norm, otoc, err, meta)


def _paired(branches: Sequence[BranchResult]) -> tuple[np.ndarray, np.ndarray]:
    by_id: dict[int, dict[str, BranchResult]] = {}
    for b in branches:
        by_id.setdefault(b.instance_id, {})[b.branch] = b
    ids = sorted(by_id)
    for u in ids:
        pair = by_id[u]
        if set(pair) != set(BRANCHES):
            raise ValueError(f"instance {u} is missing a branch")
        if pair["plain"].fingerprint != pair["butterflied"].fingerprint:
            raise ValueError(f"instance {u} branches used different quenches")
    plain = np.stack([by_id[u]["plain"].occupations for u in ids])
    butter = np.stack([by_id[u]["butterflied"].occupations for u in ids])
    return plain, butter


def scatter_export(branches: Sequence[BranchResult], time_index: int, site: int,
                   observable: str = "occupation") -> tuple[np.ndarray, float]:
    """Per-instance (<W(t)>, <V^dag W(t) V>) pairs at one time and site, plus Pearson r."""
    plain, butter = _paired(branches)
    w = _branch_observable(plain[:, time_index, site], observable)
    vwv = _branch_observable(butter[:, time_index, site], observable)
    table = np.column_stack([w, vwv])
    if np.std(w) == 0 or np.std(vwv) == 0:
        r = float("nan")
    else:
        r = float(np.corrcoef(w, vwv)[0, 1])
    return table, r


def shot_budget(n_instances: int, n_shots: int) -> int:
    if n_instances < 1 or n_shots < 1:
        raise ValueError("N_U and N_S must both be >= 1")
    return 2 * n_instances * n_shots


def _observable_diag(n_atoms: int, site: int, observable: str) -> np.ndarray:
    occ = occupation_diagonals(n_atoms)[site]
    return 2.0 * occ - 1.0 if observable == "centered" else occ


def oracle_series(
    geometry: AtomGeometry,
    drive: PulseSchedule,
    butterfly: ButterflyOperator,
    times: Sequence[float],
    profile: HardwareProfile = HardwareProfile(),
    sites: Sequence[int] | None = None,
    observable: str = "centered",
    convention: str = "schrodinger",
    prop_config: PropagatorConfig = PropagatorConfig(),
) -> OtocSeries:
    """Exact Tr[W(t) V^dag W(t) V]/D for W = the per-site observable.

    ``convention="schrodinger"`` uses W(t) = U W U^dag with U the forward propagator;
    ``"heisenberg"`` uses U^dag W U. ``norm`` is Tr[W(t)^2]/D and ``otoc`` the
    normalized ratio.
    """
    n = geometry.n_atoms
    if n > MAX_ORACLE_ATOMS:
        raise ValueError(f"exact oracle limited to N <= {MAX_ORACLE_ATOMS} atoms (got {n})")
    if convention not in ("schrodinger", "heisenberg"):
        raise ValueError("convention must be 'schrodinger' or 'heisenberg'")
    times = np.asarray(times, dtype=float)
    sites = list(range(n)) if sites is None else list(sites)
    dim = 2**n
    prop = Propagator(geometry, profile, prop_config)
    _, unitaries = prop.run(np.eye(dim, dtype=complex), drive, t_final=float(times.max()), record=times)
    vd = butterfly.diagonal(n)
    raw = np.empty((len(sites), len(times)))
    norm = np.empty_like(raw)
    for k, u in enumerate(unitaries):
        left = u if convention == "schrodinger" else u.conj().T
        for s_idx, site in enumerate(sites):
            w = _observable_diag(n, site, observable)
            wt = (left * w[None, :]) @ left.conj().T
            a = wt * vd.conj()[None, :]  # W(t) V^dag
            b = wt * vd[None, :]  # W(t) V
            val = np.sum(a * b.T) / dim
            if abs(val.imag) > 1e-8:
                raise ArithmeticError(f"OTOC imaginary residue {val.imag:.3e} at t={times[k]}")
            raw[s_idx, k] = val.real
            norm[s_idx, k] = np.sum(np.abs(wt) ** 2) / dim
    meta = {"source": "oracle", "observable": observable, "convention": convention,
            "butterfly_site": butterfly.site}
    return OtocSeries(np.array(sites), times, raw, norm, raw / norm, np.zeros_like(raw), meta)


def exact_otoc(geometry: AtomGeometry, drive: PulseSchedule, butterfly: ButterflyOperator, site: int,
               t: float, profile: HardwareProfile = HardwareProfile(), observable: str = "occupation",
               normalized: bool = False, convention: str = "schrodinger") -> float:
    """Single-point infinite-temperature OTOC; W defaults to n_site."""
    s = oracle_series(geometry, drive, butterfly, [t], profile, [site], observable, convention)
    return float(s.otoc[0, 0] if normalized else s.raw[0, 0])
