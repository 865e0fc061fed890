"""Time-dependent propagation of state vectors under a pulse schedule.

Unitary runs use the midpoint exponential exp(-i H(t_mid) dt) on substeps of
linear waveform segments; segments on which every channel is constant are
propagated in one step through a cached eigendecomposition, which is the exact
product of the equal substep propagators. Noisy runs unravel the Lindblad
equation into quantum trajectories (waiting-time Monte Carlo).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .pulses import AtomGeometry, HardwareProfile, PulseSchedule, RydbergHamiltonian, mhz, require_valid
from .quantum import RAISE, X, Y, Z, StateVector


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropagatorConfig:
    dt: float = 1e-3
    method: str = "expm"  # "expm" (midpoint exponential) or "rk4"
    tolerance: float = 1e-8

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.method not in ("expm", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class NoiseModel:
    """Rates in 1/us, detuning sigma in rad/us, position sigma in um."""

    gamma_depol: float = 0.0
    gamma_rg: float = 0.0
    detuning_sigma: float = 0.0
    rabi_rel_sigma: float = 0.0
    position_sigma: float = 0.0
    local_site_multiplier: float = 2.0
    n_trajectories: int = 1
    depol_channels: str = "single"  # "single": sqrt(g)(X+Y+Z); "xyz": three separate channels

    def __post_init__(self):
        for name in ("gamma_depol", "gamma_rg", "detuning_sigma", "rabi_rel_sigma", "position_sigma", "local_site_multiplier"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if self.depol_channels not in ("single", "xyz"):
            raise ValueError("depol_channels must be 'single' or 'xyz'")

    @property
    def has_jumps(self) -> bool:
        return self.gamma_depol > 0 or self.gamma_rg > 0

    @property
    def has_static_noise(self) -> bool:
        return self.detuning_sigma > 0 or self.rabi_rel_sigma > 0 or self.position_sigma > 0

    @property
    def is_noiseless(self) -> bool:
        return not (self.has_jumps or self.has_static_noise)


def _hardware_noise(gamma_depol: float) -> NoiseModel:
    return NoiseModel(
        gamma_depol=gamma_depol,
        gamma_rg=0.03,
        detuning_sigma=mhz(0.18),
        rabi_rel_sigma=0.018,
        position_sigma=0.05,
        local_site_multiplier=2.0,
        n_trajectories=600,
    )


NOISE_PRESETS: dict[str, NoiseModel | None] = {
    "none": None,
    "appA_low": _hardware_noise(0.05),
    "appA_high": _hardware_noise(0.2),
}


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, key...), identical regardless of call order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def jump_operators(
    n_atoms: int, noise: NoiseModel, boosted_sites: Iterable[int] = ()
) -> list[tuple[int, np.ndarray]]:
    """Per-site collapse operators as (site, 2x2 matrix including sqrt(rate))."""
    boosted = set(boosted_sites)
    ops: list[tuple[int, np.ndarray]] = []
    for site in range(n_atoms):
        mult = noise.local_site_multiplier if site in boosted else 1.0
        if noise.gamma_depol > 0:
            amp = math.sqrt(noise.gamma_depol * mult)
            if noise.depol_channels == "single":
                ops.append((site, amp * (X + Y + Z)))
            else:
                ops.extend((site, amp * p) for p in (X, Y, Z))
        if noise.gamma_rg > 0:
            ops.append((site, math.sqrt(noise.gamma_rg * mult) * RAISE))
    return ops


def _apply_local(op: np.ndarray, psi: np.ndarray, site: int, n_atoms: int) -> np.ndarray:
    view = psi.reshape(2**site, 2, 2 ** (n_atoms - site - 1))
    return np.einsum("ab,ibj->iaj", op, view).reshape(psi.shape)


def expm_apply(apply_a, psi: np.ndarray, a_norm: float) -> np.ndarray:
    """exp(A) psi via a scaled Taylor series truncated at double precision.

    ``apply_a`` maps a state to A @ state and ``a_norm`` bounds ||A||.
    """
    n_scale = max(1, math.ceil(a_norm / 0.5))
    for _ in range(n_scale):
        term = psi
        out = psi.copy()
        cutoff = 1e-17 * np.abs(psi).max()
        for k in range(1, 60):
            term = apply_a(term)
            term *= 1.0 / (k * n_scale)
            out += term
            if np.abs(term).max() <= cutoff:
                break
        psi = out
    return psi


def _interval_grid(sched: PulseSchedule, t_final: float, extra: Iterable[float]) -> np.ndarray:
    """Breakpoints plus extra event times in [0, t_final]; near-duplicates of a
    breakpoint are dropped so plateaus keep their exact endpoints."""
    base = [float(t) for t in sched.breakpoints() if t < t_final - 1e-10]
    base.append(float(t_final))
    pts = sorted(set(base))
    for t in sorted(float(x) for x in extra):
        if 0 <= t < t_final and min(abs(t - p) for p in pts) > 1e-10:
            pts.append(t)
    return np.array(sorted(pts))


class Propagator:
    """Reusable propagation engine for one geometry/profile pair."""

    def __init__(self, geometry: AtomGeometry, profile: HardwareProfile, config: PropagatorConfig = PropagatorConfig()):
        self.geometry = geometry
        self.profile = profile
        self.config = config
        self.ham = RydbergHamiltonian(geometry, profile)
        self._eig_cache: OrderedDict = OrderedDict()
        self._eig_cache_size = 8 if self.ham.dim <= 512 else 2

    @property
    def n_atoms(self) -> int:
        return self.ham.n_atoms

    def _eigh(self, omega: float, delta: float, local: float, mask) -> tuple[np.ndarray, np.ndarray]:
        key = (omega, delta, local, mask)
        hit = self._eig_cache.get(key)
        if hit is not None:
            self._eig_cache.move_to_end(key)
            return hit
        evals, evecs = np.linalg.eigh(self.ham.matrix(omega, delta, local, mask))
        self._eig_cache[key] = (evals, evecs)
        if len(self._eig_cache) > self._eig_cache_size:
            self._eig_cache.popitem(last=False)
        return evals, evecs

    def _constant_step(self, psi: np.ndarray, values, mask, tau: float) -> np.ndarray:
        evals, evecs = self._eigh(*values, mask)
        phase = np.exp(-1j * evals * tau)
        coeff = evecs.conj().T @ psi
        coeff = phase[:, None] * coeff if coeff.ndim == 2 else phase * coeff
        return evecs @ coeff

    def _step_exp(self, psi: np.ndarray, values, mask, h: float, damping=None) -> np.ndarray:
        """exp(-i h H_eff) psi for H at fixed channel values (+ optional -i/2 decay diagonal)."""
        coef = self.ham.profile.rabi_factor * values[0]
        diag = self.ham.diagonal(values[1], values[2], mask)
        if damping is not None:
            diag = diag + damping
        a_norm = h * (abs(coef) * self.n_atoms + np.max(np.abs(diag)))
        return expm_apply(lambda y: -1j * h * self.ham.apply(coef, diag, y), psi, a_norm)

    def _linear_steps(self, psi: np.ndarray, sched: PulseSchedule, mask, t0: float, t1: float) -> np.ndarray:
        n_sub = max(1, math.ceil((t1 - t0) / self.config.dt - 1e-9))
        h = (t1 - t0) / n_sub
        for k in range(n_sub):
            ta = t0 + k * h
            if self.config.method == "expm":
                psi = self._step_exp(psi, sched.values_at(ta + 0.5 * h), mask, h)
            else:
                psi = self._rk4_step(psi, sched, mask, ta, h)
        return psi

    def _rk4_step(self, psi, sched, mask, t, h):
        def f(tt, y):
            om, de, lo = sched.values_at(tt)
            return -1j * self.ham.apply(self.ham.profile.rabi_factor * om, self.ham.diagonal(de, lo, mask), y)

        k1 = f(t, psi)
        k2 = f(t + h / 2, psi + h / 2 * k1)
        k3 = f(t + h / 2, psi + h / 2 * k2)
        k4 = f(t + h, psi + h * k3)
        return psi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def run(
        self,
        psi: np.ndarray,
        sched: PulseSchedule,
        t_final: float | None = None,
        record: Sequence[float] = (),
        kicks: Sequence[tuple[float, np.ndarray]] = (),
    ) -> tuple[np.ndarray, np.ndarray | None]:
        """Propagate ``psi`` (vector or matrix of column states) from 0 to ``t_final``.

        ``kicks`` are (time, diagonal) pairs multiplied in when the clock reaches
        that time. Returns the final state and, if ``record`` is given, the
        states at the recorded times stacked along axis 0.
        """
        t_final = sched.total_time if t_final is None else float(t_final)
        if t_final > sched.total_time + 1e-9:
            raise ValueError(f"t_final={t_final} exceeds schedule duration {sched.total_time}")
        record = np.asarray(record, dtype=float)
        if record.size and (record.min() < -1e-12 or record.max() > t_final + 1e-9):
            raise ValueError("record times outside [0, t_final]")
        mask = sched.local.mask if sched.local is not None else None
        kick_list = sorted(((float(t), np.asarray(d)) for t, d in kicks), key=lambda kd: kd[0])
        grid = _interval_grid(sched, t_final, list(record) + [t for t, _ in kick_list])

        psi = np.array(psi, dtype=complex)
        out = np.empty((record.size,) + psi.shape, dtype=complex) if record.size else None
        norm0 = np.linalg.norm(psi, axis=0)

        def visit(t, state):
            for t_k, diag in kick_list:
                if abs(t_k - t) <= 1e-9:
                    state = diag[:, None] * state if state.ndim == 2 else diag * state
            if out is not None:
                for idx in np.flatnonzero(np.abs(record - t) <= 1e-9):
                    out[idx] = state
            return state

        psi = visit(grid[0], psi)
        for t0, t1 in zip(grid[:-1], grid[1:]):
            v0, v1 = sched.values_at(t0), sched.values_at(t1)
            if v0 == v1:
                psi = self._constant_step(psi, v0, mask, t1 - t0)
            else:
                psi = self._linear_steps(psi, sched, mask, t0, t1)
            psi = visit(t1, psi)

        drift = np.max(np.abs(np.linalg.norm(psi, axis=0) - norm0))
        if drift > self.config.tolerance:
            raise PropagationError(f"norm drift {drift:.3e} exceeds tolerance {self.config.tolerance:.1e}; reduce dt")
        return psi, out

    def run_trajectory(
        self,
        psi: np.ndarray,
        sched: PulseSchedule,
        jumps: Sequence[tuple[int, np.ndarray]],
        rng: np.random.Generator,
        t_final: float | None = None,
        record: Sequence[float] = (),
        kicks: Sequence[tuple[float, np.ndarray]] = (),
    ) -> tuple[np.ndarray, np.ndarray | None, int]:
        """One quantum trajectory; returns (final state, recorded states, jump count)."""
        t_final = sched.total_time if t_final is None else float(t_final)
        record = np.asarray(record, dtype=float)
        mask = sched.local.mask if sched.local is not None else None
        kick_list = sorted(((float(t), np.asarray(d)) for t, d in kicks), key=lambda kd: kd[0])
        grid = _interval_grid(sched, t_final, list(record) + [t for t, _ in kick_list])
        n = self.n_atoms

        decay = np.zeros(self.ham.dim)
        occ = self.ham.occupations
        for site, op in jumps:
            cc = op.conj().T @ op
            if abs(cc[0, 1]) > 1e-12 or abs(cc[1, 0]) > 1e-12:
                raise ValueError("jump operator with non-diagonal c^dag c is not supported")
            decay += cc[0, 0].real * (1 - occ[site]) + cc[1, 1].real * occ[site]
        damping = -0.5j * decay

        psi = np.array(psi, dtype=complex)
        psi /= np.linalg.norm(psi)
        out = np.empty((record.size,) + psi.shape, dtype=complex) if record.size else None
        threshold = rng.random()
        n_jumps = 0

        def heff(values):
            hm = self.ham.matrix(*values, mask)
            hm[np.diag_indices(self.ham.dim)] += damping
            return hm

        def maybe_jump(state):
            nonlocal threshold, n_jumps
            if np.vdot(state, state).real > threshold:
                return state
            candidates = [_apply_local(op, state, site, n) for site, op in jumps]
            weights = np.array([np.vdot(c, c).real for c in candidates])
            if weights.sum() <= 0:
                return state
            k = rng.choice(len(candidates), p=weights / weights.sum())
            threshold = rng.random()
            n_jumps += 1
            return candidates[k] / math.sqrt(weights[k])

        def visit(t, state):
            for t_k, diag in kick_list:
                if abs(t_k - t) <= 1e-9:
                    state = diag * state
            if out is not None:
                for idx in np.flatnonzero(np.abs(record - t) <= 1e-9):
                    out[idx] = state / np.linalg.norm(state)
            return state

        psi = visit(grid[0], psi)
        for t0, t1 in zip(grid[:-1], grid[1:]):
            n_sub = max(1, math.ceil((t1 - t0) / self.config.dt - 1e-9))
            h = (t1 - t0) / n_sub
            v0, v1 = sched.values_at(t0), sched.values_at(t1)
            step = scipy.linalg.expm(-1j * h * heff(v0)) if v0 == v1 else None
            for k in range(n_sub):
                if step is not None:
                    psi = step @ psi
                else:
                    psi = self._step_exp(psi, sched.values_at(t0 + (k + 0.5) * h), mask, h, damping)
                psi = maybe_jump(psi)
            psi = visit(t1, psi)
        return psi / np.linalg.norm(psi), out, n_jumps


def evolve_unitary(
    state: StateVector,
    geom: AtomGeometry,
    sched: PulseSchedule,
    profile: HardwareProfile,
    cfg: PropagatorConfig = PropagatorConfig(),
    t_final: float | None = None,
) -> StateVector:
    require_valid(sched, profile, geom)
    psi, _ = Propagator(geom, profile, cfg).run(state.amplitudes, sched, t_final)
    return StateVector(state.n_atoms, psi)


def sample_static_noise(
    geom: AtomGeometry, sched: PulseSchedule, noise: NoiseModel, rng: np.random.Generator
) -> tuple[AtomGeometry, PulseSchedule]:
    """Draw one trajectory's quenched laser and position noise."""
    if not noise.has_static_noise:
        return geom, sched
    offset = rng.normal(0.0, noise.detuning_sigma) if noise.detuning_sigma > 0 else 0.0
    scale = rng.normal(1.0, noise.rabi_rel_sigma) if noise.rabi_rel_sigma > 0 else 1.0
    return geom.jittered(rng, noise.position_sigma), sched.perturbed(scale, offset)


def trajectory_states(
    psi0: np.ndarray,
    geom: AtomGeometry,
    sched: PulseSchedule,
    profile: HardwareProfile,
    cfg: PropagatorConfig,
    noise: NoiseModel,
    rng: np.random.Generator,
    boosted_sites: Iterable[int] = (),
    t_final: float | None = None,
    record: Sequence[float] = (),
    kicks: Sequence[tuple[float, np.ndarray]] = (),
    propagator: Propagator | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Single trajectory at array level. A noiseless model takes the unitary path."""
    g, s = sample_static_noise(geom, sched, noise, rng)
    if propagator is not None and g is geom:
        prop = propagator
    else:
        prop = Propagator(g, profile, cfg)
    if not noise.has_jumps:
        return prop.run(psi0, s, t_final, record, kicks)
    jumps = jump_operators(geom.n_atoms, noise, boosted_sites)
    final, rec, _ = prop.run_trajectory(psi0, s, jumps, rng, t_final, record, kicks)
    return final, rec


def evolve_trajectory(
    state: StateVector,
    geom: AtomGeometry,
    sched: PulseSchedule,
    profile: HardwareProfile,
    cfg: PropagatorConfig,
    noise: NoiseModel,
    rng_seed,
    boosted_sites: Iterable[int] | None = None,
    t_final: float | None = None,
) -> StateVector:
    """One Monte-Carlo trajectory sample of the noisy evolution.

    ``boosted_sites`` get ``noise.local_site_multiplier`` times the jump rates;
    by default these are the sites under the schedule's local-detuning mask.
    """
    require_valid(sched, profile, geom)
    if boosted_sites is None:
        boosted_sites = [] if sched.local is None else [i for i, m in enumerate(sched.local.mask) if m]
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    psi, _ = trajectory_states(state.amplitudes, geom, sched, profile, cfg, noise, rng, boosted_sites, t_final)
    return StateVector(state.n_atoms, psi)


def trajectory_average(values) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Sample mean and standard error of the mean along axis 0."""
    arr = np.asarray(values, dtype=float)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 trajectories")
    mean = arr.mean(axis=0)
    sem = arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
    if arr.ndim == 1:
        return float(mean), float(sem)
    return mean, sem


def noisy_probabilities(
    psi0: np.ndarray,
    geom: AtomGeometry,
    sched: PulseSchedule,
    profile: HardwareProfile,
    cfg: PropagatorConfig,
    noise: NoiseModel,
    seed: int,
    stream: Sequence[int] = (),
    boosted_sites: Iterable[int] = (),
    record: Sequence[float] = (),
    kicks: Sequence[tuple[float, np.ndarray]] = (),
    propagator: Propagator | None = None,
) -> np.ndarray:
    """Trajectory-averaged outcome probabilities at ``record`` times, shape (T, D).

    Trajectory ``k`` draws from ``derive_rng(seed, *stream, k)``.
    """
    acc = None
    for k in range(noise.n_trajectories):
        rng = derive_rng(seed, *stream, k)
        _, rec = trajectory_states(
            psi0, geom, sched, profile, cfg, noise, rng, boosted_sites,
            record=record, kicks=kicks, propagator=propagator,
        )
        probs = np.abs(rec) ** 2
        acc = probs if acc is None else acc + probs
    return acc / noise.n_trajectories


def with_dt(cfg: PropagatorConfig, dt: float) -> PropagatorConfig:
    return replace(cfg, dt=dt)
