import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from rydberg_otoc.design import QuenchConfig, sample_instance
from rydberg_otoc.evolution import (
    NOISE_PRESETS,
    NoiseModel,
    PropagationError,
    Propagator,
    PropagatorConfig,
    derive_rng,
    evolve_trajectory,
    evolve_unitary,
    expm_apply,
    jump_operators,
    noisy_probabilities,
    trajectory_average,
)
from rydberg_otoc.pulses import AtomGeometry, HardwareProfile, PulseSchedule, RydbergHamiltonian, Waveform, mhz
from rydberg_otoc.quantum import StateVector

PROFILE = HardwareProfile()
OMEGA = mhz(2.5)


def fiducial_fragment(n_atoms=4, seed=3):
    """Quench fragment followed by a constant drive: exercises linear and flat segments."""
    q = QuenchConfig(final_delta=mhz(1.5))
    inst = sample_instance(q, 0, seed)
    return AtomGeometry.chain(n_atoms, 9.5), inst.schedule.then(PulseSchedule.constant(OMEGA, mhz(1.5), 1.0))


def reference_solution(geom, sched, psi0, t_final, profile=PROFILE):
    ham = RydbergHamiltonian(geom, profile)
    bps = [t for t in sched.breakpoints() if t < t_final] + [t_final]
    psi = psi0.astype(complex)
    for a, b in zip(bps[:-1], bps[1:]):
        sol = solve_ivp(lambda t, y: -1j * (ham.at(sched, t) @ y), (a, b), psi, method="DOP853",
                        rtol=1e-12, atol=1e-12)
        psi = sol.y[:, -1]
    return psi


def test_single_atom_rabi_quarter():
    out = evolve_unitary(StateVector.ground(1), AtomGeometry.chain(1, 9.5),
                         PulseSchedule.constant(OMEGA, 0.0, 0.05), PROFILE)
    assert out.probabilities()[1] == pytest.approx(math.sin(OMEGA * 0.05) ** 2, abs=1e-6)
    assert out.probabilities()[1] == pytest.approx(0.5, abs=1e-6)


def test_zero_time_is_identity():
    rng = np.random.default_rng(0)
    v = rng.normal(size=8) + 1j * rng.normal(size=8)
    s = StateVector(3, v / np.linalg.norm(v))
    out = evolve_unitary(s, AtomGeometry.chain(3, 9.5), PulseSchedule.constant(OMEGA, 1.0, 1.0), PROFILE, t_final=0.0)
    assert np.allclose(out.amplitudes, s.amplitudes, atol=1e-14)


def test_deep_blockade_suppresses_double_excitation():
    geom = AtomGeometry.chain(2, 5.0)
    sched = PulseSchedule.constant(OMEGA, 0.0, 1.0)
    times = np.round(np.arange(0, 1.0001, 0.05), 10)
    _, rec = Propagator(geom, PROFILE).run(StateVector.ground(2).amplitudes, sched, record=times)
    assert np.max(np.abs(rec[:, 3]) ** 2) < 0.05
    ref = reference_solution(geom, sched, StateVector.ground(2).amplitudes, 1.0)
    assert np.max(np.abs(rec[-1] - ref)) < 1e-6


@pytest.mark.parametrize("dt, bound", [(1e-3, 1e-6), (1e-4, 1e-9)])
def test_linear_segments_match_reference(dt, bound):
    geom, sched = fiducial_fragment(3)
    psi0 = StateVector.ground(3).amplitudes
    psi, _ = Propagator(geom, PROFILE, PropagatorConfig(dt=dt)).run(psi0, sched)
    ref = reference_solution(geom, sched, psi0, sched.total_time)
    assert 1 - abs(np.vdot(ref, psi)) ** 2 < bound


def test_norm_preserved_over_four_microseconds():
    geom = AtomGeometry.chain(4, 9.5)
    wf = Waveform.from_durations([1.0, 1.0, 1.0, 1.0], [0.0, 15.0, 5.0, 12.0, 0.5])
    de = Waveform.from_durations([1.0, 1.0, 1.0, 1.0], [-20.0, 20.0, -5.0, 30.0, 0.0])
    psi, _ = Propagator(geom, PROFILE).run(StateVector.ground(4).amplitudes, PulseSchedule(wf, de))
    assert abs(np.linalg.norm(psi) - 1) < 1e-8


def test_dt_halving_order():
    geom, sched = fiducial_fragment(4, seed=11)
    psi0 = StateVector.ground(4).amplitudes
    ref, _ = Propagator(geom, PROFILE, PropagatorConfig(dt=2.5e-4)).run(psi0, sched)

    def deficit(dt):
        psi, _ = Propagator(geom, PROFILE, PropagatorConfig(dt=dt, tolerance=1e-6)).run(psi0, sched)
        return 1 - abs(np.vdot(ref, psi)) ** 2

    coarse, fine = deficit(0.02), deficit(0.01)
    assert coarse > 1e-12
    assert coarse / fine >= 4


def test_rk4_agrees_with_exponential():
    geom, sched = fiducial_fragment(3)
    psi0 = StateVector.ground(3).amplitudes
    a, _ = Propagator(geom, PROFILE, PropagatorConfig(dt=1e-4)).run(psi0, sched)
    b, _ = Propagator(geom, PROFILE, PropagatorConfig(method="rk4", dt=2e-4)).run(psi0, sched)
    assert 1 - abs(np.vdot(a, b)) ** 2 < 1e-7


def test_energy_conserved_on_constant_segment():
    geom = AtomGeometry.chain(4, 9.5)
    sched = PulseSchedule.constant(OMEGA, mhz(1.5), 2.0)
    h = RydbergHamiltonian(geom, PROFILE).at(sched, 0.0)
    rng = np.random.default_rng(2)
    v = rng.normal(size=16) + 1j * rng.normal(size=16)
    v /= np.linalg.norm(v)
    _, rec = Propagator(geom, PROFILE).run(v, sched, record=[0.0, 0.7, 2.0])
    energies = [np.vdot(s, h @ s).real for s in rec]
    assert np.allclose(energies, energies[0], rtol=1e-6)


def test_norm_drift_raises():
    geom = AtomGeometry.chain(3, 9.5)
    wf = Waveform.from_durations([1.0], [0.0, 15.0])
    sched = PulseSchedule(wf, Waveform.from_durations([1.0], [-100.0, 100.0]))
    prop = Propagator(geom, PROFILE, PropagatorConfig(method="rk4", dt=0.05))
    with pytest.raises(PropagationError):
        prop.run(StateVector.ground(3).amplitudes, sched)


def test_record_and_kicks():
    geom = AtomGeometry.chain(2, 9.5)
    sched = PulseSchedule.constant(OMEGA, 0.0, 1.0)
    prop = Propagator(geom, PROFILE)
    psi0 = StateVector.ground(2).amplitudes
    kick = np.exp(1j * np.pi * RydbergHamiltonian(geom, PROFILE).occupations[1])
    full, rec = prop.run(psi0, sched, record=[0.3, 1.0], kicks=[(0.3, kick)])
    mid, _ = prop.run(psi0, sched, t_final=0.3)
    after, _ = prop.run(kick * mid, PulseSchedule.constant(OMEGA, 0.0, 0.7))
    assert np.allclose(full, after, atol=1e-10)
    assert np.allclose(rec[1], full)


@given(st.floats(0.01, 3.0), st.integers(0, 1000))
@settings(max_examples=20)
def test_expm_apply_matches_dense(scale, seed):
    from scipy.linalg import expm

    rng = np.random.default_rng(seed)
    a = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    a = -1j * scale * (a + a.conj().T) / 2
    v = rng.normal(size=8) + 0j
    out = expm_apply(lambda y: a @ y, v, np.linalg.norm(a, 2))
    assert np.allclose(out, expm(a) @ v, atol=1e-11)


def test_noiseless_trajectory_bitwise_equal_to_unitary():
    geom, sched = fiducial_fragment(4)
    s0 = StateVector.ground(4)
    a = evolve_unitary(s0, geom, sched, PROFILE)
    b = evolve_trajectory(s0, geom, sched, PROFILE, PropagatorConfig(), NoiseModel(), rng_seed=9)
    assert np.array_equal(a.amplitudes, b.amplitudes)


def test_rydberg_relaxation_matches_master_equation():
    gamma, t = 0.8, 1.5
    noise = NoiseModel(gamma_rg=gamma, n_trajectories=600)
    geom = AtomGeometry.chain(1, 9.5)
    sched = PulseSchedule.constant(0.0, 0.0, t)
    ns = []
    for k in range(noise.n_trajectories):
        s = evolve_trajectory(StateVector.ground(1), geom, sched, PROFILE, PropagatorConfig(), noise, derive_rng(4, k))
        ns.append(s.probabilities()[1])
    mean, sem = trajectory_average(ns)
    assert abs(mean - (1 - math.exp(-gamma * t))) <= 3 * sem


def test_boosted_site_doubles_rates():
    noise = NoiseModel(gamma_depol=0.1, gamma_rg=0.03)
    plain = jump_operators(2, noise)
    boosted = jump_operators(2, noise, boosted_sites=[1])
    for (s0, a), (s1, b) in zip(plain, boosted):
        ratio = np.sum(np.abs(b) ** 2) / np.sum(np.abs(a) ** 2)
        assert ratio == pytest.approx(2.0 if s0 == 1 else 1.0)
    assert len(jump_operators(1, NoiseModel(gamma_depol=0.1, depol_channels="xyz"))) == 3


def test_trajectory_average_examples():
    assert trajectory_average([0.3] * 5) == (pytest.approx(0.3), 0.0)
    assert trajectory_average([0.0, 1.0]) == (pytest.approx(0.5), pytest.approx(0.5))
    with pytest.raises(ValueError):
        trajectory_average([1.0])


def test_hardware_noise_preset_runs_and_is_deterministic():
    noise = NOISE_PRESETS["appA_low"]
    assert noise.gamma_depol == 0.05 and noise.gamma_rg == 0.03
    assert noise.detuning_sigma == pytest.approx(mhz(0.18))
    small = NoiseModel(**{**noise.__dict__, "n_trajectories": 4})
    geom, sched = fiducial_fragment(3)
    psi0 = StateVector.ground(3).amplitudes
    a = noisy_probabilities(psi0, geom, sched, PROFILE, PropagatorConfig(), small, seed=1, record=[0.5, 1.0])
    b = noisy_probabilities(psi0, geom, sched, PROFILE, PropagatorConfig(), small, seed=1, record=[0.5, 1.0])
    assert np.array_equal(a, b)
    assert np.allclose(a.sum(axis=1), 1.0)


def test_derived_streams_independent_of_order():
    first = [derive_rng(5, 1, k).random() for k in range(4)]
    second = [derive_rng(5, 1, k).random() for k in reversed(range(4))][::-1]
    assert first == second
    assert len(set(first)) == 4
