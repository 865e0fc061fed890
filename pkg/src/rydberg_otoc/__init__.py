"""Classical simulator for analog randomized-measurement OTOCs on Rydberg atom chains."""

from .analysis import Arrival, Heatmap, LightconeFit, arrival_times, compare_series, fit_lightcone
from .config import ConfigError, ExperimentConfig, load_config, load_preset, preset_names
from .design import (
    QuenchConfig,
    convergence_scan,
    haar_second_moment,
    sample_ensemble,
    second_moment,
    second_moment_from_shots,
)
from .evolution import (
    NOISE_PRESETS,
    NoiseModel,
    PropagationError,
    Propagator,
    PropagatorConfig,
    evolve_trajectory,
    evolve_unitary,
)
from .protocol import (
    ButterflyOperator,
    OtocExperiment,
    OtocSeries,
    estimate_otoc,
    exact_otoc,
    oracle_series,
    run_experiment,
)
from .pulses import (
    AtomGeometry,
    HardwareProfile,
    PulseSchedule,
    RydbergHamiltonian,
    Waveform,
    build_hamiltonian,
    mhz,
    validate_schedule,
)
from .quantum import Operator, StateVector, expectation, sample_shots

__version__ = "0.1.0"
