"""Pulse-level simulator of deterministic three-ion qubit teleportation,
with state/process tomography and a reproducible experiment CLI."""

from .errors import ConfigError, DimensionMismatch, InvariantViolation, NonConvergence
from .noise import NoiseConfig, PulseDurations, ShotNoise, sample_shot_noise
from .protocol import (
    BRANCHES,
    CalibrationResult,
    Exact,
    ExactRun,
    FidelityCheck,
    FidelityEstimate,
    InputStateSpec,
    Sampled,
    SequenceStep,
    ShotRecord,
    Tomography,
    bell_preparation_fidelity,
    branch_label,
    build_sequence,
    calibrate_phase,
    canonical_inputs,
    classical_baseline,
    classical_baseline_per_state,
    exact_run,
    run_exact,
    run_shot,
    sequence_text,
    teleportation_fidelity,
)
from .qcore import (
    DensityMatrix,
    PureState,
    bloch_vector,
    density_from_bloch,
    haar_average_fidelity,
    partial_trace,
    random_cptp_qubit_channel,
    random_pure_state,
    state_fidelity,
    trace_distance,
)
from .tomography import (
    AffineMap,
    CountsTable,
    MLEDiagnostics,
    ProcessMatrix,
    affine_decompose,
    affine_from_json,
    affine_to_json,
    apply_chi,
    average_fidelity,
    avg_from_process_fidelity,
    bootstrap_process,
    channel_from_chi,
    chi_from_channel,
    chi_from_json,
    chi_ideal_identity,
    chi_to_json,
    counts_from_csv,
    counts_to_csv,
    ellipsoid_mesh,
    measurement_operators,
    mle_process,
    mle_state,
    pauli_transfer,
    process_fidelity,
    rho_from_json,
    rho_to_json,
    simulate_state_tomography,
    teleported_counts,
)
from .trap import (
    Carrier,
    BlueSideband,
    Detect,
    Hide,
    Outcome,
    TrapRegister,
    Wait,
    apply_pulse,
    fluorescence_measure,
    initialize,
)

__all__ = [
    "AffineMap",
    "BRANCHES",
    "BlueSideband",
    "CalibrationResult",
    "Carrier",
    "ConfigError",
    "CountsTable",
    "DensityMatrix",
    "Detect",
    "DimensionMismatch",
    "Exact",
    "ExactRun",
    "FidelityCheck",
    "FidelityEstimate",
    "Hide",
    "InputStateSpec",
    "InvariantViolation",
    "MLEDiagnostics",
    "NoiseConfig",
    "NonConvergence",
    "Outcome",
    "ProcessMatrix",
    "PulseDurations",
    "PureState",
    "Sampled",
    "SequenceStep",
    "ShotNoise",
    "ShotRecord",
    "Tomography",
    "TrapRegister",
    "Wait",
    "affine_decompose",
    "affine_from_json",
    "affine_to_json",
    "apply_chi",
    "apply_pulse",
    "average_fidelity",
    "avg_from_process_fidelity",
    "bell_preparation_fidelity",
    "bloch_vector",
    "bootstrap_process",
    "branch_label",
    "build_sequence",
    "calibrate_phase",
    "canonical_inputs",
    "channel_from_chi",
    "chi_from_channel",
    "chi_from_json",
    "chi_ideal_identity",
    "chi_to_json",
    "classical_baseline",
    "classical_baseline_per_state",
    "counts_from_csv",
    "counts_to_csv",
    "density_from_bloch",
    "ellipsoid_mesh",
    "exact_run",
    "fluorescence_measure",
    "haar_average_fidelity",
    "initialize",
    "measurement_operators",
    "mle_process",
    "mle_state",
    "partial_trace",
    "pauli_transfer",
    "process_fidelity",
    "random_cptp_qubit_channel",
    "random_pure_state",
    "rho_from_json",
    "rho_to_json",
    "run_exact",
    "run_shot",
    "sample_shot_noise",
    "sequence_text",
    "simulate_state_tomography",
    "state_fidelity",
    "teleportation_fidelity",
    "teleported_counts",
    "trace_distance",
]
