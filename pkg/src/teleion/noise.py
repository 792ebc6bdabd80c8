"""Noise channels layered on top of the ideal pulse algebra.

Physical content:

* quasi-static dephasing — one Gaussian detuning draw per shot (shared by all
  ions by default, per-ion with correlated_dephasing=False); the D level
  accrues phase detuning_SD * t, the H level detuning_H * t with
  detuning_H = dephasing_ratio_H * detuning_SD (same field fluctuation seen by
  a more sensitive transition);
* amplitude errors — every pulse area is scaled by a per-shot factor
  1 + N(0, amplitude_error_sigma), indexed by sequence step so conditional
  branches never shift the draw stream;
* depolarizing — after each carrier/sideband pulse the addressed ion's {S,D}
  subspace suffers rho -> (1-3p/4) rho + (p/4)(X rho X + Y rho Y + Z rho Z).
  Hide pulses are exempt: a {S,D} error while an ion is hidden would leak
  population into H permanently, which is not what this channel models;
* detection error — the reported PMT outcome flips with probability epsilon
  while the collapse follows the true outcome (handled in trap/protocol).

Durations are bookkeeping inputs to the dephasing integral: a pulse of area
theta lasts (theta/pi) * t_pi for its pulse class, detection lasts a fixed
window, waits last their nominal value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .qcore import DensityMatrix
from . import trap
from .trap import BlueSideband, Carrier, Detect, Hide, TrapRegister, Wait

#: Draw-stream tag separating the run stream from the shot-noise stream.
RUN_STREAM_TAG = 0x7E1E

# Embedded single-site Pauli operators: index 0..2 -> X, Y, Z acting on the
# {S, D} subspace of a 3-level ion (identity on H) or on a plain qubit.
_PAULI3 = (
    np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.complex128),
    np.array([[0, -1j, 0], [1j, 0, 0], [0, 0, 1]], dtype=np.complex128),
    np.array([[1, 0, 0], [0, -1, 0], [0, 0, 1]], dtype=np.complex128),
)
_PAULI2 = (
    np.array([[0, 1], [1, 0]], dtype=np.complex128),
    np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    np.array([[1, 0], [0, -1]], dtype=np.complex128),
)


def _site_paulis(dim: int):
    if dim == 2:
        return _PAULI2
    if dim == 3:
        return _PAULI3
    raise DimensionMismatch(f"no embedded Pauli set for subsystem dim {dim}")


@dataclass(frozen=True)
class PulseDurations:
    """Duration table in microseconds (pi-pulse times; detect is a window)."""

    carrier_pi: float = 10.0
    sideband_pi: float = 100.0
    hide_pi: float = 10.0
    detect: float = 250.0

    def __post_init__(self):
        for name in ("carrier_pi", "sideband_pi", "hide_pi", "detect"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"pulse duration {name} must be positive")

    def of(self, pulse: trap.Pulse) -> float:
        if isinstance(pulse, Carrier):
            return self.carrier_pi * pulse.theta / math.pi
        if isinstance(pulse, BlueSideband):
            return self.sideband_pi * pulse.theta / math.pi
        if isinstance(pulse, Hide):
            return self.hide_pi * pulse.theta / math.pi
        if isinstance(pulse, Wait):
            return float(pulse.duration_us)
        if isinstance(pulse, Detect):
            return self.detect
        raise DimensionMismatch(f"unknown pulse type {type(pulse).__name__}")


@dataclass(frozen=True)
class NoiseConfig:
    detuning_sigma_SD: float = 0.0       # rad/us
    detuning_bias_SD: float = 0.0        # rad/us, deterministic offset
    dephasing_ratio_H: float = 2.0       # detuning_H / detuning_SD
    amplitude_error_sigma: float = 0.0   # relative pulse-area error
    depolarizing_per_pulse: float = 0.0  # probability parameter p
    detection_error: float = 0.0         # reported-outcome flip probability
    correlated_dephasing: bool = True    # shared detuning draw for all ions
    pulse_durations: PulseDurations = field(default_factory=PulseDurations)
    # Optional step-id whitelist restricting where depolarizing attaches
    # (diagnostic hook; None = every carrier/sideband pulse).
    depolarizing_steps: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.detuning_sigma_SD < 0 or self.amplitude_error_sigma < 0:
            raise ConfigError("noise sigmas must be nonnegative")
        if not 0.0 <= self.depolarizing_per_pulse <= 1.0:
            raise ConfigError("depolarizing_per_pulse must be in [0, 1]")
        if not 0.0 <= self.detection_error <= 1.0:
            raise ConfigError("detection_error must be in [0, 1]")
        if self.dephasing_ratio_H < 0:
            raise ConfigError("dephasing_ratio_H must be nonnegative")
        if self.depolarizing_steps is not None:
            object.__setattr__(
                self, "depolarizing_steps", tuple(int(s) for s in self.depolarizing_steps)
            )

    @property
    def is_noiseless(self) -> bool:
        return (
            self.detuning_sigma_SD == 0.0
            and self.detuning_bias_SD == 0.0
            and self.amplitude_error_sigma == 0.0
            and self.depolarizing_per_pulse == 0.0
            and self.detection_error == 0.0
        )

    def depolarizing_applies(self, step_id: int) -> bool:
        if self.depolarizing_per_pulse == 0.0:
            return False
        return self.depolarizing_steps is None or step_id in self.depolarizing_steps


@dataclass(frozen=True)
class ShotNoise:
    """Frozen per-shot noise realisation (one entry per ion / sequence step)."""

    detuning_SD: np.ndarray        # rad/us, per ion
    detuning_H: np.ndarray         # rad/us, per ion
    amplitude_factors: np.ndarray  # unitless, indexed by step_id - 1

    @classmethod
    def quiet(cls, n_ions: int = 3, n_steps: int = 35) -> "ShotNoise":
        return cls(np.zeros(n_ions), np.zeros(n_ions), np.ones(n_steps))


def sample_shot_noise(
    config: NoiseConfig,
    master_seed: int,
    shot_index: int,
    n_ions: int = 3,
    n_steps: int = 35,
) -> ShotNoise:
    """Deterministic draw keyed by (master_seed, shot_index) only.

    Draw order is fixed: detuning first (one scalar when correlated, n_ions
    otherwise), then the per-step amplitude factors.
    """
    rng = np.random.default_rng([int(master_seed), int(shot_index)])
    if config.correlated_dephasing:
        g = np.full(n_ions, rng.standard_normal())
    else:
        g = rng.standard_normal(n_ions)
    det_sd = config.detuning_bias_SD + config.detuning_sigma_SD * g
    det_h = config.dephasing_ratio_H * det_sd
    factors = 1.0 + config.amplitude_error_sigma * rng.standard_normal(n_steps)
    return ShotNoise(det_sd, det_h, factors)


def phase_exponent(
    n_ions: int,
    fock_cutoff: int,
    detuning_SD: np.ndarray,
    detuning_H: np.ndarray,
    duration_us: float,
) -> np.ndarray:
    """Accumulated phase per basis state, shape (3,)*n_ions + (fock_cutoff,).

    phi = duration * sum_i [detuning_SD[i] * 1(level_i = D)
                            + detuning_H[i] * 1(level_i = H)]
    """
    dims = (3,) * n_ions + (fock_cutoff,)
    phi = np.zeros(dims)
    for i in range(n_ions):
        per_level = duration_us * np.array([0.0, detuning_SD[i], detuning_H[i]])
        shape = [1] * (n_ions + 1)
        shape[i] = 3
        phi = phi + per_level.reshape(shape)
    return phi


def accrue_phase(reg: TrapRegister, duration_us: float, shot: ShotNoise) -> TrapRegister:
    """Free evolution under the shot's detunings for `duration_us`."""
    if duration_us == 0.0 or (
        not np.any(shot.detuning_SD) and not np.any(shot.detuning_H)
    ):
        return replace(reg, elapsed_us=reg.elapsed_us + duration_us)
    phi = phase_exponent(
        reg.n_ions, reg.fock_cutoff, shot.detuning_SD, shot.detuning_H, duration_us
    )
    psi = reg.tensor() * np.exp(-1j * phi)
    return replace(
        reg, psi=psi.reshape(-1), elapsed_us=reg.elapsed_us + duration_us
    )


def perturb_pulse(pulse: trap.Pulse, shot: ShotNoise, step_index: int) -> trap.Pulse:
    """Scale a drive pulse's area by the shot's factor for its table slot."""
    if isinstance(pulse, (Carrier, BlueSideband, Hide)):
        factor = float(shot.amplitude_factors[step_index])
        return replace(pulse, theta=pulse.theta * factor)
    return pulse


def sample_pauli_index(u: float, p: float) -> int | None:
    """Map one uniform draw to the depolarizing unraveling: None or 0..2."""
    if u < 1.0 - 0.75 * p:
        return None
    return min(int((u - (1.0 - 0.75 * p)) / (0.25 * p)), 2)


def depolarize_density_tensor(rho_t: np.ndarray, site: int, p: float,
                              site_dim: int = 3) -> np.ndarray:
    """Depolarizing channel on one site of a (dims + dims) density tensor."""
    n_axes = rho_t.ndim // 2
    paulis = _site_paulis(site_dim)
    out = (1.0 - 0.75 * p) * rho_t
    for sig in paulis:
        branch = np.tensordot(sig, rho_t, axes=([1], [site]))
        branch = np.moveaxis(branch, 0, site)
        branch = np.tensordot(sig.conj(), branch, axes=([1], [site + n_axes]))
        branch = np.moveaxis(branch, 0, site + n_axes)
        out = out + 0.25 * p * branch
    return out


def apply_depolarizing(
    rho: DensityMatrix, ion: int, p: float, subsystem_dims: tuple[int, ...] | None = None
) -> DensityMatrix:
    """Depolarizing with probability p on one subsystem's qubit subspace.

    With subsystem_dims omitted the state is treated as qubits (dim must be a
    power of two). Three-level subsystems depolarize on {S, D} with identity
    on H.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("depolarizing probability must be in [0, 1]")
    if subsystem_dims is None:
        n = int(round(math.log2(rho.dim)))
        if 2 ** n != rho.dim:
            raise DimensionMismatch(
                "cannot infer subsystem layout; pass subsystem_dims explicitly"
            )
        subsystem_dims = (2,) * n
    if int(np.prod(subsystem_dims)) != rho.dim:
        raise DimensionMismatch("subsystem_dims do not multiply to the state dim")
    if not 0 <= ion < len(subsystem_dims):
        raise DimensionMismatch(f"subsystem index {ion} out of range")
    dims = tuple(subsystem_dims)
    rho_t = rho.matrix.reshape(dims + dims)
    out = depolarize_density_tensor(rho_t, ion, p, site_dim=dims[ion])
    return DensityMatrix(out.reshape(rho.dim, rho.dim))
