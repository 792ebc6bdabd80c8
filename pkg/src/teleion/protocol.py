"""Deterministic three-ion teleportation protocol.

The 35-step pulse table teleports an arbitrary qubit state written on ion 1
onto ion 3: a sideband-mediated Bell pair is shared between ions 2 and 3, a
composite-pulse phase gate plus carrier rotations project ions 1-2 onto the
Bell basis via two sequential PMT readouts, and the reported outcomes steer
unitary reconstruction pulses on ion 3. Every classical branch occurs with
probability 1/4 and reconstructs the input exactly in the noiseless limit —
the conditional set is {I, iX, iZ, XZ} up to global phases, keyed on
(pmt1, pmt2) = (S/D, S/D).

Two execution paths share the same sequence objects:

* run_shot — a single pure-state trajectory with sampled noise, keyed
  deterministically by (master_seed, shot_index);
* run_exact — density-matrix evolution with measurement instruments and
  channel noise, Gauss-Hermite-averaged over the quasi-static detuning
  distribution. This is the infinite-statistics reference.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionMismatch, InvariantViolation
from .noise import (
    NoiseConfig,
    ShotNoise,
    RUN_STREAM_TAG,
    accrue_phase,
    depolarize_density_tensor,
    perturb_pulse,
    phase_exponent,
    sample_pauli_index,
    sample_shot_noise,
    _site_paulis,
)
from .qcore import DensityMatrix, PureState, _ptrace, state_fidelity
from . import trap
from .trap import (
    BlueSideband,
    Carrier,
    Detect,
    Hide,
    Outcome,
    TrapRegister,
    Wait,
    apply_pulse,
    apply_site,
    bright_projector_mask,
    fluorescence_measure,
    initialize,
)

PI = math.pi
N_IONS = 3
N_STEPS = 35
#: Step ids that belong to the reconstruction/analysis tail (carry the
#: calibration phase offset).
_TAIL_START = 30


@dataclass(frozen=True)
class InputStateSpec:
    """Input qubit written on ion 1 by R(theta_chi, phi_chi) acting on |S>."""

    theta_chi: float
    phi_chi: float
    label: str = ""

    def ket(self) -> np.ndarray:
        c = math.cos(self.theta_chi / 2.0)
        s = math.sin(self.theta_chi / 2.0)
        return np.array([c, -1j * np.exp(-1j * self.phi_chi) * s])

    def pure(self) -> PureState:
        return PureState(self.ket())


def canonical_inputs() -> tuple[InputStateSpec, ...]:
    """The six axis states of the Bloch sphere, in reporting order."""
    return (
        InputStateSpec(0.0, 0.0, "psi1"),             # |S>
        InputStateSpec(PI, 1.5 * PI, "psi2"),         # |D>
        InputStateSpec(0.5 * PI, PI, "psi3"),         # (|S>+i|D>)/sqrt2
        InputStateSpec(0.5 * PI, 0.5 * PI, "psi4"),   # (|S>-|D>)/sqrt2
        InputStateSpec(0.5 * PI, 0.0, "psi5"),        # (|S>-i|D>)/sqrt2
        InputStateSpec(0.5 * PI, 1.5 * PI, "psi6"),   # (|S>+|D>)/sqrt2
    )


@dataclass(frozen=True)
class FidelityCheck:
    """Row 34 undoes the preparation; row 35's Bright frequency = fidelity."""


@dataclass(frozen=True)
class Tomography:
    """Row 34 becomes the analysis pulse for one measurement basis."""

    basis: str  # "z" | "x" | "y"

    def __post_init__(self):
        if self.basis not in ("z", "x", "y"):
            raise ConfigError(f"unknown tomography basis {self.basis!r}")


Mode = FidelityCheck | Tomography


@dataclass(frozen=True)
class ConditionalPulse:
    detect_label: str
    required: Outcome
    pulse: trap.Pulse


@dataclass(frozen=True)
class SequenceStep:
    step_id: int
    action: trap.Pulse | ConditionalPulse
    comment: str = ""


@dataclass(frozen=True)
class ShotRecord:
    shot_index: int
    pmt1: Outcome
    pmt2: Outcome
    final_outcome: Outcome
    branch: str           # "SS" | "SD" | "DS" | "DD" (pmt1 first, Bright=S)
    leakage_max: float
    elapsed_us: float


def branch_label(pmt1: Outcome, pmt2: Outcome) -> str:
    return ("S" if pmt1 is Outcome.BRIGHT else "D") + (
        "S" if pmt2 is Outcome.BRIGHT else "D"
    )


BRANCHES = ("SS", "SD", "DS", "DD")


def build_sequence(
    input_state: InputStateSpec,
    phase_offset: float = 0.0,
    mode: Mode = FidelityCheck(),
    *,
    standby_wait_us: float = 1.0,
    rephase_wait_us: float = 300.0,
    spin_echo: bool = True,
    reconstruction: bool = True,
) -> tuple[SequenceStep, ...]:
    """The 35-row teleport table for one input state and analysis mode.

    `phase_offset` is added to every pulse phase from row 30 on (the
    reconstruction/analysis tail); it compensates deterministic phase drift
    accumulated between the readouts and the reconstruction.
    `spin_echo=False` replaces the rows 16-18 echo block with markers and
    inverts the two feed-forward conditions (the echo's net iY = ZX flip is
    then applied by the corrections themselves). `reconstruction=False`
    replaces rows 31-33 with markers, exposing the raw branch states.
    """
    phi = phase_offset
    chi_t, chi_p = input_state.theta_chi, input_state.phi_chi

    rows: list[tuple[trap.Pulse | ConditionalPulse, str]] = [
        (Wait(0.0), "397 nm light: Doppler cooling"),
        (Wait(0.0), "729 nm light: sideband cooling to n=0"),
        (Wait(0.0), "397 nm light: optical pumping into S"),
        (BlueSideband(2, 0.5 * PI, 1.5 * PI), "split ion 3 onto the motional mode"),
        (Carrier(1, PI, 1.5 * PI), "flip ion 2 into D"),
        (BlueSideband(1, PI, 0.5 * PI), "close the ion2-ion3 Bell pair"),
        (Wait(standby_wait_us), "standby window"),
        (Hide(2, PI, 0.0), "park target ion in H"),
        (Carrier(0, chi_t, chi_p), "write input state on ion 1"),
        (BlueSideband(1, PI, 1.5 * PI), "move ion 2's qubit onto the motion"),
        (BlueSideband(0, PI / math.sqrt(2.0), 0.5 * PI), "phase gate segment 1/4"),
        (BlueSideband(0, PI, 0.0), "phase gate segment 2/4"),
        (BlueSideband(0, PI / math.sqrt(2.0), 0.5 * PI), "phase gate segment 3/4"),
        (BlueSideband(0, PI, 0.0), "phase gate segment 4/4"),
        (Carrier(0, PI, 0.5 * PI), "echo pulse on ion 1"),
        # The target-ion echo block: without it the ion is simply left parked,
        # and the missing iY (= ZX) flip is absorbed by inverting the two
        # feed-forward conditions below, keeping the noiseless protocol exact.
        (
            Hide(2, PI, PI) if spin_echo else Wait(0.0),
            "bring target back for its echo" if spin_echo else "echo block disabled",
        ),
        (
            Carrier(2, PI, 0.5 * PI) if spin_echo else Wait(0.0),
            "echo pulse on ion 3" if spin_echo else "echo pulse disabled",
        ),
        (
            Hide(2, PI, 0.0) if spin_echo else Wait(0.0),
            "park target ion again" if spin_echo else "echo block disabled",
        ),
        (BlueSideband(1, PI, 0.5 * PI), "return the motional qubit to ion 2"),
        (Carrier(0, 0.5 * PI, 1.5 * PI), "Bell-basis rotation, ion 1 half"),
        (Carrier(1, 0.5 * PI, 0.5 * PI), "Bell-basis rotation, ion 2 half"),
        (Hide(1, PI, 0.0), "shield ion 2 during first readout"),
        (Detect(0, "pmt1"), "PMT readout of ion 1"),
        (Hide(0, PI, 0.0), "shield ion 1 during second readout"),
        (Hide(1, PI, PI), "expose ion 2"),
        (Detect(1, "pmt2"), "PMT readout of ion 2"),
        (Hide(1, PI, 0.0), "park ion 2 for good"),
        (Wait(rephase_wait_us), "rephasing interval"),
        (Hide(2, PI, PI), "release the target ion"),
        (Carrier(2, 0.5 * PI, 1.5 * PI + phi), "rotate target out of the Bell frame"),
    ]

    # With the echo, corrections fire on Dark; without it the echo's iY flip
    # is missing, which is the same as toggling both corrections (ZX = iY).
    fire_on = Outcome.DARK if spin_echo else Outcome.BRIGHT

    def conditional(label: str, pulse: trap.Pulse, text: str):
        if reconstruction:
            return (ConditionalPulse(label, fire_on, pulse), text)
        return (Wait(0.0), f"{text} (reconstruction disabled)")

    rows.append(conditional("pmt1", Carrier(2, PI, phi), "phase flip, first half"))
    rows.append(conditional("pmt1", Carrier(2, PI, 0.5 * PI + phi), "phase flip, second half"))
    rows.append(conditional("pmt2", Carrier(2, PI, phi), "bit flip"))

    if isinstance(mode, FidelityCheck):
        rows.append(
            (Carrier(2, chi_t, chi_p + PI + phi), "undo the input preparation")
        )
    elif mode.basis == "z":
        rows.append((Wait(0.0), "no analysis pulse (Z basis)"))
    elif mode.basis == "x":
        rows.append((Carrier(2, 0.5 * PI, 1.5 * PI + phi), "X-basis analysis pulse"))
    else:
        rows.append((Carrier(2, 0.5 * PI, PI + phi), "Y-basis analysis pulse"))
    rows.append((Detect(2, "final"), "readout of ion 3"))

    steps = tuple(
        SequenceStep(i + 1, action, comment) for i, (action, comment) in enumerate(rows)
    )
    _validate_sequence(steps)
    return steps


def _validate_sequence(steps: tuple[SequenceStep, ...]) -> None:
    if [s.step_id for s in steps] != sorted({s.step_id for s in steps}):
        raise InvariantViolation("step ids must be strictly increasing")
    seen_detects: set[str] = set()
    for s in steps:
        if isinstance(s.action, Detect):
            if s.action.label in seen_detects:
                raise InvariantViolation(f"duplicate detect label {s.action.label!r}")
            seen_detects.add(s.action.label)
        elif isinstance(s.action, ConditionalPulse):
            if s.action.detect_label not in seen_detects:
                raise InvariantViolation(
                    f"step {s.step_id} conditions on future/unknown detect "
                    f"{s.action.detect_label!r}"
                )


def _fmt_angle(x: float) -> str:
    return f"{x / PI:.4f}pi"


def _fmt_pulse(p: trap.Pulse | ConditionalPulse) -> str:
    if isinstance(p, ConditionalPulse):
        return f"if {p.detect_label}={p.required.value}: {_fmt_pulse(p.pulse)}"
    if isinstance(p, Carrier):
        return f"RC_{p.ion + 1}({_fmt_angle(p.theta)}, {_fmt_angle(p.phi)})"
    if isinstance(p, BlueSideband):
        return f"R+_{p.ion + 1}({_fmt_angle(p.theta)}, {_fmt_angle(p.phi)})"
    if isinstance(p, Hide):
        return f"RH_{p.ion + 1}({_fmt_angle(p.theta)}, {_fmt_angle(p.phi)})"
    if isinstance(p, Wait):
        return f"wait {p.duration_us:g} us"
    if isinstance(p, Detect):
        return f"detect ion {p.ion + 1} [{p.label}]"
    raise DimensionMismatch(f"unknown action {type(p).__name__}")


def sequence_text(steps: tuple[SequenceStep, ...]) -> str:
    """Human-readable listing, one numbered row per step."""
    lines = [f"{s.step_id:>2}  {_fmt_pulse(s.action):<44}  {s.comment}" for s in steps]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sampled path

def _resolve_budget(noise: NoiseConfig, leakage_budget: float | None) -> float:
    if leakage_budget is not None:
        return leakage_budget
    # Amplitude errors physically populate intermediate Fock states; the tight
    # noiseless budget would reject valid noisy runs, so loosen it while still
    # guarding against a genuinely too-small cutoff.
    return 1e-3 if noise.amplitude_error_sigma > 0 else trap.LEAKAGE_BUDGET_DEFAULT


class _FixedDraws:
    """Generator stand-in replaying pre-drawn uniforms (keeps streams stable)."""

    def __init__(self, values):
        self._values = list(values)

    def random(self) -> float:
        return self._values.pop(0)


def run_shot(
    sequence: tuple[SequenceStep, ...],
    noise: NoiseConfig,
    master_seed: int,
    shot_index: int,
    *,
    fock_cutoff: int = 4,
    leakage_budget: float | None = None,
) -> ShotRecord:
    """One full trajectory through the sequence with sampled noise.

    All randomness is keyed by (master_seed, shot_index); draws are indexed by
    step id so a skipped conditional pulse never shifts another step's noise.
    """
    n_steps = max(s.step_id for s in sequence)
    shot = sample_shot_noise(noise, master_seed, shot_index, N_IONS, n_steps)
    rng = np.random.default_rng([int(master_seed), int(shot_index), RUN_STREAM_TAG])
    depol_u = rng.random(n_steps)
    meas_u = rng.random((n_steps, 2))

    reg = initialize(N_IONS, fock_cutoff, leakage_budget=_resolve_budget(noise, leakage_budget))
    outcomes: dict[str, Outcome] = {}

    for step in sequence:
        action = step.action
        if isinstance(action, ConditionalPulse):
            if outcomes.get(action.detect_label) is not action.required:
                continue
            pulse = action.pulse
        else:
            pulse = action

        reg = accrue_phase(reg, noise.pulse_durations.of(pulse), shot)

        if isinstance(pulse, Detect):
            draws = _FixedDraws(meas_u[step.step_id - 1])
            _true, reported, reg = fluorescence_measure(
                reg, pulse.ion, draws, noise.detection_error
            )
            outcomes[pulse.label] = reported
        elif isinstance(pulse, Wait):
            continue  # time already booked by accrue_phase
        else:
            reg = apply_pulse(reg, perturb_pulse(pulse, shot, step.step_id - 1))
            if isinstance(pulse, (Carrier, BlueSideband)) and noise.depolarizing_applies(
                step.step_id
            ):
                k = sample_pauli_index(
                    float(depol_u[step.step_id - 1]), noise.depolarizing_per_pulse
                )
                if k is not None:
                    sig = _site_paulis(3)[k]
                    t = apply_site(reg.tensor(), sig, pulse.ion)
                    # A flip mid-gate legitimately drives population up the
                    # truncated Fock ladder; the cutoff tripwire only guards
                    # trajectories that are still on the ideal path.
                    reg = replace(reg, psi=t.reshape(-1), leakage_budget=math.inf)

    for label in ("pmt1", "pmt2", "final"):
        if label not in outcomes:
            raise InvariantViolation(f"sequence produced no {label!r} readout")
    return ShotRecord(
        shot_index=shot_index,
        pmt1=outcomes["pmt1"],
        pmt2=outcomes["pmt2"],
        final_outcome=outcomes["final"],
        branch=branch_label(outcomes["pmt1"], outcomes["pmt2"]),
        leakage_max=reg.leakage_max,
        elapsed_us=reg.elapsed_us,
    )


# ---------------------------------------------------------------------------
# Exact path: density-matrix evolution with measurement instruments.

def _apply_unitary_density(rho_t: np.ndarray, op: np.ndarray, sites) -> np.ndarray:
    n = rho_t.ndim // 2
    if len(sites) == 1:
        (s,) = sites
        out = np.moveaxis(np.tensordot(op, rho_t, axes=([1], [s])), 0, s)
        out = np.moveaxis(np.tensordot(op.conj(), out, axes=([1], [s + n])), 0, s + n)
        return out
    s1, s2 = sites
    out = np.tensordot(op, rho_t, axes=([2, 3], [s1, s2]))
    out = np.moveaxis(out, [0, 1], [s1, s2])
    out = np.tensordot(op.conj(), out, axes=([2, 3], [s1 + n, s2 + n]))
    return np.moveaxis(out, [0, 1], [s1 + n, s2 + n])


def _pulse_op_and_sites(pulse: trap.Pulse, fock_cutoff: int):
    if isinstance(pulse, Carrier):
        return trap.carrier_local(pulse.theta, pulse.phi), (pulse.ion,)
    if isinstance(pulse, Hide):
        return trap.hide_local(pulse.theta, pulse.phi), (pulse.ion,)
    if isinstance(pulse, BlueSideband):
        op = trap.sideband_local(pulse.theta, pulse.phi, fock_cutoff).reshape(
            3, fock_cutoff, 3, fock_cutoff
        )
        return op, (pulse.ion, N_IONS)
    raise DimensionMismatch(f"not a unitary pulse: {type(pulse).__name__}")


@dataclass
class _ExactState:
    """Unnormalized branch-resolved density tensors during exact evolution."""

    branches: dict[tuple[tuple[str, Outcome], ...], np.ndarray]
    snapshots: dict[tuple[tuple[str, Outcome], ...], np.ndarray] = field(default_factory=dict)
    final_bright: dict[tuple[tuple[str, Outcome], ...], float] = field(default_factory=dict)


def _evolve_exact(
    state: _ExactState,
    steps,
    noise: NoiseConfig,
    det_sd: np.ndarray,
    det_h: np.ndarray,
    fock_cutoff: int,
    snapshot_at: int | None = None,
    split_labels: tuple[str, ...] = ("pmt1", "pmt2"),
    prob_labels: tuple[str, ...] = ("final",),
) -> _ExactState:
    dims = (3,) * N_IONS + (fock_cutoff,)
    eps = noise.detection_error
    phase_cache: dict[float, np.ndarray] = {}

    def dephase(rho_t, duration):
        if duration == 0.0 or (not np.any(det_sd) and not np.any(det_h)):
            return rho_t
        ph = phase_cache.get(duration)
        if ph is None:
            ph = np.exp(-1j * phase_exponent(N_IONS, fock_cutoff, det_sd, det_h, duration))
            phase_cache[duration] = ph
        nf = ph.reshape(-1)
        flat = rho_t.reshape(nf.size, nf.size)
        return (flat * nf[:, None] * nf.conj()[None, :]).reshape(rho_t.shape)

    for step in steps:
        action = step.action
        if isinstance(action, ConditionalPulse):
            duration = noise.pulse_durations.of(action.pulse)
            op, sites = _pulse_op_and_sites(action.pulse, fock_cutoff)
            depol = isinstance(action.pulse, (Carrier, BlueSideband)) and (
                noise.depolarizing_applies(step.step_id)
            )
            for key in list(state.branches):
                if dict(key).get(action.detect_label) is not action.required:
                    continue
                rho = dephase(state.branches[key], duration)
                rho = _apply_unitary_density(rho, op, sites)
                if depol:
                    rho = depolarize_density_tensor(
                        rho, action.pulse.ion, noise.depolarizing_per_pulse
                    )
                state.branches[key] = rho
        elif isinstance(action, Detect):
            duration = noise.pulse_durations.of(action)
            mask = bright_projector_mask(N_IONS, fock_cutoff, action.ion).reshape(-1)
            bright_d = np.where(mask, 1.0, 0.0)
            dark_d = 1.0 - bright_d
            new_branches: dict = {}
            for key, rho in state.branches.items():
                rho = dephase(rho, duration)
                flat = rho.reshape(bright_d.size, bright_d.size)
                rho_s = (flat * bright_d[:, None] * bright_d[None, :]).reshape(rho.shape)
                rho_d = (flat * dark_d[:, None] * dark_d[None, :]).reshape(rho.shape)
                if action.label in split_labels:
                    rep_bright = (1.0 - eps) * rho_s + eps * rho_d
                    rep_dark = eps * rho_s + (1.0 - eps) * rho_d
                    new_branches[key + ((action.label, Outcome.BRIGHT),)] = rep_bright
                    new_branches[key + ((action.label, Outcome.DARK),)] = rep_dark
                elif action.label in prob_labels:
                    w = float(np.real(np.trace(flat)))
                    p_true = float(np.real(np.trace(rho_s.reshape(flat.shape)))) / max(w, 1e-300)
                    state.final_bright[key] = (1.0 - eps) * p_true + eps * (1.0 - p_true)
                    new_branches[key] = rho_s + rho_d
                else:
                    # unreferenced detect: decohere, keep the branch intact
                    new_branches[key] = rho_s + rho_d
            state.branches = new_branches
        elif isinstance(action, Wait):
            for key in list(state.branches):
                state.branches[key] = dephase(state.branches[key], action.duration_us)
        else:
            duration = noise.pulse_durations.of(action)
            op, sites = _pulse_op_and_sites(action, fock_cutoff)
            depol = isinstance(action, (Carrier, BlueSideband)) and noise.depolarizing_applies(
                step.step_id
            )
            for key in list(state.branches):
                rho = dephase(state.branches[key], duration)
                rho = _apply_unitary_density(rho, op, sites)
                if depol:
                    rho = depolarize_density_tensor(rho, action.ion, noise.depolarizing_per_pulse)
                state.branches[key] = rho

        if snapshot_at is not None and step.step_id == snapshot_at:
            state.snapshots = {k: v.copy() for k, v in state.branches.items()}
    return state


def _gh_nodes(noise: NoiseConfig, quad_points: int | None):
    """(detuning_SD per ion, detuning_H per ion, weight) quadrature nodes."""
    sigma, bias, ratio = (
        noise.detuning_sigma_SD,
        noise.detuning_bias_SD,
        noise.dephasing_ratio_H,
    )
    if sigma == 0.0:
        d = np.full(N_IONS, bias)
        return [(d, ratio * d, 1.0)]
    if noise.correlated_dephasing:
        points = quad_points if quad_points is not None else 21
        x, w = np.polynomial.hermite.hermgauss(points)
        nodes = []
        for xi, wi in zip(x, w):
            d = np.full(N_IONS, bias + math.sqrt(2.0) * sigma * xi)
            nodes.append((d, ratio * d, wi / math.sqrt(math.pi)))
        return nodes
    points = quad_points if quad_points is not None else 9
    x, w = np.polynomial.hermite.hermgauss(points)
    nodes = []
    for combo in itertools.product(range(points), repeat=N_IONS):
        d = bias + math.sqrt(2.0) * sigma * x[np.array(combo)]
        weight = float(np.prod(w[np.array(combo)])) / math.pi ** (N_IONS / 2.0)
        nodes.append((d, ratio * d, weight))
    return nodes


def _check_exact_noise(noise: NoiseConfig) -> None:
    if noise.amplitude_error_sigma != 0.0:
        raise ConfigError(
            "run_exact handles channel-representable noise only; "
            "amplitude_error_sigma must be 0 (use the sampled path instead)"
        )


@dataclass(frozen=True)
class ExactRun:
    """Infinite-statistics result for one input state."""

    rho_exp: DensityMatrix                   # ion 3, {S,D} block, post-row-33
    branch_probs: dict[str, float]
    branch_states: dict[str, DensityMatrix]  # normalized per reported branch
    final_bright: dict[str, float]           # reported P(bright | branch), row 35
    h_residual: float
    motional_residual: float


def exact_run(
    input_state: InputStateSpec,
    phase_offset: float = 0.0,
    noise: NoiseConfig = NoiseConfig(),
    mode: Mode = FidelityCheck(),
    *,
    quad_points: int | None = None,
    fock_cutoff: int = 4,
    spin_echo: bool = True,
    standby_wait_us: float = 1.0,
    rephase_wait_us: float = 300.0,
    reconstruction: bool = True,
    sequence: tuple[SequenceStep, ...] | None = None,
) -> ExactRun:
    """Full exact evolution: branch states after row 33 + row-35 statistics."""
    _check_exact_noise(noise)
    if sequence is None:
        sequence = build_sequence(
            input_state,
            phase_offset,
            mode,
            standby_wait_us=standby_wait_us,
            rephase_wait_us=rephase_wait_us,
            spin_echo=spin_echo,
            reconstruction=reconstruction,
        )
    dims = (3,) * N_IONS + (fock_cutoff,)
    d = int(np.prod(dims))

    acc: dict[tuple, np.ndarray] = {}
    final_bright: dict[tuple, float] = {}
    branch_w: dict[tuple, float] = {}
    for det_sd, det_h, weight in _gh_nodes(noise, quad_points):
        rho0 = np.zeros((d, d), dtype=np.complex128)
        rho0[0, 0] = 1.0
        st = _ExactState(branches={(): rho0.reshape(dims + dims)})
        st = _evolve_exact(st, sequence, noise, det_sd, det_h, fock_cutoff, snapshot_at=33)
        for key, rho in st.snapshots.items():
            acc[key] = acc.get(key, 0.0) + weight * rho
        for key, p in st.final_bright.items():
            w = float(np.real(np.trace(st.branches[key].reshape(d, d))))
            final_bright[key] = final_bright.get(key, 0.0) + weight * w * p
            branch_w[key] = branch_w.get(key, 0.0) + weight * w

    def as_branch(key: tuple) -> str:
        kd = dict(key)
        return branch_label(kd["pmt1"], kd["pmt2"])

    total = np.zeros((d, d), dtype=np.complex128)
    branch_probs: dict[str, float] = {}
    branch_states: dict[str, DensityMatrix] = {}
    for key, rho in acc.items():
        flat = rho.reshape(d, d)
        total += flat
        w = float(np.real(np.trace(flat)))
        branch_probs[as_branch(key)] = w
        branch_states[as_branch(key)] = _fold_ion3(flat / w, dims)

    tr_total = float(np.real(np.trace(total)))
    if abs(tr_total - 1.0) > 1e-9:
        raise InvariantViolation(f"exact evolution lost trace: {tr_total}")

    rho3 = _ptrace(total, dims, keep=[2])
    h_residual = float(np.real(rho3[2, 2]))
    rho_motion = _ptrace(total, dims, keep=[N_IONS])
    motional_residual = float(np.real(np.trace(rho_motion) - rho_motion[0, 0]))
    if h_residual > 1e-8:
        raise InvariantViolation(
            f"residual H population {h_residual:.3e} after unhide (sequence/convention bug)"
        )
    # Depolarizing flips and inter-pulse detuning phases both break the
    # composite gate's interference and legitimately strand motional
    # population, so the bug tripwire only arms when neither is present.
    can_strand = (
        noise.depolarizing_per_pulse != 0.0
        or noise.detuning_sigma_SD != 0.0
        or noise.detuning_bias_SD != 0.0
    )
    if not can_strand and motional_residual > 1e-8:
        raise InvariantViolation(
            f"residual motional excitation {motional_residual:.3e} (sequence/convention bug)"
        )

    fb = {as_branch(k): v / max(branch_w[k], 1e-300) for k, v in final_bright.items()}
    return ExactRun(
        rho_exp=_fold_ion3(total, dims),
        branch_probs=branch_probs,
        branch_states=branch_states,
        final_bright=fb,
        h_residual=h_residual,
        motional_residual=motional_residual,
    )


def _fold_ion3(rho_flat: np.ndarray, dims) -> DensityMatrix:
    """Reduce to ion 3 and drop the (verified tiny) H row/column."""
    rho3 = _ptrace(rho_flat, dims, keep=[2])
    block = rho3[:2, :2]
    tr = float(np.real(np.trace(block)))
    if tr <= 0.0:
        raise InvariantViolation("ion-3 qubit block has no population")
    block = block / tr
    block = 0.5 * (block + block.conj().T)
    return DensityMatrix(block)


def run_exact(
    input_state: InputStateSpec,
    phase_offset: float = 0.0,
    noise: NoiseConfig = NoiseConfig(),
    **kwargs,
) -> DensityMatrix:
    """Ion 3's reduced output state after the conditional reconstruction."""
    return exact_run(input_state, phase_offset, noise, FidelityCheck(), **kwargs).rho_exp


# ---------------------------------------------------------------------------
# Fidelity estimators

@dataclass(frozen=True)
class Exact:
    quad_points: int | None = None


@dataclass(frozen=True)
class Sampled:
    shots: int
    master_seed: int = 1234


@dataclass(frozen=True)
class FidelityEstimate:
    value: float
    stderr: float


def teleportation_fidelity(
    input_state: InputStateSpec,
    noise: NoiseConfig = NoiseConfig(),
    mode: Exact | Sampled = Exact(),
    *,
    phase_offset: float = 0.0,
    fock_cutoff: int = 4,
    spin_echo: bool = True,
    standby_wait_us: float = 1.0,
    rephase_wait_us: float = 300.0,
) -> FidelityEstimate:
    """Teleportation fidelity for one input state.

    Exact mode: overlap of run_exact's output with the ideal input state
    (stderr 0). Sampled mode: Bright frequency at the final readout over
    `shots` trajectories with binomial standard error — this additionally sees
    the inverse-preparation pulse's noise and the final detection error.
    """
    if isinstance(mode, Exact):
        rho = run_exact(
            input_state,
            phase_offset,
            noise,
            quad_points=mode.quad_points,
            fock_cutoff=fock_cutoff,
            spin_echo=spin_echo,
            standby_wait_us=standby_wait_us,
            rephase_wait_us=rephase_wait_us,
        )
        return FidelityEstimate(state_fidelity(rho, input_state.pure()), 0.0)

    seq = build_sequence(
        input_state,
        phase_offset,
        FidelityCheck(),
        standby_wait_us=standby_wait_us,
        rephase_wait_us=rephase_wait_us,
        spin_echo=spin_echo,
    )
    n_bright = 0
    for i in range(mode.shots):
        rec = run_shot(seq, noise, mode.master_seed, i, fock_cutoff=fock_cutoff)
        n_bright += rec.final_outcome is Outcome.BRIGHT
    f = n_bright / mode.shots
    return FidelityEstimate(f, math.sqrt(max(f * (1.0 - f), 0.0) / mode.shots))


# ---------------------------------------------------------------------------
# Phase calibration

@dataclass(frozen=True)
class CalibrationResult:
    phi_star: float
    grid_phis: np.ndarray
    grid_fidelities: np.ndarray


def calibrate_phase(
    noise: NoiseConfig = NoiseConfig(),
    reference_input: InputStateSpec | None = None,
    *,
    grid: int = 32,
    quad_points: int | None = None,
    fock_cutoff: int = 4,
    spin_echo: bool = True,
    standby_wait_us: float = 1.0,
    rephase_wait_us: float = 300.0,
    tol: float = 1e-3,
) -> CalibrationResult:
    """Scan the tail phase offset and refine the best grid cell.

    Runs the exact engine once up to row 29 per quadrature node (the prefix is
    phase-independent), then replays only rows 30-33 for each candidate phase.
    A golden-section pass shrinks the best grid bracket below `tol` radians.
    """
    _check_exact_noise(noise)
    if grid < 8:
        raise ConfigError("calibration grid needs at least 8 points")
    if reference_input is None:
        reference_input = canonical_inputs()[5]  # +x superposition: phase-sensitive

    dims = (3,) * N_IONS + (fock_cutoff,)
    d = int(np.prod(dims))
    base_seq = build_sequence(
        reference_input,
        0.0,
        FidelityCheck(),
        standby_wait_us=standby_wait_us,
        rephase_wait_us=rephase_wait_us,
        spin_echo=spin_echo,
    )
    prefix = tuple(s for s in base_seq if s.step_id < _TAIL_START)

    cached = []
    for det_sd, det_h, weight in _gh_nodes(noise, quad_points):
        rho0 = np.zeros((d, d), dtype=np.complex128)
        rho0[0, 0] = 1.0
        st = _ExactState(branches={(): rho0.reshape(dims + dims)})
        st = _evolve_exact(st, prefix, noise, det_sd, det_h, fock_cutoff)
        cached.append((st.branches, det_sd, det_h, weight))

    psi = reference_input.ket()

    def fidelity_at(phi: float) -> float:
        tail = tuple(
            s
            for s in build_sequence(
                reference_input,
                phi,
                FidelityCheck(),
                standby_wait_us=standby_wait_us,
                rephase_wait_us=rephase_wait_us,
                spin_echo=spin_echo,
            )
            if _TAIL_START <= s.step_id <= 33
        )
        rho_acc = np.zeros((d, d), dtype=np.complex128)
        for branches, det_sd, det_h, weight in cached:
            st = _ExactState(branches=dict(branches))
            st = _evolve_exact(st, tail, noise, det_sd, det_h, fock_cutoff)
            for rho in st.branches.values():
                rho_acc += weight * rho.reshape(d, d)
        rho3 = _ptrace(rho_acc, dims, keep=[2])[:2, :2]
        tr = float(np.real(np.trace(rho3)))
        return float(np.real(psi.conj() @ rho3 @ psi)) / tr

    phis = np.linspace(0.0, 2.0 * PI, grid, endpoint=False)
    fids = np.array([fidelity_at(p) for p in phis])
    best = int(np.argmax(fids))
    spacing = 2.0 * PI / grid
    lo, hi = phis[best] - spacing, phis[best] + spacing

    # Golden-section pass on the bracket around the best grid point.
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, dd = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = fidelity_at(c), fidelity_at(dd)
    while b - a > tol:
        if fc > fd:
            b, dd, fd = dd, c, fc
            c = b - invphi * (b - a)
            fc = fidelity_at(c)
        else:
            a, c, fc = c, dd, fd
            dd = a + invphi * (b - a)
            fd = fidelity_at(dd)
    phi_star = float((a + b) / 2.0) % (2.0 * PI)
    return CalibrationResult(phi_star, phis, fids)


# ---------------------------------------------------------------------------
# Baselines and calibration helpers

def classical_baseline_per_state() -> np.ndarray:
    """Best measure-and-resend fidelity (fixed Z measurement) per canonical input."""
    out = []
    for spec in canonical_inputs():
        amps = spec.ket()
        out.append(float(sum(abs(a) ** 4 for a in amps)))
    return np.array(out)


def classical_baseline() -> float:
    """Six-state average of the measure-and-resend strategy (= 2/3)."""
    return float(classical_baseline_per_state().mean())


def bell_preparation_fidelity(
    noise: NoiseConfig = NoiseConfig(),
    *,
    quad_points: int | None = None,
    fock_cutoff: int = 4,
) -> float:
    """Overlap of the ion2-ion3 state after row 6 with (|DS>+|SD>)/sqrt(2).

    Calibration helper: tune depolarizing_per_pulse against this number.
    """
    _check_exact_noise(noise)
    seq = build_sequence(canonical_inputs()[0], 0.0, FidelityCheck())
    prefix = tuple(s for s in seq if s.step_id <= 6)
    dims = (3,) * N_IONS + (fock_cutoff,)
    d = int(np.prod(dims))
    target = np.zeros(9, dtype=np.complex128)
    target[1 * 3 + 0] = 1.0 / math.sqrt(2.0)  # |D S>
    target[0 * 3 + 1] = 1.0 / math.sqrt(2.0)  # |S D>

    f = 0.0
    for det_sd, det_h, weight in _gh_nodes(noise, quad_points):
        rho0 = np.zeros((d, d), dtype=np.complex128)
        rho0[0, 0] = 1.0
        st = _ExactState(branches={(): rho0.reshape(dims + dims)})
        st = _evolve_exact(st, prefix, noise, det_sd, det_h, fock_cutoff)
        rho = sum(r.reshape(d, d) for r in st.branches.values())
        rho23 = _ptrace(rho, dims, keep=[1, 2])
        f += weight * float(np.real(target.conj() @ rho23 @ target))
    return f
