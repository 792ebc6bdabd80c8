"""Three-level ion register with a shared motional mode.

Level layout per ion: S = 0 (bright qubit ground), D = 1 (metastable qubit
excited), H = 2 (hideout level reached from S, invisible to the PMT together
with D). The register state is a tensor over (3,)*n_ions + (fock_cutoff,)
with the motional mode always last; flattening is row-major.

Pulse zoo:

* Carrier(ion, theta, phi)      — R(theta, phi) on {S, D}, motion untouched.
* Hide(ion, theta, phi)         — same 2x2 rotation on {S, H}.
* BlueSideband(ion, theta, phi) — couples |S,n> <-> |D,n+1> with area
  theta*sqrt(n+1); |D,0> and all H levels are fixed points; the uncoupled
  top state |S, fock_cutoff-1> is held at identity and watched by the
  leakage monitor.
* Wait(duration_us)             — identity plus elapsed-time bookkeeping.
* Detect(ion, label)            — handled by fluorescence_measure / the
  protocol runner, never by apply_pulse.

The 2x2 rotation convention (basis order: lower level first) is

    R(theta, phi) = [[cos(theta/2),            -i e^{+i phi} sin(theta/2)],
                     [-i e^{-i phi} sin(theta/2), cos(theta/2)         ]]

All sign/phase choices are documented in docs/CONVENTIONS.md; the teleport
sequence reproduces every branch at fidelity 1 under them (see tests).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, InvariantViolation
from .qcore import ATOL_STRUCTURAL

S, D, H = 0, 1, 2
LEAKAGE_BUDGET_DEFAULT = 1e-9


class Outcome(str, enum.Enum):
    BRIGHT = "bright"   # fluorescence seen: population in S
    DARK = "dark"       # no fluorescence: population in D or H

    def flipped(self) -> "Outcome":
        return Outcome.DARK if self is Outcome.BRIGHT else Outcome.BRIGHT


@dataclass(frozen=True)
class Carrier:
    ion: int
    theta: float
    phi: float


@dataclass(frozen=True)
class BlueSideband:
    ion: int
    theta: float
    phi: float


@dataclass(frozen=True)
class Hide:
    ion: int
    theta: float
    phi: float


@dataclass(frozen=True)
class Wait:
    duration_us: float


@dataclass(frozen=True)
class Detect:
    ion: int
    label: str


Pulse = Carrier | BlueSideband | Hide | Wait | Detect


@dataclass(frozen=True)
class TrapRegister:
    """Pure-state register plus leakage bookkeeping (immutable)."""

    n_ions: int
    fock_cutoff: int
    psi: np.ndarray                       # flat, dim 3**n_ions * fock_cutoff
    elapsed_us: float = 0.0
    leakage_budget: float = LEAKAGE_BUDGET_DEFAULT
    leakage_max: float = 0.0

    @property
    def dims(self) -> tuple[int, ...]:
        return (3,) * self.n_ions + (self.fock_cutoff,)

    @property
    def dim(self) -> int:
        return 3 ** self.n_ions * self.fock_cutoff

    def tensor(self) -> np.ndarray:
        return self.psi.reshape(self.dims)


def initialize(n_ions: int = 3, fock_cutoff: int = 4,
               leakage_budget: float = LEAKAGE_BUDGET_DEFAULT) -> TrapRegister:
    """All ions in S, motion in |n=0> (Doppler + sideband cooling + pumping)."""
    if n_ions < 1 or fock_cutoff < 2:
        raise DimensionMismatch("need n_ions >= 1 and fock_cutoff >= 2")
    psi = np.zeros(3 ** n_ions * fock_cutoff, dtype=np.complex128)
    psi[0] = 1.0
    return TrapRegister(n_ions, fock_cutoff, psi, leakage_budget=leakage_budget)


def rotation_2x2(theta: float, phi: float) -> np.ndarray:
    c = math.cos(theta / 2.0)
    s = math.sin(theta / 2.0)
    return np.array(
        [[c, -1j * np.exp(1j * phi) * s],
         [-1j * np.exp(-1j * phi) * s, c]],
        dtype=np.complex128,
    )


def carrier_local(theta: float, phi: float) -> np.ndarray:
    """3x3 single-ion matrix: R(theta, phi) on {S, D}, identity on H."""
    u = np.eye(3, dtype=np.complex128)
    u[np.ix_([S, D], [S, D])] = rotation_2x2(theta, phi)
    return u


def hide_local(theta: float, phi: float) -> np.ndarray:
    """3x3 single-ion matrix: R(theta, phi) on {S, H}, identity on D."""
    u = np.eye(3, dtype=np.complex128)
    u[np.ix_([S, H], [S, H])] = rotation_2x2(theta, phi)
    return u


def sideband_local(theta: float, phi: float, fock_cutoff: int) -> np.ndarray:
    """(3*nc x 3*nc) matrix on (ion level, motion), index = level*nc + n.

    Each |S,n>,|D,n+1> block gets R(theta*sqrt(n+1), phi); everything else
    (H levels, |D,0>, the truncated |S, nc-1>) is an exact fixed point, so the
    matrix is unitary at any cutoff.
    """
    nc = fock_cutoff
    u = np.eye(3 * nc, dtype=np.complex128)
    for n in range(nc - 1):
        idx = [S * nc + n, D * nc + n + 1]
        u[np.ix_(idx, idx)] = rotation_2x2(theta * math.sqrt(n + 1), phi)
    return u


def _embed(local: np.ndarray, sites: list[int], dims: tuple[int, ...]) -> np.ndarray:
    """Full-space matrix acting as `local` on `sites` (in order), identity elsewhere."""
    n = len(dims)
    others = [i for i in range(n) if i not in sites]
    d_other = int(np.prod([dims[i] for i in others])) if others else 1
    big = np.kron(local, np.eye(d_other))
    # big is ordered (sites..., others...) on rows and columns; permute back.
    order = list(sites) + others
    shaped = big.reshape([dims[i] for i in order] * 2)
    inv = np.argsort(order)
    perm = list(inv) + [n + i for i in inv]
    d = int(np.prod(dims))
    return shaped.transpose(perm).reshape(d, d)


def carrier_unitary(n_ions: int, fock_cutoff: int, ion: int,
                    theta: float, phi: float) -> np.ndarray:
    _check_ion(n_ions, ion)
    dims = (3,) * n_ions + (fock_cutoff,)
    return _embed(carrier_local(theta, phi), [ion], dims)


def hide_unitary(n_ions: int, fock_cutoff: int, ion: int,
                 theta: float, phi: float) -> np.ndarray:
    _check_ion(n_ions, ion)
    dims = (3,) * n_ions + (fock_cutoff,)
    return _embed(hide_local(theta, phi), [ion], dims)


def sideband_unitary(n_ions: int, fock_cutoff: int, ion: int,
                     theta: float, phi: float) -> np.ndarray:
    _check_ion(n_ions, ion)
    dims = (3,) * n_ions + (fock_cutoff,)
    return _embed(sideband_local(theta, phi, fock_cutoff), [ion, n_ions], dims)


def _check_ion(n_ions: int, ion: int) -> None:
    if not 0 <= ion < n_ions:
        raise DimensionMismatch(f"ion index {ion} out of range for {n_ions} ions")


# ---------------------------------------------------------------------------
# Fast local application (pure-state tensors); the full matrices above are the
# reference implementation the tests compare against.

def apply_site(psi_t: np.ndarray, op: np.ndarray, site: int) -> np.ndarray:
    out = np.tensordot(op, psi_t, axes=([1], [site]))
    return np.moveaxis(out, 0, site)


def apply_ion_motion(psi_t: np.ndarray, op: np.ndarray, ion: int) -> np.ndarray:
    """Apply a (3*nc x 3*nc) operator to (ion level, motion) axes."""
    nc = psi_t.shape[-1]
    motion_axis = psi_t.ndim - 1
    op4 = op.reshape(3, nc, 3, nc)
    out = np.tensordot(op4, psi_t, axes=([2, 3], [ion, motion_axis]))
    return np.moveaxis(out, [0, 1], [ion, motion_axis])


def top_fock_population(psi_t: np.ndarray) -> float:
    return float(np.sum(np.abs(psi_t[..., -1]) ** 2))


def apply_pulse(reg: TrapRegister, pulse: Pulse) -> TrapRegister:
    """Unitary pulse application with leakage monitoring.

    Detect is not a unitary; route it through fluorescence_measure instead.
    """
    if isinstance(pulse, Detect):
        raise InvariantViolation("Detect steps are measurements, not pulses")
    if isinstance(pulse, Wait):
        return replace(reg, elapsed_us=reg.elapsed_us + float(pulse.duration_us))

    _check_ion(reg.n_ions, pulse.ion)
    t = reg.tensor()
    if isinstance(pulse, Carrier):
        t = apply_site(t, carrier_local(pulse.theta, pulse.phi), pulse.ion)
    elif isinstance(pulse, Hide):
        t = apply_site(t, hide_local(pulse.theta, pulse.phi), pulse.ion)
    elif isinstance(pulse, BlueSideband):
        t = apply_ion_motion(
            t, sideband_local(pulse.theta, pulse.phi, reg.fock_cutoff), pulse.ion
        )
    else:
        raise DimensionMismatch(f"unknown pulse type {type(pulse).__name__}")

    leak = top_fock_population(t)
    leak_max = max(reg.leakage_max, leak)
    if leak > reg.leakage_budget:
        raise InvariantViolation(
            f"top Fock level population {leak:.3e} exceeds leakage budget "
            f"{reg.leakage_budget:.1e} (fock_cutoff too small?)"
        )
    return replace(reg, psi=t.reshape(-1), leakage_max=leak_max)


def bright_projector_mask(n_ions: int, fock_cutoff: int, ion: int) -> np.ndarray:
    """Boolean tensor mask selecting basis states with the ion in S."""
    dims = (3,) * n_ions + (fock_cutoff,)
    grid = np.zeros(dims, dtype=bool)
    sl = [slice(None)] * len(dims)
    sl[ion] = S
    grid[tuple(sl)] = True
    return grid


def fluorescence_measure(
    reg: TrapRegister,
    ion: int,
    rng: np.random.Generator,
    detection_error: float = 0.0,
    force: Outcome | None = None,
) -> tuple[Outcome, Outcome, TrapRegister]:
    """Projective S-vs-{D,H} readout.

    Returns (true_outcome, reported_outcome, collapsed_register). The state
    collapses according to the *true* outcome; with detection error epsilon the
    reported outcome flips with probability epsilon. `force` selects a branch
    deterministically (replay mode) and raises if that branch has zero weight.
    """
    _check_ion(reg.n_ions, ion)
    t = reg.tensor()
    mask = bright_projector_mask(reg.n_ions, reg.fock_cutoff, ion)
    p_bright = float(np.sum(np.abs(t[mask]) ** 2))
    p_bright = min(max(p_bright, 0.0), 1.0)

    if force is not None:
        p_forced = p_bright if force is Outcome.BRIGHT else 1.0 - p_bright
        if p_forced <= ATOL_STRUCTURAL:
            raise InvariantViolation(
                f"forced branch {force.value} has probability {p_forced:.3e}"
            )
        true = force
    else:
        true = Outcome.BRIGHT if rng.random() < p_bright else Outcome.DARK

    keep = mask if true is Outcome.BRIGHT else ~mask
    collapsed = np.where(keep, t, 0.0)
    norm = np.linalg.norm(collapsed)
    if norm == 0.0:
        raise InvariantViolation("measurement collapsed onto a zero branch")
    collapsed = collapsed / norm

    reported = true
    if detection_error > 0.0 and rng.random() < detection_error:
        reported = true.flipped()
    return true, reported, replace(reg, psi=collapsed.reshape(-1))
