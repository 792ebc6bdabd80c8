"""The 35-row teleport sequence: structure, exact evolution, feed-forward.

Milestone states (Bell pair after row 6, uncorrected branch states) were
worked out by hand from the pulse table and are frozen here as oracles.
"""
import math

import numpy as np
import pytest

from teleion.errors import ConfigError
from teleion.noise import NoiseConfig
from teleion.protocol import (
    BRANCHES,
    ConditionalPulse,
    Exact,
    FidelityCheck,
    InputStateSpec,
    Sampled,
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
from teleion.qcore import state_fidelity
from teleion.trap import Carrier, Detect, Hide, Outcome, Wait, apply_pulse, initialize

PI = math.pi


# ---------------------------------------------------------------------------
# Inputs

def test_canonical_inputs_are_the_six_bloch_axes():
    kets = [s.ket() for s in canonical_inputs()]
    s2 = 1.0 / math.sqrt(2.0)
    expected = [
        [1, 0],
        [0, -1j * np.exp(1j * 0.5 * PI)],  # = |D> up to phase
        [s2, -1j * np.exp(1j * PI) * s2],
        [s2, -s2],
        [s2, -1j * s2],
        [s2, s2],
    ]
    for ket, ref in zip(kets, expected):
        ref = np.asarray(ref, dtype=complex)
        overlap = abs(np.vdot(ref / np.linalg.norm(ref), ket))
        assert np.isclose(overlap, 1.0, atol=1e-12)
    assert [s.label for s in canonical_inputs()] == [f"psi{i}" for i in range(1, 7)]


# ---------------------------------------------------------------------------
# Sequence structure

def test_sequence_has_35_rows_and_the_three_readouts():
    seq = build_sequence(canonical_inputs()[0])
    assert [s.step_id for s in seq] == list(range(1, 36))
    detects = [(s.step_id, s.action.label) for s in seq if isinstance(s.action, Detect)]
    assert detects == [(23, "pmt1"), (26, "pmt2"), (35, "final")]
    conds = [s.step_id for s in seq if isinstance(s.action, ConditionalPulse)]
    assert conds == [31, 32, 33]


def test_conditional_rows_fire_on_dark_with_echo_bright_without():
    for spin_echo, want in ((True, Outcome.DARK), (False, Outcome.BRIGHT)):
        seq = build_sequence(canonical_inputs()[0], spin_echo=spin_echo)
        for s in seq:
            if isinstance(s.action, ConditionalPulse):
                assert s.action.required is want


def test_disabling_the_echo_blanks_rows_16_to_18():
    seq = build_sequence(canonical_inputs()[0], spin_echo=False)
    for sid in (16, 17, 18):
        assert isinstance(seq[sid - 1].action, Wait)
    echoed = build_sequence(canonical_inputs()[0], spin_echo=True)
    assert isinstance(echoed[15].action, Hide)
    assert isinstance(echoed[16].action, Carrier)
    assert isinstance(echoed[17].action, Hide)


def test_phase_offset_only_touches_the_tail():
    a = build_sequence(canonical_inputs()[5], 0.0)
    b = build_sequence(canonical_inputs()[5], 0.3)
    for sa, sb in zip(a, b):
        if sa.step_id < 30:
            assert sa.action == sb.action
    assert b[29].action.phi == a[29].action.phi + 0.3


def test_row_34_depends_on_analysis_mode():
    spec = canonical_inputs()[2]
    assert isinstance(build_sequence(spec, mode=Tomography("z"))[33].action, Wait)
    x34 = build_sequence(spec, mode=Tomography("x"))[33].action
    assert (x34.theta, x34.phi) == (0.5 * PI, 1.5 * PI)
    y34 = build_sequence(spec, mode=Tomography("y"))[33].action
    assert (y34.theta, y34.phi) == (0.5 * PI, PI)
    f34 = build_sequence(spec, mode=FidelityCheck())[33].action
    assert (f34.theta, f34.phi) == (spec.theta_chi, spec.phi_chi + PI)
    with pytest.raises(ConfigError):
        Tomography("w")


def test_sequence_text_lists_every_row():
    txt = sequence_text(build_sequence(canonical_inputs()[0]))
    lines = txt.rstrip("\n").split("\n")
    assert len(lines) == 35
    assert "if pmt1=dark: RC_3(1.0000pi, 0.0000pi)" in txt
    assert "detect ion 3 [final]" in txt
    assert lines[0].startswith(" 1  wait 0 us")


def test_branch_label_orders_pmt1_first():
    assert branch_label(Outcome.BRIGHT, Outcome.DARK) == "SD"
    assert branch_label(Outcome.DARK, Outcome.BRIGHT) == "DS"
    assert BRANCHES == ("SS", "SD", "DS", "DD")


# ---------------------------------------------------------------------------
# Milestones along the noiseless sequence

def test_rows_1_to_6_prepare_the_bell_pair():
    reg = initialize(3, 4)
    for step in build_sequence(canonical_inputs()[0])[:6]:
        if not isinstance(step.action, Wait):
            reg = apply_pulse(reg, step.action)
    t = reg.tensor()  # (ion1, ion2, ion3, motion)
    s2 = 1.0 / math.sqrt(2.0)
    assert np.isclose(abs(t[0, 1, 0, 0]), s2, atol=1e-12)  # |S D S, 0>
    assert np.isclose(abs(t[0, 0, 1, 0]), s2, atol=1e-12)  # |S S D, 0>
    assert np.isclose(np.linalg.norm(t), 1.0, atol=1e-12)


def test_bell_preparation_fidelity_is_one_noiselessly():
    assert bell_preparation_fidelity() == pytest.approx(1.0, abs=1e-12)


def test_uncorrected_branch_states_show_the_required_corrections():
    # With reconstruction off, each branch carries the inverse of its own
    # feed-forward correction: SS none, SD a bit flip, DS a phase flip, DD both.
    res = exact_run(canonical_inputs()[0], reconstruction=False)  # input |S>
    pop_s = {b: res.branch_states[b].matrix[0, 0].real for b in BRANCHES}
    assert pop_s["SS"] == pytest.approx(1.0, abs=1e-9)
    assert pop_s["DS"] == pytest.approx(1.0, abs=1e-9)
    assert pop_s["SD"] == pytest.approx(0.0, abs=1e-9)
    assert pop_s["DD"] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# Noiseless teleportation is exact

@pytest.mark.parametrize("spec", canonical_inputs(), ids=lambda s: s.label)
def test_noiseless_exact_fidelity_is_one(spec):
    res = exact_run(spec)
    assert state_fidelity(res.rho_exp, spec.pure()) >= 1.0 - 1e-9
    for b in BRANCHES:
        assert res.branch_probs[b] == pytest.approx(0.25, abs=1e-9)
        assert state_fidelity(res.branch_states[b], spec.pure()) >= 1.0 - 1e-9
        assert res.final_bright[b] == pytest.approx(1.0, abs=1e-9)
    assert res.h_residual <= 1e-8
    assert res.motional_residual <= 1e-8


def test_unechoed_protocol_is_also_exact_noiselessly():
    # Dropping the echo block removes an iY on ion 3; the inverted
    # feed-forward conditions must absorb it exactly.
    for spec in (canonical_inputs()[0], canonical_inputs()[3], canonical_inputs()[5]):
        res = exact_run(spec, spin_echo=False)
        assert state_fidelity(res.rho_exp, spec.pure()) >= 1.0 - 1e-9
        for b in BRANCHES:
            assert state_fidelity(res.branch_states[b], spec.pure()) >= 1.0 - 1e-9


def test_run_exact_returns_the_reduced_qubit():
    rho = run_exact(canonical_inputs()[4])
    assert rho.matrix.shape == (2, 2)
    assert state_fidelity(rho, canonical_inputs()[4].pure()) >= 1.0 - 1e-9


# ---------------------------------------------------------------------------
# Sampled path

def test_run_shot_is_deterministic_per_seed_and_index():
    seq = build_sequence(canonical_inputs()[5])
    noise = NoiseConfig(detuning_sigma_SD=0.002, depolarizing_per_pulse=0.02)
    a = run_shot(seq, noise, 42, 17)
    b = run_shot(seq, noise, 42, 17)
    assert a == b
    c = run_shot(seq, noise, 42, 18)
    assert c.shot_index == 18


def test_noiseless_shots_always_read_bright():
    seq = build_sequence(canonical_inputs()[2])
    for i in range(50):
        rec = run_shot(seq, NoiseConfig(), 7, i)
        assert rec.final_outcome is Outcome.BRIGHT
        assert rec.branch == branch_label(rec.pmt1, rec.pmt2)
        assert rec.leakage_max <= 1e-9


def test_sampled_estimate_matches_exact_within_binomial_error():
    noise = NoiseConfig(depolarizing_per_pulse=0.02)
    spec = canonical_inputs()[5]
    exact = teleportation_fidelity(spec, noise, Exact()).value
    est = teleportation_fidelity(spec, noise, Sampled(shots=400, master_seed=11))
    assert abs(est.value - exact) <= 5.0 * max(est.stderr, 1e-3)
    assert est.stderr > 0.0


def test_branch_frequencies_are_uniform():
    seq = build_sequence(canonical_inputs()[0])
    counts = dict.fromkeys(BRANCHES, 0)
    n = 800
    for i in range(n):
        counts[run_shot(seq, NoiseConfig(), 3, i).branch] += 1
    sigma = math.sqrt(n * 0.25 * 0.75)
    for b in BRANCHES:
        assert abs(counts[b] - n * 0.25) <= 5.0 * sigma


# ---------------------------------------------------------------------------
# Calibration and baselines

def test_calibrate_phase_finds_zero_offset_noiselessly():
    res = calibrate_phase(grid=16, tol=5e-3)
    dist = min(res.phi_star, 2.0 * PI - res.phi_star)
    assert dist <= 5e-3
    assert res.grid_fidelities.max() >= 1.0 - 1e-9
    with pytest.raises(ConfigError):
        calibrate_phase(grid=4)


def test_classical_baseline_is_two_thirds():
    assert classical_baseline() == pytest.approx(2.0 / 3.0, abs=1e-15)
    per = classical_baseline_per_state()
    assert np.allclose(per, [1.0, 1.0, 0.5, 0.5, 0.5, 0.5], atol=1e-12)


def test_exact_path_rejects_amplitude_noise():
    with pytest.raises(ConfigError):
        exact_run(canonical_inputs()[0], noise=NoiseConfig(amplitude_error_sigma=0.01))


def test_spin_echo_refocuses_detuning_noise():
    # the target ion waits 300 us in an S/H superposition before the
    # reconstruction; without the echo that phase never refocuses
    noise = NoiseConfig(detuning_sigma_SD=0.002)
    spec = canonical_inputs()[0]
    f_echo = teleportation_fidelity(spec, noise).value
    f_bare = teleportation_fidelity(spec, noise, spin_echo=False).value
    assert f_bare < 0.6
    assert f_echo > 0.75
    assert f_echo > f_bare
