"""Dynamics engine tests in cheap natural units (rates of order one)."""

import numpy as np
import pytest
from scipy.integrate import quad

from ringmux import dynamics as dyn
from ringmux import tables as tb


def natural_params(**kw) -> dyn.DynamicsParams:
    base = dict(
        kappa_i=30.0,
        kappa_p=30.0,
        kappa_loss=0.02,
        pump_width=0.02,
        release_response=25.0,
        cutoff=6,
    )
    base.update(kw)
    return dyn.DynamicsParams(**base)


# --------------------------------------------------------------------- #
# pump drive


def test_pump_zero_drive():
    p = natural_params(pump_scale=0.0)
    t = np.linspace(0, 1, 50)
    assert np.all(dyn.pump_energy(t, p) == 0.0)


def test_pump_closed_form_vs_quadrature():
    p = natural_params(pump_scale=1.0)
    t_p = dyn.pump_center_for_bin(0.0, p)
    width = np.sqrt(2.0) * p.pump_width
    for t in (0.05, 0.1, 0.3, 0.8):
        oracle = quad(
            lambda u: np.exp(-p.kappa_p * (t - u)) * np.exp(-((u - t_p) / width) ** 2),
            t_p - 14 * width,
            t,
            limit=400,
        )[0]
        closed = dyn._gauss_exp_convolution(t, t_p, width, p.kappa_p)
        assert closed == pytest.approx(oracle, rel=1e-6)


def test_pump_fast_cavity_limit_is_gaussian():
    # kappa_p tau_p >> 1: X(t) follows the instantaneous pump power
    p = natural_params(kappa_p=8000.0, pump_scale=1.0)
    t_p = dyn.pump_center_for_bin(0.0, p)
    t = np.linspace(t_p - 2 * p.pump_width, t_p + 2 * p.pump_width, 41)
    x = dyn.pump_energy(t, p)
    lag = 1.0 / p.kappa_p          # first-order response delay
    envelope = np.exp(-(((t - lag) - t_p) / p.pump_width) ** 2)
    assert np.max(np.abs(x / x.max() - envelope)) < 0.02


def test_pump_auto_placement_thousandth():
    for kappa_p in (5.0, 30.0, 400.0):
        p = natural_params(kappa_p=kappa_p, pump_scale=2.0)
        x0 = dyn.pump_energy(np.array([0.0]), p, t_start=0.0)[0]
        t = np.linspace(0, 3, 20001)
        peak = dyn.pump_energy(t, p, t_start=0.0).max()
        assert x0 <= 1.001e-3 * peak
        assert x0 >= 0.9e-3 * peak


# --------------------------------------------------------------------- #
# release profile and rate equations


def test_release_probabilities_closed_filter():
    p = natural_params(release_width=0.0)
    t = np.linspace(0, 1, 11)
    pc, ps, pl = dyn.release_probabilities(t, p)
    assert np.allclose(pc, np.exp(-2 * p.kappa_loss * t), rtol=1e-9)
    assert np.all(ps == 0.0)


def test_release_probabilities_no_loss_partition():
    p = natural_params(kappa_loss=0.0, release_width=0.05)
    t = np.linspace(0, 1, 21)
    pc, ps, pl = dyn.release_probabilities(t, p)
    assert np.allclose(pc + ps, 1.0, atol=1e-9)
    assert np.allclose(pl, 0.0, atol=1e-9)


def test_release_partition_sums_to_one():
    p = natural_params(release_width=0.08)
    t = np.linspace(0, 1, 31)
    pc, ps, pl = dyn.release_probabilities(t, p)
    assert np.allclose(pc + ps + pl, 1.0, atol=1e-9)


def test_release_probabilities_cross_integrator():
    """Independent fine-step RK4 on the rate equations agrees to 1e-8."""
    p = natural_params(release_width=0.06)
    t_end = 1.0
    pc, ps, _ = dyn.release_probabilities(np.array([t_end]), p)

    n = 20000
    h = t_end / n
    nodes = np.linspace(0, t_end, n + 1)
    ks_nodes = dyn.release_rate(nodes, p)
    ks_half = dyn.release_rate(nodes[:-1] + h / 2, p)
    y = np.array([1.0, 0.0])
    for k in range(n):
        def f(yv, ks):
            return np.array(
                [-2 * (ks + p.kappa_loss) * yv[0], 2 * ks * yv[0]]
            )
        k1 = f(y, ks_nodes[k])
        k2 = f(y + 0.5 * h * k1, ks_half[k])
        k3 = f(y + 0.5 * h * k2, ks_half[k])
        k4 = f(y + h * k3, ks_nodes[k + 1])
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    assert pc[0] == pytest.approx(y[0], abs=1e-8)
    assert ps[0] == pytest.approx(y[1], abs=1e-8)


def test_release_rate_respects_cap():
    p = natural_params(release_width=0.05)
    t = np.linspace(0, 1, 5001)
    ks = dyn.release_rate(t, p)
    assert ks.max() <= p.kappa_max * (1 + 1e-9)
    assert ks.max() == pytest.approx(p.kappa_max, rel=1e-3)
    assert ks[0] == 0.0


def test_release_setting_for_pc_round_trip():
    p = natural_params()
    tau_bin = 1.0
    for target in (0.9, 0.7, 0.3, 0.05, 0.003):
        p_run = dyn.release_setting_for_pc(target, tau_bin, p)
        assert p_run.kappa_max <= p.kappa_i * (1 + 1e-12)
        pc = dyn.release_probabilities(np.array([tau_bin]), p_run)[0][0]
        assert pc == pytest.approx(target, abs=2e-5)
    with pytest.raises(ValueError):
        dyn.release_setting_for_pc(1.5, tau_bin, p)


def test_kappa_max_cannot_exceed_kappa_i():
    with pytest.raises(ValueError):
        dyn.DynamicsParams(kappa_i=1.0, kappa_p=1.0, kappa_loss=0.0, kappa_max=2.0)


# --------------------------------------------------------------------- #
# trajectories


def test_vacuum_is_dark():
    p = natural_params(pump_scale=0.0)
    rec = dyn.run_trajectory(
        dyn.TwoModeState.fock(6, 0, 0), 0.0, 1.0, 0.9, p, seed=42
    )
    assert rec.jumps == []
    amp = rec.final_state.amplitudes
    assert abs(amp[0, 0]) == pytest.approx(1.0, abs=1e-9)


def test_single_photon_decay_oracle():
    """Signal-loss jump fraction follows 1 - exp(-2 kappa_L t) to 3 sigma."""
    kappa_loss = 1.0
    p = dyn.DynamicsParams(
        kappa_i=1.0, kappa_p=1.0, kappa_loss=kappa_loss, cutoff=4
    )
    t_end, t_probe = 0.5, 0.3
    n_traj = 4000
    hits_by_probe, hits_total = 0, 0
    state = dyn.TwoModeState.fock(4, 1, 0)
    for k in range(n_traj):
        rec = dyn.run_trajectory(state, 0.0, t_end, t_probe, p, seed=(977, k))
        for j in rec.jumps:
            assert j.channel == "signal_loss"
        if rec.jumps:
            hits_total += 1
            if rec.jumps[0].time <= t_probe:
                hits_by_probe += 1
    for hits, t in ((hits_by_probe, t_probe), (hits_total, t_end)):
        expect = 1.0 - np.exp(-2 * kappa_loss * t)
        sigma = np.sqrt(expect * (1 - expect) / n_traj)
        assert abs(hits / n_traj - expect) < 3 * sigma


def test_trajectory_determinism():
    p = natural_params(pump_scale=20.0)
    s = dyn.TwoModeState.fock(6, 0, 0)
    rec1 = dyn.run_trajectory(s, 0.0, 1.0, 0.9, p, seed=7)
    rec2 = dyn.run_trajectory(s, 0.0, 1.0, 0.9, p, seed=7)
    assert [(j.time, j.channel) for j in rec1.jumps] == [
        (j.time, j.channel) for j in rec2.jumps
    ]
    assert np.array_equal(rec1.final_state.amplitudes, rec2.final_state.amplitudes)


def test_trajectory_invalid_split():
    p = natural_params()
    with pytest.raises(ValueError):
        dyn.run_trajectory(dyn.TwoModeState.fock(6, 0, 0), 0.0, 1.0, 1.5, p, 0)


def test_truncation_error_on_hard_drive():
    p = natural_params(pump_scale=600.0, cutoff=4, kappa_loss=0.0)
    with pytest.raises(dyn.TruncationError):
        dyn.run_trajectory(dyn.TwoModeState.fock(4, 0, 0), 0.0, 0.5, 0.4, p, 3)


# --------------------------------------------------------------------- #
# master equation


def test_master_equation_static_closed_system():
    p = dyn.DynamicsParams(kappa_i=0.0, kappa_p=1.0, kappa_loss=0.0, cutoff=3)
    rho0 = dyn.fock_density(3, 1, 1)
    rho = dyn.master_equation_evolve(rho0, 0.0, 1.0, p)
    assert np.allclose(rho, rho0, atol=1e-10)


def test_master_equation_trace_preserved():
    p = natural_params(pump_scale=25.0, delta_i=-4.0, delta_s=4.0)
    rho = dyn.master_equation_evolve(dyn.vacuum_density(6), 0.0, 1.0, p)
    assert abs(np.trace(rho).real - 1.0) < 1e-8
    assert abs(np.trace(rho).imag) < 1e-12


def test_pair_probability_routes_agree():
    p = natural_params(pump_scale=18.0, delta_i=-6.0, delta_s=6.0)
    a = dyn.pair_probability_nojump(p, 1.0)
    b = dyn.pair_probability_oracle(p, 1.0)
    assert a == pytest.approx(b, abs=1e-8)


def test_unraveling_equivalence_cheap():
    """Trajectory table vs Lindblad oracle: populations and pair probability."""
    p = natural_params()
    tau = 1.0
    x0 = dyn.calibrate_pump(0.08, p, tau)
    pr = p.with_(pump_scale=x0)
    n_traj = 4000
    table = tb.build_bin_table(0.08, 0, n_traj, p, tau, seed=(5150, 0),
                               pump_scale=x0)
    rho = dyn.master_equation_evolve(dyn.vacuum_density(p.cutoff), 0.0, tau, pr)
    ns_o, ni_o = dyn.density_mode_populations(rho)
    p_pair_o = dyn.pair_probability_oracle(pr, tau)
    sig_ns = np.sqrt(max(ns_o, 1e-12) / n_traj) * 1.5
    assert abs(table.mean_signal - ns_o) < 3 * sig_ns
    sig_pair = np.sqrt(p_pair_o * (1 - p_pair_o) / n_traj)
    assert abs(table.pair_fraction - p_pair_o) < 3 * sig_pair
    # the idler mode must be empty at the bin end for kappa_i tau >> 1
    assert table.mean_final_idler < 5e-3
    assert ni_o < 5e-3


# --------------------------------------------------------------------- #
# calibration


def test_calibration_monotone_and_small_limit():
    p = natural_params()
    tau = 1.0
    grid = [0.01, 0.05, 0.2, 0.5]
    scales = [dyn.calibrate_pump(q, p, tau) for q in grid]
    assert all(a < b for a, b in zip(scales, scales[1:]))
    assert scales[0] < 0.2 * scales[-1]


def test_calibration_hits_target():
    p = natural_params()
    tau = 1.0
    for q in (0.05, 0.4):
        x0 = dyn.calibrate_pump(q, p, tau)
        assert dyn.pair_probability_nojump(p.with_(pump_scale=x0), tau) == (
            pytest.approx(q, abs=1e-3)
        )


def test_calibration_range_errors():
    p = natural_params()
    with pytest.raises(ValueError):
        dyn.calibrate_pump(0.9, p, 1.0)
    with pytest.raises(ValueError):
        dyn.calibrate_pump(0.0, p, 1.0)


# --------------------------------------------------------------------- #
# tables


def test_table_counts_sum_and_determinism():
    p = natural_params()
    t1 = tb.build_bin_table(0.1, 0, 2000, p, 1.0, seed=(11, 5))
    t2 = tb.build_bin_table(0.1, 0, 2000, p, 1.0, seed=(11, 5))
    assert t1.counts.sum() == 2000
    assert np.array_equal(t1.counts, t2.counts)
    assert t1.pump_scale == t2.pump_scale


def test_table_zero_pump_is_deterministic_identity():
    p = natural_params()
    t = tb.build_bin_table(0.0, 0, 500, p, 1.0, seed=0, pump_scale=0.0)
    assert t.counts[0, 0, 0] == 500


def test_table_initial_photon_decay():
    """With the pump off, a stored photon survives with exp(-2 kappa_L tau)."""
    p = natural_params(kappa_loss=0.4)
    tau = 1.0
    n_traj = 8000
    t = tb.build_bin_table(0.0, 1, n_traj, p, tau, seed=(3, 3), pump_scale=0.0)
    survive = t.marginal_final()[1]
    expect = np.exp(-2 * p.kappa_loss * tau)
    sigma = np.sqrt(expect * (1 - expect) / n_traj)
    assert abs(survive - expect) < 3 * sigma


def test_table_initial_choices_guarded():
    p = natural_params()
    with pytest.raises(ValueError):
        tb.build_bin_table(0.1, 3, 100, p, 1.0, seed=0)


def test_table_sigma_warning():
    p = natural_params()
    with pytest.warns(UserWarning):
        tb.build_bin_table(0.05, 0, 100, p, 1.0, seed=0, pump_scale=1.0,
                           target_sigma=1e-4)


def test_table_split_counts_consistency():
    p = natural_params()
    t = tb.build_bin_table(0.3, 0, 3000, p, 1.0, t_split=0.6, seed=(9, 1))
    pre = t.counts.sum(axis=(0, 2)) @ np.arange(t.counts.shape[1])
    post = t.counts.sum(axis=(0, 1)) @ np.arange(t.counts.shape[2])
    assert (pre + post) / t.n_traj == pytest.approx(t.mean_idler_emitted, rel=1e-12)
