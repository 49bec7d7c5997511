"""Experiment orchestration shared by the CLI subcommands.

Builds and caches Monte-Carlo tables, runs the verification suite and the
protocol optimizer, sweeps parameter grids, and assembles the per-figure
CSV bundles.  All CSV output is deterministic: fixed float formatting,
sorted iteration, no timestamps.
"""

from __future__ import annotations

import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import inference as inf
from . import protocol as pr
from . import spectral as sp
from .cache import CacheError, JsonCache, TableCache, atomic_write_text, content_key, seed_for
from .config import ExperimentConfig
from .tables import build_bin_table

ENGINE_TAG = "bin-table-v1"


def write_csv(path: Path, header: list[str], rows) -> Path:
    """Deterministic CSV writer (fixed %.12e floats, atomic replace)."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            elif isinstance(v, str):
                cells.append(v)
            else:
                cells.append(f"{float(v):.12e}")
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------- #
# spectra


def spectra_outputs(cfg: ExperimentConfig, out_dir: Path) -> dict[str, str]:
    g = cfg.geometry()
    dpi, dps = g.static_dpsi_idler(), g.static_dpsi_signal()
    artifacts = {}

    grid = sp.mode_window_grid(g, (-1, 0, 1), span=(
        g.omega_pump - 2.2 * g.fsr, g.omega_pump + 2.2 * g.fsr))
    resp = sp.circulating_response(grid, dpi, dps, g)
    det = (grid - g.omega_pump) / g.fsr
    artifacts["spectrum"] = str(write_csv(
        out_dir / "spectrum.csv",
        ["omega_detuning_over_fsr", "circulating", "signal_out", "idler_out",
         "drop"],
        zip(det, resp.circulating, resp.signal_out, resp.idler_out, resp.drop),
    ))

    # auxiliary-ring comparison across the conversion-relevant modes
    grid_a = sp.mode_window_grid(g, tuple(range(-2, 18)), span=(
        g.omega_pump - 2.2 * g.fsr, g.omega_pump + 17.2 * g.fsr))
    base = sp.circulating_response(grid_a, dpi, dps, g)
    aux = sp.circulating_response(grid_a, dpi, dps, g, nu_a=g.nu_a)
    artifacts["aux_spectrum"] = str(write_csv(
        out_dir / "aux_spectrum.csv",
        ["omega_detuning_over_fsr", "circulating_no_aux", "circulating_with_aux"],
        zip((grid_a - g.omega_pump) / g.fsr, base.circulating, aux.circulating),
    ))

    # signal-filter tuning curves: coupling rate and resonance shift
    kappa_i_ref = float(sp.coupling_rate(g.omega_idler, dpi, "idler", g))
    base_phase = float(np.real(g.propagation_constant(g.omega_signal)) * g.dl_signal)
    psis = np.linspace(0.06, 2 * np.pi - 0.06, 121)
    rows = []
    for psi in psis:
        dpsi = float((psi - base_phase) % (2 * np.pi))
        kappa = float(sp.coupling_rate(g.omega_signal, dpsi, "signal", g))
        shift = sp.resonance_shift(dpsi, g)
        rows.append((psi, kappa / kappa_i_ref, shift / kappa_i_ref))
    artifacts["tuning"] = str(write_csv(
        out_dir / "tuning.csv",
        ["psi_s_rad", "kappa_s_over_kappa_i", "delta_s_over_kappa_i"],
        rows,
    ))
    return artifacts


# --------------------------------------------------------------------- #
# table building


def table_key(cfg: ExperimentConfig, setting: float, n0: int, tau_bin: float,
              q_intrinsic: float | None = None) -> str:
    dy = cfg.dynamics
    payload = {
        "engine": ENGINE_TAG,
        "setting": round(setting, 9),
        "initial": n0,
        "tau_bin": float(tau_bin),
        "t_split": float(tau_bin - dy.decision_lag_s),
        "n_traj": cfg.run.n_trajectories,
        "seed": cfg.run.master_seed,
        "q_intrinsic": float(q_intrinsic or dy.q_intrinsic),
        "q_idler": dy.q_idler,
        "q_pump": dy.q_pump,
        "detuning": dy.detuning_over_kappa_pump,
        "pump_width": dy.pump_width_s,
        "cutoff": dy.fock_cutoff,
        "wavelength": cfg.device.wavelength_m,
    }
    return content_key(payload)


def _build_cell(args):
    (cfg, tau_bin, setting, q_intrinsic, keys) = args
    params = cfg.dynamics_params()
    if q_intrinsic is not None:
        g = cfg.geometry()
        params = params.with_(kappa_loss=g.omega_pump / (2.0 * q_intrinsic))
    scale = dyn.calibrate_pump(setting, params, tau_bin)
    t_split = tau_bin - cfg.dynamics.decision_lag_s
    out = []
    for n0 in (0, 1, 2):
        table = build_bin_table(
            setting, n0, cfg.run.n_trajectories, params, tau_bin,
            t_split=t_split, seed=seed_for(cfg.run.master_seed, keys[n0]),
            pump_scale=scale, on_cutoff_limit="waive",
        )
        out.append((keys[n0], table))
    return out


def build_all_tables(
    cfg: ExperimentConfig, cache: TableCache, jobs: int = 1,
    q_intrinsic: float | None = None, log=print,
) -> list[tuple[str, str]]:
    """Build every (tau_bin, setting, initial) table missing from the cache."""
    work = []
    done = []
    for tau_bin in cfg.tau_bins():
        for setting in cfg.protocol.pump_grid:
            keys = {n0: table_key(cfg, setting, n0, tau_bin, q_intrinsic)
                    for n0 in (0, 1, 2)}
            if all(cache.has(k) for k in keys.values()):
                done.extend((k, "cached") for k in keys.values())
                continue
            work.append((cfg, tau_bin, setting, q_intrinsic, keys))
    log(f"building {len(work)} table cells ({len(done)} already cached)")
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell in pool.map(_build_cell, work):
                for key, table in cell:
                    cache.save(key, table)
                    done.append((key, "built"))
    else:
        for args in work:
            for key, table in _build_cell(args):
                cache.save(key, table)
                done.append((key, "built"))
    return done


def load_contexts(
    cfg: ExperimentConfig, cache: TableCache,
    q_intrinsic: float | None = None, eta: float | None = None,
) -> dict[float, pr.KernelContext]:
    """Kernel contexts per bin duration from cached tables."""
    params = cfg.dynamics_params()
    if q_intrinsic is not None:
        g = cfg.geometry()
        params = params.with_(kappa_loss=g.omega_pump / (2.0 * q_intrinsic))
    eta = cfg.protocol.detection_efficiency if eta is None else eta
    contexts = {}
    for tau_bin in cfg.tau_bins():
        by_setting = {}
        for setting in cfg.protocol.pump_grid:
            tables = {}
            for n0 in (0, 1, 2):
                key = table_key(cfg, setting, n0, tau_bin, q_intrinsic)
                tables[n0] = cache.load(key)
            by_setting[setting] = tables
        contexts[tau_bin] = pr.KernelContext(
            by_setting, params, tau_bin, cfg.dynamics.decision_lag_s, eta
        )
    return contexts


def table_summary_rows(cfg: ExperimentConfig, cache: TableCache,
                       q_intrinsic: float | None = None):
    rows = []
    for tau_bin in cfg.tau_bins():
        for setting in cfg.protocol.pump_grid:
            for n0 in (0, 1, 2):
                t = cache.load(table_key(cfg, setting, n0, tau_bin, q_intrinsic))
                rows.append((
                    tau_bin, setting, n0, t.pump_scale, t.pair_fraction,
                    t.mean_signal, t.mean_final_idler, t.max_shell_population,
                    t.cutoff,
                ))
    return rows


# --------------------------------------------------------------------- #
# verification suite


def run_verification(cfg: ExperimentConfig, out_dir: Path, log=print):
    """Unraveling-equivalence checks: trajectories vs the Lindblad oracle.

    Returns (rows, all_ok); each row carries the z-scores of the pair
    probability and mean signal population plus the idler-residual check.
    """
    params = cfg.dynamics_params()
    tau_bin = cfg.tau_bins()[0]
    n_traj = cfg.run.n_trajectories
    rows = []
    all_ok = True
    for setting in (0.01, 0.05, 0.25):
        scale = dyn.calibrate_pump(setting, params, tau_bin)
        run_p = params.with_(pump_scale=scale)
        key = content_key({"verify": setting, "tau": tau_bin,
                           "seed": cfg.run.master_seed, "n": n_traj})
        table = build_bin_table(
            setting, 0, n_traj, params, tau_bin,
            t_split=tau_bin - cfg.dynamics.decision_lag_s,
            seed=seed_for(cfg.run.master_seed, key), pump_scale=scale,
        )
        rho = dyn.master_equation_evolve(
            dyn.vacuum_density(table.cutoff), 0.0, tau_bin,
            run_p.with_(cutoff=table.cutoff),
        )
        ns_o, ni_o = dyn.density_mode_populations(rho)
        pair_o = dyn.pair_probability_oracle(run_p, tau_bin)
        sig_pair = np.sqrt(max(pair_o * (1 - pair_o), 1e-12) / n_traj)
        sig_ns = 1.5 * np.sqrt(max(ns_o, 1e-12) / n_traj)
        z_pair = (table.pair_fraction - pair_o) / sig_pair
        z_ns = (table.mean_signal - ns_o) / sig_ns
        ok = abs(z_pair) < 3.0 and abs(z_ns) < 3.0
        all_ok &= ok
        rows.append((setting, table.pair_fraction, pair_o, z_pair,
                     table.mean_signal, ns_o, z_ns, table.mean_final_idler,
                     ni_o, int(ok)))
        log(f"setting {setting:.2f}: z_pair {z_pair:+.2f} z_ns {z_ns:+.2f} "
            f"residual idler {table.mean_final_idler:.2e} "
            f"{'ok' if ok else 'FAIL'}")
    write_csv(
        out_dir / "verify.csv",
        ["setting", "pair_mc", "pair_oracle", "z_pair", "mean_signal_mc",
         "mean_signal_oracle", "z_signal", "final_idler_mc",
         "final_idler_oracle", "ok"],
        rows,
    )
    return rows, all_ok


# --------------------------------------------------------------------- #
# optimize and sweep


def run_optimize(
    cfg: ExperimentConfig, cache: TableCache, out_dir: Path,
    q_intrinsic: float | None = None, eta: float | None = None,
    f_threshold: float | None = None, g2_threshold: float | None = None,
    release_caps: tuple[int, ...] | None = None, m_max: int | None = None,
) -> pr.OptimizationResult:
    contexts = load_contexts(cfg, cache, q_intrinsic, eta)
    result = pr.optimize(
        contexts,
        m_max=m_max or cfg.protocol.max_bins,
        eta=cfg.protocol.detection_efficiency if eta is None else eta,
        f_threshold=cfg.protocol.fidelity_threshold
        if f_threshold is None else f_threshold,
        g2_threshold=cfg.protocol.g2_threshold
        if g2_threshold is None else g2_threshold,
        release_cap_options=release_caps or (2, cfg.protocol.release_cap),
    )
    rows = []
    for rec in result.records:
        c = rec.config
        rows.append((
            rec.n_bins, c.tau_bin, rec.success,
            c.release_cap, c.evac_fidelity_floor,
            -1 if c.forced_evac_bin is None else c.forced_evac_bin,
            c.defer_bins,
            ";".join(f"{p:.6g}" for p in c.pump_sequence),
            ";".join(f"{p:.6g}" for p in c.release_retention),
        ))
    write_csv(
        out_dir / "optimize.csv",
        ["n_bins", "tau_bin_s", "success", "release_cap", "evac_floor",
         "forced_evac_bin", "defer_bins", "pump_sequence", "release_retention"],
        rows,
    )
    policy = {
        "records": [
            {
                "n_bins": rec.n_bins,
                "success": rec.success,
                "tau_bin": rec.config.tau_bin,
                "pump_sequence": list(rec.config.pump_sequence),
                "release_retention": list(rec.config.release_retention),
                "release_cap": rec.config.release_cap,
                "evac_fidelity_floor": rec.config.evac_fidelity_floor,
                "forced_evac_bin": rec.config.forced_evac_bin,
                "defer_bins": rec.config.defer_bins,
            }
            for rec in result.records
        ]
    }
    import json

    atomic_write_text(out_dir / "policy.json",
                      json.dumps(policy, sort_keys=True, indent=1))
    return result


def sweep_point_key(cfg: ExperimentConfig, eta: float, f_th: float,
                    g2_th: float, q_l: float, m_max: int) -> str:
    return content_key({
        "sweep": ENGINE_TAG,
        "eta": round(eta, 9), "f_th": round(f_th, 9),
        "g2_th": round(g2_th, 9), "q_l": float(q_l), "m_max": m_max,
        "seed": cfg.run.master_seed, "n_traj": cfg.run.n_trajectories,
        "grid": [round(p, 9) for p in cfg.protocol.pump_grid],
        "taus": [float(t) for t in cfg.protocol.tau_bin_over_idler_lifetime],
    })


def run_sweep_point(
    cfg: ExperimentConfig, table_cache: TableCache, result_cache: JsonCache,
    eta: float, f_th: float, g2_th: float, q_l: float, m_max: int,
    jobs: int = 1, log=print,
) -> dict:
    """One resumable sweep point: optimized success at these settings."""
    key = sweep_point_key(cfg, eta, f_th, g2_th, q_l, m_max)
    if result_cache.has(key):
        return result_cache.load(key)
    build_all_tables(cfg, table_cache, jobs=jobs, q_intrinsic=q_l, log=log)
    contexts = load_contexts(cfg, table_cache, q_intrinsic=q_l, eta=eta)
    by_cap = {}
    for cap in (2, 3):
        result = pr.optimize(
            contexts, m_max=m_max, eta=eta, f_threshold=f_th,
            g2_threshold=g2_th, release_cap_options=(cap,),
        )
        by_cap[cap] = result.records[-1].success
    record = {
        "eta": eta, "f_threshold": f_th, "g2_threshold": g2_th,
        "q_intrinsic": q_l, "m_max": m_max,
        "success": max(by_cap.values()),
        "success_by_release_cap": {str(k): v for k, v in by_cap.items()},
    }
    result_cache.save(key, record)
    return record


# --------------------------------------------------------------------- #
# figure bundles


def assemble_figure(
    figure: int, cfg: ExperimentConfig, table_cache: TableCache,
    result_cache: JsonCache, out_dir: Path, jobs: int = 1, log=print,
) -> dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    if figure == 3:
        return spectra_outputs(cfg, out_dir)
    if figure == 4:
        arts = spectra_outputs(cfg, out_dir)
        return {"aux_spectrum": arts["aux_spectrum"]}
    if figure == 6:
        return _figure6(cfg, table_cache, out_dir, jobs, log)
    if figure == 7:
        return _figure7(cfg, table_cache, out_dir, jobs, log)
    if figure == 8:
        return _figure8(cfg, table_cache, result_cache, out_dir, jobs, log)
    if figure == 9:
        return _figure9(cfg, table_cache, result_cache, out_dir, jobs, log)
    raise ValueError(f"no figure bundle defined for figure {figure}")


def _figure6(cfg, table_cache, out_dir, jobs, log):
    """Single-herald fidelity and g2 over (pair setting, bin duration)."""
    build_all_tables(cfg, table_cache, jobs=jobs, log=log)
    eta = cfg.protocol.detection_efficiency
    rows = []
    for tau_bin in cfg.tau_bins():
        for setting in cfg.protocol.pump_grid:
            table = table_cache.load(table_key(cfg, setting, 0, tau_bin))
            kernel = inf.pump_kernel({0: table}, eta)
            star = kernel.probs[0][1].sum(axis=0)
            verdict = inf.acceptance_verdict(star, 0.0, np.inf)
            rows.append((tau_bin, setting, verdict.fidelity, verdict.g2))
    path = write_csv(
        out_dir / "pump_limits.csv",
        ["tau_bin_s", "pair_setting", "fidelity_one_herald", "g2_one_herald"],
        rows,
    )
    return {"pump_limits": str(path)}


def _figure7(cfg, table_cache, out_dir, jobs, log):
    build_all_tables(cfg, table_cache, jobs=jobs, log=log)
    result = run_optimize(cfg, table_cache, out_dir)
    seq_rows = []
    suc_rows = []
    for rec in result.records:
        for b, p in enumerate(rec.config.pump_sequence, start=1):
            seq_rows.append((rec.n_bins, b, p))
        suc_rows.append((
            rec.n_bins, rec.config.tau_bin,
            rec.n_bins * rec.config.tau_bin, rec.success,
        ))
    p1 = write_csv(out_dir / "pump_sequences.csv",
                   ["n_bins", "bin", "pair_setting"], seq_rows)
    p2 = write_csv(out_dir / "success.csv",
                   ["n_bins", "tau_bin_s", "t_emission_s", "success"], suc_rows)
    return {"pump_sequences": str(p1), "success": str(p2)}


def _figure8(cfg, table_cache, result_cache, out_dir, jobs, log):
    pro = cfg.protocol
    m_max = min(pro.max_bins, 6)
    rows_a, rows_b = [], []
    for f_th in pro.sweep_f_threshold:
        for eta in pro.sweep_eta:
            rec = run_sweep_point(cfg, table_cache, result_cache, eta, f_th,
                                  pro.g2_threshold, cfg.dynamics.q_intrinsic,
                                  m_max, jobs, log)
            rows_a.append((
                f_th, eta, rec["success"], rec["success"] - f_th,
                rec["success_by_release_cap"]["2"],
            ))
    for g2_th in pro.sweep_g2_threshold:
        for eta in pro.sweep_eta:
            rec = run_sweep_point(cfg, table_cache, result_cache, eta,
                                  pro.fidelity_threshold, g2_th,
                                  cfg.dynamics.q_intrinsic, m_max, jobs, log)
            rows_b.append((g2_th, eta, rec["success"]))
    p1 = write_csv(out_dir / "tradeoff.csv",
                   ["f_threshold", "eta", "success", "margin",
                    "success_release_disabled"], rows_a)
    p2 = write_csv(out_dir / "g2_tradeoff.csv",
                   ["g2_threshold", "eta", "success"], rows_b)
    return {"tradeoff": str(p1), "g2_tradeoff": str(p2)}


def _figure9(cfg, table_cache, result_cache, out_dir, jobs, log):
    pro = cfg.protocol
    m_max = min(pro.max_bins, 6)
    rows = []
    for q_l in pro.sweep_q_intrinsic:
        for eta in pro.sweep_eta:
            rec = run_sweep_point(cfg, table_cache, result_cache, eta, 0.99,
                                  pro.g2_threshold, q_l, m_max, jobs, log)
            success = rec["success"]
            try:
                modes = pr.modes_for_target(success, 0.99)
            except ValueError:
                modes = -1
            rows.append((q_l, eta, success, modes))
    path = write_csv(out_dir / "loss_scaling.csv",
                     ["q_intrinsic", "eta", "success", "modes_needed"], rows)
    return {"loss_scaling": str(path)}
