"""Experiment configuration: one YAML file with four sections.

Sections: ``device`` (ring geometry), ``dynamics`` (quality factors and
pulse shapes), ``protocol`` (thresholds and search grids), ``run``
(trajectories, seed, paths).  Quality factors convert to rates as
kappa = omega / (2 Q).  Validation collects every problem before
reporting, so a bad file is diagnosed in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import DynamicsParams
from .geometry import DeviceGeometry, make_geometry

# pair-creation settings of the tabulated pump grid (fractions, not %)
DEFAULT_PUMP_GRID = tuple(
    np.concatenate(
        [
            [0.001, 0.002, 0.005, 0.01, 0.02, 0.035],
            np.arange(0.05, 0.50 + 1e-9, 0.025),
            [0.55, 0.60, 0.65, 0.70],
        ]
    ).round(6)
)


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__(
            "invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems)
        )


@dataclass(frozen=True)
class DeviceSection:
    ring_length_m: float = 100e-6
    nu_sq: float = 0.95
    nu_aux_sq: float = 0.9
    n_eff_real: float = 2.5
    n_eff_imag: float = 1e-7
    group_index: float = 4.0
    wavelength_m: float = 1550e-9
    align_aux: bool = True


@dataclass(frozen=True)
class DynamicsSection:
    q_intrinsic: float = 200e6
    q_idler: float = 6667.0
    q_pump: float = 6667.0
    detuning_over_kappa_pump: float = 20.0
    pump_width_s: float = 1e-12
    phase_response_time_s: float = 3e-12
    decision_lag_s: float = 12e-12
    fock_cutoff: int = 6


@dataclass(frozen=True)
class ProtocolSection:
    detection_efficiency: float = 0.996
    fidelity_threshold: float = 0.985
    g2_threshold: float = 1.0
    release_cap: int = 3
    max_bins: int = 10
    pump_grid: tuple[float, ...] = DEFAULT_PUMP_GRID
    tau_bin_over_idler_lifetime: tuple[float, ...] = (10.0, 18.0, 32.0)
    # reduced desk-scale grids for the sweep subcommand
    sweep_eta: tuple[float, ...] = (0.95, 0.97, 0.99, 1.0)
    sweep_f_threshold: tuple[float, ...] = (0.90, 0.95, 0.975, 0.99)
    sweep_g2_threshold: tuple[float, ...] = (0.1, 0.3, 1.0)
    sweep_q_intrinsic: tuple[float, ...] = (40e6, 80e6, 200e6)


@dataclass(frozen=True)
class RunSection:
    n_trajectories: int = 10_000
    master_seed: int = 20260809
    output_dir: str = "out"
    cache_dir: str = ".ringmux-cache"
    jobs: int = 1


_SECTIONS = {
    "device": DeviceSection,
    "dynamics": DynamicsSection,
    "protocol": ProtocolSection,
    "run": RunSection,
}

_POSITIVE = {
    "device": ("ring_length_m", "n_eff_real", "group_index", "wavelength_m"),
    "dynamics": (
        "q_intrinsic", "q_idler", "q_pump", "pump_width_s",
        "phase_response_time_s",
    ),
    "protocol": ("fidelity_threshold",),
    "run": ("n_trajectories",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    device: DeviceSection
    dynamics: DynamicsSection
    protocol: ProtocolSection
    run: RunSection

    # ------------------------------------------------------------------ #

    def geometry(self) -> DeviceGeometry:
        d = self.device
        return make_geometry(
            ring_length=d.ring_length_m,
            nu_sq=d.nu_sq,
            nu_aux_sq=d.nu_aux_sq,
            n_eff_re=d.n_eff_real,
            n_eff_im=d.n_eff_imag,
            n_g=d.group_index,
            wavelength=d.wavelength_m,
            align_aux=d.align_aux,
        )

    def dynamics_params(self) -> DynamicsParams:
        g = self.geometry()
        dy = self.dynamics
        kappa_i = g.omega_pump / (2.0 * dy.q_idler)
        kappa_p = g.omega_pump / (2.0 * dy.q_pump)
        kappa_loss = g.omega_pump / (2.0 * dy.q_intrinsic)
        delta = dy.detuning_over_kappa_pump * kappa_p
        return DynamicsParams(
            kappa_i=kappa_i,
            kappa_p=kappa_p,
            kappa_loss=kappa_loss,
            delta_i=-delta,
            delta_s=+delta,
            pump_width=dy.pump_width_s,
            release_response=1.0 / dy.phase_response_time_s,
            cutoff=dy.fock_cutoff,
        )

    def tau_bins(self) -> tuple[float, ...]:
        params = self.dynamics_params()
        lifetime = 1.0 / (2.0 * params.kappa_i)
        return tuple(
            float(x) * lifetime for x in self.protocol.tau_bin_over_idler_lifetime
        )

    def as_dict(self) -> dict:
        out = {}
        for name, section in (
            ("device", self.device), ("dynamics", self.dynamics),
            ("protocol", self.protocol), ("run", self.run),
        ):
            out[name] = {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(section).items()
            }
        return out


def _coerce(cls, name: str, raw: dict, problems: list[str]):
    values = {}
    known = {f for f in cls.__dataclass_fields__}
    for key, val in raw.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown field")
            continue
        field_type = cls.__dataclass_fields__[key].type
        try:
            if "tuple" in str(field_type):
                values[key] = tuple(float(x) for x in val)
            elif "int" in str(field_type):
                values[key] = int(val)
            elif "bool" in str(field_type):
                values[key] = bool(val)
            elif "str" in str(field_type):
                values[key] = str(val)
            else:
                values[key] = float(val)
        except (TypeError, ValueError):
            problems.append(f"{name}.{key}: cannot parse {val!r}")
    return values


def validate(raw: dict) -> ExperimentConfig:
    """Build a validated configuration; report every problem found."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping with the sections "
                           "device, dynamics, protocol, run"])
    sections = {}
    for name, cls in _SECTIONS.items():
        if name not in raw:
            problems.append(f"{name}: missing section")
            sections[name] = cls()
            continue
        if not isinstance(raw[name], dict):
            problems.append(f"{name}: must be a mapping")
            sections[name] = cls()
            continue
        values = _coerce(cls, name, raw[name], problems)
        try:
            sections[name] = cls(**values)
        except TypeError as exc:
            problems.append(f"{name}: {exc}")
            sections[name] = cls()
    for name, keys in _POSITIVE.items():
        for key in keys:
            if getattr(sections[name], key, 1) <= 0:
                problems.append(f"{name}.{key}: must be positive")
    dev = sections["device"]
    if not 0.0 < dev.nu_sq < 1.0:
        problems.append("device.nu_sq: must lie in (0, 1)")
    if not 0.0 < dev.nu_aux_sq <= 1.0:
        problems.append("device.nu_aux_sq: must lie in (0, 1]")
    if dev.n_eff_imag < 0:
        problems.append("device.n_eff_imag: must be >= 0")
    pro = sections["protocol"]
    if not 0.0 < pro.fidelity_threshold <= 1.0:
        problems.append("protocol.fidelity_threshold: must lie in (0, 1]")
    if not 0.0 <= pro.detection_efficiency <= 1.0:
        problems.append("protocol.detection_efficiency: must lie in [0, 1]")
    if pro.release_cap < 2:
        problems.append("protocol.release_cap: must be >= 2")
    if pro.max_bins < 1:
        problems.append("protocol.max_bins: must be >= 1")
    if any(not 0.0 < p <= 0.7 for p in pro.pump_grid):
        problems.append("protocol.pump_grid: settings must lie in (0, 0.7]")
    dyn = sections["dynamics"]
    if dyn.fock_cutoff < 4:
        problems.append("dynamics.fock_cutoff: must be >= 4")
    if dyn.decision_lag_s < 0:
        problems.append("dynamics.decision_lag_s: must be >= 0")
    if sections["run"].jobs < 1:
        problems.append("run.jobs: must be >= 1")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**sections)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return validate(raw)
