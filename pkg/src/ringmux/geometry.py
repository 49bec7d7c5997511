"""Ring/MZI device geometry and the spectral mode bookkeeping.

The storage ring is coupled to an idler filter and a signal filter (both
MZI couplers) and optionally to a small auxiliary ring used to break the
up/down conversion symmetry.  Everything spectral derives from the handful
of lengths, couplings and indices collected in :class:`DeviceGeometry`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.constants import c as C_VACUUM

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ModeTriplet:
    """Frequencies attached to one multiplexing index p.

    ``signal``/``idler`` form the usable heralding pair, ``suppressed`` is
    the mode eliminated by the auxiliary ring and ``convertible`` is the
    signal mode whose down-conversion image is the p = 0 target.
    """

    p: int
    signal: float
    idler: float
    suppressed: float
    convertible: float


def mode_offsets(p: int) -> dict[str, int]:
    """Integer FSR offsets from the pump mode for multiplex index ``p``.

    Usable pairs sit at +-(1 + 4p), the auxiliary ring suppresses
    (9 + 16p) and frequency conversion uses the signal modes (5 + 8p).
    """
    if p < 0:
        raise ValueError(f"multiplex index must be >= 0, got {p}")
    return {
        "signal": 1 + 4 * p,
        "idler": -(1 + 4 * p),
        "suppressed": 9 + 16 * p,
        "convertible": 5 + 8 * p,
    }


@dataclass(frozen=True)
class DeviceGeometry:
    """Physical parameters of the storage ring and its filters.

    Lengths are in meters, frequencies in rad/s.  ``nu_i``/``nu_s`` are the
    amplitude through-couplings of the idler/signal MZI arms and ``nu_a``
    the auxiliary ring coupler.  The complex effective index only enters
    through ``n_eff_re + 1j * n_eff_im`` at the reference frequency; the
    group index fixes the dispersion slope.
    """

    ring_length: float                # L_c
    dl_idler: float                   # MZI path imbalance of the idler filter
    dl_signal: float                  # MZI path imbalance of the signal filter
    dl_drop: float                    # path imbalance of the idler drop filter
    nu_i: float
    nu_s: float
    nu_a: float
    n_eff_re: float
    n_eff_im: float
    n_g: float
    omega_ref: float                  # omega_0, snapped onto a ring resonance
    omega_pump: float                 # pump mode frequency
    aux_ring_length: float = field(default=0.0)   # L_r, 0 means L_c / 16

    def __post_init__(self):
        if self.ring_length <= 0:
            raise ValueError("ring_length must be positive")
        for name in ("nu_i", "nu_s", "nu_a"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.n_eff_im < 0:
            raise ValueError("n_eff_im must be >= 0")
        if self.aux_ring_length == 0.0:
            object.__setattr__(self, "aux_ring_length", self.ring_length / 16.0)
        ratios = (
            self.dl_idler / self.ring_length,
            self.dl_drop / self.ring_length,
            self.dl_signal / self.ring_length,
        )
        if not np.allclose(ratios, (0.25, 0.5, 1.0), rtol=1e-12, atol=0.0):
            warnings.warn(
                "non-standard MZI path imbalances (expected L_c/4, L_c/2, L_c); "
                "the static filter conditions will not line up on the mode comb",
                stacklevel=2,
            )

    # ------------------------------------------------------------------ #
    # derived quantities

    @property
    def fsr(self) -> float:
        """Free spectral range Omega_c = 2 pi c / (n_g L_c) in rad/s."""
        return TWO_PI * C_VACUUM / (self.n_g * self.ring_length)

    @property
    def round_trip_time(self) -> float:
        return self.n_g * self.ring_length / C_VACUUM

    def propagation_constant(self, omega) -> np.ndarray | complex:
        """Complex wavenumber k(omega), linearized about omega_ref."""
        scalar = np.ndim(omega) == 0
        omega = np.asarray(omega, dtype=float)
        n_eff = self.n_eff_re + 1j * self.n_eff_im
        k = (n_eff / C_VACUUM) * self.omega_ref + (self.n_g / C_VACUUM) * (
            omega - self.omega_ref
        )
        return complex(k) if scalar else k

    def mode_frequency(self, j: int) -> float:
        """Frequency of the ring mode j FSRs above the pump mode."""
        return self.omega_pump + j * self.fsr

    def mode_triplet(self, p: int) -> ModeTriplet:
        off = mode_offsets(p)
        return ModeTriplet(
            p=p,
            signal=self.mode_frequency(off["signal"]),
            idler=self.mode_frequency(off["idler"]),
            suppressed=self.mode_frequency(off["suppressed"]),
            convertible=self.mode_frequency(off["convertible"]),
        )

    @property
    def omega_signal(self) -> float:
        return self.mode_frequency(1)

    @property
    def omega_idler(self) -> float:
        return self.mode_frequency(-1)

    def resonance_index(self, omega: float) -> int:
        """Longitudinal mode number of the isolated ring closest to omega."""
        phi = np.real(self.propagation_constant(omega)) * self.ring_length
        return int(round(phi / TWO_PI))

    # ------------------------------------------------------------------ #
    # static phase offsets realizing the design filter conditions

    def _offset_for(self, dl: float, omega: float, target: float) -> float:
        accumulated = np.real(self.propagation_constant(omega)) * dl
        return float((target - accumulated) % TWO_PI)

    def static_dpsi_idler(self) -> float:
        """Tunable idler-arm phase putting psi_i(omega_i) = 0 (mod 2 pi)."""
        return self._offset_for(self.dl_idler, self.omega_idler, TWO_PI)

    def static_dpsi_signal(self) -> float:
        """Tunable signal-arm phase putting psi_s(omega_s) = pi (closed)."""
        return self._offset_for(self.dl_signal, self.omega_signal, np.pi)

    def static_dtheta_drop(self) -> float:
        """Drop-filter phase blocking the pump at the idler detector.

        With dl_drop = L_c/2 the drop phase steps by pi per FSR, so
        theta(omega_p) = pi simultaneously opens the detector path at the
        idler and signal modes and routes the pump into the drop port.
        """
        return self._offset_for(self.dl_drop, self.omega_pump, np.pi)


def make_geometry(
    ring_length: float = 100e-6,
    nu_sq: float = 0.95,
    nu_aux_sq: float = 0.9,
    n_eff_re: float = 2.5,
    n_eff_im: float = 1e-7,
    n_g: float = 4.0,
    wavelength: float = 1550e-9,
    align_aux: bool = True,
) -> DeviceGeometry:
    """Build a geometry with the pump snapped onto a ring resonance.

    The longitudinal mode number m is chosen near the requested wavelength;
    with ``align_aux`` it is additionally moved to m = 7 (mod 16) so the
    auxiliary ring (L_r = L_c/16) resonates exactly at the suppressed
    frequencies omega_p + (9 + 16p) Omega_c.
    """
    omega_target = TWO_PI * C_VACUUM / wavelength
    m = int(round(n_eff_re * omega_target * ring_length / (TWO_PI * C_VACUUM)))
    if align_aux:
        residue = (7 - m) % 16
        m += residue if residue <= 8 else residue - 16
    omega0 = TWO_PI * m * C_VACUUM / (n_eff_re * ring_length)
    nu = float(np.sqrt(nu_sq))
    return DeviceGeometry(
        ring_length=ring_length,
        dl_idler=ring_length / 4.0,
        dl_signal=ring_length,
        dl_drop=ring_length / 2.0,
        nu_i=nu,
        nu_s=nu,
        nu_a=float(np.sqrt(nu_aux_sq)),
        n_eff_re=n_eff_re,
        n_eff_im=n_eff_im,
        n_g=n_g,
        omega_ref=omega0,
        omega_pump=omega0,
    )
