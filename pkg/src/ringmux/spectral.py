"""Frequency-domain transfer-matrix engine for the MZI-coupled storage ring.

All fields are steady-state amplitudes relative to the internal drive
``s_f`` injected between the signal and idler filters.  The ring round
trip is split by convention into the two in-ring MZI arms (L_c/8 each)
and two connecting arcs (3 L_c/8 each); only the total round-trip phase
k(omega) L_c affects any intra-cavity or power quantity, the split fixes
output phases only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.constants import c as C_VACUUM

from .geometry import TWO_PI, DeviceGeometry

# fraction of L_c attributed to each in-ring MZI arm
ARM_FRACTION = 0.125


class SingularCouplingError(ValueError):
    """|zeta| = 0: the coupling-rate logarithm is undefined."""


class ResonanceError(RuntimeError):
    """Raised when the steady-state denominator vanishes or no root exists."""


@dataclass(frozen=True)
class SpectralResponse:
    """Power spectra relative to |s_f|^2 on a common frequency grid."""

    omega: np.ndarray          # rad/s, strictly increasing
    circulating: np.ndarray    # |s_ci+ / s_f|^2
    signal_out: np.ndarray     # |s_s- / s_f|^2
    idler_out: np.ndarray      # |s_i- / s_f|^2 at the idler detector
    drop: np.ndarray           # |s_d- / s_f|^2 in the drop port

    def __post_init__(self):
        if self.omega.size == 0:
            raise ValueError("empty frequency grid")
        if np.any(np.diff(self.omega) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        for name in ("circulating", "signal_out", "idler_out", "drop"):
            arr = getattr(self, name)
            if arr.shape != self.omega.shape:
                raise ValueError(f"{name} shape mismatch")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and >= 0")


# --------------------------------------------------------------------- #
# phases and matrices


def arm_phase_difference(omega, dpsi: float, which: str, g: DeviceGeometry):
    """psi_n(omega) = k(omega) dL_n + dpsi for filter n in {idler, signal}."""
    dl = {"idler": g.dl_idler, "signal": g.dl_signal}[which]
    return g.propagation_constant(omega) * dl + dpsi


def mzi_transfer(omega, dpsi: float, which: str, g: DeviceGeometry) -> np.ndarray:
    """2x2 MZI transfer matrix T = C Z C, including the e^{i psi_B} factor.

    Vectorizes over ``omega``: returns shape (..., 2, 2).
    """
    psi = np.asarray(arm_phase_difference(omega, dpsi, which, g))
    nu = {"idler": g.nu_i, "signal": g.nu_s}[which]
    psi_b = g.propagation_constant(omega) * (ARM_FRACTION * g.ring_length)
    pref = np.exp(1j * psi_b)
    e = np.exp(1j * psi)
    cross = 1j * (1.0 + e) * nu * np.sqrt(1.0 - nu * nu)
    t = np.empty(np.shape(psi) + (2, 2), dtype=complex)
    t[..., 0, 0] = pref * ((1.0 + e) * nu * nu - 1.0)
    t[..., 0, 1] = pref * cross
    t[..., 1, 0] = pref * cross
    t[..., 1, 1] = pref * (nu * nu - e * (1.0 - nu * nu))
    return t


def drop_transfer(omega, g: DeviceGeometry, dtheta: float | None = None) -> np.ndarray:
    """Transfer matrix of the idler drop filter (50/50 couplers, nu = 1/sqrt2)."""
    if dtheta is None:
        dtheta = g.static_dtheta_drop()
    theta = g.propagation_constant(omega) * g.dl_drop + dtheta
    theta = np.asarray(theta)
    e = np.exp(1j * theta)
    d = np.empty(np.shape(theta) + (2, 2), dtype=complex)
    d[..., 0, 0] = 0.5 * (e - 1.0)
    d[..., 0, 1] = 0.5j * (1.0 + e)
    d[..., 1, 0] = 0.5j * (1.0 + e)
    d[..., 1, 1] = 0.5 * (1.0 - e)
    return d


def zeta(omega, dpsi: float, which: str, g: DeviceGeometry):
    """Round-trip coupling parameter zeta_n = nu^2 - e^{i psi_n}(1 - nu^2)."""
    psi = arm_phase_difference(omega, dpsi, which, g)
    nu_sq = {"idler": g.nu_i, "signal": g.nu_s}[which] ** 2
    return nu_sq - np.exp(1j * np.asarray(psi)) * (1.0 - nu_sq)


def coupling_rate(omega, dpsi: float, which: str, g: DeviceGeometry):
    """Decay rate through filter n: kappa_n = -(c / n_g L_c) ln |zeta_n|."""
    z = np.abs(zeta(omega, dpsi, which, g))
    if np.any(z < 1e-12):
        raise SingularCouplingError("zeta vanishes; coupling rate diverges")
    return -(C_VACUUM / (g.n_g * g.ring_length)) * np.log(z)


def aux_reflection(omega, nu_a: float, g: DeviceGeometry):
    """All-pass factor of the auxiliary ring seen by the circulating field.

    r_a = (nu_a - e^{i phi_a}) / (1 - nu_a e^{i phi_a}) with phi_a the
    auxiliary round-trip phase; |r_a| = 1 for a lossless index.
    """
    phi_a = g.propagation_constant(omega) * g.aux_ring_length
    e = np.exp(1j * np.asarray(phi_a))
    return (nu_a - e) / (1.0 - nu_a * e)


# --------------------------------------------------------------------- #
# steady-state response


def _denominator(omega, dpsi_i, dpsi_s, g, nu_a=None):
    phi_c = g.propagation_constant(omega) * g.ring_length
    loop = np.exp(1j * np.asarray(phi_c)) * zeta(omega, dpsi_i, "idler", g) * zeta(
        omega, dpsi_s, "signal", g
    )
    if nu_a is not None:
        loop = loop * aux_reflection(omega, nu_a, g)
    return 1.0 - loop


def output_path_coefficients(omega, dpsi_i, dpsi_s, g: DeviceGeometry):
    """Non-resonant output coefficients multiplying the circulating field.

    Returns (signal path, idler-detector path, drop path); the full output
    fields are these times s_ci+.  Their zeros are the filter conditions
    proper, independent of the intra-cavity buildup.
    """
    t_i = mzi_transfer(omega, dpsi_i, "idler", g)
    t_s = mzi_transfer(omega, dpsi_s, "signal", g)
    d = drop_transfer(omega, g)
    phi_is = g.propagation_constant(omega) * (0.375 * g.ring_length)
    arc = np.exp(1j * np.asarray(phi_is))
    path_signal = t_s[..., 0, 1] * arc * t_i[..., 1, 1]
    path_idler = d[..., 0, 1] * t_i[..., 0, 1]
    path_drop = d[..., 0, 0] * t_i[..., 0, 1]
    return path_signal, path_idler, path_drop


def circulating_response(
    omega,
    dpsi_i: float,
    dpsi_s: float,
    g: DeviceGeometry,
    nu_a: float | None = None,
) -> SpectralResponse:
    """Steady-state spectra for an internal drive between the filters.

    ``nu_a`` couples in the auxiliary ring; ``None`` leaves it out (a
    through-coupling of exactly 1 is the decoupled limit and equals the
    plain response).
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    den = _denominator(omega, dpsi_i, dpsi_s, g, nu_a=nu_a)
    if np.any(den == 0.0):
        raise ResonanceError(
            "steady-state denominator vanished exactly (lossless resonance)"
        )
    circ = 1.0 / den
    path_signal, path_idler, path_drop = output_path_coefficients(
        omega, dpsi_i, dpsi_s, g
    )
    return SpectralResponse(
        omega=omega,
        circulating=np.abs(circ) ** 2,
        signal_out=np.abs(path_signal * circ) ** 2,
        idler_out=np.abs(path_idler * circ) ** 2,
        drop=np.abs(path_drop * circ) ** 2,
    )


def aux_circulating_response(
    omega, nu_a: float, g: DeviceGeometry, dpsi_i=None, dpsi_s=None
) -> SpectralResponse:
    """Response with the auxiliary conversion ring coupled (static filters)."""
    if dpsi_i is None:
        dpsi_i = g.static_dpsi_idler()
    if dpsi_s is None:
        dpsi_s = g.static_dpsi_signal()
    return circulating_response(omega, dpsi_i, dpsi_s, g, nu_a=nu_a)


# --------------------------------------------------------------------- #
# resonance condition


def _loop_gain(omega, dpsi_i, dpsi_s, g, nu_a=None):
    """Complex round-trip factor whose unit circle crossing is resonance."""
    phi_c = g.propagation_constant(omega) * g.ring_length
    loop = np.exp(1j * np.asarray(phi_c)) * zeta(omega, dpsi_i, "idler", g) * zeta(
        omega, dpsi_s, "signal", g
    )
    if nu_a is not None:
        loop = loop * aux_reflection(omega, nu_a, g)
    return loop


def _phase_mismatch(omega: float, dpsi_i: float, dpsi_s: float, g: DeviceGeometry,
                    mode_index: int, nu_a=None) -> float:
    """Round-trip phase minus 2 pi * mode_index (real part, unwrapped)."""
    phi_c = np.real(g.propagation_constant(omega)) * g.ring_length
    zz = zeta(omega, dpsi_i, "idler", g) * zeta(omega, dpsi_s, "signal", g)
    extra = 0.0
    if nu_a is not None:
        # unwrap the all-pass phase onto (-pi, pi] relative to its value
        # far from the auxiliary resonance
        extra = float(np.angle(aux_reflection(omega, nu_a, g)))
    return float(phi_c + np.angle(zz) + extra - TWO_PI * mode_index)


def resonance_frequency(
    dpsi_s: float,
    g: DeviceGeometry,
    dpsi_i: float | None = None,
    omega_near: float | None = None,
    nu_a: float | None = None,
) -> float:
    """Solve Phi(omega) = 2 pi m for the resonance near ``omega_near``.

    Plain bisection inside a +-Omega_c/2 bracket; the absolute round-trip
    phase error of the iterate is driven below 1e-10 rad.
    """
    if dpsi_i is None:
        dpsi_i = g.static_dpsi_idler()
    if omega_near is None:
        omega_near = g.omega_signal
    if omega_near <= 0.5 * g.fsr:
        raise ValueError("omega_near must sit well above one FSR")
    m = g.resonance_index(omega_near)
    lo = omega_near - 0.5 * g.fsr
    hi = omega_near + 0.5 * g.fsr
    f_lo = _phase_mismatch(lo, dpsi_i, dpsi_s, g, m, nu_a)
    f_hi = _phase_mismatch(hi, dpsi_i, dpsi_s, g, m, nu_a)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise ResonanceError("no resonance inside the +-Omega_c/2 bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = _phase_mismatch(mid, dpsi_i, dpsi_s, g, m, nu_a)
        if abs(f_mid) < 1e-11 or (hi - lo) < 1e-13 * mid:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    return 0.5 * (lo + hi)


def resonant_peak_circulating(
    j: int,
    g: DeviceGeometry,
    dpsi_i: float | None = None,
    dpsi_s: float | None = None,
    nu_a: float | None = None,
) -> tuple[float, float]:
    """(omega, peak |s_ci+/s_f|^2) of the ring mode j FSRs above the pump.

    At resonance the loop phase vanishes, so the peak equals
    1 / (1 - |loop|)^2 exactly; lines far narrower than any scan grid are
    located by the resonance root instead of sampling.
    """
    if dpsi_i is None:
        dpsi_i = g.static_dpsi_idler()
    if dpsi_s is None:
        dpsi_s = g.static_dpsi_signal()
    w0 = resonance_frequency(dpsi_s, g, dpsi_i=dpsi_i,
                             omega_near=g.mode_frequency(j), nu_a=nu_a)
    mag = float(np.abs(_loop_gain(w0, dpsi_i, dpsi_s, g, nu_a=nu_a)))
    if mag >= 1.0:
        raise ResonanceError("loop gain >= 1 at resonance (lossless or gain)")
    return w0, 1.0 / (1.0 - mag) ** 2


def resonance_shift(dpsi_s: float, g: DeviceGeometry) -> float:
    """delta_s = omega_s(dpsi_s) - omega_s at the closed reference setting."""
    ref = resonance_frequency(g.static_dpsi_signal(), g)
    return resonance_frequency(dpsi_s, g) - ref


# --------------------------------------------------------------------- #
# grid helpers


def mode_window_grid(
    g: DeviceGeometry,
    j_modes,
    halfwidth: float | None = None,
    points_per_window: int = 801,
    coarse_points: int = 2001,
    span: tuple[float, float] | None = None,
) -> np.ndarray:
    """Union of a coarse background grid and fine windows around ring modes.

    The signal-like modes are orders of magnitude narrower than the FSR, so
    a uniform grid resolving them would need ~1e7 points; dense local
    windows capture every feature instead.
    """
    if halfwidth is None:
        halfwidth = g.fsr / 40.0
    if span is None:
        j_lo, j_hi = min(j_modes), max(j_modes)
        span = (g.mode_frequency(j_lo) - g.fsr, g.mode_frequency(j_hi) + g.fsr)
    pieces = [np.linspace(span[0], span[1], coarse_points)]
    # narrowest possible feature: intrinsic-loss-limited linewidth
    kappa_loss = g.n_eff_im * g.omega_ref / g.n_g
    core = max(100.0 * kappa_loss, 1e-9 * g.fsr)
    for j in j_modes:
        center = g.mode_frequency(j)
        pieces.append(np.linspace(center - halfwidth, center + halfwidth,
                                  points_per_window))
        pieces.append(np.linspace(center - core, center + core, points_per_window))
    grid = np.unique(np.concatenate(pieces))
    return grid


def local_peak(
    response_fn,
    center: float,
    g: DeviceGeometry,
    halfwidth: float | None = None,
    points: int = 2001,
    stages: int = 4,
) -> tuple[float, float]:
    """(omega_peak, peak value) of a scalar response near ``center``.

    Multi-stage zoom scan; resolves lines from the kappa_i-wide passbands
    down to the intrinsic-loss-limited signal mode.
    """
    if halfwidth is None:
        halfwidth = g.fsr / 16.0
    w_center, hw = float(center), float(halfwidth)
    best_w, best_v = w_center, -np.inf
    for _ in range(stages):
        w = np.linspace(w_center - hw, w_center + hw, points)
        v = response_fn(w)
        i = int(np.argmax(v))
        best_w, best_v = float(w[i]), float(v[i])
        w_center = best_w
        hw = 4.0 * (w[1] - w[0])
    return best_w, best_v


def fwhm(response_fn, center: float, g: DeviceGeometry,
         halfwidth: float | None = None) -> float:
    """Full width at half maximum of a single resonance line."""
    if halfwidth is None:
        halfwidth = g.fsr / 16.0
    w_pk, v_pk = local_peak(response_fn, center, g, halfwidth=halfwidth)

    def crossing(direction: float) -> float:
        step = 1e-7 * halfwidth
        hi = step
        for _ in range(80):
            if response_fn(np.array([w_pk + direction * hi]))[0] < 0.5 * v_pk:
                break
            hi *= 1.6
        else:
            raise ResonanceError("no half-max crossing inside the scan window")
        lo = hi / 1.6
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if response_fn(np.array([w_pk + direction * mid]))[0] > 0.5 * v_pk:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-6 * lo:
                break
        return 0.5 * (lo + hi)

    return crossing(+1.0) + crossing(-1.0)
