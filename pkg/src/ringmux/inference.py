"""Exact probability bookkeeping over detection sequences.

Combines bin-outcome tables (pump bins), multinomial release/storage
kernels and binomial detector thinning into posterior distributions
P(n photons, detection history), plus the derived acceptance quantities:
state-estimation fidelity, g2 and the success probability.

Counts convention: the detection number x increases by idler detections
and decreases by signal detections.  A pump bin with previous count
x_prev and detections (I_pre, I_post) yields x_star = x_prev + I_pre and
x_end = x_star + I_post; a release bin subtracts instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .tables import MAX_JUMPS, BinOutcomeTable


class UndefinedG2Error(ZeroDivisionError):
    """g2 is undefined for a state with zero mean photon number."""


def thin_detector(n_emitted: int, n_detected: int, eta: float) -> float:
    """Binomial probability of seeing ``n_detected`` of ``n_emitted``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("detection efficiency must lie in [0, 1]")
    if n_detected < 0 or n_detected > n_emitted:
        return 0.0
    return comb(n_emitted, n_detected) * eta**n_detected * (1 - eta) ** (
        n_emitted - n_detected
    )


def _thinning_matrix(n_max: int, eta: float) -> np.ndarray:
    """T[e, i] = P(i detected | e emitted)."""
    t = np.zeros((n_max + 1, n_max + 1))
    for e in range(n_max + 1):
        for i in range(e + 1):
            t[e, i] = thin_detector(e, i, eta)
    return t


def estimate_state(x_star: int, x_prev: int) -> int:
    """Estimated photon number from the decision-time detection count."""
    return x_star if x_star >= 0 else x_star - x_prev


def g2_of(dist: np.ndarray) -> float:
    """Second-order correlation of a photon-number distribution."""
    dist = np.asarray(dist, dtype=float)
    n = np.arange(dist.size)
    mean = float(np.sum(n * dist))
    if mean <= 0.0:
        raise UndefinedG2Error("zero mean photon number")
    second = float(np.sum(n * (n - 1) * dist))
    return second / mean**2


def release_multinomial(
    n_prev: int, n_waveguide: int, n_remain: int, p_c: float, p_s: float
) -> float:
    """Probability that of ``n_prev`` photons, ``n_remain`` stay in the
    cavity and ``n_waveguide`` couple out, the rest being lost."""
    n_lost = n_prev - n_waveguide - n_remain
    if n_lost < 0 or n_waveguide < 0 or n_remain < 0:
        return 0.0
    p_l = 1.0 - p_c - p_s
    if p_l < -1e-12:
        raise ValueError("p_c + p_s must not exceed 1")
    p_l = max(p_l, 0.0)
    coeff = comb(n_prev, n_remain) * comb(n_prev - n_remain, n_waveguide)
    return coeff * p_c**n_remain * p_s**n_waveguide * p_l**n_lost


def storage_survival(n_max: int, p_c: float) -> np.ndarray:
    """K[n0, n1] = binomial survival of n0 photons with retention p_c."""
    k = np.zeros((n_max + 1, n_max + 1))
    for n0 in range(n_max + 1):
        for n1 in range(n0 + 1):
            k[n0, n1] = comb(n0, n1) * p_c**n1 * (1 - p_c) ** (n0 - n1)
    return k


def storage_update(masses: np.ndarray, delta_t: float, kappa_loss: float) -> np.ndarray:
    """Propagate a photon-number distribution through loss-only storage."""
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    if delta_t == 0.0 or kappa_loss == 0.0:
        return np.asarray(masses, dtype=float).copy()
    p_c = float(np.exp(-2.0 * kappa_loss * delta_t))
    k = storage_survival(len(masses) - 1, p_c)
    return np.asarray(masses, dtype=float) @ k


# --------------------------------------------------------------------- #
# pump-bin kernel


@dataclass(frozen=True)
class PumpKernel:
    """Thinned pump-bin transition probabilities.

    ``probs[n0][i_pre, i_post, n1]`` is the probability, starting from n0
    stored photons, of detecting i_pre idlers before the decision time,
    i_post after it, and holding n1 photons at the bin end.
    """

    eta: float
    cutoff: int
    probs: dict[int, np.ndarray]
    pair_setting: float

    def max_initial(self) -> int:
        return max(self.probs)

    def outcomes(self, n0: int):
        """Iterate (i_pre, i_post, vector over n1) with nonzero mass."""
        p = self.probs[n0]
        nz = np.nonzero(p.sum(axis=2) > 0.0)
        for i_pre, i_post in zip(*nz):
            yield int(i_pre), int(i_post), p[i_pre, i_post]


def pump_kernel(tables: dict[int, BinOutcomeTable], eta: float,
                cutoff: int | None = None) -> PumpKernel:
    """Fold detector thinning into Monte-Carlo bin tables.

    ``cutoff`` pads every table to a common photon-number support so
    kernels from differently truncated tables compose.
    """
    if not tables:
        raise ValueError("no tables given")
    cut = max(t.cutoff for t in tables.values())
    if cutoff is not None:
        if cutoff < cut:
            raise ValueError("requested cutoff below the tables' support")
        cut = cutoff
    thin = _thinning_matrix(MAX_JUMPS, eta)
    probs: dict[int, np.ndarray] = {}
    for n0, table in tables.items():
        p = table.probabilities()          # (n1, e_pre, e_post)
        if table.cutoff < cut:
            pad = np.zeros((cut + 1,) + p.shape[1:])
            pad[: p.shape[0]] = p
            p = pad
        # thin both emission splits independently
        joint = np.einsum("nab,ai,bj->ijn", p, thin, thin, optimize=True)
        probs[n0] = joint
    setting = next(iter(tables.values())).pump_setting
    return PumpKernel(eta=eta, cutoff=cut, probs=probs, pair_setting=setting)


def pump_update(
    prior: np.ndarray,
    kernel: PumpKernel,
    i_pre: int,
    i_post: int,
) -> tuple[np.ndarray, float]:
    """Posterior joint mass over the bin-end photon number.

    Returns (masses over n1, prior mass discarded because it sat above the
    table support).  The prior must already be truncated to n <= 2 by the
    caller when the protocol's assumption applies; anything above the
    available tables is discarded rather than guessed.
    """
    prior = np.asarray(prior, dtype=float)
    supported = max(2, kernel.max_initial())
    discarded = float(prior[supported + 1 :].sum())
    out = np.zeros(kernel.cutoff + 1)
    for n0 in range(min(supported, len(prior) - 1) + 1):
        w = prior[n0]
        if w == 0.0:
            continue
        if n0 not in kernel.probs:
            raise KeyError(f"no bin table for initial photon number {n0}")
        if i_pre <= MAX_JUMPS and i_post <= MAX_JUMPS:
            out += w * kernel.probs[n0][i_pre, i_post]
    return out, discarded


# --------------------------------------------------------------------- #
# release-bin kernel


@dataclass(frozen=True)
class ReleaseTimings:
    """Cavity retention/extraction probabilities at the decision split."""

    pc_star: float
    ps_star: float
    pc_end: float
    ps_end: float

    def __post_init__(self):
        if not 0.0 < self.pc_star <= 1.0 or not 0.0 < self.pc_end <= 1.0:
            raise ValueError("retention probabilities must lie in (0, 1]")
        if self.pc_end > self.pc_star + 1e-12:
            raise ValueError("retention cannot grow with time")


def release_kernel(
    n_max: int, timings: ReleaseTimings, eta: float
) -> np.ndarray:
    """K[n0, s_pre, s_post, n1]: detections before/after the decision time
    and the final cavity count, for a release bin.

    Stage one evolves to the decision time with the bin's release pulse;
    stage two only depends on the photon count at the decision time.
    """
    pc1, ps1 = timings.pc_star, timings.ps_star
    pc2 = timings.pc_end / timings.pc_star
    ps2 = (timings.ps_end - timings.ps_star) / timings.pc_star
    k = np.zeros((n_max + 1, n_max + 1, n_max + 1, n_max + 1))
    for n0 in range(n_max + 1):
        for n_star in range(n0 + 1):
            for s1 in range(n0 - n_star + 1):
                w1 = release_multinomial(n0, s1, n_star, pc1, ps1)
                if w1 == 0.0:
                    continue
                for d1 in range(s1 + 1):
                    t1 = thin_detector(s1, d1, eta)
                    for n1 in range(n_star + 1):
                        for s2 in range(n_star - n1 + 1):
                            w2 = release_multinomial(n_star, s2, n1, pc2, ps2)
                            if w2 == 0.0:
                                continue
                            for d2 in range(s2 + 1):
                                k[n0, d1, d2, n1] += (
                                    w1 * t1 * w2 * thin_detector(s2, d2, eta)
                                )
    return k


def release_update(
    prior: np.ndarray,
    kernel: np.ndarray,
    s_pre: int,
    s_post: int,
) -> np.ndarray:
    """Posterior masses over the bin-end photon number after a release."""
    prior = np.asarray(prior, dtype=float)
    n_max = kernel.shape[0] - 1
    out = np.zeros(n_max + 1)
    if s_pre > n_max or s_post > n_max or s_pre < 0 or s_post < 0:
        return out
    for n0 in range(min(n_max, len(prior) - 1) + 1):
        if prior[n0] > 0.0:
            out += prior[n0] * kernel[n0, s_pre, s_post]
    return out


# --------------------------------------------------------------------- #
# acceptance quantities


@dataclass
class AcceptanceVerdict:
    fidelity: float
    g2: float
    passes: bool


def acceptance_verdict(
    masses: np.ndarray, f_threshold: float, g2_threshold: float
) -> AcceptanceVerdict:
    """Evaluate the single-photon criteria on an (unnormalized) joint mass."""
    masses = np.asarray(masses, dtype=float)
    total = masses.sum()
    if total <= 0.0:
        return AcceptanceVerdict(fidelity=0.0, g2=np.inf, passes=False)
    dist = masses / total
    fidelity = float(dist[1]) if len(dist) > 1 else 0.0
    try:
        g2 = g2_of(dist)
    except UndefinedG2Error:
        g2 = 0.0 if fidelity == 0.0 else np.inf
    passes = fidelity >= f_threshold and g2 <= g2_threshold
    return AcceptanceVerdict(fidelity=fidelity, g2=g2, passes=passes)
