"""Brute-force fate-enumeration oracles.

Everything here enumerates individual photon fates and detector bits
path by path, deliberately avoiding the binomial/multinomial closed
forms used by the library, so agreement is a genuine cross-check.
"""

import itertools
from collections import defaultdict

import numpy as np


def detection_outcomes(n_emitted: int, eta: float) -> dict[int, float]:
    """{detected count: prob} by enumerating each photon's detector bit."""
    out = defaultdict(float)
    for bits in itertools.product((0, 1), repeat=n_emitted):
        prob = 1.0
        for b in bits:
            prob *= eta if b else (1.0 - eta)
        out[sum(bits)] += prob
    return dict(out)


def pump_bin_outcomes(joint_emission: np.ndarray, eta: float):
    """{(i_pre, i_post, n_final): prob} from a raw emission table.

    ``joint_emission[n_final, e_pre, e_post]`` is the bin's physical joint
    distribution before detector thinning.
    """
    out = defaultdict(float)
    it = np.ndenumerate(joint_emission)
    for (n_final, e_pre, e_post), q in it:
        if q == 0.0:
            continue
        for i_pre, w_pre in detection_outcomes(e_pre, eta).items():
            for i_post, w_post in detection_outcomes(e_post, eta).items():
                out[(i_pre, i_post, n_final)] += q * w_pre * w_post
    return dict(out)


def release_bin_outcomes(
    n0: int, pc_star: float, ps_star: float, pc_end: float, ps_end: float,
    eta: float,
):
    """{(s_pre, s_post, n_final): prob} by per-photon joint fates.

    Per-photon fates over the whole bin: stay throughout; exit before or
    after the decision time (each detected or missed); lost before or
    after the decision time.
    """
    exit_late = ps_end - ps_star
    lost_early = 1.0 - pc_star - ps_star
    lost_late = pc_star - pc_end - exit_late
    fates = [
        ("stay", pc_end),
        ("exit_early_det", ps_star * eta),
        ("exit_early_miss", ps_star * (1.0 - eta)),
        ("exit_late_det", exit_late * eta),
        ("exit_late_miss", exit_late * (1.0 - eta)),
        ("lost_early", lost_early),
        ("lost_late", lost_late),
    ]
    out = defaultdict(float)
    for combo in itertools.product(fates, repeat=n0):
        prob = 1.0
        s_pre = s_post = n_final = 0
        for name, w in combo:
            prob *= w
            if name == "stay":
                n_final += 1
            elif name == "exit_early_det":
                s_pre += 1
            elif name == "exit_late_det":
                s_post += 1
        if prob:
            out[(s_pre, s_post, n_final)] += prob
    return dict(out)


def storage_outcomes(n0: int, p_keep: float) -> dict[int, float]:
    """{survivors: prob} by per-photon keep/lose bits."""
    out = defaultdict(float)
    for bits in itertools.product((0, 1), repeat=n0):
        prob = 1.0
        for b in bits:
            prob *= p_keep if b else (1.0 - p_keep)
        out[sum(bits)] += prob
    return dict(out)


def compose_bins(bin_specs, eta: float):
    """Joint distribution over full detection histories and final count.

    ``bin_specs`` is a list of
      ("pump", joint_emission_by_n0: dict[int, np.ndarray])
      ("release", (pc_star, ps_star, pc_end, ps_end))
      ("store", p_keep)
    Returns {((x_star_1, x_end_1), ..., n_final): prob} with the detection
    number starting at zero.
    """
    states = {((), 0, 0): 1.0}   # (history, x_end, n) -> prob
    for spec in bin_specs:
        nxt = defaultdict(float)
        for (hist, x_prev, n0), w in states.items():
            if spec[0] == "pump":
                tables = spec[1]
                for (i_pre, i_post, n1), q in pump_bin_outcomes(
                    tables[n0], eta
                ).items():
                    x_star = x_prev + i_pre
                    x_end = x_star + i_post
                    nxt[(hist + ((x_star, x_end),), x_end, n1)] += w * q
            elif spec[0] == "release":
                pc1, ps1, pc2, ps2 = spec[1]
                for (s_pre, s_post, n1), q in release_bin_outcomes(
                    n0, pc1, ps1, pc2, ps2, eta
                ).items():
                    x_star = x_prev - s_pre
                    x_end = x_star - s_post
                    nxt[(hist + ((x_star, x_end),), x_end, n1)] += w * q
            elif spec[0] == "store":
                for n1, q in storage_outcomes(n0, spec[1]).items():
                    nxt[(hist + ((x_prev, x_prev),), x_prev, n1)] += w * q
            else:
                raise ValueError(spec[0])
        states = nxt
    out = defaultdict(float)
    for (hist, _x, n), w in states.items():
        out[hist + (n,)] += w
    return dict(out)


# ----------------------------------------------------------------------- #
# independent recursive protocol evaluation


def _g2_plain(dist):
    n = np.arange(len(dist))
    mean = float(np.sum(n * dist))
    if mean <= 0:
        return None
    return float(np.sum(n * (n - 1) * dist)) / mean**2


def _verdict_plain(masses, f_th, g2_th):
    total = float(np.sum(masses))
    if total <= 0:
        return False, 0.0
    dist = np.asarray(masses) / total
    fid = float(dist[1]) if len(dist) > 1 else 0.0
    g2 = _g2_plain(dist)
    g2 = 0.0 if g2 is None else g2
    return (fid >= f_th and g2 <= g2_th), fid


def protocol_oracle(
    joints_by_setting,       # {setting: {n0: raw emission joint array}}
    release_fates,           # pc -> (pc_star, ps_star, pc_end, ps_end)
    eta,
    n_bins,
    tau_keep,                # per-stored-bin survival probability
    f_th,
    g2_th,
    n_ev,
    f_ev=0.0,
    m_ev=None,
    pump_sequence=None,
    retention_sequence=None,
    sub_success=None,
    cutoff=4,
):
    """Recursive brute-force evaluation of the driving protocol.

    Every probability is assembled from per-photon fate enumeration; the
    decision rules are re-derived inline.  Evacuations fold the provided
    shorter-cycle values exactly like the paper's fresh-start recursion.
    """
    if sub_success is None:
        sub_success = [0.0] * n_bins
    pump_sequence = pump_sequence or [next(iter(joints_by_setting))] * n_bins
    retention_sequence = retention_sequence or [0.5] * n_bins

    def storage_vec(masses, bins):
        out = np.zeros(cutoff + 1)
        keep = tau_keep**bins
        for n0, w in enumerate(masses):
            if w > 0:
                for n1, qq in storage_outcomes(n0, keep).items():
                    out[n1] += w * qq
        return out

    def release_star(masses, pc, s_pre):
        pc1, ps1, pc2, ps2 = release_fates(pc)
        out = np.zeros(cutoff + 1)
        for n0, w in enumerate(masses):
            if w <= 0:
                continue
            for (sp, ssub, n1), qq in release_bin_outcomes(
                int(n0), pc1, ps1, pc2, ps2, eta
            ).items():
                if sp == s_pre:
                    out[n1] += w * qq
        return out

    def decide(star, x_star, next_bin, bins_left):
        if 0 <= x_star <= 1:
            projected = storage_vec(star, bins_left)
            ok, _ = _verdict_plain(projected, f_th, g2_th)
            if x_star == 1 and ok:
                return ("store",)
        if m_ev is not None and next_bin >= m_ev:
            return ("evacuate",)
        if x_star < 0:
            return ("pump", pump_sequence[next_bin - 1])
        if x_star >= n_ev:
            return ("evacuate",)
        if x_star > 1:
            pc = retention_sequence[next_bin - 1]
            star_next = release_star(star, pc, x_star - 1)
            if bins_left >= 2:
                star_next = storage_vec(star_next, bins_left - 1)
            ok, _ = _verdict_plain(star_next, f_th, g2_th)
            return ("release", pc) if ok else ("evacuate",)
        total = float(np.sum(star))
        n_est = x_star
        fid = float(star[n_est]) / total if total > 0 else 0.0
        return ("pump", pump_sequence[next_bin - 1]) if fid > f_ev else (
            "evacuate",
        )

    def expand(m_next, x_end, masses, action):
        """Accepted-mass contribution of one open branch entering bin m_next."""
        last = m_next == n_bins
        if action[0] == "evacuate":
            remaining = n_bins - m_next
            return float(np.sum(masses)) * (
                sub_success[remaining] if remaining > 0 else 0.0
            )
        total = 0.0
        outcomes = []      # (x_star, x_end_new, star_masses, masses_new)
        if action[0] == "store":
            star = storage_vec(masses, 1)
            outcomes = [(x_end, x_end, star, star.copy())]
        elif action[0] == "pump":
            joints = joints_by_setting[action[1]]
            star_acc = {}
            joint_acc = {}
            for n0, w in enumerate(masses[: 3]):
                if w <= 0:
                    continue
                for (i_pre, i_post, n1), qq in pump_bin_outcomes(
                    joints[n0], eta
                ).items():
                    star_acc.setdefault(i_pre, np.zeros(cutoff + 1))
                    star_acc[i_pre][n1] += w * qq
                    joint_acc.setdefault((i_pre, i_post), np.zeros(cutoff + 1))
                    joint_acc[(i_pre, i_post)][n1] += w * qq
            if last:
                outcomes = [
                    (x_end + ip, x_end + ip, star, star.copy())
                    for ip, star in star_acc.items()
                ]
            else:
                outcomes = [
                    (x_end + ip, x_end + ip + jp, star_acc[ip], mm)
                    for (ip, jp), mm in joint_acc.items()
                ]
        elif action[0] == "release":
            pc1, ps1, pc2, ps2 = release_fates(action[1])
            star_acc = {}
            joint_acc = {}
            for n0, w in enumerate(masses):
                if w <= 0:
                    continue
                for (sp, ss, n1), qq in release_bin_outcomes(
                    int(n0), pc1, ps1, pc2, ps2, eta
                ).items():
                    star_acc.setdefault(sp, np.zeros(cutoff + 1))
                    star_acc[sp][n1] += w * qq
                    joint_acc.setdefault((sp, ss), np.zeros(cutoff + 1))
                    joint_acc[(sp, ss)][n1] += w * qq
            if last:
                outcomes = [
                    (x_end - sp, x_end - sp, star, star.copy())
                    for sp, star in star_acc.items()
                ]
            else:
                outcomes = [
                    (x_end - sp, x_end - sp - ss, star_acc[sp], mm)
                    for (sp, ss), mm in joint_acc.items()
                ]
        else:
            raise ValueError(action)
        for x_star, x_new, star, mm in outcomes:
            if float(np.sum(mm)) <= 0:
                continue
            if last:
                ok, _ = _verdict_plain(star, f_th, g2_th)
                if ok:
                    total += float(star[1])
                continue
            nxt_action = decide(star, x_star, m_next + 1,
                                n_bins - m_next)
            total += expand(m_next + 1, x_new, mm, nxt_action)
        return total

    root_masses = np.zeros(cutoff + 1)
    root_masses[0] = 1.0
    first = decide(root_masses, 0, 1, n_bins)
    return expand(1, 0, root_masses, first)
