"""Per-slot RB/MCS allocation with proportional-fair priority, zero-forcing
co-scheduling, and realized-throughput evaluation against ground truth.

The decision is made one slot ahead of execution: the preemptive policy
feeds predicted channels in, the reactive baselines feed the previous
slot's estimates, and realized_throughput replays the frozen decision
(allocation, MCS, precoders) against the true channels of the executed
slot.  MCS selection is finalized after the RB fill, on the worst
decision-time post-precoding SNR across the user's RBs, so the SER
constraint holds exactly at decision time by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import McsTable, min_rb_count, ser_from_snr

PF_POLICIES = ("preemptive", "pf_reactive")
ALL_POLICIES = ("preemptive", "pf_reactive", "round_robin", "max_snr")


@dataclass
class SchedulerConfig:
    n_rb: int
    g_max: int
    n_t: int
    tx_power: float
    noise_power: float
    ser_max: float
    table: McsTable
    r_min: np.ndarray  # per-user rate requirement, bits per slot
    n_re: int = 168
    n_s: int = 14
    n_sdm: int = 1

    @property
    def group_cap(self) -> int:
        return min(self.g_max, self.n_t)


@dataclass
class ScheduleDecision:
    policy: str
    x: np.ndarray                    # (B, K) binary allocation
    mcs: np.ndarray                  # per-user index, -1 when unscheduled
    z: np.ndarray                    # (K, M+1) one-hot rows
    admitted: np.ndarray             # rate guarantee committed
    scheduled: np.ndarray            # got at least one RB
    infeasible_mcs: np.ndarray       # no MCS meets the SER target
    pf: np.ndarray
    n_rb_min: np.ndarray
    decision_snr: np.ndarray         # min post-precoding SNR across own RBs
    rb_groups: list[tuple[int, ...]] # co-scheduled users per RB
    precoders: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def rb_counts(self) -> np.ndarray:
        return self.x.sum(axis=0)

    def to_json_dict(self) -> dict:
        return {
            "policy": self.policy,
            "rb_counts": [int(v) for v in self.rb_counts()],
            "mcs": [int(v) for v in self.mcs],
            "admitted": [bool(v) for v in self.admitted],
            "scheduled": [bool(v) for v in self.scheduled],
            "infeasible_mcs": [bool(v) for v in self.infeasible_mcs],
            "pf": [float(v) for v in self.pf],
            "n_rb_min": [float(v) for v in self.n_rb_min],
        }


@dataclass
class ThroughputReport:
    bits: np.ndarray
    total: float
    realized_ser: np.ndarray      # worst per-RB SER per user, NaN unscheduled
    ser_violation: np.ndarray     # realized SER exceeded the target
    rate_shortfall: np.ndarray    # allocation below the recorded minimum

    def to_json_dict(self) -> dict:
        return {
            "bits": [float(v) for v in self.bits],
            "total": float(self.total),
            "realized_ser": [None if math.isnan(v) else float(v) for v in self.realized_ser],
            "ser_violation": [bool(v) for v in self.ser_violation],
            "rate_shortfall": [bool(v) for v in self.rate_shortfall],
        }


# ---------------------------------------------------------------------------
# PF machinery


def pf_metric(predicted_rate: np.ndarray, average_rate: np.ndarray) -> np.ndarray:
    """Instantaneous-to-average rate ratio used as scheduling priority."""
    return np.asarray(predicted_rate, dtype=float) / np.asarray(average_rate, dtype=float)


def update_average_rate(
    average_rate: np.ndarray,
    realized_rate: np.ndarray,
    alpha: float = 0.1,
    floor: float = 1.0,
) -> np.ndarray:
    """Exponential moving average of realized per-slot rates."""
    out = (1.0 - alpha) * np.asarray(average_rate, float) + alpha * np.asarray(realized_rate, float)
    return np.maximum(out, floor)


# ---------------------------------------------------------------------------
# precoding


def zf_precode_and_snr(
    channels: np.ndarray,
    power: float,
    noise_power: float,
    drop_order: list[int] | None = None,
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Zero-forcing precoders for one co-scheduled group.

    ``channels`` is (G, N_T).  Columns of the pseudo-inverse are normalized
    and the per-RB power splits equally across the group.  A rank-deficient
    group sheds members in ``drop_order`` (lowest priority first) until the
    pseudo-inverse is well conditioned.  Returns (precoders (N_T, G'),
    per-user SNR, kept row indices).
    """
    h = np.atleast_2d(np.asarray(channels, dtype=complex))
    kept = list(range(h.shape[0]))
    order = list(drop_order) if drop_order is not None else list(range(h.shape[0]))
    while kept:
        sub = h[kept]
        sv = np.linalg.svd(sub, compute_uv=False)
        # "full rank" for precoding purposes: conditioning good enough that
        # zero forcing does not vaporize the weakest direction
        if sv[0] > 0 and sv[-1] / sv[0] > 0.05:
            break
        for cand in order:
            if cand in kept:
                kept.remove(cand)
                break
        else:
            kept.pop()
    if not kept:
        return np.zeros((h.shape[1], 0), dtype=complex), np.array([]), kept
    sub = h[kept]
    g = len(kept)
    raw = np.linalg.pinv(np.conj(sub))    # h_k^H w_j = delta_kj before scaling
    norms = np.linalg.norm(raw, axis=0)
    w = raw / norms
    cross = np.conj(sub) @ w
    signal = (power / g) * np.abs(np.diag(cross)) ** 2
    snr = signal / noise_power
    return w, snr, kept


def group_snrs(
    eval_channels: np.ndarray,
    precoders: np.ndarray,
    power: float,
    noise_power: float,
) -> np.ndarray:
    """Post-precoding SNR of each group member when the channels seen on air
    are ``eval_channels`` but the precoders were frozen elsewhere: the k-th
    user's SNR is (P/G) |h_k^H w_k|^2 / noise."""
    h = np.atleast_2d(np.asarray(eval_channels, dtype=complex))
    g = precoders.shape[1]
    signal = (power / g) * np.abs(np.einsum("ij,ji->i", h.conj(), precoders)) ** 2
    return signal / noise_power


# ---------------------------------------------------------------------------
# MCS selection


def select_mcs(snr: float, ser_max: float, table: McsTable) -> tuple[int, bool]:
    """Highest index whose SER at this SNR meets the target; (0, False) when
    even the lowest index misses it."""
    for m in range(table.m_max, -1, -1):
        if ser_from_snr(snr, int(table.bits[m])) <= ser_max:
            return m, True
    return 0, False


def per_rb_rate_proxy(channels: np.ndarray, cfg: SchedulerConfig) -> np.ndarray:
    """Expected per-RB bits at the matched-filter SNR under an even
    worst-case power split; the PF numerator and the R-bar warm start."""
    h = np.atleast_2d(np.asarray(channels, dtype=complex))
    norms2 = np.linalg.norm(h, axis=1) ** 2
    snr = cfg.tx_power * norms2 / (cfg.group_cap * cfg.noise_power)
    rates = np.zeros(len(snr))
    for k, s in enumerate(snr):
        m, _ = select_mcs(float(s), cfg.ser_max, cfg.table)
        ser = ser_from_snr(float(s), int(cfg.table.bits[m]))
        rates[k] = ((1.0 - ser) ** cfg.n_s) * float(cfg.table.spectral_efficiency[m]) \
            * cfg.n_re * cfg.n_sdm
    return rates


# ---------------------------------------------------------------------------
# RB fill rules


def fill_allocation(
    policy: str,
    priority_order: list[int],
    n_rb_min: np.ndarray,
    n_users: int,
    n_rb: int,
    group_cap: int,
    gram: np.ndarray | None = None,
    rho_max: float = 0.8,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Binary allocation matrix for one slot.

    PF policies first satisfy each admitted user's minimum in descending
    priority (choosing the emptiest RBs so minima pack feasibly), then
    apportion the remaining RB slots proportionally to the priority weights
    (rank weights when none are given), so the highest-PF users take the
    most RBs and smaller PF values taper off.  Round robin deals slots
    cyclically ignoring demands; max-SNR saturates users in priority order.
    A user occupies at most one slot per RB, and when ``gram`` (pairwise
    |direction correlation|) is given, a user only joins an RB whose
    occupants it is separable from, so zero-forcing the group stays well
    conditioned.
    """
    x = np.zeros((n_rb, n_users), dtype=np.int8)
    cap = np.full(n_rb, group_cap, dtype=int)

    def compatible(b: int, k: int) -> bool:
        if gram is None:
            return True
        occupants = np.flatnonzero(x[b])
        return bool(occupants.size == 0 or gram[k, occupants].max() <= rho_max)

    def grant(k: int, amount: int) -> None:
        # one vectorized pass: eligibility cannot change while the same user
        # is taking slots, since it holds at most one slot per RB
        if amount <= 0:
            return
        eligible = (cap > 0) & (x[:, k] == 0)
        if gram is not None:
            worst = (x * gram[k][None, :]).max(axis=1)
            eligible &= worst <= rho_max
        idx = np.flatnonzero(eligible)
        if idx.size == 0:
            return
        ranked = idx[np.lexsort((idx, -cap[idx]))]  # emptiest first, then index
        take = ranked[:amount]
        x[take, k] = 1
        cap[take] -= 1

    if policy in PF_POLICIES:
        for k in priority_order:
            if math.isfinite(n_rb_min[k]):
                grant(k, int(n_rb_min[k]))
        # remaining slots apportioned proportionally to priority weight
        # (largest remainder), so smaller PF values get fewer RBs, not none
        if weights is None:
            weights = np.zeros(n_users)
            for rank, k in enumerate(priority_order):
                weights[k] = n_users - rank
        total_w = sum(max(weights[k], 0.0) for k in priority_order)
        budget = int(cap.sum())
        if budget > 0 and total_w > 0:
            quota = {k: budget * max(weights[k], 0.0) / total_w for k in priority_order}
            shares = {k: int(quota[k]) for k in priority_order}
            leftover = budget - sum(shares.values())
            by_remainder = sorted(priority_order,
                                  key=lambda k: (-(quota[k] - shares[k]), k))
            for k in by_remainder[:leftover]:
                shares[k] += 1
            for k in priority_order:
                grant(k, shares[k])
        # slots stranded by rounding or compatibility go greedily by priority
        for k in priority_order:
            grant(k, n_rb)
    elif policy == "round_robin":
        pointer = 0
        for _layer in range(group_cap):
            for b in range(n_rb):
                if cap[b] == 0:
                    continue
                for step in range(n_users):
                    k = (pointer + step) % n_users
                    if not x[b, k] and compatible(b, k):
                        x[b, k] = 1
                        cap[b] -= 1
                        pointer = (k + 1) % n_users
                        break
    elif policy == "max_snr":
        for k in priority_order:
            for b in np.flatnonzero((cap > 0) & (x[:, k] == 0)):
                if compatible(b, k):
                    x[b, k] = 1
                    cap[b] -= 1
    else:
        raise ValueError(f"unknown policy: {policy}")
    return x


# ---------------------------------------------------------------------------
# the scheduling operation


def schedule(
    channels: np.ndarray,
    policy: str,
    average_rate: np.ndarray,
    cfg: SchedulerConfig,
) -> ScheduleDecision:
    """Build the next slot's allocation from decision-time channels.

    Steps: (a) rank users by PF on a matched-filter rate proxy (or by SNR
    for max-SNR); (b) admit rate guarantees highest-PF first while minimum
    demands fit the RB-slot budget; (c) fill RBs per policy; (d) zero-force
    each RB group and finalize per-user MCS on the worst own-RB SNR.
    """
    h = np.atleast_2d(np.asarray(channels, dtype=complex))
    n_users = h.shape[0]
    b_rb = cfg.n_rb
    cap = cfg.group_cap

    # ranking proxy: matched-filter SNR under an even worst-case power split
    norms2 = np.linalg.norm(h, axis=1) ** 2
    snr_proxy = cfg.tx_power * norms2 / (cap * cfg.noise_power)
    m_prov = np.zeros(n_users, dtype=int)
    feasible_prov = np.zeros(n_users, dtype=bool)
    rate_proxy = np.zeros(n_users)
    n_min = np.zeros(n_users)
    for k in range(n_users):
        m_prov[k], feasible_prov[k] = select_mcs(float(snr_proxy[k]), cfg.ser_max, cfg.table)
        ser = ser_from_snr(float(snr_proxy[k]), int(cfg.table.bits[m_prov[k]]))
        rate_proxy[k] = ((1.0 - ser) ** cfg.n_s) * float(cfg.table.spectral_efficiency[m_prov[k]]) \
            * cfg.n_re * cfg.n_sdm
        n_min[k] = min_rb_count(float(cfg.r_min[k]), int(m_prov[k]), cfg.table,
                                cfg.n_re, cfg.n_sdm)

    pf = pf_metric(rate_proxy, average_rate)
    priority = snr_proxy if policy == "max_snr" else pf
    order = list(np.argsort(-priority, kind="stable"))

    # pairwise direction correlations gate co-scheduling group formation
    dirs = np.zeros_like(h)
    nz = norms2 > 0.0
    dirs[nz] = h[nz] / np.sqrt(norms2[nz])[:, None]
    gram = np.abs(dirs.conj() @ dirs.T)

    # admission: identically-zero channels cannot be precoded; PF policies
    # additionally require a feasible MCS (the SER constraint must be
    # satisfiable) and drop lowest-PF users until the minima fit
    servable = nz
    admitted = np.zeros(n_users, dtype=bool)
    if policy in PF_POLICIES:
        admitted = servable & feasible_prov & np.isfinite(n_min) & (n_min <= b_rb)
        while admitted.any() and n_min[admitted].sum() > b_rb * cap:
            candidates = np.flatnonzero(admitted)
            weakest = candidates[np.argmin(pf[candidates])]
            admitted[weakest] = False
        fill_order = [k for k in order if admitted[k]]
    else:
        fill_order = [k for k in order if servable[k]]

    x = fill_allocation(policy, fill_order, n_min, n_users, b_rb, cap, gram=gram,
                        weights=pf)

    # per-RB zero forcing on decision channels, precoders cached per group
    rb_groups: list[tuple[int, ...]] = []
    precoders: dict[tuple[int, ...], np.ndarray] = {}
    decision_snr = np.full(n_users, math.inf)
    rank_pos = {k: i for i, k in enumerate(order)}
    for b in range(b_rb):
        group = tuple(int(k) for k in np.flatnonzero(x[b]))
        if not group:
            rb_groups.append(group)
            continue
        if group not in precoders:
            drop = sorted(range(len(group)), key=lambda i: -rank_pos[group[i]])
            w, snr, kept = zf_precode_and_snr(h[list(group)], cfg.tx_power,
                                              cfg.noise_power, drop)
            if len(kept) < len(group):  # rank-deficiency shed some members
                for i, k in enumerate(group):
                    if i not in kept:
                        x[b, k] = 0
                group_kept = tuple(group[i] for i in kept)
                precoders.setdefault(group_kept, w)
                group = group_kept
            else:
                precoders[group] = w
            snr_map = dict(zip(group, snr))
        else:
            w = precoders[group]
            snr = group_snrs(h[list(group)], w, cfg.tx_power, cfg.noise_power)
            snr_map = dict(zip(group, snr))
        rb_groups.append(group)
        for k in group:
            decision_snr[k] = min(decision_snr[k], float(snr_map[k]))

    # a rank-deficiency shed can leave an admitted user below its minimum:
    # the rate commitment failed, so demote it (reported via rate_shortfall)
    counts = x.sum(axis=0)
    for k in np.flatnonzero(admitted):
        if counts[k] < n_min[k]:
            admitted[k] = False

    scheduled = x.sum(axis=0) > 0
    mcs = np.full(n_users, -1, dtype=int)
    infeasible = np.zeros(n_users, dtype=bool)
    z = np.zeros((n_users, cfg.table.m_max + 1), dtype=np.int8)
    for k in range(n_users):
        if not (scheduled[k] or admitted[k]):
            continue
        snr_k = decision_snr[k] if math.isfinite(decision_snr[k]) else float(snr_proxy[k])
        m, ok = select_mcs(snr_k, cfg.ser_max, cfg.table)
        if not ok and policy in PF_POLICIES:
            # the SER constraint is unsatisfiable at the achieved SNR: a
            # constraint-honoring policy does not transmit to this user
            # (its layer stays reserved; realized_throughput skips mcs -1)
            x[:, k] = 0
            admitted[k] = False
            scheduled[k] = False
            continue
        mcs[k] = m
        infeasible[k] = not ok
        z[k, m] = 1

    return ScheduleDecision(
        policy=policy, x=x, mcs=mcs, z=z, admitted=admitted, scheduled=scheduled,
        infeasible_mcs=infeasible, pf=pf, n_rb_min=n_min, decision_snr=decision_snr,
        rb_groups=rb_groups, precoders=precoders,
    )


def realized_throughput(
    decision: ScheduleDecision,
    true_channels: np.ndarray,
    cfg: SchedulerConfig,
) -> ThroughputReport:
    """Replay the frozen decision against the executed slot's true channels.

    Per user and RB the post-precoding SINR is recomputed with the
    decision's precoders, the SER follows the assigned modulation, and the
    RB contributes (1 - SER)^{N_s} f(m) N_RE N_SDM bits.
    """
    h = np.atleast_2d(np.asarray(true_channels, dtype=complex))
    n_users = h.shape[0]
    bits = np.zeros(n_users)
    worst_ser = np.full(n_users, math.nan)
    snr_cache: dict[tuple[int, ...], dict[int, float]] = {}
    for group in decision.rb_groups:
        if not group:
            continue
        if group not in snr_cache:
            w = decision.precoders[group]
            snr = group_snrs(h[list(group)], w, cfg.tx_power, cfg.noise_power)
            snr_cache[group] = dict(zip(group, snr))
        for k in group:
            m = decision.mcs[k]
            if m < 0:
                continue
            ser = ser_from_snr(float(snr_cache[group][k]), int(cfg.table.bits[m]))
            worst_ser[k] = ser if math.isnan(worst_ser[k]) else max(worst_ser[k], ser)
            bits[k] += ((1.0 - ser) ** cfg.n_s) * float(cfg.table.spectral_efficiency[m]) \
                * cfg.n_re * cfg.n_sdm
    violation = np.zeros(n_users, dtype=bool)
    for k in range(n_users):
        if not math.isnan(worst_ser[k]) and worst_ser[k] > cfg.ser_max:
            violation[k] = True
    shortfall = decision.rb_counts() < np.where(np.isfinite(decision.n_rb_min),
                                                decision.n_rb_min, np.inf)
    return ThroughputReport(
        bits=bits, total=float(bits.sum()), realized_ser=worst_ser,
        ser_violation=violation, rate_shortfall=np.asarray(shortfall, dtype=bool),
    )


def validate_decision(decision: ScheduleDecision, cfg: SchedulerConfig) -> list[str]:
    """Independent constraint check of a frozen decision.

    Verifies the rate guarantee for admitted users, the per-RB co-scheduling
    cap, one-hot MCS rows for every scheduled or admitted user, and the
    decision-time SER target for every user with a feasible MCS.
    """
    violations: list[str] = []
    counts = decision.rb_counts()
    for k in np.flatnonzero(decision.admitted):
        if counts[k] < decision.n_rb_min[k]:
            violations.append(f"rate: user {k} holds {counts[k]} RBs < minimum {decision.n_rb_min[k]}")
    per_rb = decision.x.sum(axis=1)
    cap = cfg.group_cap
    for b in np.flatnonzero(per_rb > cap):
        violations.append(f"co-scheduling: RB {b} carries {per_rb[b]} users > {cap}")
    for k in range(decision.x.shape[1]):
        if decision.scheduled[k] or decision.admitted[k]:
            if decision.z[k].sum() != 1:
                violations.append(f"mcs-assignment: user {k} one-hot sum {decision.z[k].sum()}")
        elif decision.z[k].sum() != 0:
            violations.append(f"mcs-assignment: unscheduled user {k} has an MCS set")
    for k in range(decision.x.shape[1]):
        if decision.mcs[k] >= 0 and not decision.infeasible_mcs[k] \
                and math.isfinite(decision.decision_snr[k]):
            ser = ser_from_snr(float(decision.decision_snr[k]),
                               int(cfg.table.bits[decision.mcs[k]]))
            if ser > cfg.ser_max * (1.0 + 1e-9):
                violations.append(f"ser: user {k} decision-time SER {ser:.3g} > {cfg.ser_max}")
    return violations
