"""Per-device strategy optimization and the divergence/convergence theory.

Each round a device picks (alpha, beta, f): how much of the model to train,
how hard to compress the upload and what clock rate to run at, maximizing
its learning gain g = alpha^4 * beta under latency and energy budgets.

The search collapses to one variable, the compute share of the round
phi = t_cmp / T_max. With tp = T_max * P_com and kappa a constant of the
environment, the gain becomes

    g(phi) = kappa * (E_max - (1 - phi) * tp) * (phi^2 - phi^3)

whose two stationary points follow from the quadratic factor of g', via the
discriminant psi = 4*tp^2 - 4*E_max*tp + 9*E_max^2.
The maximizer is found by evaluating g over the feasible stationary points
and interval endpoints, then alpha, beta and f are recovered by
back-substitution and clamped to their boxes (alpha first, then beta from
the now-fixed communication slot). A final pass through the cost model
rejects any strategy that the clamps pushed over budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .sysmodel import CostBreakdown, DeviceProfile, TaskProfile, round_cost

_REL_TOL = 1e-9


@dataclass(frozen=True)
class Budget:
    """Per-round resource limits and decision boxes for one device.

    Clock bounds left as None fall back to the device profile's own range.
    """

    t_max: float
    e_max: float
    alpha_min: float = 0.25
    beta_min: float = 1e-4
    beta_max: float = 1.0 / 15.0
    f_min: float | None = None
    f_max: float | None = None

    def __post_init__(self) -> None:
        if self.t_max <= 0 or self.e_max <= 0:
            raise ValueError("budgets must be positive")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError("alpha_min must be in (0, 1]")
        if not 0.0 < self.beta_min <= self.beta_max <= 1.0:
            raise ValueError("need 0 < beta_min <= beta_max <= 1")
        if self.f_min is not None and self.f_min <= 0:
            raise ValueError("f_min must be positive")
        if self.f_min is not None and self.f_max is not None and self.f_min > self.f_max:
            raise ValueError("need f_min <= f_max")


@dataclass
class TrainingStrategy:
    alpha: float
    beta: float
    f: float
    phi: float
    varphi: float
    kappa: float
    psi: float
    phi_candidates: tuple[float, ...]
    gain: float
    feasible: bool
    interior: bool


def local_gain(phi: float, e_max: float, t_max: float, p_com: float, kappa: float) -> float:
    """g(phi) = kappa * (e_max - (1 - phi) * t_max * p_com) * (phi^2 - phi^3)."""
    tp = t_max * p_com
    return kappa * (e_max - (1.0 - phi) * tp) * (phi * phi - phi**3)


def _stationary_points(e_max: float, tp: float) -> tuple[float, float, float]:
    """psi and the two stationary phi values of the one-variable gain."""
    psi = 4.0 * tp * tp - 4.0 * e_max * tp + 9.0 * e_max * e_max
    root = sqrt(psi)
    phi_s1 = (root - 3.0 * e_max) / (8.0 * tp) + 0.75
    phi_s2 = -(root + 3.0 * e_max) / (8.0 * tp) + 0.75
    return psi, phi_s1, phi_s2


def _infeasible(kappa: float, psi: float, candidates: tuple[float, ...]) -> TrainingStrategy:
    return TrainingStrategy(
        alpha=0.0, beta=0.0, f=0.0, phi=0.0, varphi=0.0, kappa=kappa, psi=psi,
        phi_candidates=candidates, gain=0.0, feasible=False, interior=False,
    )


def solve_strategy(
    device: DeviceProfile, task: TaskProfile, budget: Budget, rate_bps: float
) -> TrainingStrategy:
    """Closed-form (alpha, beta, f) for one device and one round.

    Infeasible environments (the compute-share interval is empty, the energy
    budget cannot even cover the uplink, or box clamping breaks a budget)
    return feasible=False, meaning the device skips the round.
    """
    if rate_bps <= 0:
        raise ValueError("rate must be positive")
    if device.shard_size < 1:
        raise ValueError("device has no data")
    t_max, e_max = budget.t_max, budget.e_max
    work = task.local_epochs * device.shard_size * task.workload_per_sample  # tau |D| W
    if work <= 0:
        raise ValueError("zero training workload")
    s_bits = task.update_bits
    tp = t_max * device.tx_power_w
    kappa = rate_bps / (s_bits * device.energy_coeff) * (t_max / work) ** 3
    f_lo = budget.f_min if budget.f_min is not None else device.f_min
    f_hi = budget.f_max if budget.f_max is not None else device.f_max
    if not 0.0 < f_lo <= f_hi:
        raise ValueError("empty clock range")

    phi_min = max(
        budget.alpha_min * work / (f_hi * t_max),
        1.0 - budget.beta_max * s_bits / (rate_bps * t_max),
    )
    phi_max = min(
        work / (f_lo * t_max),
        1.0 - budget.alpha_min * budget.beta_min * s_bits / (rate_bps * t_max),
    )
    psi, phi_s1, phi_s2 = _stationary_points(e_max, tp)
    if phi_min > phi_max:
        return _infeasible(kappa, psi, ())

    candidates = tuple(
        phi for phi in (phi_min, phi_max, phi_s1, phi_s2) if phi_min <= phi <= phi_max
    )
    gains = [local_gain(phi, e_max, t_max, device.tx_power_w, kappa) for phi in candidates]
    best = int(np.argmax(gains))
    phi = candidates[best]
    if gains[best] <= 0.0 or phi <= 0.0:
        return _infeasible(kappa, psi, candidates)

    varphi = 1.0 - (1.0 - phi) * tp / e_max  # share of energy left for compute
    alpha_raw = (varphi * e_max * (phi * t_max) ** 2 / (device.energy_coeff * work**3)) ** (1.0 / 3.0)
    alpha = float(np.clip(alpha_raw, budget.alpha_min, 1.0))
    f = alpha * work / (phi * t_max)  # keeps t_cmp = phi * t_max
    clamped = alpha != alpha_raw
    if f > f_hi:
        # not enough clock to finish alpha in the compute slot; shrink alpha
        f = f_hi
        alpha = float(np.clip(f * phi * t_max / work, budget.alpha_min, 1.0))
        clamped = True
    if f < f_lo:
        f = f_lo
        clamped = True
    beta_raw = rate_bps * (1.0 - phi) * t_max / (alpha * s_bits)
    beta = float(np.clip(beta_raw, budget.beta_min, budget.beta_max))
    clamped = clamped or beta != beta_raw

    strategy = TrainingStrategy(
        alpha=alpha, beta=beta, f=f, phi=phi, varphi=varphi, kappa=kappa, psi=psi,
        phi_candidates=candidates, gain=alpha**4 * beta, feasible=True,
        interior=not clamped,
    )
    cost = round_cost(strategy, device, task, rate_bps)
    if cost.t_total > t_max * (1 + _REL_TOL) or cost.e_total > e_max * (1 + _REL_TOL):
        return _infeasible(kappa, psi, candidates)
    return strategy


# ---------------------------------------------------------------------------
# divergence and convergence theory


def divergence_factor(alpha: float, beta: float) -> float:
    """1 - alpha * (2 - alpha) * sqrt(beta), the per-device compression loss scale."""
    return 1.0 - alpha * (2.0 - alpha) * sqrt(beta)


def divergence_bound(alpha: float, beta: float, update_norm_sq: float) -> float:
    """Upper bound on E||u - decoded(u)||^2 for a width-alpha, ratio-beta upload."""
    return divergence_factor(alpha, beta) ** 2 * update_norm_sq


def global_divergence_bound(
    strategies, weights, n_devices: int, epsilon: float, lr: float, grad_norm_sq: float
) -> float:
    """Aggregate divergence bound: I * eps * lr^2 * sum_i p_i^2 d_i^2 * ||grad F||^2."""
    weights = np.asarray(weights, dtype=np.float64)
    d = np.array([divergence_factor(a, b) for a, b in strategies])
    return float(n_devices * epsilon * lr**2 * np.sum(weights**2 * d**2) * grad_norm_sq)


@dataclass(frozen=True)
class GainReport:
    per_device: tuple[float, ...]
    mean: float


def learning_gains(strategies) -> GainReport:
    """g_i = alpha_i^4 * beta_i per device, and the round mean."""
    gains = tuple(float(a**4 * b) for a, b in strategies)
    if not gains:
        raise ValueError("no strategies")
    return GainReport(per_device=gains, mean=float(np.mean(gains)))


def convergence_factor(nu: float, lam: float, epsilon: float, g_min: float) -> float:
    """Z = 1 - (nu / lam) * (1 - epsilon * (1 - g_min)).

    Z < 1 means the expected optimality gap contracts every round; smaller
    minimum round gain g_min pushes Z toward (and past) 1.
    """
    if nu <= 0 or lam <= 0:
        raise ValueError("nu and lam must be positive")
    if not 0.0 <= g_min <= 1.0:
        raise ValueError("g_min must be in [0, 1]")
    return 1.0 - (nu / lam) * (1.0 - epsilon * (1.0 - g_min))
