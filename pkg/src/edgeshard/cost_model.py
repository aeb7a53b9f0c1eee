"""Per-device cost model for a rectangular GEMM shard.

A device assigned `alpha` rows of A and `beta` columns of B downloads
(alpha*n + n*beta)*b bytes, computes 2*alpha*beta*n FLOPs, and uploads the
alpha x beta output tile (alpha*beta*b bytes). Downlink, uplink, and compute
streams overlap, so the shard cost is the max of the three. Everything a
device holds for the shard must fit its memory:

    alpha*n*b + n*beta*b + alpha*beta*b <= mem_capacity
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .fleet import DeviceSpec, FleetSpec


@dataclass(frozen=True)
class CostBreakdown:
    dl_cost: float
    ul_cost: float
    comp_cost: float

    @property
    def gemm_cost(self) -> float:
        return max(self.dl_cost, self.ul_cost, self.comp_cost)


def pipeline_time(t_dl: float, t_comp: float, t_ul: float, k: int) -> float:
    """Completion time of k units streamed through download/compute/upload:

        T_DL + (k-1)*max(T_DL, T_comp, T_UL) + T_comp + T_UL

    i.e. a fill phase, steady state at the slowest stage, and a drain phase.
    """
    if k < 1:
        raise ValueError(f"pipeline needs at least one unit, got k={k}")
    if min(t_dl, t_comp, t_ul) < 0:
        raise ValueError("stage times must be nonnegative")
    return t_dl + (k - 1) * max(t_dl, t_comp, t_ul) + t_comp + t_ul


def cost_breakdown(
    device: DeviceSpec,
    n_inner: int,
    alpha: int,
    beta: int,
    dtype_bytes: int,
    dl_bw: float | None = None,
) -> CostBreakdown:
    """Shard cost for one GEMM instance; `dl_bw` overrides the raw downlink
    rate when the parameter server egress share is lower."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"negative shard dims alpha={alpha} beta={beta}")
    w_d = device.dl_bw if dl_bw is None else dl_bw
    dl = (alpha * n_inner + n_inner * beta) * dtype_bytes / w_d + device.dl_overhead
    ul = alpha * beta * dtype_bytes / device.ul_bw + device.ul_overhead
    comp = 2.0 * alpha * beta * n_inner / device.flops
    return CostBreakdown(dl_cost=dl, ul_cost=ul, comp_cost=comp)


def shard_memory_bytes(n_inner: int, alpha: int, beta: int, dtype_bytes: int) -> int:
    return (alpha * n_inner + n_inner * beta + alpha * beta) * dtype_bytes


def _best_area_at_perimeter(sigma: int, m: int, q: int) -> int:
    """Max alpha*beta with alpha+beta = sigma, 1 <= alpha <= m, 1 <= beta <= q."""
    lo = max(1, sigma - q)
    hi = min(m, sigma - 1)
    if lo > hi:
        return 0
    best = 0
    for a in {max(lo, min(hi, sigma // 2)), max(lo, min(hi, (sigma + 1) // 2)), lo, hi}:
        best = max(best, a * (sigma - a))
    return best


def per_device_capacity(
    device: DeviceSpec,
    m: int,
    q: int,
    n_inner: int,
    budget: float,
    dtype_bytes: int,
    dl_bw: float | None = None,
) -> int:
    """Largest shard area alpha*beta whose dl/ul/comp costs all fit `budget`
    and whose working set fits device memory. Returns 0 when no positive
    (alpha, beta) pair is feasible, realizing the idle branch of the
    idle-or-working constraint.
    """
    if budget <= device.dl_overhead or budget <= device.ul_overhead:
        return 0
    w_d = device.dl_bw if dl_bw is None else dl_bw
    b = dtype_bytes
    # alpha+beta ceiling from downlink, area ceilings from uplink/compute
    sigma_cap = (budget - device.dl_overhead) * w_d / (n_inner * b)
    area_cap = min(
        (budget - device.ul_overhead) * device.ul_bw / b,
        budget * device.flops / (2.0 * n_inner),
        float(m * q),
    )
    if sigma_cap < 2.0 or area_cap < 1.0:
        return 0
    sigma_max = min(int(math.floor(sigma_cap)), m + q)
    if sigma_max < 2:
        return 0
    mem_units = device.mem_capacity / b  # alpha*n + n*beta + alpha*beta <= mem_units

    def value(sigma: int) -> float:
        geom = _best_area_at_perimeter(sigma, m, q)
        mem_room = mem_units - sigma * n_inner
        return min(float(geom), area_cap, mem_room)

    # value() is min(nondecreasing, decreasing) in sigma: find the crossing
    # where the geometric/area term stops being the binding one.
    lo, hi = 2, sigma_max
    while lo < hi:
        mid = (lo + hi + 1) // 2
        geom_side = min(float(_best_area_at_perimeter(mid, m, q)), area_cap)
        if geom_side <= mem_units - mid * n_inner:
            lo = mid
        else:
            hi = mid - 1
    best = 0.0
    for sigma in (lo - 1, lo, lo + 1, sigma_max):
        if 2 <= sigma <= sigma_max:
            best = max(best, value(sigma))
    return max(0, int(math.floor(best + 1e-9)))


def lower_bound_level(gemms, fleet: FleetSpec) -> float:
    """Level makespan lower bound from aggregate and per-GEMM compute:

        max( sum_i W_i / sum_k F_k ,  max_i W_i / F_max )

    with W_i = 2*m*n*q FLOPs per GEMM instance (counts expand instances).
    """
    if not fleet.devices:
        raise ValueError("fleet must be nonempty")
    total_flops = sum(2 * g.m * g.n_inner * g.q * g.count for g in gemms)
    max_single = max(2 * g.m * g.n_inner * g.q for g in gemms)
    fleet_flops = sum(d.flops for d in fleet.devices)
    f_max = max(d.flops for d in fleet.devices)
    return max(total_flops / fleet_flops, max_single / f_max)


def effective_dl_rates(fleet: FleetSpec) -> dict[str, float]:
    """Downlink rate per device after proportional sharing of the parameter
    server egress. When the summed device downlink demand exceeds the PS
    aggregate bandwidth, every device gets its proportional share."""
    total = sum(d.dl_bw for d in fleet.devices)
    if total <= fleet.ps.aggregate_bw:
        return {d.id: d.dl_bw for d in fleet.devices}
    scale = fleet.ps.aggregate_bw / total
    return {d.id: d.dl_bw * scale for d in fleet.devices}
