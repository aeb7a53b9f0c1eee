"""Exhaustive optimum for tiny rectangle-allocation instances.

Enumerates every guillotine partition of the m x q output grid at single
row/column granularity together with every device-to-rectangle assignment,
under the same shard cost formulas as the heuristic solver. With at most
four rectangles every exact rectangle partition of a rectangle is a
guillotine partition (the smallest non-guillotine tiling needs five
pieces), so for fleets of up to four devices this is the true optimum.

Intended purely as an independent verification oracle for the scheduler;
complexity explodes beyond the enforced size limits.
"""

from __future__ import annotations

from functools import lru_cache

from .cost_model import cost_breakdown, shard_memory_bytes
from .fleet import FleetSpec

ORACLE_MAX_DIM = 12
ORACLE_MAX_DEVICES = 4

_INF = float("inf")


def brute_force_oracle(m: int, n_inner: int, q: int, fleet: FleetSpec, dtype_bytes: int) -> float:
    """Minimum over all tilings of the worst per-device shard cost."""
    if m > ORACLE_MAX_DIM or q > ORACLE_MAX_DIM:
        raise ValueError(f"oracle limited to m, q <= {ORACLE_MAX_DIM}")
    if fleet.size > ORACLE_MAX_DEVICES:
        raise ValueError(f"oracle limited to {ORACLE_MAX_DEVICES} devices")
    devices = fleet.devices
    b = dtype_bytes

    # cost[k][alpha][beta], inf when the shard breaks the memory bound; the
    # table is square over max(m, q) because subproblems are canonicalized
    # by swapping dimensions (every cost term is (alpha, beta)-symmetric)
    maxd = max(m, q)
    cost = []
    for d in devices:
        table = [[_INF] * (maxd + 1) for _ in range(maxd + 1)]
        for alpha in range(1, maxd + 1):
            for beta in range(alpha, maxd + 1):
                if shard_memory_bytes(n_inner, alpha, beta, b) <= d.mem_capacity:
                    value = cost_breakdown(d, n_inner, alpha, beta, b).gemm_cost
                    table[alpha][beta] = value
                    table[beta][alpha] = value
        cost.append(table)

    full_mask = (1 << len(devices)) - 1

    @lru_cache(maxsize=None)
    def best(mm: int, qq: int, mask: int) -> float:
        if mm > qq:  # every cost term is symmetric in (alpha, beta)
            mm, qq = qq, mm
        value = _INF
        sub = mask
        while sub:
            k = (sub & -sub).bit_length() - 1
            value = min(value, cost[k][mm][qq])
            sub &= sub - 1
        if mask & (mask - 1) == 0:  # single device: no cut can help
            return value
        # split the device subset across one horizontal or vertical cut
        subsets = []
        sub = (mask - 1) & mask
        while sub:
            if sub & (mask & -mask):  # fix lowest bit on the left side: halves symmetry
                subsets.append(sub)
            sub = (sub - 1) & mask
        for left in subsets:
            right = mask ^ left
            for i in range(1, mm):
                value = min(value, max(best(i, qq, left), best(mm - i, qq, right)))
            for j in range(1, qq):
                value = min(value, max(best(mm, j, left), best(mm, qq - j, right)))
        return value

    result = best(m, q, full_mask)
    best.cache_clear()
    return result
