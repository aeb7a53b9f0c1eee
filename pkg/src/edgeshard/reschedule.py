"""Cache-aware rescheduling of shards lost to device failures.

When a device fails mid-level, the output rectangles it owed are re-covered
by the surviving devices. Survivors often already hold some of the required
A rows / B columns (tiles sharing a row band need the same A rows), so the
downlink term of the patch cost only charges rows and columns *not* present
in the survivor's cache; a fully cached patch costs zero downlink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cost_model import cost_breakdown, effective_dl_rates, shard_memory_bytes
from .errors import InfeasibleError
from .fleet import DeviceSpec, FleetSpec
from .scheduler import (
    Assignment,
    CacheState,
    GemmAllocation,
    LevelPlan,
    _apportion,
    _GemmSolver,
    _tile_treemap,
)
from .cost_model import CostBreakdown


def patch_cost(
    device: DeviceSpec,
    n_inner: int,
    rect: tuple[int, int, int, int],
    cache: CacheState,
    dtype_bytes: int,
    dl_bw: float,
) -> CostBreakdown:
    """Shard cost with the downlink discounted for cached rows/columns."""
    r0, r1, c0, c1 = rect
    alpha, beta = r1 - r0, c1 - c0
    unc_rows = alpha - cache.cached_rows(device.id, r0, r1)
    unc_cols = beta - cache.cached_cols(device.id, c0, c1)
    if unc_rows == 0 and unc_cols == 0:
        dl = 0.0
    else:
        dl = (unc_rows + unc_cols) * n_inner * dtype_bytes / dl_bw + device.dl_overhead
    ul = alpha * beta * dtype_bytes / device.ul_bw + device.ul_overhead
    comp = 2.0 * alpha * beta * n_inner / device.flops
    return CostBreakdown(dl_cost=dl, ul_cost=ul, comp_cost=comp)


@dataclass
class PatchResult:
    """Re-cover of failed rectangles over the surviving fleet.

    Each assignment covers its rectangle for `copy_shares[i]` of the lost
    instances: tile-split patches give every survivor a sub-rectangle for
    all lost instances, copy-split patches give survivors the whole failed
    rectangle for disjoint instance subsets. Per-(instance, cell) work is
    conserved: sum(area_i * copy_shares[i]) == failed_area * lost_count.
    """

    assignments: list[Assignment]
    copy_shares: list[int]
    recovery_gemm_cost: float  # worst per-instance patch shard cost
    recovery_time: float  # stream completion over the lost instances
    failed_area: int
    patched_area: int  # per-instance re-covered area (== failed_area)
    lost_count: int
    dl_bytes: int  # downlink bytes actually shipped after cache hits
    updated_cache: CacheState


def _cache_cuts(cache: CacheState, lo: int, hi: int, rows: bool) -> list[int]:
    points = {lo, hi}
    source = cache.rows if rows else cache.cols
    for intervals in source.values():
        for a, b in intervals:
            if lo < a < hi:
                points.add(a)
            if lo < b < hi:
                points.add(b)
    return sorted(points)


def _aligned_strips(rect, devices, caps, cache, axis):
    """Strips aligned to cache-interval boundaries: each segment goes to the
    unused device covering most of it (capability breaks ties); adjacent
    segments won by the same device merge into one rectangle."""
    r0, r1, c0, c1 = rect
    lo, hi = (r0, r1) if axis == 0 else (c0, c1)
    cuts = _cache_cuts(cache, lo, hi, rows=(axis == 0))
    width = (c1 - c0) if axis == 0 else (r1 - r0)
    remaining = {i: caps[i] for i in range(len(devices)) if caps[i] >= 1}
    rects = []
    current = None  # (device_index, start)
    pos = cuts[0]
    for nxt in cuts[1:]:
        seg = nxt - pos
        need = seg * width

        def coverage(i):
            d = devices[i]
            if axis == 0:
                return cache.cached_rows(d.id, pos, nxt)
            return cache.cached_cols(d.id, pos, nxt)

        if current is not None and remaining.get(current[0], 0) >= need:
            pick = current[0]
        else:
            if current is not None:
                i, start = current
                rects.append((i, start, pos))
                remaining.pop(i, None)
                current = None
            candidates = [i for i, cap in remaining.items() if cap >= need]
            if not candidates:
                candidates = list(remaining)
            if not candidates:
                return None
            pick = max(candidates, key=lambda i: (coverage(i), devices[i].flops, -i))
        if current is None or current[0] != pick:
            if current is not None:
                i, start = current
                rects.append((i, start, pos))
                remaining.pop(i, None)
            current = (pick, pos)
        remaining[pick] = remaining.get(pick, 0) - need
        pos = nxt
    if current is not None:
        rects.append((current[0], current[1], pos))
    out = []
    for i, start, end in rects:
        if axis == 0:
            out.append((i, start, c0, end - start, c1 - c0))
        else:
            out.append((i, r0, start, r1 - r0, end - start))
    return out


def _patch_stream_time(device, n_inner, rect_dims, cache_rows, cache_cols, count, b, dl_bw):
    """Stream time for one survivor re-running `count` instances of a patch
    tile. Columns shipped for the first instance stay cached (no eviction
    within a level), so steady-state downlink carries rows only; rows differ
    per instance and are always shipped."""
    alpha, beta = rect_dims
    unc_rows = alpha - cache_rows
    unc_cols = beta - cache_cols
    t_dl_first = (unc_rows + unc_cols) * n_inner * b / dl_bw
    t_dl_steady = unc_rows * n_inner * b / dl_bw
    t_comp = 2.0 * alpha * beta * n_inner / device.flops
    t_ul = alpha * beta * b / device.ul_bw
    stream = t_dl_first + pipeline_time(t_dl_steady, t_comp, t_ul, count) - t_dl_steady
    overhead = device.ul_overhead + (device.dl_overhead if (unc_rows or unc_cols) else 0.0)
    return stream + overhead


def _cover_rect(rect, n_inner, devices, cache, dtype_bytes, dl_rates, lost_count):
    """Cover one failed rectangle's lost instances on the survivors.

    Strategies, all evaluated under the cache-discounted cost, best wins:
    whole-rect on the best single survivor; budget-searched tile split (the
    regular rectangle solver); cache-aligned strips; and an instance split
    that hands whole instances to survivors in capacity proportion.

    Returns (entries, worst_shard_cost, recovery_time) with entries
    (device_index, r0, c0, alpha, beta, copy_share).
    """
    r0, r1, c0, c1 = rect
    mm, qq = r1 - r0, c1 - c0
    b = dtype_bytes
    rates = [dl_rates[d.id] for d in devices]

    def shard_cost(i, rr0, cc0, a, bb):
        if shard_memory_bytes(n_inner, a, bb, b) > devices[i].mem_capacity:
            return float("inf")
        return patch_cost(
            devices[i], n_inner, (rr0, rr0 + a, cc0, cc0 + bb), cache, b, rates[i]
        ).gemm_cost

    def recovery(entries):
        per_device: dict[int, float] = {}
        for i, rr0, cc0, a, bb, share in entries:
            cr = cache.cached_rows(devices[i].id, rr0, rr0 + a)
            cc_ = cache.cached_cols(devices[i].id, cc0, cc0 + bb)
            t = _patch_stream_time(
                devices[i], n_inner, (a, bb), cr, cc_, share, b, rates[i]
            )
            per_device[i] = per_device.get(i, 0.0) + t
        return max(per_device.values(), default=0.0)

    def tile_candidate(rects):
        entries = [(i, rr0, cc0, a, bb, lost_count) for i, rr0, cc0, a, bb in rects]
        worst = max((shard_cost(*e[:5]) for e in entries), default=float("inf"))
        return entries, worst

    candidates = []

    # whole rectangle on the single best survivor
    singles = [(shard_cost(i, r0, c0, mm, qq), i) for i in range(len(devices))]
    best_single, best_idx = min(singles, key=lambda vi: (vi[0], vi[1]))
    if math.isfinite(best_single):
        candidates.append(tile_candidate([(best_idx, r0, c0, mm, qq)]))

    # budget-searched tile split via the regular solver (cache-unaware
    # construction; evaluation applies the cache discount, which can only
    # lower the realized cost)
    solver = _GemmSolver(mm, n_inner, qq, devices, b, {d.id: dl_rates[d.id] for d in devices})
    layout = solver.solve(polish_iters=8, quality="fast")
    if layout is not None:
        rects = [(i, r0 + rr, c0 + cc, a, bb) for i, rr, cc, a, bb in layout.rects]
        candidates.append(tile_candidate(rects))

    # cache-aligned strips in both orientations
    caps = solver.capacities(max(best_single, 1e-6) if math.isfinite(best_single) else 1e6)
    caps_list = [int(caps[i]) for i in range(len(devices))]
    for axis in (0, 1):
        rects = _aligned_strips(rect, devices, caps_list, cache, axis)
        if rects and sum(a * bb for *_, a, bb in rects) == mm * qq:
            candidates.append(tile_candidate(rects))

    # instance split: whole failed rectangle, instances shared out by
    # capability (columns cache across a survivor's consecutive instances)
    if lost_count > 1:
        able = [i for i in range(len(devices)) if math.isfinite(shard_cost(i, r0, c0, mm, qq))]
        if able:
            weights = [devices[i].flops for i in able]
            shares = _apportion(lost_count, weights)
            entries = [
                (i, r0, c0, mm, qq, share)
                for i, share in zip(able, shares)
                if share > 0
            ]
            worst = max(shard_cost(*e[:5]) for e in entries)
            candidates.append((entries, worst))

    candidates = [(e, w) for e, w in candidates if e and math.isfinite(w)]
    if not candidates:
        raise InfeasibleError(f"survivors cannot absorb failed rectangle of area {mm * qq}")
    scored = [(recovery(entries), worst, entries) for entries, worst in candidates]
    scored.sort(key=lambda s: (s[0], s[1]))
    best_time, best_worst, best_entries = scored[0]
    return best_entries, best_worst, best_time


def reschedule_on_failure(
    alloc: GemmAllocation,
    cache: CacheState,
    failed_ids: set,
    fleet_live: FleetSpec,
    dtype_bytes: int,
    lost_count: int | None = None,
    dl_rates: dict | None = None,
) -> PatchResult:
    """Re-cover the failed devices' rectangles of one allocation on the
    surviving fleet. `lost_count` is how many of the allocation's repeated
    instances were still in flight (defaults to all of them)."""
    failed_rects = [
        (a.row_range[0], a.row_range[1], a.col_range[0], a.col_range[1])
        for a in alloc.assignments
        if a.device_id in failed_ids
    ]
    if not failed_rects:
        raise InfeasibleError("no failed assignments to reschedule at this level")
    live = [d for d in fleet_live.devices if d.id not in failed_ids]
    if not live:
        raise InfeasibleError("no surviving devices")
    dl_rates = dl_rates or effective_dl_rates(fleet_live)
    count = alloc.count if lost_count is None else lost_count
    count = max(1, count)

    b = dtype_bytes
    assignments = []
    copy_shares = []
    per_device_time: dict[str, float] = {}
    worst_cost = 0.0
    dl_bytes = 0
    new_rows: dict[str, list] = {k: list(v) for k, v in cache.rows.items()}
    new_cols: dict[str, list] = {k: list(v) for k, v in cache.cols.items()}

    for rect in failed_rects:
        entries, cost, _ = _cover_rect(rect, alloc.n_inner, live, cache, b, dl_rates, count)
        worst_cost = max(worst_cost, cost)
        for i, rr, cc, a, bb, share in entries:
            d = live[i]
            breakdown = patch_cost(
                d, alloc.n_inner, (rr, rr + a, cc, cc + bb), cache, b, dl_rates[d.id]
            )
            assignments.append(
                Assignment(
                    gemm_id=alloc.node_ids[0],
                    device_id=d.id,
                    alpha=a,
                    beta=bb,
                    row_range=(rr, rr + a),
                    col_range=(cc, cc + bb),
                    costs=breakdown,
                )
            )
            copy_shares.append(share)
            cached_r = cache.cached_rows(d.id, rr, rr + a)
            cached_c = cache.cached_cols(d.id, cc, cc + bb)
            unc_rows, unc_cols = a - cached_r, bb - cached_c
            # rows re-ship per instance, columns only for the first
            dl_bytes += (unc_rows * share + unc_cols) * alloc.n_inner * b
            t = _patch_stream_time(
                d, alloc.n_inner, (a, bb), cached_r, cached_c, share, b, dl_rates[d.id]
            )
            per_device_time[d.id] = per_device_time.get(d.id, 0.0) + t
            new_rows.setdefault(d.id, []).append((rr, rr + a))
            new_cols.setdefault(d.id, []).append((cc, cc + bb))

    recovery = max(per_device_time.values(), default=0.0)
    failed_area = sum((r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in failed_rects)
    per_instance_area = sum(a.alpha * a.beta * s for a, s in zip(assignments, copy_shares))
    return PatchResult(
        assignments=assignments,
        copy_shares=copy_shares,
        recovery_gemm_cost=worst_cost,
        recovery_time=recovery,
        failed_area=failed_area,
        patched_area=per_instance_area // count,
        lost_count=count,
        dl_bytes=dl_bytes,
        updated_cache=CacheState(rows=new_rows, cols=new_cols),
    )


def reschedule_level(
    level: LevelPlan,
    failed_ids: set,
    fleet_live: FleetSpec,
    dtype_bytes: int,
    lost_counts: dict | None = None,
) -> dict:
    """Patch every allocation at a level touched by the failed devices.

    Returns per-allocation PatchResults plus the combined recovery time
    (patches for different allocations share the survivor fleet, so their
    stream times add per device).
    """
    dl_rates = effective_dl_rates(fleet_live)
    results = {}
    for alloc in level.allocations:
        if not any(a.device_id in failed_ids for a in alloc.assignments):
            continue
        lost = None if lost_counts is None else lost_counts.get(alloc.key, alloc.count)
        patch = reschedule_on_failure(
            alloc,
            CacheState.from_allocation(alloc),
            failed_ids,
            fleet_live,
            dtype_bytes,
            lost_count=lost,
            dl_rates=dl_rates,
        )
        results[alloc.key] = patch
    # patches for different allocations run back to back on the survivors
    combined = sum(p.recovery_time for p in results.values())
    return {"patches": results, "recovery_time": combined}
