"""Makespan-minimizing rectangle allocation of GEMM shards to a device fleet.

Each GEMM at a level is split into per-device output rectangles: device k
receives alpha_k rows of A and beta_k columns of B and produces the
alpha_k x beta_k output tile. Rectangles must exactly partition the m x q
output grid (no overlap, full cover), every device is either idle
(alpha = beta = 0) or working (both positive), and each shard must respect
its device's memory capacity.

The solver replaces an external MILP with a deterministic scheme:

1. binary search on the per-instance cost budget tau, using a per-device
   capacity subproblem (largest feasible shard area at tau);
2. constructive tilings at the budget: capacity-proportional quotas realized
   by a balanced guillotine split ("treemap"), full-width row strips, and
   full-height column strips, all with exact integer cover;
3. a bounded quota-transfer polish loop that moves area away from the
   bottleneck device and re-tiles.

Levels with several repeated instances of a shape (`count`) execute them as
a pipelined stream; the level completion time follows the fill/steady/drain
pipeline model applied to per-instance bandwidth stage times, with link
overheads paid once per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cost_model import (
    CostBreakdown,
    cost_breakdown,
    effective_dl_rates,
    lower_bound_level,
    per_device_capacity,
    pipeline_time,
    shard_memory_bytes,
)
from .errors import InfeasibleError
from .fleet import DeviceSpec, FleetSpec
from .model_dag import GemmDag, GemmNode

BINARY_SEARCH_REL_TOL = 1e-4
BINARY_SEARCH_MAX_ITERS = 64


@dataclass(frozen=True)
class Assignment:
    gemm_id: str
    device_id: str
    alpha: int
    beta: int
    row_range: tuple[int, int]
    col_range: tuple[int, int]
    costs: CostBreakdown

    def __post_init__(self):
        if self.alpha != self.row_range[1] - self.row_range[0]:
            raise ValueError("alpha must equal the row_range width")
        if self.beta != self.col_range[1] - self.col_range[0]:
            raise ValueError("beta must equal the col_range width")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("recorded assignments must be working (alpha, beta > 0)")


@dataclass
class GemmAllocation:
    """Shared rectangle cover for all `count` instances of one shape."""

    node_ids: list[str]
    m: int
    n_inner: int
    q: int
    count: int
    assignments: list[Assignment]
    gemm_cost: float  # max over devices of per-instance max(dl, ul, comp)

    @property
    def key(self):
        return (self.m, self.n_inner, self.q)


@dataclass
class LevelPlan:
    level: int
    allocations: list[GemmAllocation]
    gemm_cost: float  # per-instance cost of the slowest shard at the level
    stream_time: float  # pipelined completion over all instances
    end_time: float
    lower_bound: float


@dataclass
class SchedulePlan:
    levels: list[LevelPlan]
    makespan: float
    dtype_bytes: int
    ps_update_time: float = 0.0
    device_ids: tuple = ()

    @property
    def num_levels(self):
        return len(self.levels)


@dataclass
class CacheState:
    """Row/column presence per device for one allocation's level.

    rows[device_id] / cols[device_id] hold half-open index intervals of A
    rows and B columns shipped to the device and retained for the duration
    of the level (no eviction within a level).
    """

    rows: dict = field(default_factory=dict)
    cols: dict = field(default_factory=dict)

    @classmethod
    def from_allocation(cls, alloc: GemmAllocation) -> "CacheState":
        state = cls()
        for a in alloc.assignments:
            state.rows.setdefault(a.device_id, []).append(a.row_range)
            state.cols.setdefault(a.device_id, []).append(a.col_range)
        return state

    @staticmethod
    def _overlap(intervals, lo, hi) -> int:
        covered = 0
        for a, b in sorted(intervals):
            covered += max(0, min(b, hi) - max(a, lo))
        return covered

    def cached_rows(self, device_id, lo, hi) -> int:
        return self._overlap(self.rows.get(device_id, ()), lo, hi)

    def cached_cols(self, device_id, lo, hi) -> int:
        return self._overlap(self.cols.get(device_id, ()), lo, hi)


# ---------------------------------------------------------------------------
# integer apportionment and tiling constructions
# ---------------------------------------------------------------------------


def _apportion(total: int, weights) -> list[int]:
    """Split `total` into integers proportional to `weights` (largest
    remainder, deterministic tie-break by index)."""
    wsum = float(sum(weights))
    if wsum <= 0 or total <= 0:
        return [0] * len(weights)
    raw = [w * total / wsum for w in weights]
    base = [int(x) for x in raw]
    rem = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (base[i] - raw[i], i))
    for i in order[:rem]:
        base[i] += 1
    return base


def _round_to_block(value: int, block: int, upper: int) -> int:
    if block <= 1:
        return value
    snapped = int(round(value / block)) * block
    return max(0, min(upper, snapped))


def _treemap(rects_out, r0, c0, mm, qq, items, block, prefer):
    """Recursive balanced guillotine split; items are (slot, area) with
    areas summing exactly to mm*qq. Appends (slot, r0, c0, mm, qq) leaves."""
    items = [(slot, a) for slot, a in items if a > 0]
    if not items:
        return
    if len(items) == 1:
        rects_out.append((items[0][0], r0, c0, mm, qq))
        return
    total = mm * qq
    half = total / 2.0
    acc = 0
    k = 1
    best_gap = None
    for i in range(1, len(items)):
        acc += items[i - 1][1]
        gap = abs(acc - half)
        if best_gap is None or gap < best_gap:
            best_gap, k = gap, i
    left, right = items[:k], items[k:]
    area_l = sum(a for _, a in left)
    cut_rows = mm >= qq if prefer == "long" else mm <= qq
    if mm <= 1:
        cut_rows = False
    if qq <= 1:
        cut_rows = True
    if cut_rows:
        cut = int(round(mm * area_l / total))
        cut = _round_to_block(cut, block, mm)
        cut = max(1, min(mm - 1, cut)) if 0 < area_l < total else max(0, min(mm, cut))
        _treemap(rects_out, r0, c0, cut, qq, _rescale(left, cut * qq), block, prefer)
        _treemap(rects_out, r0 + cut, c0, mm - cut, qq, _rescale(right, (mm - cut) * qq), block, prefer)
    else:
        cut = int(round(qq * area_l / total))
        cut = _round_to_block(cut, block, qq)
        cut = max(1, min(qq - 1, cut)) if 0 < area_l < total else max(0, min(qq, cut))
        _treemap(rects_out, r0, c0, mm, cut, _rescale(left, mm * cut), block, prefer)
        _treemap(rects_out, r0, c0 + cut, mm, qq - cut, _rescale(right, mm * (qq - cut)), block, prefer)


def _rescale(items, new_total):
    areas = _apportion(new_total, [a for _, a in items])
    return [(slot, na) for (slot, _), na in zip(items, areas)]


def _tile_treemap(m, q, quotas, block, prefer="long"):
    items = [(slot, a) for slot, a in enumerate(quotas)]
    rects = []
    _treemap(rects, 0, 0, m, q, items, block, prefer)
    return rects


def _tile_shelf(m, q, quotas, num_bands, axis, block=1):
    """Bands of rows (axis 0) or columns (axis 1), several devices per band.

    Devices are spread over bands by greedy quota balancing; band sizes and
    in-band widths are integer apportionments, so the cover is always exact.
    """
    extent = m if axis == 0 else q
    width = q if axis == 0 else m
    slots = sorted(
        (s for s in range(len(quotas)) if quotas[s] > 0), key=lambda s: (-quotas[s], s)
    )
    if not slots:
        return []
    nb = max(1, min(num_bands, len(slots), extent))
    bands = [[] for _ in range(nb)]
    loads = [0] * nb
    for s in slots:
        b = min(range(nb), key=lambda i: (loads[i], i))
        bands[b].append(s)
        loads[b] += quotas[s]
    sizes = _apportion(extent, loads)
    rects = []
    pos = 0
    for band, size in zip(bands, sizes):
        if size <= 0:
            continue
        widths = _apportion(width, [quotas[s] for s in band])
        wpos = 0
        for s, w in zip(band, widths):
            if w <= 0:
                continue
            if axis == 0:
                rects.append((s, pos, wpos, size, w))
            else:
                rects.append((s, wpos, pos, w, size))
            wpos += w
        pos += size
    return rects


# ---------------------------------------------------------------------------
# single-GEMM solve
# ---------------------------------------------------------------------------


@dataclass
class _Layout:
    rects: list  # (device_index, r0, c0, alpha, beta)
    cost: float  # max per-instance gemm cost; inf if memory-violating


class _GemmSolver:
    """Rectangle cover of one m x q output over a fixed device roster."""

    def __init__(self, m, n_inner, q, devices, dtype_bytes, dl_rates, mem_scale=1.0, block=1):
        self.m, self.n, self.q = m, n_inner, q
        self.devices = devices
        self.b = dtype_bytes
        self.block = block
        self.mem_scale = mem_scale
        self.dl = [dl_rates[d.id] for d in devices]
        self._scaled = [
            d if mem_scale >= 1.0 else _scale_mem(d, mem_scale) for d in devices
        ]
        # vectorized device arrays for the capacity search
        self.arr_wd = np.array(self.dl)
        self.arr_wu = np.array([d.ul_bw for d in devices])
        self.arr_f = np.array([d.flops for d in devices])
        self.arr_ld = np.array([d.dl_overhead for d in devices])
        self.arr_lu = np.array([d.ul_overhead for d in devices])
        self.arr_mem = np.array([d.mem_capacity * mem_scale for d in devices])

    # -- capacity --------------------------------------------------------

    def capacities(self, tau: float) -> np.ndarray:
        """Approximate per-device max shard area at budget tau (vectorized;
        the exact check happens on constructed integer rectangles)."""
        n, b = self.n, self.b
        sigma_cap = np.maximum(0.0, (tau - self.arr_ld) * self.arr_wd / (n * b))
        area_cap = np.minimum(
            np.maximum(0.0, (tau - self.arr_lu) * self.arr_wu / b),
            tau * self.arr_f / (2.0 * n),
        )
        area_cap = np.minimum(area_cap, float(self.m * self.q))
        mem_units = self.arr_mem / b
        # balanced-shape area at perimeter sigma, clamped by the grid edges
        short, long_ = min(self.m, self.q), max(self.m, self.q)

        def geom(sigma):
            balanced = np.square(sigma / 2.0)
            clamped = short * np.maximum(0.0, sigma - short)
            return np.where(sigma <= 2 * short, balanced, np.minimum(clamped, short * long_))

        # crossing of geom(sigma) with the memory line mem_units - sigma*n
        sig_hi = np.minimum(sigma_cap, float(self.m + self.q))
        lo = np.full_like(sig_hi, 2.0)
        hi = np.maximum(sig_hi, 2.0)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            take = geom(mid) <= np.maximum(0.0, mem_units - mid * n)
            lo = np.where(take, mid, lo)
            hi = np.where(take, hi, mid)
        best = np.minimum(np.minimum(geom(lo), np.maximum(0.0, mem_units - lo * n)), area_cap)
        best = np.where(sig_hi >= 2.0, best, 0.0)
        return np.floor(np.maximum(best, 0.0))

    def exact_capacity(self, idx: int, tau: float) -> int:
        return per_device_capacity(
            self._scaled[idx], self.m, self.q, self.n, tau, self.b, dl_bw=self.dl[idx]
        )

    def _beta_max(self, idx: int, h: int, tau: float, width: int) -> int:
        """Widest shard device idx can afford at band height h and budget tau."""
        d = self.devices[idx]
        if tau <= d.dl_overhead or tau <= d.ul_overhead or h < 1:
            return 0
        n, b = self.n, self.b
        w = min(
            float(width),
            (tau - d.dl_overhead) * self.dl[idx] / (n * b) - h,
            (tau - d.ul_overhead) * d.ul_bw / (b * h),
            tau * d.flops / (2.0 * n * h),
            (d.mem_capacity * self.mem_scale / b - h * n) / (n + h),
        )
        return int(math.floor(w + 1e-9)) if w >= 1.0 else 0

    def _band_height_max(self, group, tau: float, extent: int, width: int) -> int:
        """Tallest band the device group can fill to `width` at budget tau."""
        lo, hi = 0, extent
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if sum(self._beta_max(i, mid, tau, width) for i in group) >= width:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def _shelf_from_partition(self, groups, tau: float, axis: int):
        """Realize a band-per-group shelf at budget tau; None if infeasible."""
        extent = self.m if axis == 0 else self.q
        width = self.q if axis == 0 else self.m
        maxes = [self._band_height_max(g, tau, extent, width) for g in groups]
        if sum(maxes) < extent or extent < len(groups):
            return None
        rects = []
        pos = 0
        remaining = extent
        for gi, group in enumerate(groups):
            left = len(groups) - gi - 1
            h = max(1, min(maxes[gi], remaining - left))
            if gi == len(groups) - 1:
                h = remaining
            if h > maxes[gi]:
                return None
            betas = [self._beta_max(i, h, tau, width) for i in group]
            if sum(betas) < width:
                return None
            shares = _apportion(width, betas)
            # apportionment may exceed a member's affordable width: spill right
            spill = 0
            for j in range(len(group)):
                shares[j] += spill
                spill = max(0, shares[j] - betas[j])
                shares[j] = min(shares[j], betas[j])
            if spill > 0:
                for j in range(len(group)):
                    room = betas[j] - shares[j]
                    take = min(room, spill)
                    shares[j] += take
                    spill -= take
                if spill > 0:
                    return None
            wpos = 0
            for i, w in zip(group, shares):
                if w <= 0:
                    continue
                if axis == 0:
                    rects.append((i, pos, wpos, h, w))
                else:
                    rects.append((i, wpos, pos, w, h))
                wpos += w
            pos += h
            remaining -= h
        return rects

    @staticmethod
    def _set_partitions(items):
        """All partitions of `items` into nonempty groups (Bell-number many)."""
        if not items:
            yield []
            return
        first, rest = items[0], items[1:]
        for part in _GemmSolver._set_partitions(rest):
            for gi in range(len(part)):
                yield part[:gi] + [part[gi] + [first]] + part[gi + 1 :]
            yield part + [[first]]

    def _partition_shelf_best(self, tau_lo: float, tau_hi: float):
        """Binary-search the budget over exhaustive band partitions; only
        used for small device rosters where Bell(D) stays tiny."""
        active = [
            i
            for i in range(len(self.devices))
            if self.exact_capacity(i, tau_hi) >= 1
        ]
        if not active or len(active) > 6:
            return None
        partitions = [
            [sorted(g) for g in part] for part in self._set_partitions(active)
        ]

        def feasible(tau):
            for axis in (0, 1):
                for groups in partitions:
                    rects = self._shelf_from_partition(groups, tau, axis)
                    if rects is not None and sum(a * bb for _, _, _, a, bb in rects) == self.m * self.q:
                        return rects
            return None

        if feasible(tau_hi) is None:
            return None
        lo, hi = tau_lo, tau_hi
        for _ in range(BINARY_SEARCH_MAX_ITERS):
            if hi - lo <= BINARY_SEARCH_REL_TOL * hi:
                break
            mid = 0.5 * (lo + hi)
            if feasible(mid) is not None:
                hi = mid
            else:
                lo = mid
        rects = feasible(hi)
        if rects is None:
            return None
        layout = _Layout(rects=rects, cost=self.evaluate(rects))
        return self._swap_pass(layout)

    # -- layout evaluation ------------------------------------------------

    def rect_cost(self, idx: int, alpha: int, beta: int) -> float:
        d = self.devices[idx]
        if shard_memory_bytes(self.n, alpha, beta, self.b) > d.mem_capacity * self.mem_scale:
            return float("inf")
        return cost_breakdown(d, self.n, alpha, beta, self.b, dl_bw=self.dl[idx]).gemm_cost

    def evaluate(self, rects) -> float:
        worst = 0.0
        for idx, _, _, alpha, beta in rects:
            worst = max(worst, self.rect_cost(idx, alpha, beta))
        return worst

    def build(self, order, quotas) -> list[_Layout]:
        """All tiling families for one quota vector (device slots follow
        `order`); returns layouts with their exact achieved costs."""
        m, q = self.m, self.q
        rect_sets = [
            _tile_treemap(m, q, quotas, self.block, "long"),
            _tile_treemap(m, q, quotas, self.block, "short"),
        ]
        active = sum(1 for a in quotas if a > 0)
        if active <= 10:
            row_bands = range(1, min(m, active) + 1)
            col_bands = range(1, min(q, active) + 1)
        else:
            row_bands = sorted(
                {1, max(1, round(math.sqrt(active * m / q))) if q else 1, min(m, active)}
            )
            col_bands = sorted(
                {1, max(1, round(math.sqrt(active * q / m))) if m else 1, min(q, active)}
            )
        for nb in row_bands:
            rect_sets.append(_tile_shelf(m, q, quotas, nb, 0, self.block))
        for nb in col_bands:
            rect_sets.append(_tile_shelf(m, q, quotas, nb, 1, self.block))
        layouts = []
        for rects in rect_sets:
            mapped = [(order[slot], r0, c0, a, bb) for slot, r0, c0, a, bb in rects]
            layouts.append(_Layout(rects=mapped, cost=self.evaluate(mapped)))
        return layouts

    def _swap_pass(self, layout: _Layout) -> _Layout:
        """Reassign devices between rectangles when that lowers the peak."""
        rects = list(layout.rects)
        if len(rects) < 2 or len(rects) > 64:
            return layout
        costs = [self.rect_cost(idx, a, bb) for idx, _, _, a, bb in rects]
        improved = True
        passes = 0
        while improved and passes < 3:
            improved = False
            passes += 1
            worst = max(range(len(rects)), key=lambda i: costs[i])
            for j in range(len(rects)):
                if j == worst:
                    continue
                iw, rw0, cw0, aw, bw = rects[worst]
                ij, rj0, cj0, aj, bj = rects[j]
                new_w = self.rect_cost(ij, aw, bw)
                new_j = self.rect_cost(iw, aj, bj)
                if max(new_w, new_j) < costs[worst]:
                    rects[worst] = (ij, rw0, cw0, aw, bw)
                    rects[j] = (iw, rj0, cj0, aj, bj)
                    costs[worst], costs[j] = new_w, new_j
                    improved = True
                    worst = max(range(len(rects)), key=lambda i: costs[i])
        return _Layout(rects=rects, cost=max(costs))

    # -- solve -----------------------------------------------------------

    def _quotas_at(self, tau: float):
        caps = self.capacities(tau)
        order = sorted(range(len(self.devices)), key=lambda i: (-caps[i], self.devices[i].id))
        need = self.m * self.q
        chosen, acc = [], 0.0
        for i in order:
            if caps[i] < 1:
                break
            chosen.append(i)
            acc += caps[i]
            if acc >= need:
                break
        if acc < need:
            return None, None
        quotas = _apportion(need, [float(caps[i]) for i in chosen])
        return chosen, quotas

    def solve(self, polish_iters=None, quality: str = "full") -> _Layout | None:
        need = self.m * self.q
        if need <= 0:
            return _Layout(rects=[], cost=0.0)
        # upper bound: grow until aggregate capacity covers the grid
        hi = 1e-3
        for _ in range(80):
            if float(self.capacities(hi).sum()) >= need:
                break
            hi *= 2.0
        else:
            return None
        lo = 0.0
        for _ in range(BINARY_SEARCH_MAX_ITERS):
            if hi - lo <= BINARY_SEARCH_REL_TOL * hi:
                break
            mid = 0.5 * (lo + hi)
            if float(self.capacities(mid).sum()) >= need:
                hi = mid
            else:
                lo = mid
        tau_floor = hi  # capacity relaxation: no schedule beats this budget

        best = None
        tau = hi
        for _ in range(12):  # constructions may need more headroom than caps
            chosen, quotas = self._quotas_at(tau)
            if chosen is not None:
                for layout in self.build(chosen, quotas):
                    layout = self._swap_pass(layout)
                    if best is None or layout.cost < best.cost:
                        best = layout
                if best is not None and math.isfinite(best.cost):
                    break
            tau *= 1.3
        shelf_cap = tau  # partition search upper bound must be constructible

        if quality == "full":
            iters = polish_iters
            if iters is None:
                iters = 60 if len(self.devices) <= 256 else 8
            if best is not None:
                best = self._polish(best, iters)
            needs_more = (
                best is None
                or not math.isfinite(best.cost)
                or best.cost > 1.02 * tau_floor
            )
            if needs_more and len(self.devices) <= 16:
                upper = best.cost if best is not None and math.isfinite(best.cost) else shelf_cap * 4
                candidate = self._partition_shelf_best(tau_floor * 0.5, upper)
                if candidate is not None and (best is None or candidate.cost < best.cost):
                    best = self._polish(candidate, iters)
            elif best is not None and math.isfinite(best.cost):
                # water-filling style descent: re-derive quotas at the result
                for _ in range(3):
                    chosen, quotas = self._quotas_at(best.cost * 0.97)
                    if chosen is None:
                        break
                    candidate = min(
                        (self._swap_pass(l) for l in self.build(chosen, quotas)),
                        key=lambda l: l.cost,
                    )
                    candidate = self._polish(candidate, iters)
                    if candidate.cost < best.cost:
                        best = candidate
                    else:
                        break
        if best is None or not math.isfinite(best.cost):
            return None
        return best

    def _polish(self, best: _Layout, iters: int) -> _Layout:
        """Move area away from the bottleneck shard, re-tile, swap devices."""
        if not best.rects or iters <= 0:
            return best
        current = best
        for _ in range(iters):
            order = [idx for idx, *_ in current.rects]
            quotas = [a * bb for _, _, _, a, bb in current.rects]
            costs = [self.rect_cost(idx, a, bb) for idx, _, _, a, bb in current.rects]
            if len(costs) < 2:
                break
            hot = max(range(len(costs)), key=lambda i: costs[i])
            colds = sorted(range(len(costs)), key=lambda i: costs[i])[:3]
            improved = None
            for delta in (max(1, quotas[hot] // 8), 1):
                if quotas[hot] - delta < 1:
                    continue
                for cold in colds:
                    if cold == hot:
                        continue
                    trial = list(quotas)
                    trial[hot] -= delta
                    trial[cold] += delta
                    candidate = min(
                        (self._swap_pass(l) for l in self.build(order, trial)),
                        key=lambda l: l.cost,
                    )
                    if candidate.cost < current.cost and (
                        improved is None or candidate.cost < improved.cost
                    ):
                        improved = candidate
                if improved is not None:
                    break
            if improved is None:
                break
            current = improved
        return current


def _scale_mem(device: DeviceSpec, scale: float) -> DeviceSpec:
    from dataclasses import replace

    return replace(device, mem_capacity=device.mem_capacity * scale)


# ---------------------------------------------------------------------------
# level and DAG scheduling
# ---------------------------------------------------------------------------


def _group_level(nodes: list[GemmNode]):
    groups: dict[tuple, dict] = {}
    for node in nodes:
        key = (node.m, node.n_inner, node.q)
        entry = groups.setdefault(key, {"ids": [], "count": 0})
        entry["ids"].append(node.id)
        entry["count"] += node.count
    return groups


def min_makespan_level(
    nodes: list[GemmNode],
    fleet: FleetSpec,
    dtype_bytes: int,
    block: int = 1,
    dl_rates: dict | None = None,
    solve_cache: dict | None = None,
    polish_iters: int | None = None,
    quality: str = "full",
) -> dict:
    """Allocate every GEMM of one level; returns allocations plus the level
    cost under the per-instance objective (max over GEMMs and devices of the
    shard cost) and the pipelined stream time over repeated instances."""
    dl_rates = dl_rates or effective_dl_rates(fleet)
    groups = _group_level(nodes)
    mem_scale = 1.0 / len(groups)
    allocations = []
    for (m, n, q), entry in groups.items():
        cache_key = (m, n, q, dtype_bytes, block, mem_scale)
        solved = solve_cache.get(cache_key) if solve_cache is not None else None
        if solved is None:
            solver = _GemmSolver(
                m, n, q, fleet.devices, dtype_bytes, dl_rates, mem_scale=mem_scale, block=block
            )
            layout = solver.solve(polish_iters=polish_iters, quality=quality)
            if layout is None:
                raise InfeasibleError(
                    f"GEMM ({m}x{n}x{q}) cannot be covered by the fleet under memory bounds"
                )
            solved = (layout, solver)
            if solve_cache is not None:
                solve_cache[cache_key] = solved
        layout, solver = solved
        assignments = [
            Assignment(
                gemm_id=entry["ids"][0],
                device_id=fleet.devices[idx].id,
                alpha=alpha,
                beta=beta,
                row_range=(r0, r0 + alpha),
                col_range=(c0, c0 + beta),
                costs=cost_breakdown(
                    fleet.devices[idx], n, alpha, beta, dtype_bytes, dl_bw=solver.dl[idx]
                ),
            )
            for idx, r0, c0, alpha, beta in layout.rects
        ]
        allocations.append(
            GemmAllocation(
                node_ids=list(entry["ids"]),
                m=m,
                n_inner=n,
                q=q,
                count=entry["count"],
                assignments=assignments,
                gemm_cost=layout.cost,
            )
        )
    gemm_cost = max(a.gemm_cost for a in allocations)
    stream = level_stream_time(allocations, fleet, dtype_bytes, dl_rates)
    return {"allocations": allocations, "gemm_cost": gemm_cost, "stream_time": stream}


def device_stream_time(device: DeviceSpec, shards, dl_bw: float) -> float:
    """Completion time of one device's level stream.

    `shards` is a list of (n_inner, alpha, beta, count, dtype_bytes). Link
    overheads are paid once per level; each shape's instances pipeline at
    bandwidth/compute stage rates.
    """
    if not shards:
        return 0.0
    total = device.dl_overhead + device.ul_overhead
    for n, alpha, beta, count, b in shards:
        t_dl = (alpha + beta) * n * b / dl_bw
        t_comp = 2.0 * alpha * beta * n / device.flops
        t_ul = alpha * beta * b / device.ul_bw
        total += pipeline_time(t_dl, t_comp, t_ul, count)
    return total


def level_stream_time(allocations, fleet: FleetSpec, dtype_bytes, dl_rates) -> float:
    per_device: dict[str, list] = {}
    for alloc in allocations:
        for a in alloc.assignments:
            per_device.setdefault(a.device_id, []).append(
                (alloc.n_inner, a.alpha, a.beta, alloc.count, dtype_bytes)
            )
    worst = 0.0
    for device_id, shards in per_device.items():
        d = fleet.device(device_id)
        worst = max(worst, device_stream_time(d, shards, dl_rates[device_id]))
    return worst


def schedule_dag(
    dag: GemmDag,
    fleet: FleetSpec,
    dtype_bytes: int | None = None,
    block: int = 1,
    polish_iters: int | None = None,
    quality: str = "full",
) -> SchedulePlan:
    """Solve every level and chain completion times.

    Levels run strictly in order: each level's end time is its predecessor's
    end plus its own stream time; the makespan is the last level's end time
    plus any parameter-server update work not hidden behind the backward
    pass. Shape solves are cached and reused across levels.
    """
    b = dtype_bytes if dtype_bytes is not None else dag.model.dtype_bytes
    dl_rates = effective_dl_rates(fleet)
    solve_cache: dict = {}
    levels = []
    end = 0.0
    backward_span = 0.0
    for idx, nodes in enumerate(dag.levels):
        try:
            solved = min_makespan_level(
                nodes,
                fleet,
                b,
                block=block,
                dl_rates=dl_rates,
                solve_cache=solve_cache,
                polish_iters=polish_iters,
                quality=quality,
            )
        except InfeasibleError as exc:
            raise InfeasibleError(f"level {idx}: {exc}", level=idx) from None
        end += solved["stream_time"]
        if any(n.kind.endswith(("_dgrad", "_wgrad")) for n in nodes):
            backward_span += solved["stream_time"]
        levels.append(
            LevelPlan(
                level=idx,
                allocations=solved["allocations"],
                gemm_cost=solved["gemm_cost"],
                stream_time=solved["stream_time"],
                end_time=end,
                lower_bound=lower_bound_level(nodes, fleet),
            )
        )
    from .model_dag import parameter_count

    ps_update = (
        parameter_count(dag.model) * fleet.ps.update_flops_per_param / fleet.ps.update_flops
    )
    residual = max(0.0, ps_update - backward_span)
    return SchedulePlan(
        levels=levels,
        makespan=end + residual,
        dtype_bytes=b,
        ps_update_time=ps_update,
        device_ids=tuple(d.id for d in fleet.devices),
    )


def plan_table(plan: SchedulePlan) -> str:
    """One row per (gemm, assignment): id, device, ranges, cost split."""
    lines = ["gemm_id device_id row_lo row_hi col_lo col_hi dl_s ul_s comp_s"]
    for level in plan.levels:
        for alloc in level.allocations:
            for node_id in alloc.node_ids:
                for a in alloc.assignments:
                    lines.append(
                        f"{node_id} {a.device_id} {a.row_range[0]} {a.row_range[1]} "
                        f"{a.col_range[0]} {a.col_range[1]} "
                        f"{a.costs.dl_cost!r} {a.costs.ul_cost!r} {a.costs.comp_cost!r}"
                    )
    return "\n".join(lines) + "\n"
