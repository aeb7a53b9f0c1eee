"""Deterministic per-batch execution of a schedule over a device fleet.

The simulation advances level by level (the DAG imposes a synchronization
barrier per level): each device streams its assigned shard instances
through download/compute/upload, the level ends when the slowest assigned
device finishes, and the next level starts at the barrier. Per-device
uplink/downlink volumes, busy time, barrier waits, and peak working-set
memory are tracked along the way.

Churn events are applied mid-batch: a failing device's unfinished shard
instances are re-covered on the survivors (cache-aware), extending the
current level; joining devices take part from the next level, which is
rescheduled against the grown fleet.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cost_model import effective_dl_rates, pipeline_time
from .errors import ConfigError, InfeasibleError
from .fleet import ChurnTrace, FleetSpec, sample_latency
from .model_dag import GemmDag, parameter_count
from .reschedule import reschedule_level
from .scheduler import SchedulePlan, device_stream_time, schedule_dag
from .verify import verify_gemm_output  # re-exported: output verification op

__all__ = [
    "SimConfig",
    "SimResult",
    "DeviceStats",
    "pipeline_time",
    "simulate_batch",
    "simulate_with_churn",
    "peak_memory",
    "run_ablation",
    "verify_gemm_output",
]

ABLATION_MODES = ("no_tp", "no_ps", "no_heterogeneity")


@dataclass(frozen=True)
class SimConfig:
    latency_mode: str = "deterministic"  # "deterministic" | "stochastic"
    seed: int = 0
    ablation: frozenset = frozenset()
    churn: ChurnTrace | None = None
    verify_outputs: bool = False

    def __post_init__(self):
        if self.latency_mode not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown latency mode {self.latency_mode!r}")
        bad = set(self.ablation) - set(ABLATION_MODES)
        if bad:
            raise ConfigError(f"unknown ablation flags {sorted(bad)}")


@dataclass
class DeviceStats:
    peak_mem: int = 0
    ul_volume: int = 0
    dl_volume: int = 0
    busy_time: float = 0.0


@dataclass
class SimResult:
    batch_runtime: float
    per_device: dict[str, DeviceStats]
    barrier_waits: list[float]
    recovery_events: list[dict] = field(default_factory=list)

    @property
    def max_peak_mem(self) -> int:
        return max((s.peak_mem for s in self.per_device.values()), default=0)

    @property
    def mean_ul(self) -> float:
        vols = [s.ul_volume for s in self.per_device.values()]
        return float(np.mean(vols)) if vols else 0.0

    @property
    def mean_dl(self) -> float:
        vols = [s.dl_volume for s in self.per_device.values()]
        return float(np.mean(vols)) if vols else 0.0


def _level_loads(level, dtype_bytes):
    """Per-device shard list [(n, alpha, beta, count, b)] and volume/memory."""
    loads: dict[str, list] = {}
    for alloc in level.allocations:
        for a in alloc.assignments:
            loads.setdefault(a.device_id, []).append(
                (alloc.n_inner, a.alpha, a.beta, alloc.count, dtype_bytes)
            )
    return loads


def _shard_mem(shards) -> int:
    return sum((alpha + beta) * n * b + alpha * beta * b for n, alpha, beta, _, b in shards)


def _stochastic_extra(fleet, rng, level_count):
    """One latency draw per device per level, added to its completion."""
    draws = {}
    for d in fleet.devices:
        model = d.latency_model
        if model is None:
            draws[d.id] = np.zeros(level_count)
        else:
            draws[d.id] = np.asarray(sample_latency(model, rng, size=level_count), dtype=float)
    return draws


def simulate_batch(plan: SchedulePlan, fleet: FleetSpec, sim: SimConfig) -> SimResult:
    """Run one batch without churn (see `simulate_with_churn` otherwise)."""
    plan_ids = set(plan.device_ids)
    fleet_ids = {d.id for d in fleet.devices}
    if not plan_ids <= fleet_ids:
        raise InfeasibleError(
            f"plan references devices missing from the fleet: {sorted(plan_ids - fleet_ids)}"
        )
    dl_rates = effective_dl_rates(fleet)
    rng = np.random.default_rng(sim.seed)
    extra = (
        _stochastic_extra(fleet, rng, plan.num_levels)
        if sim.latency_mode == "stochastic"
        else None
    )

    stats = {d.id: DeviceStats() for d in fleet.devices}
    waits = []
    clock = 0.0
    backward_span = 0.0
    for level in plan.levels:
        loads = _level_loads(level, plan.dtype_bytes)
        completions = {}
        for device_id, shards in loads.items():
            d = fleet.device(device_id)
            t = device_stream_time(d, shards, dl_rates[device_id])
            if extra is not None:
                t += extra[device_id][level.level]
            completions[device_id] = t
            st = stats[device_id]
            st.busy_time += t
            st.peak_mem = max(st.peak_mem, _shard_mem(shards))
            for n, alpha, beta, count, b in shards:
                st.dl_volume += (alpha + beta) * n * b * count
                st.ul_volume += alpha * beta * b * count
            if st.peak_mem > d.mem_capacity:
                raise InfeasibleError(
                    f"device {device_id} exceeds memory capacity at level {level.level}"
                )
        barrier = max(completions.values(), default=0.0)
        waits.append(barrier - min(completions.values(), default=0.0))
        clock += barrier
        if _is_backward_level(level):
            backward_span += barrier
    clock += max(0.0, plan.ps_update_time - backward_span)
    return SimResult(batch_runtime=clock, per_device=stats, barrier_waits=waits)


def _is_backward_level(level) -> bool:
    return any(
        node_id.split(".")[-1].endswith(("_dgrad", "_wgrad"))
        for alloc in level.allocations
        for node_id in alloc.node_ids
    )


def _lost_instances(device, shards, dl_rate, offset: float) -> dict:
    """Instances not yet uploaded `offset` seconds into the level, per shape."""
    lost = {}
    t = device.dl_overhead + device.ul_overhead
    for n, alpha, beta, count, b in shards:
        t_dl = (alpha + beta) * n * b / dl_rate
        t_comp = 2.0 * alpha * beta * n / device.flops
        t_ul = alpha * beta * b / device.ul_bw
        stage = max(t_dl, t_comp, t_ul)
        first_done = t + t_dl + t_comp + t_ul
        if offset >= first_done + (count - 1) * stage:
            done = count
        elif offset < first_done:
            done = 0
        else:
            done = 1 + int((offset - first_done) / stage) if stage > 0 else count
        lost[(n, alpha, beta)] = count - min(done, count)
        t += pipeline_time(t_dl, t_comp, t_ul, count)
    return lost


def simulate_with_churn(
    plan: SchedulePlan,
    fleet: FleetSpec,
    churn: ChurnTrace,
    sim: SimConfig,
    dag: GemmDag | None = None,
    include_resolve_latency: bool = False,
    resolve_latency: float = 0.0,
) -> SimResult:
    """Execute the plan while applying fail/join events at their timestamps.

    Failures inside a level trigger cache-aware rescheduling of the failed
    device's unfinished instances onto the survivors; the level barrier
    stretches to cover the patch. Fleet changes take effect for subsequent
    levels, which are re-planned when a DAG is provided (plans are reused
    otherwise, restricted to live devices).
    """
    for ev in churn.events:
        if ev.kind == "fail" and ev.device_id not in {d.id for d in fleet.devices}:
            raise ConfigError(f"churn fail references unknown device {ev.device_id!r}")

    live_fleet = fleet
    current_plan = plan
    stats = {d.id: DeviceStats() for d in fleet.devices}
    waits: list[float] = []
    recoveries: list[dict] = []
    pending = list(churn.events)
    rng = np.random.default_rng(sim.seed)
    extra = None
    if sim.latency_mode == "stochastic":
        extra = _stochastic_extra(fleet, rng, plan.num_levels)

    clock = 0.0
    backward_span = 0.0
    level_idx = 0
    while level_idx < current_plan.num_levels:
        level = current_plan.levels[level_idx]
        dl_rates = effective_dl_rates(live_fleet)
        loads = _level_loads(level, current_plan.dtype_bytes)
        live_ids = {d.id for d in live_fleet.devices}
        completions = {}
        for device_id, shards in loads.items():
            if device_id not in live_ids:
                continue
            d = live_fleet.device(device_id)
            t = device_stream_time(d, shards, dl_rates[device_id])
            if extra is not None and device_id in extra:
                t += extra[device_id][level.level % plan.num_levels]
            completions[device_id] = t
            st = stats.setdefault(device_id, DeviceStats())
            st.busy_time += t
            st.peak_mem = max(st.peak_mem, _shard_mem(shards))
            for n, alpha, beta, count, b in shards:
                st.dl_volume += (alpha + beta) * n * b * count
                st.ul_volume += alpha * beta * b * count
        barrier = max(completions.values(), default=0.0)
        level_end = clock + barrier

        fleet_changed = False
        while pending and pending[0].time < level_end:
            ev = pending.pop(0)
            if ev.kind == "join":
                live_fleet = live_fleet.with_device(ev.spec)
                fleet_changed = True  # participates from the next level on
                continue
            if ev.device_id not in {d.id for d in live_fleet.devices}:
                continue
            offset = max(0.0, ev.time - clock)
            failed_done = completions.get(ev.device_id, 0.0) <= offset
            live_fleet = live_fleet.without([ev.device_id])
            fleet_changed = True
            if failed_done or ev.device_id not in loads:
                recoveries.append(
                    {"fail_time": ev.time, "device_id": ev.device_id, "recovery_time": 0.0}
                )
                continue
            d_failed = fleet.device(ev.device_id)
            lost_by_shape = _lost_instances(
                d_failed, loads[ev.device_id], dl_rates[ev.device_id], offset
            )
            lost_counts = {
                alloc.key: lost_by_shape.get((alloc.n_inner, a.alpha, a.beta), alloc.count)
                for alloc in level.allocations
                for a in alloc.assignments
                if a.device_id == ev.device_id
            }
            patch = reschedule_level(
                level, {ev.device_id}, live_fleet, current_plan.dtype_bytes, lost_counts
            )
            recovery = patch["recovery_time"]
            if include_resolve_latency:
                recovery += resolve_latency
            failed_area = sum(p.failed_area for p in patch["patches"].values())
            patched_area = sum(p.patched_area for p in patch["patches"].values())
            recoveries.append(
                {
                    "fail_time": ev.time,
                    "device_id": ev.device_id,
                    "recovery_time": recovery,
                    "failed_area": failed_area,
                    "patched_area": patched_area,
                }
            )
            for key, result in patch["patches"].items():
                lost = lost_counts.get(key, 1)
                for a in result.assignments:
                    st = stats.setdefault(a.device_id, DeviceStats())
                    st.ul_volume += a.alpha * a.beta * current_plan.dtype_bytes * max(1, lost)
                    st.dl_volume += 0  # discounted volume tracked below
                if result.assignments:
                    stats[result.assignments[0].device_id].dl_volume += result.dl_bytes
            barrier = max(barrier, (ev.time - clock) + recovery)
            level_end = clock + barrier

        if completions:
            waits.append(barrier - min(completions.values()))
        else:
            waits.append(0.0)
        clock = level_end
        if _is_backward_level(level):
            backward_span += barrier

        level_idx += 1
        if fleet_changed and dag is not None and level_idx < len(dag.levels):
            remaining = replace(
                dag,
                levels=dag.levels[level_idx:],
                edges=[],
            )
            try:
                tail_plan = schedule_dag(remaining, live_fleet, current_plan.dtype_bytes)
            except InfeasibleError as exc:
                raise InfeasibleError(
                    f"survivors cannot absorb remaining load: {exc}", level=level_idx
                ) from None
            current_plan = SchedulePlan(
                levels=current_plan.levels[:level_idx] + tail_plan.levels,
                makespan=0.0,
                dtype_bytes=current_plan.dtype_bytes,
                ps_update_time=current_plan.ps_update_time,
                device_ids=tuple(d.id for d in live_fleet.devices),
            )
            for offset_idx, lvl in enumerate(current_plan.levels[level_idx:], start=level_idx):
                lvl.level = offset_idx

    clock += max(0.0, current_plan.ps_update_time - backward_span)
    return SimResult(
        batch_runtime=clock,
        per_device=stats,
        barrier_waits=waits,
        recovery_events=recoveries,
    )


def peak_memory(plan: SchedulePlan, fleet: FleetSpec) -> dict[str, int]:
    """Per-device worst working set over levels: alpha*n*b + n*beta*b + alpha*beta*b."""
    peaks = {d.id: 0 for d in fleet.devices}
    for level in plan.levels:
        loads = _level_loads(level, plan.dtype_bytes)
        for device_id, shards in loads.items():
            peaks[device_id] = max(peaks.get(device_id, 0), _shard_mem(shards))
    return peaks


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def run_ablation(dag: GemmDag, fleet: FleetSpec, mode: str, sim: SimConfig | None = None) -> SimResult:
    """Simulate the batch with one subsystem disabled.

    no_tp: whole GEMM instances per device (parallelism only across the
    replica count), no_ps: peer-to-peer parameter broadcast and gradient
    AllReduce charged on the devices, no_heterogeneity: equal shard areas
    regardless of capability.
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    sim = sim or SimConfig()
    if mode == "no_tp":
        plan = _plan_no_tp(dag, fleet)
        return simulate_batch(plan, fleet, sim)
    if mode == "no_heterogeneity":
        plan = _plan_equal_share(dag, fleet)
        return simulate_batch(plan, fleet, sim)
    # no_ps: same shard plan, with broadcast + AllReduce volumes on devices
    plan = schedule_dag(dag, fleet)
    result = simulate_batch(plan, fleet, sim)
    params = parameter_count(dag.model)
    b = dag.model.dtype_bytes
    extra_each = params * b  # full-parameter broadcast + gradient AllReduce
    slow = 0.0
    for d in fleet.devices:
        st = result.per_device[d.id]
        st.ul_volume += extra_each
        st.dl_volume += extra_each
        st.peak_mem += int(8 * params / fleet.size)  # optimizer moves on-device
        slow = max(slow, extra_each / d.ul_bw + extra_each / d.dl_bw)
    return SimResult(
        batch_runtime=result.batch_runtime + slow,
        per_device=result.per_device,
        barrier_waits=result.barrier_waits,
        recovery_events=result.recovery_events,
    )


def _plan_no_tp(dag: GemmDag, fleet: FleetSpec) -> SchedulePlan:
    """Distribute whole instances (alpha=m, beta=q) across devices."""
    from .cost_model import cost_breakdown, shard_memory_bytes
    from .scheduler import Assignment, GemmAllocation, LevelPlan, _apportion

    b = dag.model.dtype_bytes
    dl_rates = effective_dl_rates(fleet)
    devices = sorted(fleet.devices, key=lambda d: (-d.flops, d.id))
    levels = []
    end = 0.0
    for idx, nodes in enumerate(dag.levels):
        allocations = []
        level_stream = 0.0
        level_cost = 0.0
        for node in nodes:
            feasible = [
                d
                for d in devices
                if shard_memory_bytes(node.n_inner, node.m, node.q, b) <= d.mem_capacity
            ]
            if not feasible:
                raise InfeasibleError(
                    f"no_tp: whole GEMM {node.id} fits no device", level=idx
                )
            shares = _apportion(node.count, [d.flops for d in feasible])
            assignments = []
            worst_stream = 0.0
            worst_cost = 0.0
            for d, share in zip(feasible, shares):
                if share <= 0:
                    continue
                costs = cost_breakdown(d, node.n_inner, node.m, node.q, b, dl_bw=dl_rates[d.id])
                assignments.append(
                    Assignment(
                        gemm_id=node.id,
                        device_id=d.id,
                        alpha=node.m,
                        beta=node.q,
                        row_range=(0, node.m),
                        col_range=(0, node.q),
                        costs=costs,
                    )
                )
                stream = device_stream_time(
                    d, [(node.n_inner, node.m, node.q, share, b)], dl_rates[d.id]
                )
                worst_stream = max(worst_stream, stream)
                worst_cost = max(worst_cost, costs.gemm_cost)
            allocations.append(
                GemmAllocation(
                    node_ids=[node.id],
                    m=node.m,
                    n_inner=node.n_inner,
                    q=node.q,
                    count=node.count,
                    assignments=assignments,
                    gemm_cost=worst_cost,
                )
            )
            level_stream += worst_stream
            level_cost = max(level_cost, worst_cost)
        end += level_stream
        levels.append(
            LevelPlan(
                level=idx,
                allocations=allocations,
                gemm_cost=level_cost,
                stream_time=level_stream,
                end_time=end,
                lower_bound=0.0,
            )
        )
    return SchedulePlan(
        levels=levels,
        makespan=end,
        dtype_bytes=b,
        ps_update_time=0.0,
        device_ids=tuple(d.id for d in fleet.devices),
    )


def _plan_equal_share(dag: GemmDag, fleet: FleetSpec) -> SchedulePlan:
    """Equal alpha*beta areas for every device regardless of capability."""
    from dataclasses import replace as dc_replace

    uniform = FleetSpec(
        tuple(
            dc_replace(
                d,
                flops=1.0e12,
                ul_bw=1.0e6,
                dl_bw=1.0e7,
                ul_overhead=0.0,
                dl_overhead=0.0,
            )
            for d in fleet.devices
        ),
        fleet.ps,
    )
    shape_plan = schedule_dag(dag, uniform)
    # re-cost the equal-area shards against the real fleet
    from .scheduler import Assignment, GemmAllocation, LevelPlan
    from .cost_model import cost_breakdown

    b = shape_plan.dtype_bytes
    dl_rates = effective_dl_rates(fleet)
    levels = []
    end = 0.0
    for level in shape_plan.levels:
        allocations = []
        level_cost = 0.0
        for alloc in level.allocations:
            assignments = []
            for a in alloc.assignments:
                d = fleet.device(a.device_id)
                costs = cost_breakdown(d, alloc.n_inner, a.alpha, a.beta, b, dl_bw=dl_rates[d.id])
                assignments.append(
                    Assignment(
                        gemm_id=a.gemm_id,
                        device_id=a.device_id,
                        alpha=a.alpha,
                        beta=a.beta,
                        row_range=a.row_range,
                        col_range=a.col_range,
                        costs=costs,
                    )
                )
            worst = max(a.costs.gemm_cost for a in assignments)
            level_cost = max(level_cost, worst)
            allocations.append(
                GemmAllocation(
                    node_ids=alloc.node_ids,
                    m=alloc.m,
                    n_inner=alloc.n_inner,
                    q=alloc.q,
                    count=alloc.count,
                    assignments=assignments,
                    gemm_cost=worst,
                )
            )
        stream = _level_stream(allocations, fleet, b, dl_rates)
        end += stream
        levels.append(
            LevelPlan(
                level=level.level,
                allocations=allocations,
                gemm_cost=level_cost,
                stream_time=stream,
                end_time=end,
                lower_bound=level.lower_bound,
            )
        )
    return SchedulePlan(
        levels=levels,
        makespan=end,
        dtype_bytes=b,
        ps_update_time=shape_plan.ps_update_time,
        device_ids=tuple(d.id for d in fleet.devices),
    )


def _level_stream(allocations, fleet, dtype_bytes, dl_rates):
    from .scheduler import level_stream_time

    return level_stream_time(allocations, fleet, dtype_bytes, dl_rates)
