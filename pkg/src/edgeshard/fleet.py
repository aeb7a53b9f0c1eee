"""Heterogeneous device fleets: capability sampling, stragglers, churn, tails.

Bandwidths are bytes/s, compute is FLOP/s, overheads are seconds. All
sampling goes through an explicit seed or numpy Generator so identical
inputs reproduce identical fleets bit for bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

MB = 1e6
GB = 1e9
TFLOPS = 1e12


@dataclass(frozen=True)
class TailModel:
    """Latency distribution: deterministic constant, exponential, or Pareto.

    Pareto survival is P(L > x) = (x_m / x)^alpha for x >= x_m; the mean is
    finite iff alpha > 1.
    """

    kind: str = "deterministic"
    value: float = 0.0  # deterministic latency
    rate: float = 1.0  # exponential rate (1/mean)
    x_m: float = 1e-3  # Pareto scale (minimum)
    alpha: float = 2.0  # Pareto shape

    def __post_init__(self):
        if self.kind not in ("deterministic", "exponential", "pareto"):
            raise ConfigError(f"unknown tail model kind {self.kind!r}")
        if self.kind == "exponential" and self.rate <= 0:
            raise ConfigError("exponential tail model requires rate > 0")
        if self.kind == "pareto" and (self.x_m <= 0 or self.alpha <= 0):
            raise ConfigError("pareto tail model requires x_m > 0 and alpha > 0")

    def mean(self) -> float:
        if self.kind == "deterministic":
            return self.value
        if self.kind == "exponential":
            return 1.0 / self.rate
        if self.alpha <= 1:
            return float("inf")
        return self.x_m * self.alpha / (self.alpha - 1.0)

    def survival(self, x: float) -> float:
        """P(L > x)."""
        if self.kind == "deterministic":
            return 1.0 if x < self.value else 0.0
        if self.kind == "exponential":
            return float(np.exp(-self.rate * x)) if x > 0 else 1.0
        if x <= self.x_m:
            return 1.0
        return (self.x_m / x) ** self.alpha


def sample_latency(model: TailModel, rng: np.random.Generator, size=None):
    """Draw latency samples; Pareto uses the inverse-CDF transform."""
    if model.kind == "deterministic":
        return model.value if size is None else np.full(size, model.value)
    if model.kind == "exponential":
        return rng.exponential(1.0 / model.rate, size=size)
    u = rng.random(size=size)
    return model.x_m * (1.0 - u) ** (-1.0 / model.alpha)


@dataclass(frozen=True)
class ParameterServerSpec:
    """Aggregate capability of the central parameter server."""

    aggregate_bw: float = 25e9  # 200 Gbit/s
    update_flops: float = 1e13
    update_flops_per_param: float = 10.0

    def __post_init__(self):
        if self.aggregate_bw <= 0 or self.update_flops <= 0:
            raise ConfigError("parameter server rates must be > 0")


@dataclass(frozen=True)
class DeviceSpec:
    id: str
    flops: float
    ul_bw: float
    dl_bw: float
    ul_overhead: float = 0.0
    dl_overhead: float = 0.0
    mem_capacity: float = 512 * MB
    latency_model: TailModel | None = None

    def __post_init__(self):
        if min(self.flops, self.ul_bw, self.dl_bw, self.mem_capacity) <= 0:
            raise ConfigError(f"device {self.id}: rates and capacity must be > 0")
        if self.ul_overhead < 0 or self.dl_overhead < 0:
            raise ConfigError(f"device {self.id}: overheads must be >= 0")


@dataclass(frozen=True)
class FleetSpec:
    devices: tuple[DeviceSpec, ...]
    ps: ParameterServerSpec = ParameterServerSpec()

    def __post_init__(self):
        if not self.devices:
            raise ConfigError("fleet must contain at least one device")
        ids = [d.id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ConfigError("device ids must be unique")

    @property
    def size(self) -> int:
        return len(self.devices)

    def device(self, device_id: str) -> DeviceSpec:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)

    def without(self, device_ids) -> "FleetSpec":
        gone = set(device_ids)
        return FleetSpec(tuple(d for d in self.devices if d.id not in gone), self.ps)

    def with_device(self, device: DeviceSpec) -> "FleetSpec":
        return FleetSpec(self.devices + (device,), self.ps)


@dataclass(frozen=True)
class HeterogeneityProfile:
    """Piecewise-uniform capability ranges for a phone/laptop mix.

    Defaults follow typical edge hardware: phones around 5-7 TFLOPS with a
    ~512 MB usable-memory budget, laptops up to 27 TFLOPS; downlink
    10-100 MB/s with uplink 5-10 MB/s (2-10x slower).
    """

    phone_fraction: float = 0.7
    phone_flops: tuple = (5 * TFLOPS, 7 * TFLOPS)
    laptop_flops: tuple = (10 * TFLOPS, 27 * TFLOPS)
    dl_bw: tuple = (10 * MB, 100 * MB)
    ul_bw: tuple = (5 * MB, 10 * MB)
    dl_overhead: float = 0.005
    ul_overhead: float = 0.005
    phone_mem: float = 512 * MB
    laptop_mem: float = 10 * GB
    latency_model: TailModel | None = None

    def __post_init__(self):
        if not 0.0 <= self.phone_fraction <= 1.0:
            raise ConfigError("phone_fraction must be within [0, 1]")


def homogeneous_profile(
    flops=10 * TFLOPS,
    dl_bw=50 * MB,
    ul_bw=7 * MB,
    dl_overhead=0.005,
    ul_overhead=0.005,
    mem=512 * MB,
    latency_model=None,
) -> HeterogeneityProfile:
    """Zero-variance profile: every sampled device is identical."""
    return HeterogeneityProfile(
        phone_fraction=1.0,
        phone_flops=(flops, flops),
        laptop_flops=(flops, flops),
        dl_bw=(dl_bw, dl_bw),
        ul_bw=(ul_bw, ul_bw),
        dl_overhead=dl_overhead,
        ul_overhead=ul_overhead,
        phone_mem=mem,
        laptop_mem=mem,
        latency_model=latency_model,
    )


def _sample_device(profile: HeterogeneityProfile, device_id: str, rng) -> DeviceSpec:
    is_phone = rng.random() < profile.phone_fraction
    lo, hi = profile.phone_flops if is_phone else profile.laptop_flops
    flops = rng.uniform(lo, hi)
    dl = rng.uniform(*profile.dl_bw)
    ul = rng.uniform(*profile.ul_bw)
    return DeviceSpec(
        id=device_id,
        flops=float(flops),
        ul_bw=float(ul),
        dl_bw=float(dl),
        ul_overhead=profile.ul_overhead,
        dl_overhead=profile.dl_overhead,
        mem_capacity=profile.phone_mem if is_phone else profile.laptop_mem,
        latency_model=profile.latency_model,
    )


def sample_fleet(
    profile: HeterogeneityProfile,
    count: int,
    seed: int,
    ps: ParameterServerSpec | None = None,
) -> FleetSpec:
    if count < 1:
        raise ConfigError(f"fleet size must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    devices = tuple(_sample_device(profile, f"d{i:05d}", rng) for i in range(count))
    return FleetSpec(devices, ps or ParameterServerSpec())


def inject_stragglers(fleet: FleetSpec, fraction: float, slowdown: float, seed: int = 0) -> FleetSpec:
    """Slow a seed-chosen floor(fraction*D) subset in compute and both links."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("straggler fraction must be within [0, 1]")
    if slowdown < 1.0:
        raise ConfigError("straggler slowdown must be >= 1")
    k = int(fraction * fleet.size)
    if k == 0:
        return fleet
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(fleet.size, size=k, replace=False).tolist())
    devices = tuple(
        replace(d, flops=d.flops / slowdown, ul_bw=d.ul_bw / slowdown, dl_bw=d.dl_bw / slowdown)
        if i in chosen
        else d
        for i, d in enumerate(fleet.devices)
    )
    return FleetSpec(devices, fleet.ps)


@dataclass(frozen=True)
class ChurnEvent:
    time: float
    device_id: str
    kind: str  # "fail" | "join"
    spec: DeviceSpec | None = None


@dataclass(frozen=True)
class ChurnTrace:
    events: tuple[ChurnEvent, ...] = ()

    def __post_init__(self):
        last = -float("inf")
        for ev in self.events:
            if ev.time < last:
                raise ConfigError("churn events must be time-ordered")
            last = ev.time
            if ev.kind not in ("fail", "join"):
                raise ConfigError(f"unknown churn event kind {ev.kind!r}")


def validate_churn_against_fleet(trace: ChurnTrace, fleet: FleetSpec) -> None:
    live = {d.id for d in fleet.devices}
    for ev in trace.events:
        if ev.kind == "fail":
            if ev.device_id not in live:
                raise ConfigError(f"churn fail targets unknown/dead device {ev.device_id!r}")
            live.discard(ev.device_id)
        else:
            if ev.device_id in live:
                raise ConfigError(f"churn join reuses live device id {ev.device_id!r}")
            live.add(ev.device_id)


def parse_churn_trace(
    text: str,
    profile: HeterogeneityProfile | None = None,
    seed: int = 0,
) -> ChurnTrace:
    """Parse `time device_id fail|join` lines (# comments allowed).

    A join line may append explicit `flops ul_bw dl_bw ul_ovh dl_ovh mem`
    fields; otherwise the joining device is sampled from `profile` with a
    seed derived deterministically from (seed, device_id).
    """
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ConfigError(f"churn trace line {lineno}: expected `time id fail|join`")
        time_s, device_id, kind = float(parts[0]), parts[1], parts[2]
        spec = None
        if kind == "join":
            if len(parts) >= 9:
                spec = DeviceSpec(
                    id=device_id,
                    flops=float(parts[3]),
                    ul_bw=float(parts[4]),
                    dl_bw=float(parts[5]),
                    ul_overhead=float(parts[6]),
                    dl_overhead=float(parts[7]),
                    mem_capacity=float(parts[8]),
                )
            else:
                prof = profile or HeterogeneityProfile()
                sub = np.random.default_rng((seed, zlib.crc32(device_id.encode())))
                spec = replace(_sample_device(prof, device_id, sub), id=device_id)
        elif kind != "fail":
            raise ConfigError(f"churn trace line {lineno}: kind must be fail|join")
        events.append(ChurnEvent(time=time_s, device_id=device_id, kind=kind, spec=spec))
    return ChurnTrace(tuple(events))
