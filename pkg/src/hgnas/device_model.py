"""Analytical latency and peak-memory oracle over emulated device profiles.

Per-position costs, with B clouds of M points, input width d, output width
d_out, neighbour count k and message width d_msg:

    sample/knn     B*M^2*d / compute  +  B*M^2*penalty / bandwidth
    sample/random  B*M*k / bandwidth
    aggregate      B*M*k*d*penalty / bandwidth  +  B*M*k*d_msg / compute
    combine        B*M*d*d_out / compute
    skip connect   B*M*d_out / bandwidth
    identity       0

and every position also pays ``per_op_overhead``.  An aggregate with no
edge list yet pays for a default KNN on the raw input (charged to sample).
Units: compute in multiply-accumulates per ms, bandwidth in element
accesses per ms, memory in MB of 4-byte elements.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .design_space import (
    OPS,
    Aggregate,
    Combine,
    Connect,
    Genotype,
    Op,
    Sample,
    layer_widths,
    merge_samples,
    message_width,
)

BYTES_PER_ELEMENT = 4
PROFILE_FIELDS = (
    "compute_throughput",
    "memory_bandwidth",
    "irregular_access_penalty",
    "per_op_overhead",
    "memory_capacity",
)


class OutOfMemory(RuntimeError):
    def __init__(self, estimate: "LatencyEstimate", capacity: float):
        super().__init__(
            f"peak memory {estimate.peak_memory:.2f} MB exceeds device capacity {capacity:.2f} MB"
        )
        self.estimate = estimate
        self.capacity = capacity


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    compute_throughput: float
    memory_bandwidth: float
    irregular_access_penalty: float
    per_op_overhead: float
    memory_capacity: float

    def __post_init__(self):
        for f in PROFILE_FIELDS:
            v = getattr(self, f)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"profile {self.name!r}: {f} must be a positive number, got {v!r}")
        if self.irregular_access_penalty < 1:
            raise ValueError(f"profile {self.name!r}: irregular_access_penalty must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceProfile":
        missing = [f for f in ("name",) + PROFILE_FIELDS if f not in d]
        if missing:
            raise ValueError(f"profile is missing fields {missing}")
        return cls(str(d["name"]), *(float(d[f]) for f in PROFILE_FIELDS))

    def descriptor(self) -> np.ndarray:
        """Natural logs of the coefficients, roughly centred; used to condition the predictor.

        Log latency is linear in these, so unit-scale weights suffice.
        """
        return np.array(
            [
                math.log(self.compute_throughput) - 15.0,
                math.log(self.memory_bandwidth) - 12.0,
                math.log(self.irregular_access_penalty),
                math.log(self.per_op_overhead),
                math.log(self.memory_capacity) - 8.0,
            ]
        )


@dataclass(frozen=True)
class InputSpec:
    points: int = 1024
    feature_dim: int = 3
    batch: int = 1
    default_k: int = 16

    def __post_init__(self):
        for f in ("points", "feature_dim", "batch", "default_k"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"InputSpec.{f} must be a positive integer")


@dataclass
class LatencyEstimate:
    total: float
    breakdown: dict[str, float]
    peak_memory: float
    position_costs: list[float] = field(default_factory=list)
    overhead: float = 0.0

    def share(self, op: Op | str) -> float:
        s = sum(self.breakdown.values())
        return self.breakdown[Op(op).value] / s if s > 0 else 0.0

    def to_dict(self):
        return {
            "total_ms": self.total,
            "breakdown_ms": dict(self.breakdown),
            "overhead_ms": self.overhead,
            "peak_memory_mb": self.peak_memory,
            "position_costs_ms": list(self.position_costs),
        }


def cost_positions(g: Genotype):
    """Positions the oracle charges: adjacent duplicate samples merged, identities kept."""
    return merge_samples(g.positions)


@dataclass(frozen=True)
class Work:
    """Raw counts of one charged position: multiply-adds, regular and irregular element moves."""

    compute: float = 0.0
    regular: float = 0.0
    irregular: float = 0.0

    def __add__(self, o: "Work") -> "Work":
        return Work(self.compute + o.compute, self.regular + o.regular, self.irregular + o.irregular)

    def ms(self, profile: DeviceProfile) -> float:
        return (
            self.compute / profile.compute_throughput
            + (self.regular + self.irregular * profile.irregular_access_penalty) / profile.memory_bandwidth
        )


@dataclass
class PositionWork:
    func: object
    work: Work
    # implicit KNN an aggregate builds when no edge list exists yet
    default_knn: Work | None
    peak: float


def position_work(positions, spec: InputSpec) -> list[PositionWork]:
    """Device-independent work of each position, in order, with the live footprint."""
    positions = list(positions)
    widths = layer_widths(Genotype(tuple(positions), spec.feature_dim, 2))
    b, m = spec.batch, spec.points
    out = []
    edge_k = None
    prev_in = spec.feature_dim
    for pos, (d_in, d_out) in zip(positions, widths):
        f = pos.func
        w, knn = Work(), None
        live = b * m * (d_in + d_out)
        if edge_k is not None:
            live += 2 * b * m * edge_k
        scratch = 0
        if isinstance(f, Sample):
            if f.mode == "knn":
                w = Work(b * m * m * d_in, 0.0, b * m * m)
                scratch = b * m * m
            else:
                w = Work(0.0, b * m * f.k, 0.0)
            edge_k = f.k
        elif isinstance(f, Aggregate):
            if edge_k is None:
                edge_k = spec.default_k
                knn = Work(b * m * m * spec.feature_dim, 0.0, b * m * m)
                scratch = b * m * m
            d_msg = message_width(f.message, d_in)
            w = Work(b * m * edge_k * d_msg, 0.0, b * m * edge_k * d_in)
            scratch = max(scratch, b * m * edge_k * d_msg)
        elif isinstance(f, Combine):
            w = Work(b * m * d_in * d_out, 0.0, 0.0)
        elif isinstance(f, Connect) and f.mode == "skip":
            w = Work(0.0, b * m * d_out, 0.0)
            live += b * m * prev_in
        out.append(PositionWork(f, w, knn, live + scratch))
        prev_in = d_in
    return out


def oracle_latency(
    g: Genotype, spec: InputSpec, profile: DeviceProfile, check_memory: bool = True
) -> LatencyEstimate:
    """Deterministic latency/peak-memory estimate of ``g`` on ``profile``.

    Raises :class:`OutOfMemory` when ``check_memory`` and the peak footprint
    exceeds the profile capacity.
    """
    positions = cost_positions(g)
    parts = {op.value: [] for op in OPS}
    costs: list[float] = []
    peak = spec.batch * spec.points * spec.feature_dim
    for pw in position_work(positions, spec):
        f = pw.func
        cost = pw.work.ms(profile)
        if isinstance(f, Sample):
            parts["sample"].append(cost)
        elif isinstance(f, Aggregate):
            parts["aggregate"].append(cost)
            if pw.default_knn is not None:
                knn = pw.default_knn.ms(profile)
                parts["sample"].append(knn)
                cost += knn
        elif isinstance(f, Combine):
            parts["combine"].append(cost)
        elif isinstance(f, Connect) and f.mode == "skip":
            parts["connect"].append(cost)
        costs.append(cost)
        peak = max(peak, pw.peak)
    overhead = len(positions) * profile.per_op_overhead
    est = LatencyEstimate(
        total=math.fsum(costs + [profile.per_op_overhead] * len(positions)),
        breakdown={k: math.fsum(v) for k, v in parts.items()},
        peak_memory=peak * BYTES_PER_ELEMENT / 1e6,
        position_costs=costs,
        overhead=overhead,
    )
    if check_memory and est.peak_memory > profile.memory_capacity:
        raise OutOfMemory(est, profile.memory_capacity)
    return est


def latency_ms(g: Genotype, spec: InputSpec, profile: DeviceProfile) -> float:
    """Total latency, or ``inf`` when the device runs out of memory."""
    try:
        return oracle_latency(g, spec, profile).total
    except OutOfMemory:
        return math.inf


# --- profiles ---------------------------------------------------------------


def builtin_profiles() -> dict[str, DeviceProfile]:
    """The four shipped emulated devices, keyed by name."""
    text = resources.files("hgnas").joinpath("profiles.json").read_text()
    return {d["name"]: DeviceProfile.from_dict(d) for d in json.loads(text)["profiles"]}


def load_profile(name_or_path: str) -> DeviceProfile:
    profiles = builtin_profiles()
    if name_or_path in profiles:
        return profiles[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(f"unknown profile {name_or_path!r} (built-ins: {sorted(profiles)})")
    return DeviceProfile.from_dict(json.loads(path.read_text()))


# --- labels -----------------------------------------------------------------


def label_batch(
    genotypes: Sequence[Genotype],
    spec: InputSpec,
    profile: DeviceProfile,
    noise: float = 0.0,
    seed: int = 0,
) -> list[tuple[Genotype, float]]:
    """Oracle latencies with multiplicative log-normal jitter ``exp(N(0, noise^2))``.

    Memory capacity is not enforced: labels describe latency only.
    """
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    jitter = np.exp(rng.normal(0.0, noise, size=len(genotypes))) if noise > 0 else np.ones(len(genotypes))
    return [
        (g, oracle_latency(g, spec, profile, check_memory=False).total * float(j))
        for g, j in zip(genotypes, jitter)
    ]
