"""Seeded instance generators for the seven coordinate distributions.

Every generator draws from a ``numpy.random.Generator`` passed in by the
caller, so ``(kind, n, seed)`` fully determines the output.  Uniform,
Cluster and Mixed are the exemplar (training) distributions; Expansion,
Implosion, Explosion and Grid mutate a uniform draw and are used as unseen
test distributions.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .problems import Instance, ProblemKind


class InvalidSizeError(ValueError):
    pass


class DistributionKind(str, enum.Enum):
    UNIFORM = "uniform"
    CLUSTER = "cluster"
    MIXED = "mixed"
    EXPANSION = "expansion"
    IMPLOSION = "implosion"
    EXPLOSION = "explosion"
    GRID = "grid"


EXEMPLAR_KINDS = (DistributionKind.UNIFORM, DistributionKind.CLUSTER, DistributionKind.MIXED)
UNSEEN_KINDS = (
    DistributionKind.EXPANSION,
    DistributionKind.IMPLOSION,
    DistributionKind.EXPLOSION,
    DistributionKind.GRID,
)
ALL_KINDS = EXEMPLAR_KINDS + UNSEEN_KINDS


@dataclass(frozen=True)
class DistributionSpec:
    kind: DistributionKind = DistributionKind.UNIFORM
    n_clusters: int = 3
    cluster_sigma: float = 0.07
    mutation_radius: float = 0.3
    exp_rate: float = 10.0
    cluster_mean_lo: float = 0.2
    cluster_mean_hi: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "kind", DistributionKind(self.kind))
        if self.cluster_sigma <= 0:
            raise ValueError("cluster_sigma must be positive")
        if not 0 < self.mutation_radius < 1:
            raise ValueError("mutation_radius must lie in (0, 1)")
        if self.exp_rate <= 0:
            raise ValueError("exp_rate must be positive")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")


@dataclass(frozen=True)
class CvrpSpec:
    demand_lo: int = 1
    demand_hi: int = 9
    capacity: Optional[int] = None  # None -> size table

    def __post_init__(self):
        if self.capacity is not None and self.capacity < self.demand_hi:
            raise ValueError("capacity must be >= demand_hi")


CAPACITY_TABLE = {20: 30, 50: 40, 100: 50}


def capacity_for(n: int) -> int:
    """Vehicle capacity for ``n`` customers; off-table sizes interpolate."""
    if n in CAPACITY_TABLE:
        return CAPACITY_TABLE[n]
    return max(30, int(round(n / 2)))


def make_rng(seed, *stream) -> np.random.Generator:
    """PCG64 generator keyed by a seed and optional sub-stream ids."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def _check_n(n: int, minimum: int = 2):
    if n < minimum:
        raise InvalidSizeError(f"need at least {minimum} nodes, got {n}")


# ---------------------------------------------------------------------------
# Pure mutation kernels (deterministic given their random draws)
# ---------------------------------------------------------------------------


def normalize_coords(points: np.ndarray) -> np.ndarray:
    """Min-max scale each axis of ``points`` to [0, 1].

    An axis with zero spread is set to 0.5 for every point.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InvalidSizeError("normalize_coords needs at least two points")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = hi - lo
    out = np.empty_like(pts)
    for ax in range(pts.shape[1]):
        if span[ax] > 0:
            out[:, ax] = (pts[:, ax] - lo[ax]) / span[ax]
            # guard against 1 - ulp after division
            out[pts[:, ax] == hi[ax], ax] = 1.0
        else:
            out[:, ax] = 0.5
    return out


def line_distance(points: np.ndarray, slope: float, intercept: float) -> np.ndarray:
    """Signed orthogonal distance of each point to ``y = slope*x + intercept``."""
    pts = np.asarray(points, dtype=np.float64)
    return (slope * pts[:, 0] - pts[:, 1] + intercept) / math.hypot(slope, 1.0)


def expand_from_line(points, slope, intercept, radius, gammas) -> np.ndarray:
    """Push every point closer than ``radius`` to the line out to ``radius + gamma``.

    ``gammas`` holds one offset per point (only entries of moved points are
    read).  Points exactly on the line move to the positive side.
    """
    pts = np.array(points, dtype=np.float64)
    dist = line_distance(pts, slope, intercept)
    normal = np.array([slope, -1.0]) / math.hypot(slope, 1.0)
    inside = np.abs(dist) < radius
    side = np.where(dist >= 0, 1.0, -1.0)
    shift = side * (radius + np.asarray(gammas, dtype=np.float64)) - dist
    pts[inside] += shift[inside, None] * normal[None, :]
    return pts


def implode(points, centroid, inner_radius, outer_radius) -> np.ndarray:
    """Radially shrink the disc of ``outer_radius`` around ``centroid`` to ``inner_radius``."""
    pts = np.array(points, dtype=np.float64)
    c = np.asarray(centroid, dtype=np.float64)
    rel = pts - c
    inside = np.hypot(rel[:, 0], rel[:, 1]) < outer_radius
    pts[inside] = c + rel[inside] * (inner_radius / outer_radius)
    return pts


def explode(points, centroid, radius, gammas, angles=None) -> np.ndarray:
    """Move points inside the disc onto the ray from ``centroid`` at distance ``radius + gamma``.

    ``angles`` supplies a direction (radians) for points sitting exactly on
    the centroid; it is ignored for every other point.
    """
    pts = np.array(points, dtype=np.float64)
    c = np.asarray(centroid, dtype=np.float64)
    rel = pts - c
    dist = np.hypot(rel[:, 0], rel[:, 1])
    inside = dist < radius
    unit = np.zeros_like(rel)
    nz = dist > 0
    unit[nz] = rel[nz] / dist[nz, None]
    if np.any(inside & ~nz):
        if angles is None:
            raise ValueError("a point coincides with the centroid; angles required")
        ang = np.asarray(angles, dtype=np.float64)
        z = inside & ~nz
        unit[z, 0] = np.cos(ang[z])
        unit[z, 1] = np.sin(ang[z])
    g = np.asarray(gammas, dtype=np.float64)
    pts[inside] = c + unit[inside] * (radius + g[inside])[:, None]
    return pts


def grid_box(points, origin, side) -> tuple[np.ndarray, np.ndarray]:
    """Re-place the points inside an axis-aligned box onto a square lattice.

    Returns the mutated points and the indices that were moved.  The lattice
    has ceil(sqrt(k)) cells per side, spans the box, and is filled row-major
    from the bottom-left corner in original index order.
    """
    pts = np.array(points, dtype=np.float64)
    x0, y0 = float(origin[0]), float(origin[1])
    inside = (
        (pts[:, 0] >= x0) & (pts[:, 0] <= x0 + side) & (pts[:, 1] >= y0) & (pts[:, 1] <= y0 + side)
    )
    idx = np.flatnonzero(inside)
    k = idx.size
    if k == 0:
        return pts, idx
    m = math.ceil(math.sqrt(k))
    pitch = side / (m - 1) if m > 1 else 0.0
    slots = np.arange(k)
    pts[idx, 0] = x0 + (slots % m) * pitch
    pts[idx, 1] = y0 + (slots // m) * pitch
    return pts, idx


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def gen_uniform(n: int, rng: np.random.Generator) -> np.ndarray:
    _check_n(n)
    return rng.random((n, 2))


def _cluster_points(n, n_clusters, sigma, lo, hi, rng):
    means = lo + (hi - lo) * rng.random((n_clusters, 2))
    labels = np.arange(n) % n_clusters
    pts = means[labels] + sigma * rng.standard_normal((n, 2))
    return np.clip(pts, 0.0, 1.0), labels, means


def gen_cluster(n, spec: DistributionSpec, rng, return_info=False):
    _check_n(n, max(2, spec.n_clusters))
    pts, labels, means = _cluster_points(
        n, spec.n_clusters, spec.cluster_sigma, spec.cluster_mean_lo, spec.cluster_mean_hi, rng
    )
    if return_info:
        return pts, {"labels": labels, "means": means}
    return pts


def gen_mixed(n, rng, spec: Optional[DistributionSpec] = None, return_info=False):
    _check_n(n)
    spec = spec or DistributionSpec(DistributionKind.MIXED)
    n_uniform = n // 2
    uni = rng.random((n_uniform, 2))
    clu, _, means = _cluster_points(
        n - n_uniform, 1, spec.cluster_sigma, spec.cluster_mean_lo, spec.cluster_mean_hi, rng
    )
    pts = np.concatenate([uni, clu])
    clustered = np.concatenate([np.zeros(n_uniform, bool), np.ones(n - n_uniform, bool)])
    order = rng.permutation(n)
    if return_info:
        return pts[order], {"clustered": clustered[order], "mean": means[0]}
    return pts[order]


def gen_expansion(n, spec: DistributionSpec, rng, return_info=False):
    pts = gen_uniform(n, rng)
    intercept = rng.random()
    slope = 3.0 * rng.random() if intercept < 0.5 else -3.0 * rng.random()
    gammas = rng.exponential(1.0 / spec.exp_rate, size=n)
    moved = expand_from_line(pts, slope, intercept, spec.mutation_radius, gammas)
    out = normalize_coords(moved)
    if return_info:
        return out, {"raw": moved, "slope": slope, "intercept": intercept}
    return out


def gen_implosion(n, spec: DistributionSpec, rng, return_info=False):
    pts = gen_uniform(n, rng)
    centroid = rng.random(2)
    inner = spec.mutation_radius * rng.random()
    out = implode(pts, centroid, inner, spec.mutation_radius)
    if return_info:
        return out, {"centroid": centroid, "inner_radius": inner}
    return out


def gen_explosion(n, spec: DistributionSpec, rng, return_info=False):
    pts = gen_uniform(n, rng)
    centroid = rng.random(2)
    gammas = rng.exponential(1.0 / spec.exp_rate, size=n)
    angles = 2.0 * math.pi * rng.random(n)
    moved = explode(pts, centroid, spec.mutation_radius, gammas, angles)
    out = normalize_coords(moved)
    if return_info:
        return out, {"raw": moved, "centroid": centroid}
    return out


def gen_grid(n, spec: DistributionSpec, rng, return_info=False):
    pts = gen_uniform(n, rng)
    side = spec.mutation_radius
    origin = (1.0 - side) * rng.random(2)
    out, moved = grid_box(pts, origin, side)
    if return_info:
        return out, {"origin": origin, "moved": moved}
    return out


def generate_coords(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = spec.kind
    if kind is DistributionKind.UNIFORM:
        return gen_uniform(n, rng)
    if kind is DistributionKind.CLUSTER:
        return gen_cluster(n, spec, rng)
    if kind is DistributionKind.MIXED:
        return gen_mixed(n, rng, spec)
    if kind is DistributionKind.EXPANSION:
        return gen_expansion(n, spec, rng)
    if kind is DistributionKind.IMPLOSION:
        return gen_implosion(n, spec, rng)
    if kind is DistributionKind.EXPLOSION:
        return gen_explosion(n, spec, rng)
    if kind is DistributionKind.GRID:
        return gen_grid(n, spec, rng)
    raise ValueError(f"unknown distribution {kind}")


def attach_cvrp(coords, n: int, rng, cvrp: CvrpSpec = CvrpSpec()) -> Instance:
    """Turn ``n + 1`` points (depot first) into a CVRP instance."""
    if n < 1:
        raise InvalidSizeError(f"CVRP needs at least one customer, got {n}")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != n + 1:
        raise InvalidSizeError(f"expected {n + 1} points (depot + customers), got {coords.shape[0]}")
    demands = np.zeros(n + 1, dtype=np.int64)
    demands[1:] = rng.integers(cvrp.demand_lo, cvrp.demand_hi + 1, size=n)
    capacity = cvrp.capacity if cvrp.capacity is not None else capacity_for(n)
    return Instance(coords, ProblemKind.CVRP, demands=demands, capacity=capacity)


def make_instance(problem, spec: DistributionSpec, n: int, rng) -> Instance:
    """One instance; for CVRP ``n`` counts customers and the depot shares their distribution."""
    problem = ProblemKind(problem)
    if problem is ProblemKind.TSP:
        return Instance(generate_coords(spec, n, rng), ProblemKind.TSP)
    _check_n(n, 1)
    coords = generate_coords(spec, n + 1, rng)
    return attach_cvrp(coords, n, rng)


def make_dataset(problem, spec: DistributionSpec, n: int, count: int, seed: int) -> list[Instance]:
    """``count`` instances, instance ``i`` drawn from stream ``(seed, i)``."""
    return [make_instance(problem, spec, n, make_rng(seed, i)) for i in range(count)]


# ---------------------------------------------------------------------------
# JSON-lines instance files
# ---------------------------------------------------------------------------


@dataclass
class InstanceRecord:
    instance: Instance
    kind: str
    n: int
    seed: int
    index: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        inst = self.instance
        obj = {
            "problem": inst.kind.value,
            "kind": self.kind,
            "n": self.n,
            "seed": self.seed,
            "index": self.index,
            "coords": inst.coords.tolist(),
        }
        if inst.kind is ProblemKind.CVRP:
            obj["depot_index"] = inst.depot_index
            obj["demands"] = inst.demands.tolist()
            obj["capacity"] = int(inst.capacity)
        return json.dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> "InstanceRecord":
        obj = json.loads(line)
        problem = ProblemKind(obj.get("problem", "cvrp" if "demands" in obj else "tsp"))
        coords = np.array(obj["coords"], dtype=np.float64)
        if problem is ProblemKind.CVRP:
            inst = Instance(
                coords,
                problem,
                demands=np.array(obj["demands"], dtype=np.int64),
                capacity=int(obj["capacity"]),
                depot_index=int(obj.get("depot_index", 0)),
            )
        else:
            inst = Instance(coords, problem)
        return cls(inst, obj["kind"], int(obj["n"]), int(obj["seed"]), int(obj.get("index", 0)))


def write_instances(path, records: Iterable[InstanceRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_instances(path) -> Iterator[InstanceRecord]:
    with open(Path(path)) as fh:
        for line in fh:
            if line.strip():
                yield InstanceRecord.from_json(line)
