"""TSP / CVRP instances, tours, feasibility and the construction MDP.

Node 0 is the depot for CVRP.  A CVRP tour is the action sequence of a
vehicle that starts at the depot; ``0`` entries are depot returns and the
final return is appended when missing.  TSP tours are stored open and
closed implicitly.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class ProblemKind(str, enum.Enum):
    TSP = "tsp"
    CVRP = "cvrp"


class FeasibilityError(ValueError):
    """A tour or action violates the problem constraints."""


class IllegalActionError(FeasibilityError):
    pass


class InvariantError(RuntimeError):
    """An internal invariant failed (e.g. an all-false action mask)."""


@dataclass(frozen=True, eq=False)
class Instance:
    coords: np.ndarray
    kind: ProblemKind = ProblemKind.TSP
    demands: Optional[np.ndarray] = None
    capacity: Optional[int] = None
    depot_index: int = 0
    name: str = ""

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "kind", ProblemKind(self.kind))
        if self.kind is ProblemKind.TSP:
            if self.demands is not None or self.capacity is not None:
                raise ValueError("TSP instances carry no demands or capacity")
            return
        if self.demands is None or self.capacity is None:
            raise ValueError("CVRP instances need demands and capacity")
        if self.depot_index != 0:
            raise ValueError("depot must be node 0; reorder before constructing")
        dem = np.asarray(self.demands, dtype=np.int64)
        dem.setflags(write=False)
        object.__setattr__(self, "demands", dem)
        if dem.shape != (coords.shape[0],):
            raise ValueError("one demand per node required")
        if dem[0] != 0:
            raise ValueError("depot demand must be 0")
        if np.any(dem[1:] < 0) or np.any(dem > self.capacity):
            raise ValueError("customer demands must lie in [0, capacity]")

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_customers(self) -> int:
        return self.n_nodes - 1 if self.kind is ProblemKind.CVRP else self.n_nodes

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def with_coords(self, coords) -> "Instance":
        return replace(self, coords=np.asarray(coords, dtype=np.float64))

    def fingerprint(self) -> str:
        """Stable content hash; used as a cache key."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.kind.value.encode())
        h.update(np.ascontiguousarray(self.coords, dtype="<f8").tobytes())
        if self.kind is ProblemKind.CVRP:
            h.update(np.ascontiguousarray(self.demands, dtype="<i8").tobytes())
            h.update(int(self.capacity).to_bytes(8, "little"))
        return h.hexdigest()[:32]


@dataclass(frozen=True)
class Violation:
    kind: str  # unknown-node | repeat | missing | capacity | depot-in-tsp | empty
    message: str
    node: Optional[int] = None
    subtour: Optional[int] = None

    def __str__(self):
        return f"{self.kind}: {self.message}"


def split_routes(sequence: Sequence[int]) -> list[list[int]]:
    """Depot-delimited customer groups of a CVRP action sequence (empty routes dropped)."""
    routes, cur = [], []
    for a in sequence:
        if a == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(int(a))
    if cur:
        routes.append(cur)
    return routes


def validate_tour(instance: Instance, sequence: Sequence[int]) -> Optional[Violation]:
    """Return ``None`` for a feasible tour, else the first violation found."""
    seq = [int(a) for a in sequence]
    n = instance.n_nodes
    if not seq:
        return Violation("empty", "tour has no actions")
    for a in seq:
        if a < 0 or a >= n:
            return Violation("unknown-node", f"node {a} not in instance", node=a)
    if instance.kind is ProblemKind.TSP:
        seen = set()
        for a in seq:
            if a in seen:
                return Violation("repeat", f"node {a} visited twice", node=a)
            seen.add(a)
        if len(seen) != n:
            miss = min(set(range(n)) - seen)
            return Violation("missing", f"node {miss} never visited", node=miss)
        return None
    seen = set()
    for a in seq:
        if a == 0:
            continue
        if a in seen:
            return Violation("repeat", f"customer {a} visited twice", node=a)
        seen.add(a)
    if len(seen) != n - 1:
        miss = min(set(range(1, n)) - seen)
        return Violation("missing", f"customer {miss} never visited", node=miss)
    for k, route in enumerate(split_routes(seq)):
        load = int(instance.demands[route].sum())
        if load > instance.capacity:
            return Violation(
                "capacity", f"sub-tour {k} carries {load} > {instance.capacity}", subtour=k
            )
    return None


def _closed_path(instance: Instance, seq: list[int]) -> list[int]:
    if instance.kind is ProblemKind.TSP:
        return seq + [seq[0]]
    path = [0] + seq
    if path[-1] != 0:
        path.append(0)
    return path


def path_length(coords: np.ndarray, path: Sequence[int]) -> float:
    pts = np.asarray(coords, dtype=np.float64)[list(path)]
    d = np.diff(pts, axis=0)
    return float(np.sqrt((d**2).sum(-1)).sum())


def tour_length(instance: Instance, sequence: Sequence[int], check: bool = True) -> float:
    seq = [int(a) for a in sequence]
    if check:
        bad = validate_tour(instance, seq)
        if bad is not None:
            raise FeasibilityError(str(bad))
    return path_length(instance.coords, _closed_path(instance, seq))


def canonical_sequence(instance: Instance, sequence: Sequence[int]) -> tuple[int, ...]:
    seq = tuple(int(a) for a in sequence)
    if instance.kind is ProblemKind.CVRP and (not seq or seq[-1] != 0):
        seq = seq + (0,)
    return seq


@dataclass(frozen=True)
class Tour:
    sequence: tuple[int, ...]
    length: float

    @classmethod
    def build(cls, instance: Instance, sequence: Sequence[int]) -> "Tour":
        seq = canonical_sequence(instance, sequence)
        return cls(seq, tour_length(instance, seq))

    def to_json(self, ref: dict) -> str:
        return json.dumps({"instance": ref, "sequence": list(self.sequence), "length": self.length})

    @classmethod
    def from_json(cls, line: str, instance: Instance) -> tuple["Tour", dict]:
        obj = json.loads(line)
        tour = cls.build(instance, obj["sequence"])
        if abs(tour.length - float(obj["length"])) > 1e-9 * max(1.0, tour.length):
            raise FeasibilityError(
                f"stored length {obj['length']} disagrees with recomputed {tour.length}"
            )
        return tour, obj["instance"]


# ---------------------------------------------------------------------------
# Construction MDP
# ---------------------------------------------------------------------------


@dataclass
class ConstructionState:
    sequence: list[int] = field(default_factory=list)
    visited: np.ndarray = None
    current: Optional[int] = None  # None before the first TSP action
    remaining: Optional[int] = None
    done: bool = False

    def copy(self) -> "ConstructionState":
        return ConstructionState(
            list(self.sequence), self.visited.copy(), self.current, self.remaining, self.done
        )


def initial_state(instance: Instance) -> ConstructionState:
    visited = np.zeros(instance.n_nodes, dtype=bool)
    if instance.kind is ProblemKind.TSP:
        return ConstructionState(visited=visited)
    return ConstructionState(visited=visited, current=0, remaining=int(instance.capacity))


def feasible_mask(state: ConstructionState, instance: Instance) -> np.ndarray:
    if state.done:
        raise InvariantError("no actions in a terminal state")
    if instance.kind is ProblemKind.TSP:
        mask = ~state.visited
    else:
        mask = ~state.visited & (instance.demands <= state.remaining)
        mask[0] = state.current != 0
    if not mask.any():
        raise InvariantError("all actions masked in a non-terminal state")
    return mask


def env_step(state: ConstructionState, instance: Instance, action: int) -> tuple[ConstructionState, bool]:
    """Apply ``action`` and return the successor state and the done flag."""
    action = int(action)
    if state.done or not feasible_mask(state, instance)[action]:
        raise IllegalActionError(f"action {action} is masked")
    nxt = state.copy()
    nxt.sequence.append(action)
    nxt.current = action
    if instance.kind is ProblemKind.TSP:
        nxt.visited[action] = True
        nxt.done = bool(nxt.visited.all())
        return nxt, nxt.done
    if action == 0:
        nxt.remaining = int(instance.capacity)
        nxt.done = bool(nxt.visited[1:].all())
    else:
        nxt.visited[action] = True
        nxt.remaining -= int(instance.demands[action])
    return nxt, nxt.done


def replay(instance: Instance, sequence: Sequence[int]) -> ConstructionState:
    state = initial_state(instance)
    for a in canonical_sequence(instance, sequence):
        state, _ = env_step(state, instance, a)
    if not state.done:
        raise FeasibilityError("sequence does not complete the tour")
    return state


# ---------------------------------------------------------------------------
# x8 symmetry augmentation
# ---------------------------------------------------------------------------

AUGMENT_NAMES = (
    "(x,y)", "(y,x)", "(x,1-y)", "(1-x,y)", "(1-x,1-y)", "(y,1-x)", "(1-y,x)", "(1-y,1-x)",
)


def augment_coords(coords: np.ndarray) -> np.ndarray:
    """All 8 unit-square symmetries; returns shape (8, n, 2)."""
    c = np.asarray(coords, dtype=np.float64)
    x, y = c[..., 0], c[..., 1]
    variants = [
        (x, y), (y, x), (x, 1 - y), (1 - x, y), (1 - x, 1 - y), (y, 1 - x), (1 - y, x), (1 - y, 1 - x),
    ]
    return np.stack([np.stack(v, axis=-1) for v in variants])


def augment8(instance: Instance) -> list[Instance]:
    return [instance.with_coords(c) for c in augment_coords(instance.coords)]
