"""Reference solvers used as gap denominators.

Exact: Held-Karp for TSP (n <= 16) and permutation + optimal split for
CVRP (<= 8 customers).  Heuristic: nearest-neighbour + 2-opt for TSP,
savings + 2-opt + relocate for CVRP.  All are pure functions of
``(instance, seed)``.
"""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .problems import Instance, ProblemKind, Tour, split_routes, validate_tour

HELD_KARP_MAX = 16
EXACT_CVRP_MAX = 8
EPS = 1e-10


class SolverSizeError(ValueError):
    pass


@dataclass
class SolverResult:
    tour: Tour
    is_exact: bool
    method: str
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.tour.length


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.meta["seconds"] = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# TSP
# ---------------------------------------------------------------------------


def _held_karp(dist: np.ndarray) -> list[int]:
    n = dist.shape[0]
    if n <= 3:
        return list(range(n))
    m = n - 1  # nodes 1..n-1 encoded as bits 0..m-1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = dist[0, j + 1]
    masks = np.arange(full)
    popcount = np.array([bin(x).count("1") for x in range(full)])
    sub = dist[1:, 1:]
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            bit = 1 << j
            rows = layer[(layer & bit) != 0]
            prev = rows ^ bit
            cand = dp[prev] + sub[:, j][None, :]
            best = np.argmin(cand, axis=1)
            dp[rows, j] = cand[np.arange(len(rows)), best]
            parent[rows, j] = best
    closing = dp[full - 1] + dist[1:, 0]
    last = int(np.argmin(closing))
    order, mask = [], full - 1
    while last >= 0:
        order.append(last + 1)
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
    return [0] + order[::-1]


@_timed
def exact_tsp(instance: Instance) -> SolverResult:
    """Held-Karp dynamic programme; globally optimal for n <= 16."""
    n = instance.n_nodes
    if n > HELD_KARP_MAX:
        raise SolverSizeError(f"exact_tsp supports n <= {HELD_KARP_MAX}; use heuristic_tsp for n={n}")
    seq = _held_karp(instance.distance_matrix())
    return SolverResult(Tour.build(instance, seq), True, "held-karp")


def _tour_len(dist, tour) -> float:
    t = np.asarray(tour)
    return float(dist[t, np.roll(t, -1)].sum())


def nearest_neighbor(dist: np.ndarray, start: int) -> list[int]:
    n = dist.shape[0]
    seen = np.zeros(n, dtype=bool)
    tour = [start]
    seen[start] = True
    for _ in range(n - 1):
        d = np.where(seen, np.inf, dist[tour[-1]])
        nxt = int(np.argmin(d))
        tour.append(nxt)
        seen[nxt] = True
    return tour


def _first_two_opt_move(dist, tour):
    """First improving (i, j) in lexicographic order, or None."""
    n = len(tour)
    t = np.asarray(tour)
    nxt = np.roll(t, -1)
    for i in range(n - 2):
        a, b = t[i], t[i + 1]
        js = np.arange(i + 2, n if i > 0 else n - 1)
        if js.size == 0:
            continue
        c, d = t[js], nxt[js]
        delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
        hit = np.flatnonzero(delta < -EPS)
        if hit.size:
            return i, int(js[hit[0]]), float(delta[hit[0]])
    return None


def two_opt(dist: np.ndarray, tour, log: Optional[list] = None) -> list[int]:
    """First-improvement 2-opt to a local optimum; ``log`` receives the length after each move."""
    tour = list(tour)
    if len(tour) < 4:
        return tour
    length = _tour_len(dist, tour)
    if log is not None:
        log.append(length)
    while True:
        move = _first_two_opt_move(dist, tour)
        if move is None:
            return tour
        i, j, delta = move
        tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1]
        length += delta
        if log is not None:
            log.append(length)


def count_two_opt_moves(dist: np.ndarray, tour) -> int:
    """Number of strictly improving 2-opt moves available (0 at a local optimum)."""
    n = len(tour)
    t = np.asarray(tour)
    nxt = np.roll(t, -1)
    total = 0
    for i in range(n - 2):
        js = np.arange(i + 2, n if i > 0 else n - 1)
        if js.size == 0:
            continue
        a, b, c, d = t[i], t[i + 1], t[js], nxt[js]
        delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
        total += int((delta < -EPS).sum())
    return total


@_timed
def heuristic_tsp(instance: Instance, seed: int = 0, n_starts: int = 10) -> SolverResult:
    """Best of ``min(n, n_starts)`` nearest-neighbour starts, each polished by 2-opt."""
    dist = instance.distance_matrix()
    n = instance.n_nodes
    rng = np.random.default_rng([int(seed), 2])
    starts = rng.choice(n, size=min(n, n_starts), replace=False)
    best, best_len, logs = None, np.inf, []
    for s in starts:
        log: list[float] = []
        tour = two_opt(dist, nearest_neighbor(dist, int(s)), log)
        logs.append(log)
        length = _tour_len(dist, tour)
        if length < best_len - EPS:
            best, best_len = tour, length
    return SolverResult(
        Tour.build(instance, best), False, "nn+2opt", {"starts": starts.tolist(), "improvement_logs": logs}
    )


# ---------------------------------------------------------------------------
# CVRP
# ---------------------------------------------------------------------------


def _split_all(perms: np.ndarray, dist: np.ndarray, demands: np.ndarray, capacity: int):
    """Optimal route split of every giant tour in ``perms`` (P, n).

    Returns the best cost per permutation and the predecessor table for
    back-tracking the split points.
    """
    p, n = perms.shape
    d0 = dist[0, perms]  # (P, n)
    step = dist[perms[:, :-1], perms[:, 1:]]  # (P, n-1)
    path = np.concatenate([np.zeros((p, 1)), np.cumsum(step, axis=1)], axis=1)
    load = np.concatenate([np.zeros((p, 1)), np.cumsum(demands[perms], axis=1)], axis=1)
    value = np.full((p, n + 1), np.inf)
    value[:, 0] = 0.0
    pred = np.zeros((p, n + 1), dtype=np.int64)
    for j in range(1, n + 1):
        for i in range(j):
            ok = load[:, j] - load[:, i] <= capacity
            cost = value[:, i] + d0[:, i] + (path[:, j - 1] - path[:, i]) + d0[:, j - 1]
            cost = np.where(ok, cost, np.inf)
            better = cost < value[:, j] - EPS
            value[:, j] = np.where(better, cost, value[:, j])
            pred[:, j] = np.where(better, i, pred[:, j])
    return value[:, n], pred


def split_giant_tour(perm, dist, demands, capacity) -> list[int]:
    """Optimal depot insertion for one customer order; returns a CVRP action sequence."""
    perm = np.asarray(perm)[None, :]
    _, pred = _split_all(perm, dist, np.asarray(demands), capacity)
    return _unsplit(perm[0], pred[0])


def _unsplit(perm, pred) -> list[int]:
    cuts, j = [], len(perm)
    while j > 0:
        i = int(pred[j])
        cuts.append((i, j))
        j = i
    seq = []
    for i, j in reversed(cuts):
        seq.extend(int(c) for c in perm[i:j])
        seq.append(0)
    return seq


@_timed
def exact_cvrp(instance: Instance) -> SolverResult:
    """Enumerate customer orders, split each optimally; exact for <= 8 customers."""
    n = instance.n_customers
    if n > EXACT_CVRP_MAX:
        raise SolverSizeError(f"exact_cvrp supports <= {EXACT_CVRP_MAX} customers, got {n}")
    dist = instance.distance_matrix()
    perms = np.array(list(itertools.permutations(range(1, n + 1))), dtype=np.int64)
    cost, pred = _split_all(perms, dist, np.asarray(instance.demands), int(instance.capacity))
    k = int(np.argmin(cost))
    seq = _unsplit(perms[k], pred[k])
    return SolverResult(Tour.build(instance, seq), True, "permutation+split")


def _route_cost(dist, route) -> float:
    path = [0] + list(route) + [0]
    return float(sum(dist[a, b] for a, b in zip(path, path[1:])))


def _savings(dist, demands, capacity) -> list[list[int]]:
    n = dist.shape[0] - 1
    routes = {i: [i] for i in range(1, n + 1)}
    owner = {i: i for i in range(1, n + 1)}
    load = {i: int(demands[i]) for i in range(1, n + 1)}
    pairs = [
        (dist[0, i] + dist[0, j] - dist[i, j], i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)
    ]
    pairs.sort(key=lambda s: (-s[0], s[1], s[2]))
    for s, i, j in pairs:
        if s <= 0:
            break
        ri, rj = owner[i], owner[j]
        if ri == rj or load[ri] + load[rj] > capacity:
            continue
        a, b = routes[ri], routes[rj]
        # i and j must be route ends; orient so that a ends with i and b starts with j
        if a[-1] != i:
            if a[0] == i:
                a = a[::-1]
            else:
                continue
        if b[0] != j:
            if b[-1] == j:
                b = b[::-1]
            else:
                continue
        merged = a + b
        routes[ri] = merged
        load[ri] += load[rj]
        del routes[rj], load[rj]
        for c in b:
            owner[c] = ri
    return [routes[k] for k in sorted(routes)]


def _two_opt_route(dist, route) -> tuple[list[int], bool]:
    if len(route) < 3:
        return route, False
    tour = [0] + list(route)
    improved = two_opt(dist, tour)
    # rotate so the depot leads again
    k = improved.index(0)
    improved = improved[k:] + improved[:k]
    new = improved[1:]
    changed = _route_cost(dist, new) < _route_cost(dist, route) - EPS
    return (new, True) if changed else (route, False)


def _first_relocate(dist, routes, loads, demands, capacity):
    """First improving customer relocation into a different route, or None."""
    for r1, route in enumerate(routes):
        for pos, c in enumerate(route):
            prev = route[pos - 1] if pos > 0 else 0
            nxt = route[pos + 1] if pos + 1 < len(route) else 0
            gain = dist[prev, c] + dist[c, nxt] - dist[prev, nxt]
            for r2, other in enumerate(routes):
                if r2 == r1 or loads[r2] + demands[c] > capacity:
                    continue
                path = [0] + other + [0]
                for k in range(len(path) - 1):
                    a, b = path[k], path[k + 1]
                    delta = dist[a, c] + dist[c, b] - dist[a, b] - gain
                    if delta < -EPS:
                        return r1, pos, r2, k, float(delta)
    return None


def local_search_cvrp(dist, routes, demands, capacity, check=None) -> list[list[int]]:
    """Intra-route 2-opt plus inter-route relocate until neither improves."""
    routes = [list(r) for r in routes if r]
    loads = [int(sum(demands[c] for c in r)) for r in routes]
    while True:
        changed = False
        for k, r in enumerate(routes):
            routes[k], ch = _two_opt_route(dist, r)
            changed |= ch
        move = _first_relocate(dist, routes, loads, demands, capacity)
        if move is not None:
            r1, pos, r2, k, _ = move
            c = routes[r1].pop(pos)
            routes[r2].insert(k, c)
            loads[r1] -= int(demands[c])
            loads[r2] += int(demands[c])
            if not routes[r1]:
                del routes[r1], loads[r1]
            changed = True
        if check is not None:
            check(routes)
        if not changed:
            return routes


def routes_to_sequence(routes) -> list[int]:
    seq = []
    for r in routes:
        seq.extend(int(c) for c in r)
        seq.append(0)
    return seq


@_timed
def heuristic_cvrp(instance: Instance, seed: int = 0, check_every_step: bool = False) -> SolverResult:
    """Clarke-Wright savings, then 2-opt and relocate to a local optimum."""
    dist = instance.distance_matrix()
    demands = np.asarray(instance.demands)
    cap = int(instance.capacity)
    routes = _savings(dist, demands, cap)
    checked = []

    def check(rs):
        bad = validate_tour(instance, routes_to_sequence(rs))
        checked.append(bad is None)
        if bad is not None:
            raise AssertionError(f"local search produced an infeasible solution: {bad}")

    routes = local_search_cvrp(dist, routes, demands, cap, check if check_every_step else None)
    meta = {"steps_checked": len(checked)} if check_every_step else {}
    return SolverResult(Tour.build(instance, routes_to_sequence(routes)), False, "savings+ls", meta)


def count_cvrp_moves(instance: Instance, sequence) -> int:
    """Improving 2-opt (per route) plus relocate moves available for a solution."""
    dist = instance.distance_matrix()
    routes = split_routes(sequence)
    moves = 0
    for r in routes:
        if len(r) >= 3:
            moves += count_two_opt_moves(dist, [0] + r)
    loads = [int(instance.demands[r].sum()) for r in routes]
    if _first_relocate(dist, routes, loads, instance.demands, int(instance.capacity)) is not None:
        moves += 1
    return moves


# ---------------------------------------------------------------------------
# Dispatch and cache
# ---------------------------------------------------------------------------


def solve_reference(instance: Instance, seed: int = 0) -> SolverResult:
    if instance.kind is ProblemKind.TSP:
        res = exact_tsp(instance) if instance.n_nodes <= HELD_KARP_MAX else heuristic_tsp(instance, seed)
    else:
        res = exact_cvrp(instance) if instance.n_customers <= EXACT_CVRP_MAX else heuristic_cvrp(instance, seed)
    res.meta["dispatch"] = "exact" if res.is_exact else "heuristic"
    return res


class ReferenceCache:
    """JSON-lines cache ``{"key", "length", "is_exact"}`` keyed by instance fingerprint."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.entries: dict[str, dict] = {}
        if self.path and self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    if line.strip():
                        obj = json.loads(line)
                        self.entries[obj["key"]] = obj

    def get(self, instance: Instance) -> Optional[dict]:
        return self.entries.get(instance.fingerprint())

    def lookup_or_solve(self, instance: Instance, seed: int = 0) -> dict:
        key = instance.fingerprint()
        if key not in self.entries:
            res = solve_reference(instance, seed)
            self.entries[key] = {
                "key": key,
                "length": res.length,
                "is_exact": res.is_exact,
                "sequence": list(res.tour.sequence),
            }
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(self.entries[key]) + "\n")
        return self.entries[key]
