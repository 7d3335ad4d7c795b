"""Independent brute-force oracles used to freeze expected values.

Nothing here imports the solver or policy code paths it checks.
"""
import itertools
import math

import numpy as np


def euclid(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def closed_length(coords, order):
    return sum(euclid(coords[order[k]], coords[order[(k + 1) % len(order)]]) for k in range(len(order)))


def brute_force_tsp(coords):
    """Optimal closed-tour length by enumerating (n-1)!/2 orders with node 0 fixed."""
    n = len(coords)
    if n <= 3:
        return closed_length(coords, list(range(n)))
    pts = np.asarray(coords, dtype=np.float64)
    dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    rest = np.array([p for p in itertools.permutations(range(1, n)) if p[0] < p[-1]])
    total = dist[0, rest[:, 0]] + dist[rest[:, -1], 0]
    total = total + dist[rest[:, :-1], rest[:, 1:]].sum(1)
    return float(total.min())


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1:]
        yield [[first]] + part


def brute_force_cvrp(coords, demands, capacity):
    """Optimal CVRP cost via set partitions of customers, each route solved by brute force."""
    n = len(coords) - 1
    route_cache = {}

    def route_cost(group):
        key = tuple(sorted(group))
        if key not in route_cache:
            best = math.inf
            for perm in itertools.permutations(key):
                path = (0,) + perm + (0,)
                best = min(best, sum(euclid(coords[a], coords[b]) for a, b in zip(path, path[1:])))
            route_cache[key] = best
        return route_cache[key]

    best = math.inf
    for part in _set_partitions(list(range(1, n + 1))):
        if any(sum(demands[c] for c in g) > capacity for g in part):
            continue
        best = min(best, sum(route_cost(g) for g in part))
    return best


def masked_softmax(logits, mask):
    """Reference masked softmax over a 1-D list."""
    m = max(l for l, ok in zip(logits, mask) if ok)
    ex = [math.exp(l - m) if ok else 0.0 for l, ok in zip(logits, mask)]
    s = sum(ex)
    return [e / s for e in ex]


def kl(p, q):
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def softmax(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    return [e / sum(ex) for e in ex]


def central_difference(f, params, name, index, h=1e-5):
    """(f(θ + h e) - f(θ - h e)) / 2h for one entry of one tensor; ``f`` maps params to a float."""
    import torch

    plus = params.clone()
    minus = params.clone()
    with torch.no_grad():
        plus.tensors[name].view(-1)[index] += h
        minus.tensors[name].view(-1)[index] -= h
    return (f(plus) - f(minus)) / (2 * h)


def fd_relative_error(f, params, grads, entries_per_tensor=3, seed=0, h=1e-5):
    """Worst norm-wise relative error between ``grads`` and central differences.

    A few entries are sampled from every tensor; for each tensor the error is
    ||g - fd|| / max(||g||, ||fd||), or 0 when both vanish (< 1e-8, the
    round-off level of a difference quotient with h=1e-5).
    """
    rng = np.random.default_rng(seed)
    worst, detail = 0.0, {}
    for name in params.names():
        size = params[name].numel()
        idx = rng.choice(size, size=min(entries_per_tensor, size), replace=False)
        g = np.array([float(grads[name].reshape(-1)[i]) for i in idx])
        fd = np.array([central_difference(f, params, name, int(i), h) for i in idx])
        scale = max(np.linalg.norm(g), np.linalg.norm(fd))
        err = 0.0 if scale < 1e-8 else float(np.linalg.norm(g - fd) / scale)
        detail[name] = err
        worst = max(worst, err)
    return worst, detail
