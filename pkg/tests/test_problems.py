import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from routedistill.instancegen import DistributionSpec, make_instance, make_rng
from routedistill.problems import (
    ConstructionState,
    FeasibilityError,
    IllegalActionError,
    Instance,
    InvariantError,
    ProblemKind,
    Tour,
    augment8,
    augment_coords,
    env_step,
    feasible_mask,
    initial_state,
    replay,
    split_routes,
    tour_length,
    validate_tour,
)

from oracles import closed_length

SQUARE = Instance(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float))


def cvrp(coords, demands, capacity):
    return Instance(np.asarray(coords, float), ProblemKind.CVRP, demands=np.array(demands), capacity=capacity)


def test_square_perimeter():
    assert tour_length(SQUARE, [0, 1, 2, 3]) == 4.0


def test_two_node_out_and_back():
    inst = Instance(np.array([[0.1, 0.2], [0.4, 0.6]]))
    assert tour_length(inst, [1, 0]) == pytest.approx(1.0)


def test_length_matches_resummation():
    rng = make_rng(0)
    for _ in range(20):
        inst = make_instance("tsp", DistributionSpec(), 8, rng)
        order = rng.permutation(8).tolist()
        assert tour_length(inst, order) == pytest.approx(closed_length(inst.coords, order), abs=1e-12)


def test_cvrp_length_adds_depot_legs():
    inst = cvrp([[0, 0], [1, 0], [0, 1]], [0, 1, 1], 1)
    assert tour_length(inst, [1, 0, 2]) == pytest.approx(4.0)
    assert tour_length(inst, [1, 0, 2, 0]) == pytest.approx(4.0)


def test_instance_validation():
    with pytest.raises(ValueError):
        Instance(np.zeros((3, 2)), ProblemKind.TSP, demands=np.zeros(3), capacity=3)
    with pytest.raises(ValueError):
        cvrp(np.zeros((3, 2)), [1, 1, 1], 3)
    with pytest.raises(ValueError):
        cvrp(np.zeros((3, 2)), [0, 4, 1], 3)
    with pytest.raises(ValueError):
        Instance(np.zeros((3, 3)))


def test_violations():
    assert validate_tour(SQUARE, [0, 1, 2]).kind == "missing"
    assert validate_tour(SQUARE, [0, 1, 1, 2]).kind == "repeat"
    assert validate_tour(SQUARE, [0, 1, 2, 7]).kind == "unknown-node"
    assert validate_tour(SQUARE, []).kind == "empty"
    inst = cvrp(np.zeros((4, 2)), [0, 2, 2, 1], 4)
    v = validate_tour(inst, [1, 2, 3])
    assert v.kind == "capacity" and v.subtour == 0
    assert validate_tour(inst, [1, 2, 0, 3]) is None
    with pytest.raises(FeasibilityError, match="capacity"):
        tour_length(inst, [1, 2, 3])


def test_fresh_tsp_mask_after_first_move():
    inst = Instance(make_rng(0).random((5, 2)))
    s, _ = env_step(initial_state(inst), inst, 0)
    assert feasible_mask(s, inst).tolist() == [False, True, True, True, True]


def test_cvrp_mask_example():
    inst = cvrp(np.zeros((4, 2)), [0, 5, 2, 5], 8)
    s, _ = env_step(initial_state(inst), inst, 3)
    assert s.remaining == 3
    assert feasible_mask(s, inst).tolist() == [True, False, True, False]
    with pytest.raises(IllegalActionError):
        env_step(s, inst, 1)
    s0, _ = env_step(s, inst, 0)
    assert s0.remaining == 8
    assert not feasible_mask(s0, inst)[0]  # no depot self-loop


def test_all_false_mask_is_invariant_error():
    inst = Instance(np.zeros((2, 2)))
    s = ConstructionState(visited=np.array([True, True]), current=1)
    with pytest.raises(InvariantError):
        feasible_mask(s, inst)


def test_tsp_done_after_n_steps():
    inst = Instance(make_rng(1).random((6, 2)))
    s = initial_state(inst)
    for k, a in enumerate([3, 1, 0, 5, 2, 4]):
        s, done = env_step(s, inst, a)
        assert done == (k == 5)


def _valid_cvrp_tours(inst):
    n = inst.n_nodes - 1
    for perm in itertools.permutations(range(1, n + 1)):
        for cuts in itertools.product([False, True], repeat=n - 1):
            seq = [perm[0]]
            for c, cut in zip(perm[1:], cuts):
                if cut:
                    seq.append(0)
                seq.append(c)
            seq.append(0)
            loads = [sum(inst.demands[r]) for r in split_routes(seq)]
            if max(loads) <= inst.capacity:
                yield tuple(seq)


def test_cvrp_mask_matches_completion_oracle():
    rng = make_rng(2)
    inst = cvrp(rng.random((7, 2)), [0, 3, 5, 2, 4, 1, 6], 8)
    legal: dict[tuple, set] = {}
    for seq in _valid_cvrp_tours(inst):
        for t in range(len(seq)):
            legal.setdefault(seq[:t], set()).add(seq[t])
    stack = [((), initial_state(inst))]
    visited = 0
    while stack:
        prefix, state = stack.pop()
        if state.done:
            continue
        got = set(np.flatnonzero(feasible_mask(state, inst)).tolist())
        assert got == legal[prefix], prefix
        visited += 1
        for a in got:
            stack.append((prefix + (a,), env_step(state, inst, a)[0]))
    assert visited == len(legal)


def test_replay_stored_tour():
    inst = make_instance("cvrp", DistributionSpec(), 8, make_rng(3))
    seq = []
    load = 0
    for c in range(1, 9):
        if load + inst.demands[c] > inst.capacity:
            seq.append(0)
            load = 0
        seq.append(c)
        load += inst.demands[c]
    state = replay(inst, seq)
    assert state.done and validate_tour(inst, state.sequence) is None
    with pytest.raises(FeasibilityError):
        replay(inst, seq[:-2])


def test_tour_json_roundtrip():
    t = Tour.build(SQUARE, [0, 1, 2, 3])
    line = t.to_json({"seed": 1, "kind": "uniform", "index": 0})
    back, ref = Tour.from_json(line, SQUARE)
    assert back == t and ref["seed"] == 1
    bad = json.loads(line)
    bad["length"] = 5.0
    with pytest.raises(FeasibilityError):
        Tour.from_json(json.dumps(bad), SQUARE)


def test_augment_identity_first_and_involutions():
    c = make_rng(4).random((5, 2))
    aug = augment_coords(c)
    assert np.array_equal(aug[0], c)
    for k in range(8):
        twice = augment_coords(aug[k])[k]
        if k in (0, 1, 2, 3, 4, 7):  # the involutions among the 8
            assert np.allclose(twice, c, atol=1e-15)
    # closure: composing any two symmetries lands in the set
    for a in range(8):
        for b in range(8):
            comp = augment_coords(aug[a])[b]
            assert any(np.allclose(comp, aug[k]) for k in range(8))


@given(st.integers(0, 2**32), st.sampled_from(["tsp", "cvrp"]))
@settings(max_examples=40, deadline=None)
def test_length_invariant_under_augment(seed, problem):
    rng = make_rng(seed)
    inst = make_instance(problem, DistributionSpec(), 7, rng)
    if problem == "tsp":
        seq = rng.permutation(7).tolist()
    else:
        seq = [c for c in rng.permutation(np.arange(1, 8)).tolist() for c in (c, 0)]
    base = tour_length(inst, seq)
    for v in augment8(inst):
        assert abs(tour_length(v, seq) - base) < 1e-9
        if problem == "cvrp":
            assert np.array_equal(v.demands, inst.demands)


def test_route_demands_sum():
    inst = make_instance("cvrp", DistributionSpec(), 10, make_rng(5))
    seq = [c for c in range(1, 11) for c in (c, 0)]
    assert sum(int(inst.demands[r].sum()) for r in split_routes(seq)) == int(inst.demands.sum())
