import csv

import numpy as np
import pytest

from routedistill.bench import (
    TABLE_COLUMNS,
    BenchmarkInstance,
    GapReport,
    ParseError,
    UnsupportedFormatError,
    evaluate,
    load_benchmark,
    nint,
    parse_cvrplib,
    parse_tsplib,
    read_tour_file,
    serialize,
    write_gap_table,
)
from routedistill.instancegen import DistributionSpec, make_dataset, make_rng
from routedistill.policy import ArchSpec, best_of, init_params
from routedistill.problems import ProblemKind
from routedistill.solvers import solve_reference

TSP3 = """NAME : tri3
COMMENT : synthetic
TYPE : TSP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
NODE_COORD_SECTION
1 0 0
2 3 0
3 0 4
EOF
"""

CVRP2 = """NAME : two
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 10
NODE_COORD_SECTION
1 5 5
2 10 5
3 5 12.5
DEMAND_SECTION
1 4
2 7
3 0
DEPOT_SECTION
3
-1
EOF
"""


def test_tsplib_roundtrip():
    b = parse_tsplib(TSP3)
    assert b.name == "tri3" and b.dimension == 3 and b.comment == "synthetic"
    again = parse_tsplib(serialize(b))
    assert serialize(again) == serialize(b)
    assert np.array_equal(again.coords, b.coords)
    assert b.rounded_length([0, 1, 2]) == 12


def test_cvrplib_depot_reordered_and_roundtrip():
    b = parse_cvrplib(CVRP2)
    assert b.kind is ProblemKind.CVRP and b.capacity == 10
    assert b.coords[0].tolist() == [5.0, 12.5]
    assert b.node_ids == [3, 1, 2] and b.demands.tolist() == [0, 4, 7]
    again = parse_cvrplib(serialize(b))
    assert again.node_ids == b.node_ids and np.array_equal(again.coords, b.coords)
    assert again.demands.tolist() == b.demands.tolist()
    assert b.min_routes == 2


def test_pigeonhole_bound_holds_for_exact_solution():
    b = parse_cvrplib(CVRP2)
    seq = solve_reference(b.to_instance()).tour.sequence
    assert seq.count(0) >= b.min_routes


@pytest.mark.parametrize("ewt", ["GEO", "ATT", "EXPLICIT", "CEIL_2D"])
def test_unsupported_edge_weight_rejected(ewt):
    with pytest.raises(UnsupportedFormatError, match=ewt) as err:
        parse_tsplib(TSP3.replace("EUC_2D", ewt))
    assert err.value.line == 5


def test_unsupported_section_rejected():
    text = TSP3.replace("EOF", "DISPLAY_DATA_SECTION\n1 0 0\nEOF")
    with pytest.raises(UnsupportedFormatError):
        parse_tsplib(text)


@pytest.mark.parametrize(
    "bad,line",
    [
        (TSP3.replace("2 3 0", "2 3 x"), 8),
        (TSP3.replace("3 0 4", "3 0"), 9),
        (TSP3.replace("DIMENSION : 3", "DIMENSION : three"), 4),
        (TSP3.replace("DIMENSION : 3", "DIMENSION : 4"), 9),
    ],
)
def test_malformed_reports_line(bad, line):
    with pytest.raises(ParseError) as err:
        parse_tsplib(bad)
    assert err.value.line == line and f"line {line}" in str(err.value)


def test_cvrplib_errors():
    with pytest.raises(ParseError, match="CAPACITY"):
        parse_cvrplib(CVRP2.replace("CAPACITY : 10\n", ""))
    with pytest.raises(ParseError, match="depot demand"):
        parse_cvrplib(CVRP2.replace("3 0\nDEPOT", "3 2\nDEPOT"))
    with pytest.raises(ParseError, match="outside"):
        parse_cvrplib(CVRP2.replace("2 7", "2 11"))
    with pytest.raises(ParseError, match="one depot"):
        parse_cvrplib(CVRP2.replace("3\n-1", "-1"))
    with pytest.raises(UnsupportedFormatError):
        parse_cvrplib(TSP3)


def test_load_benchmark_dispatch(tmp_path):
    (tmp_path / "a.tsp").write_text(TSP3)
    (tmp_path / "b.vrp").write_text(CVRP2)
    assert load_benchmark(tmp_path / "a.tsp").kind is ProblemKind.TSP
    assert load_benchmark(tmp_path / "b.vrp").kind is ProblemKind.CVRP


def test_rounded_convention_and_tour_file():
    assert [nint(x) for x in (0.49, 0.5, 1.5, 2.4999)] == [0, 1, 2, 2]
    pts = "\n".join(f"{i + 1} {x} {y}" for i, (x, y) in enumerate([(0, 0), (1.4, 0), (1.4, 1.4), (0, 1.4)]))
    text = TSP3.replace("DIMENSION : 3", "DIMENSION : 4").split("NODE_COORD_SECTION")[0]
    b = parse_tsplib(text + "NODE_COORD_SECTION\n" + pts + "\nEOF\n")
    tour = read_tour_file("NAME : sq.tour\nTYPE : TOUR\nDIMENSION : 4\nTOUR_SECTION\n1\n2\n3\n4\n-1\nEOF\n")
    assert tour == [1, 2, 3, 4]
    seq = [i - 1 for i in tour]
    assert b.rounded_length(seq) == 4  # raw Euclidean is 5.6
    assert solve_reference(b.to_instance(normalize=False)).length == pytest.approx(5.6)


def test_uniform_span_normalization_keeps_aspect():
    b = BenchmarkInstance("r", 3, [[10, 10], [30, 10], [10, 15]])
    inst = b.to_instance()
    assert inst.coords.tolist() == [[0, 0], [1, 0], [0, 0.25]]
    assert solve_reference(inst).length * 20 == pytest.approx(solve_reference(b.to_instance(False)).length)


def test_dimension_mismatch_rejected():
    with pytest.raises(ParseError):
        BenchmarkInstance("x", 4, np.zeros((3, 2)))


# evaluate


@pytest.fixture(scope="module")
def data():
    insts = make_dataset("tsp", DistributionSpec(), 8, 6, 1)
    refs = [solve_reference(i) for i in insts]
    return insts, refs


def test_reference_as_policy_has_zero_gap(data, tmp_path):
    insts, refs = data
    table = {i.fingerprint(): r for i, r in zip(insts, refs)}

    def oracle(batch):
        rs = [table[i.fingerprint()] for i in batch]
        return [r.length for r in rs], [r.tour.sequence for r in rs]

    rep = evaluate(oracle, {"uniform": (insts, [r.length for r in refs])}, per_instance_csv=tmp_path / "p.csv")
    assert rep.gaps["uniform"] == pytest.approx(0.0, abs=1e-12)
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(rows) == 6 and all(abs(float(r["gap"])) < 1e-12 for r in rows)


def test_missing_reference_skipped(data, caplog):
    insts, refs = data
    r = [x.length for x in refs]
    r[2] = None
    policy = init_params(ArchSpec(embed_dim=8, n_heads=2, n_encoder_layers=1), 0)
    rep = evaluate(policy, {"u": (insts, r)}, decode="greedy")
    assert rep.counts["u"] == 5 and rep.skipped["u"] == 1
    assert "skipped" in caplog.text


def test_aug8_never_worse_than_greedy(data):
    insts, _ = data
    policy = init_params(ArchSpec(embed_dim=8, n_heads=2, n_encoder_layers=1), 3)
    greedy, _ = best_of(policy, insts, "greedy")
    aug, _ = best_of(policy, insts, "greedy_aug8")
    assert np.all(aug <= greedy + 1e-12)


def test_sample_k_monotone(data):
    insts, refs = data
    policy = init_params(ArchSpec(embed_dim=8, n_heads=2, n_encoder_layers=1), 4)
    src = {"u": (insts, [r.length for r in refs])}
    gaps = [evaluate(policy, src, "sample", make_rng(0), samples=k).gaps["u"] for k in (1, 4, 16, 64)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_policy_sees_unit_square_and_gap_is_scale_free(data):
    insts, refs = data
    policy = init_params(ArchSpec(embed_dim=8, n_heads=2, n_encoder_layers=1), 5)
    base = evaluate(policy, {"u": (insts, [r.length for r in refs])}, "greedy")
    big = [i.with_coords(i.coords * 50 + 7) for i in insts]
    scaled = evaluate(policy, {"u": (big, [50 * r.length for r in refs])}, "greedy")
    assert scaled.gaps["u"] == pytest.approx(base.gaps["u"], abs=1e-9)


def test_overall_is_mean_of_sources_and_table(tmp_path):
    rep = GapReport({"uniform": 0.01, "cluster": 0.03, "grid": 0.05})
    assert rep.overall == pytest.approx(0.03, abs=1e-15)
    write_gap_table(tmp_path / "t.csv", {"teacher": rep})
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["model", "G_U", "G_C", "G_M", "Expansion", "Implosion", "Explosion", "Grid", "Avg."]
    assert rows[1][0] == "teacher" and float(rows[1][1]) == pytest.approx(1.0) and rows[1][3] == ""
    assert float(rows[1][-1]) == pytest.approx(3.0)
    assert len(TABLE_COLUMNS) == 7
