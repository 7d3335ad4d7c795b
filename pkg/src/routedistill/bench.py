"""TSPLIB / CVRPLIB parsing and gap reporting."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .instancegen import DistributionKind
from .policy import PolicyParams, best_of
from .problems import Instance, ProblemKind, split_routes, validate_tour

log = logging.getLogger(__name__)

# published optimal / best-known lengths under the rounded-Euclidean convention
PUBLISHED_OPTIMA = {
    "kroA100": 21282,
    "eil101": 629,
    "X-n101-k25": 27591,
}


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedFormatError(ParseError):
    pass


@dataclass
class BenchmarkInstance:
    name: str
    dimension: int
    coords: np.ndarray  # (dimension, 2); for CVRP the depot is row 0
    edge_weight_type: str = "EUC_2D"
    kind: ProblemKind = ProblemKind.TSP
    demands: Optional[np.ndarray] = None
    capacity: Optional[int] = None
    depot: int = 0
    comment: str = ""
    node_ids: Optional[list] = None  # original ids in file order of ``coords``

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (self.dimension, 2):
            raise ParseError(f"DIMENSION {self.dimension} but {len(self.coords)} coordinates")
        if self.edge_weight_type != "EUC_2D":
            raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {self.edge_weight_type}")
        if self.node_ids is None:
            self.node_ids = list(range(1, self.dimension + 1))

    @property
    def min_routes(self) -> int:
        """Pigeonhole lower bound on the number of routes."""
        if self.kind is not ProblemKind.CVRP:
            return 1
        return max(1, math.ceil(int(self.demands.sum()) / self.capacity))

    def scale(self) -> tuple[np.ndarray, float]:
        """Offset and factor mapping the coordinates into the unit square."""
        lo = self.coords.min(axis=0)
        span = float((self.coords.max(axis=0) - lo).max())
        return lo, span if span > 0 else 1.0

    def to_instance(self, normalize: bool = True) -> Instance:
        coords = self.coords
        if normalize:
            lo, span = self.scale()
            coords = (coords - lo) / span
        if self.kind is ProblemKind.CVRP:
            return Instance(coords, ProblemKind.CVRP, demands=self.demands, capacity=self.capacity, name=self.name)
        return Instance(coords, ProblemKind.TSP, name=self.name)

    def rounded_length(self, sequence: Sequence[int]) -> int:
        """Tour length with nearest-integer edge weights on the original coordinates."""
        seq = list(sequence)
        if self.kind is ProblemKind.TSP:
            path = seq + seq[:1]
        else:
            path = [0]
            for route in split_routes(seq):
                path += route + [0]
        total = 0
        for a, b in zip(path[:-1], path[1:]):
            total += nint(float(np.hypot(*(self.coords[a] - self.coords[b]))))
        return total


def nint(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


def _read_sections(text: str):
    """Header dict and ``{section: [(line_no, tokens)]}``."""
    header: dict[str, tuple[int, str]] = {}
    sections: dict[str, list] = {}
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        word = line.split()[0].rstrip(":")
        if word in _SECTIONS:
            current = word
            sections[current] = []
            continue
        if word.endswith("_SECTION"):
            raise UnsupportedFormatError(f"unsupported section {word}", no)
        if current is None or (":" in line and not line[0].isdigit() and not line[0] == "-"):
            if ":" not in line:
                raise ParseError(f"expected KEY : VALUE, got {line!r}", no)
            key, _, value = line.partition(":")
            header[key.strip()] = (no, value.strip())
            current = None
            continue
        sections[current].append((no, line.split()))
    return header, sections


def _int(value: str, no: int, what: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {value!r}", no) from None


def _coords(rows, dimension: int):
    ids, pts = [], []
    for no, tok in rows:
        if len(tok) != 3:
            raise ParseError(f"coordinate line needs 'id x y', got {' '.join(tok)!r}", no)
        ids.append(_int(tok[0], no, "node id"))
        try:
            pts.append((float(tok[1]), float(tok[2])))
        except ValueError:
            raise ParseError(f"bad coordinate {' '.join(tok)!r}", no) from None
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate node id in NODE_COORD_SECTION", rows[0][0] if rows else None)
    return ids, np.array(pts, dtype=np.float64).reshape(-1, 2)


def _common(text: str, expected_type: set[str]):
    header, sections = _read_sections(text)
    if "EDGE_WEIGHT_TYPE" not in header:
        raise ParseError("missing EDGE_WEIGHT_TYPE")
    no, ewt = header["EDGE_WEIGHT_TYPE"]
    if ewt != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {ewt}", no)
    if "TYPE" in header and header["TYPE"][1] not in expected_type:
        raise UnsupportedFormatError(f"unexpected TYPE {header['TYPE'][1]}", header["TYPE"][0])
    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION")
    dimension = _int(header["DIMENSION"][1], header["DIMENSION"][0], "DIMENSION")
    if "NODE_COORD_SECTION" not in sections:
        raise ParseError("missing NODE_COORD_SECTION")
    rows = sections["NODE_COORD_SECTION"]
    ids, pts = _coords(rows, dimension)
    if len(ids) != dimension:
        last = rows[-1][0] if rows else header["DIMENSION"][0]
        raise ParseError(f"DIMENSION {dimension} but {len(ids)} coordinates", last)
    name = header.get("NAME", (0, ""))[1]
    comment = header.get("COMMENT", (0, ""))[1]
    return header, sections, name, comment, dimension, ids, pts


def parse_tsplib(text: str) -> BenchmarkInstance:
    _, _, name, comment, dim, ids, pts = _common(text, {"TSP"})
    return BenchmarkInstance(name, dim, pts, comment=comment, node_ids=ids)


def parse_cvrplib(text: str) -> BenchmarkInstance:
    header, sections, name, comment, dim, ids, pts = _common(text, {"CVRP"})
    if "CAPACITY" not in header:
        raise ParseError("missing CAPACITY")
    capacity = _int(header["CAPACITY"][1], header["CAPACITY"][0], "CAPACITY")
    if "DEMAND_SECTION" not in sections:
        raise ParseError("missing DEMAND_SECTION")
    demand = {}
    for no, tok in sections["DEMAND_SECTION"]:
        if len(tok) != 2:
            raise ParseError(f"demand line needs 'id demand', got {' '.join(tok)!r}", no)
        demand[_int(tok[0], no, "node id")] = _int(tok[1], no, "demand")
    if set(demand) != set(ids):
        raise ParseError("DEMAND_SECTION ids do not match NODE_COORD_SECTION")
    depots = []
    for no, tok in sections.get("DEPOT_SECTION", []):
        v = _int(tok[0], no, "depot id")
        if v == -1:
            break
        depots.append((no, v))
    if len(depots) != 1:
        raise ParseError(f"expected exactly one depot, got {len(depots)}")
    no, depot = depots[0]
    if depot not in ids:
        raise ParseError(f"depot {depot} is not a node", no)
    # depot first, customers in file order
    order = [ids.index(depot)] + [i for i, v in enumerate(ids) if v != depot]
    pts = pts[order]
    new_ids = [ids[i] for i in order]
    dem = np.array([demand[v] for v in new_ids], dtype=np.int64)
    if dem[0] != 0:
        raise ParseError(f"depot demand must be 0, got {dem[0]}", no)
    if (dem[1:] > capacity).any() or (dem < 0).any():
        raise ParseError("demand outside [0, CAPACITY]")
    inst = BenchmarkInstance(
        name, dim, pts, kind=ProblemKind.CVRP, demands=dem, capacity=capacity, comment=comment, node_ids=new_ids
    )
    log.debug("%s needs at least %d routes", name, inst.min_routes)
    return inst


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def serialize(bench: BenchmarkInstance) -> str:
    """TSPLIB / CVRPLIB text that parses back to an equal instance."""
    lines = [f"NAME : {bench.name}"]
    if bench.comment:
        lines.append(f"COMMENT : {bench.comment}")
    lines.append(f"TYPE : {'CVRP' if bench.kind is ProblemKind.CVRP else 'TSP'}")
    lines.append(f"DIMENSION : {bench.dimension}")
    lines.append(f"EDGE_WEIGHT_TYPE : {bench.edge_weight_type}")
    if bench.kind is ProblemKind.CVRP:
        lines.append(f"CAPACITY : {bench.capacity}")
    lines.append("NODE_COORD_SECTION")
    for nid, (x, y) in zip(bench.node_ids, bench.coords):
        lines.append(f"{nid} {_fmt_num(x)} {_fmt_num(y)}")
    if bench.kind is ProblemKind.CVRP:
        lines.append("DEMAND_SECTION")
        for nid, d in zip(bench.node_ids, bench.demands):
            lines.append(f"{nid} {int(d)}")
        lines += ["DEPOT_SECTION", str(bench.node_ids[0]), "-1"]
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def load_benchmark(path) -> BenchmarkInstance:
    text = Path(path).read_text()
    if "DEMAND_SECTION" in text or "CAPACITY" in text:
        return parse_cvrplib(text)
    return parse_tsplib(text)


def read_tour_file(text: str) -> list[int]:
    """Node ids (1-based) from a TSPLIB ``.tour`` file."""
    out, inside = [], False
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line == "TOUR_SECTION":
            inside = True
            continue
        if not inside or not line:
            continue
        for tok in line.split():
            v = _int(tok, no, "tour node")
            if v == -1:
                return out
            out.append(v)
    return out


# ---------------------------------------------------------------------------
# Gap reports
# ---------------------------------------------------------------------------


@dataclass
class GapReport:
    gaps: dict  # source name -> mean relative gap
    counts: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return float(np.mean(list(self.gaps.values())))

    def to_dict(self) -> dict:
        return {"gaps": dict(self.gaps), "overall": self.overall, "counts": self.counts, "skipped": self.skipped}


PolicyOrSolver = Union[PolicyParams, Callable[[Sequence[Instance]], tuple]]


def solve_with(model: PolicyOrSolver, instances, decode: str, rng=None, samples: int = 1280):
    """Lengths and sequences of ``model`` on ``instances``.

    ``model`` is a policy or a callable returning ``(lengths, sequences)``.
    """
    if isinstance(model, PolicyParams):
        return best_of(model, instances, decode, rng=rng, samples=samples)
    lens, seqs = model(instances)
    return np.asarray(lens, dtype=np.float64), list(seqs)


def evaluate(
    model: PolicyOrSolver,
    sources: dict,
    decode: str = "greedy_aug8",
    rng=None,
    samples: int = 1280,
    per_instance_csv=None,
) -> GapReport:
    """Gap of ``model`` per source.

    ``sources`` maps a name to ``(instances, references[, length_fn])`` where
    a reference is a length or ``None`` (the instance is then skipped with a
    warning).  ``length_fn(index, sequence)`` replaces the Euclidean length,
    e.g. with the rounded convention of published benchmark optima.
    Policies see instances scaled into the unit square; lengths are measured
    on the original coordinates, so the gap ratio is unaffected.
    """
    gaps, counts, skipped = {}, {}, {}
    rows = []
    for name, src in sources.items():
        instances, refs = src[0], src[1]
        length_fn = src[2] if len(src) > 2 else None
        keep = [i for i, r in enumerate(refs) if r is not None]
        if len(keep) < len(refs):
            log.warning("%s: %d instance(s) without a reference skipped", name, len(refs) - len(keep))
        skipped[name] = len(refs) - len(keep)
        if not keep:
            continue
        insts = [instances[i] for i in keep]
        scaled, factors = zip(*(_unit_scaled(i) for i in insts))
        lens, seqs = solve_with(model, list(scaled), decode, rng, samples)
        vals = []
        for j, i in enumerate(keep):
            bad = validate_tour(instances[i], seqs[j])
            if bad is not None:
                raise RuntimeError(f"{name}[{i}]: model returned an infeasible tour: {bad}")
            length = float(lens[j]) * factors[j] if length_fn is None else float(length_fn(i, seqs[j]))
            ref = float(refs[i])
            g = (length - ref) / ref
            vals.append(g)
            rows.append({"source": name, "index": i, "length": length, "reference": ref, "gap": g})
        gaps[name] = float(np.mean(vals))
        counts[name] = len(vals)
    if per_instance_csv:
        _write_rows(per_instance_csv, rows, ["source", "index", "length", "reference", "gap"])
    return GapReport(gaps, counts, skipped)


def _unit_scaled(inst: Instance) -> tuple[Instance, float]:
    lo = inst.coords.min(axis=0)
    span = float((inst.coords.max(axis=0) - lo).max())
    if span <= 0 or (lo.min() >= 0 and inst.coords.max() <= 1):
        return inst, 1.0
    return inst.with_coords((inst.coords - lo) / span), span


TABLE_COLUMNS = {
    DistributionKind.UNIFORM: "G_U",
    DistributionKind.CLUSTER: "G_C",
    DistributionKind.MIXED: "G_M",
    DistributionKind.EXPANSION: "Expansion",
    DistributionKind.IMPLOSION: "Implosion",
    DistributionKind.EXPLOSION: "Explosion",
    DistributionKind.GRID: "Grid",
}


def write_gap_table(path, reports: dict) -> None:
    """Rows are models, columns the seven distributions plus their mean (percent)."""
    cols = ["model"] + list(TABLE_COLUMNS.values()) + ["Avg."]
    rows = []
    for model, rep in reports.items():
        row = {"model": model}
        vals = []
        for kind, col in TABLE_COLUMNS.items():
            g = rep.gaps.get(kind.value)
            row[col] = "" if g is None else f"{100 * g:.6f}"
            if g is not None:
                vals.append(g)
        row["Avg."] = f"{100 * float(np.mean(vals)):.6f}" if vals else ""
        rows.append(row)
    _write_rows(path, rows, cols)


def _write_rows(path, rows, cols):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
