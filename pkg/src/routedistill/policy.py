"""Attention encoder-decoder construction policy (AM/POMO style).

Parameters live in a plain ``dict[str, torch.Tensor]`` wrapped by
:class:`PolicyParams`; the forward pass is a set of functions over that
dict so teacher and student share one code path.  Everything runs in
float64 on the CPU.  Gradients of log-probabilities come from torch
autograd and are checked against finite differences in the test-suite.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .problems import (
    FeasibilityError,
    Instance,
    InvariantError,
    ProblemKind,
    Tour,
    canonical_sequence,
    validate_tour,
)

DTYPE = torch.float64
NORM_EPS = 1e-5


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


ACTIVATIONS = {"gelu": torch.nn.functional.gelu, "relu": torch.relu}


@dataclass(frozen=True)
class ArchSpec:
    embed_dim: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 2
    feedforward_dim: Optional[int] = None
    problem_kind: ProblemKind = ProblemKind.TSP
    tanh_clip: float = 10.0
    activation: str = "gelu"  # feed-forward nonlinearity: gelu (smooth) or relu

    def __post_init__(self):
        object.__setattr__(self, "problem_kind", ProblemKind(self.problem_kind))
        if self.feedforward_dim is None:
            object.__setattr__(self, "feedforward_dim", 4 * self.embed_dim)
        for name in ("embed_dim", "n_heads", "n_encoder_layers", "feedforward_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    def halved(self) -> "ArchSpec":
        """Same architecture with every width halved (the student recipe)."""
        return ArchSpec(
            self.embed_dim // 2,
            self.n_heads,
            self.n_encoder_layers,
            self.feedforward_dim // 2,
            self.problem_kind,
            self.tanh_clip,
            self.activation,
        )

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, ff = self.embed_dim, self.feedforward_dim
        cvrp = self.problem_kind is ProblemKind.CVRP
        s: dict[str, tuple[int, ...]] = {}
        s["init.W"] = (3 if cvrp else 2, d)
        s["init.b"] = (d,)
        if cvrp:
            s["depot.W"] = (2, d)
            s["depot.b"] = (d,)
        for layer in range(self.n_encoder_layers):
            p = f"enc{layer}."
            for w in ("Wq", "Wk", "Wv", "Wo"):
                s[p + w] = (d, d)
            s[p + "norm1.gamma"] = (d,)
            s[p + "norm1.beta"] = (d,)
            s[p + "ff.W1"] = (d, ff)
            s[p + "ff.b1"] = (ff,)
            s[p + "ff.W2"] = (ff, d)
            s[p + "ff.b2"] = (d,)
            s[p + "norm2.gamma"] = (d,)
            s[p + "norm2.beta"] = (d,)
        s["dec.W_graph"] = (d, d)
        s["dec.W_step"] = (d + 1 if cvrp else d, d)
        s["dec.placeholder"] = (d,)
        s["dec.Wk_glimpse"] = (d, d)
        s["dec.Wv_glimpse"] = (d, d)
        s["dec.W_out"] = (d, d)
        s["dec.Wk_logit"] = (d, d)
        return s

    def param_count(self) -> int:
        return sum(math.prod(shape) for shape in self.shapes().values())

    def input_layer_count(self) -> int:
        return sum(
            math.prod(shape) for name, shape in self.shapes().items() if name.startswith(("init.", "depot."))
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["problem_kind"] = self.problem_kind.value
        return d


@dataclass
class PolicyParams:
    arch: ArchSpec
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise CheckpointError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise CheckpointError(
                    f"{name}: shape {tuple(self.tensors[name].shape)} != expected {shape}"
                )

    def __getitem__(self, name) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.arch.shapes())

    def clone(self, requires_grad: bool = False) -> "PolicyParams":
        return PolicyParams(
            self.arch,
            {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.tensors.items()},
        )

    def requires_grad_(self, flag: bool = True) -> "PolicyParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def check_finite(self):
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise NumericError(f"non-finite values in parameter {name}")

    def equal(self, other: "PolicyParams") -> bool:
        return self.arch == other.arch and all(
            torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_params(arch: ArchSpec, seed: int) -> PolicyParams:
    """Uniform(+-1/sqrt(fan_in)) init, drawn from a numpy stream for portability."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    shapes = arch.shapes()
    bias_fan_in = {
        "init.b": shapes["init.W"][0],
        "depot.b": 2,
        "ff.b1": arch.embed_dim,
        "ff.b2": arch.feedforward_dim,
    }
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith("gamma"):
            arr = np.ones(shape)
        elif name.endswith("beta"):
            arr = np.zeros(shape)
        else:
            if len(shape) == 2:
                fan_in = shape[0]
            else:
                key = name.split(".", 1)[1] if name.startswith("enc") else name
                fan_in = bias_fan_in.get(key, arch.embed_dim)
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = torch.tensor(arr, dtype=DTYPE)
    return PolicyParams(arch, tensors)


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON header, little-endian f8 payload
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RDPOLICY"
CKPT_VERSION = 1


def save_checkpoint(path, params: PolicyParams, extra_tensors=None, meta=None) -> None:
    extra_tensors = extra_tensors or {}
    names = params.names() + list(extra_tensors)
    arrays = [params[n] for n in params.names()] + [extra_tensors[n] for n in extra_tensors]
    header = {
        "version": CKPT_VERSION,
        "arch": params.arch.to_dict(),
        "tensors": [[n, list(a.shape)] for n, a in zip(names, arrays)],
        "n_params": len(params.names()),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for a in arrays:
            fh.write(np.ascontiguousarray(a.detach().cpu().numpy(), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict[str, torch.Tensor], dict]:
    """Return ``(params, extra_tensors, meta)``; shapes are validated against the header arch."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a policy checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    arch = ArchSpec(**header["arch"])
    tensors, offset = {}, 0
    for name, shape in header["tensors"]:
        count = math.prod(shape)
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = torch.tensor(arr.astype(np.float64), dtype=DTYPE)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes in payload")
    names = [n for n, _ in header["tensors"]]
    own = names[: header["n_params"]]
    params = PolicyParams(arch, {n: tensors[n] for n in own})
    extra = {n: tensors[n] for n in names[header["n_params"]:]}
    return params, extra, header.get("meta", {})


# ---------------------------------------------------------------------------
# Batched instances
# ---------------------------------------------------------------------------


@dataclass
class InstanceBatch:
    kind: ProblemKind
    coords: torch.Tensor  # (B, N, 2)
    demands: Optional[torch.Tensor] = None  # (B, N) as float
    capacity: Optional[torch.Tensor] = None  # (B,)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance]) -> "InstanceBatch":
        if not instances:
            raise ValueError("empty batch")
        kind = instances[0].kind
        n = instances[0].n_nodes
        if any(i.kind is not kind or i.n_nodes != n for i in instances):
            raise ValueError("batch instances must share problem kind and node count")
        coords = torch.tensor(np.stack([i.coords for i in instances]), dtype=DTYPE)
        if kind is ProblemKind.TSP:
            return cls(kind, coords)
        demands = torch.tensor(np.stack([i.demands for i in instances]), dtype=DTYPE)
        capacity = torch.tensor([float(i.capacity) for i in instances], dtype=DTYPE)
        return cls(kind, coords, demands, capacity)

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[1]

    def repeat(self, p: int) -> "InstanceBatch":
        """Row ``b * p + k`` is copy ``k`` of instance ``b``."""
        rep = lambda t: None if t is None else t.repeat_interleave(p, dim=0)  # noqa: E731
        return InstanceBatch(self.kind, rep(self.coords), rep(self.demands), rep(self.capacity))


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def _instance_norm(h, gamma, beta):
    mean = h.mean(dim=1, keepdim=True)
    var = h.var(dim=1, unbiased=False, keepdim=True)
    return (h - mean) / torch.sqrt(var + NORM_EPS) * gamma + beta


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return x.view(b, n, n_heads, d // n_heads).transpose(1, 2)


def _check(t, where):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values produced in {where}")
    return t


def node_features(params: PolicyParams, batch: InstanceBatch) -> torch.Tensor:
    if batch.kind is not params.arch.problem_kind:
        raise ValueError(f"policy built for {params.arch.problem_kind.value}, got {batch.kind.value}")
    if batch.kind is ProblemKind.TSP:
        return batch.coords @ params["init.W"] + params["init.b"]
    scaled = batch.demands / batch.capacity[:, None]
    feats = torch.cat([batch.coords, scaled[..., None]], dim=-1)
    cust = feats[:, 1:] @ params["init.W"] + params["init.b"]
    depot = batch.coords[:, :1] @ params["depot.W"] + params["depot.b"]
    return torch.cat([depot, cust], dim=1)


def encode_batch(params: PolicyParams, batch: InstanceBatch) -> torch.Tensor:
    arch = params.arch
    h = _check(node_features(params, batch), "input projection")
    heads = arch.n_heads
    dk = arch.embed_dim // heads
    for layer in range(arch.n_encoder_layers):
        p = f"enc{layer}."
        q = _split_heads(h @ params[p + "Wq"], heads)
        k = _split_heads(h @ params[p + "Wk"], heads)
        v = _split_heads(h @ params[p + "Wv"], heads)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), dim=-1)
        mha = (att @ v).transpose(1, 2).reshape(h.shape) @ params[p + "Wo"]
        h = _instance_norm(h + mha, params[p + "norm1.gamma"], params[p + "norm1.beta"])
        ff = ACTIVATIONS[arch.activation](h @ params[p + "ff.W1"] + params[p + "ff.b1"]) @ params[p + "ff.W2"]
        h = _instance_norm(h + ff + params[p + "ff.b2"], params[p + "norm2.gamma"], params[p + "norm2.beta"])
        _check(h, f"encoder layer {layer}")
    return h


def encode(instance: Instance, params: PolicyParams) -> torch.Tensor:
    """Node embeddings of one instance, shape (n, embed_dim)."""
    if instance.n_nodes < 2:
        raise ValueError("need at least two nodes")
    params.check_finite()
    return encode_batch(params, InstanceBatch.from_instances([instance]))[0]


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderCache:
    embeddings: torch.Tensor  # (B, N, d)
    graph_q: torch.Tensor  # (B, d)
    k_glimpse: torch.Tensor  # (B, H, N, dk)
    v_glimpse: torch.Tensor
    k_logit_t: torch.Tensor  # (B, d, N)


def precompute(params: PolicyParams, emb: torch.Tensor) -> DecoderCache:
    heads = params.arch.n_heads
    graph = emb.mean(dim=1)
    return DecoderCache(
        emb,
        graph @ params["dec.W_graph"],
        _split_heads(emb @ params["dec.Wk_glimpse"], heads),
        _split_heads(emb @ params["dec.Wv_glimpse"], heads),
        (emb @ params["dec.Wk_logit"]).transpose(1, 2),
    )


def decoder_logits(params, cache: DecoderCache, current, remaining, mask):
    """Clipped pointer logits (B, P, N) with masked entries at -inf.

    All arguments carry a leading (B, P) shape: P decoding rows share the
    cached keys of their instance.  ``current`` holds node indices, -1 for
    "no node yet" (the learned placeholder is used).  ``remaining`` is the
    remaining capacity fraction (CVRP) or ``None``.
    """
    arch = params.arch
    d, heads = arch.embed_dim, arch.n_heads
    dk = d // heads
    b, p = current.shape
    idx = current.clamp(min=0)[..., None].expand(b, p, d)
    cur = torch.gather(cache.embeddings, 1, idx)
    if (current < 0).any():
        cur = torch.where((current < 0)[..., None], params["dec.placeholder"].expand_as(cur), cur)
    if arch.problem_kind is ProblemKind.CVRP:
        cur = torch.cat([cur, remaining[..., None]], dim=-1)
    q = cache.graph_q[:, None, :] + cur @ params["dec.W_step"]
    qh = q.view(b, p, heads, dk).transpose(1, 2)  # (B, H, P, dk)
    compat = (qh @ cache.k_glimpse.transpose(-1, -2)) / math.sqrt(dk)  # (B, H, P, N)
    compat = compat.masked_fill(~mask[:, None], float("-inf"))
    att = torch.softmax(compat, dim=-1)
    glimpse = (att @ cache.v_glimpse).transpose(1, 2).reshape(b, p, d) @ params["dec.W_out"]
    raw = (glimpse @ cache.k_logit_t) / math.sqrt(d)
    logits = arch.tanh_clip * torch.tanh(raw)
    return logits.masked_fill(~mask, float("-inf"))


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not mask.any(dim=-1).all():
        raise InvariantError("all actions masked")
    logp = torch.log_softmax(logits, dim=-1)
    return logp.masked_fill(~mask, float("-inf"))


# ---------------------------------------------------------------------------
# Batched environment
# ---------------------------------------------------------------------------


class BatchEnv:
    """Vectorised construction state for R parallel rollouts."""

    def __init__(self, batch: InstanceBatch):
        self.batch = batch
        r, n = batch.size, batch.n_nodes
        self.kind = batch.kind
        self.visited = torch.zeros(r, n, dtype=torch.bool)
        self.done = torch.zeros(r, dtype=torch.bool)
        if self.kind is ProblemKind.TSP:
            self.current = torch.full((r,), -1, dtype=torch.long)
            self.remaining = None
        else:
            self.current = torch.zeros(r, dtype=torch.long)
            self.remaining = batch.capacity.clone()
        self.rows = torch.arange(r)

    @property
    def max_steps(self) -> int:
        n = self.batch.n_nodes
        return n if self.kind is ProblemKind.TSP else 2 * (n - 1) + 1

    def mask(self) -> torch.Tensor:
        if self.kind is ProblemKind.TSP:
            m = ~self.visited
        else:
            m = ~self.visited & (self.batch.demands <= self.remaining[:, None])
            m[:, 0] = self.current != 0
        # finished rows idle on the depot / their last node
        if self.done.any():
            m = m.clone()
            m[self.done] = False
            m[self.done, self.current[self.done].clamp(min=0)] = True
        return m

    def remaining_fraction(self):
        if self.remaining is None:
            return None
        return self.remaining / self.batch.capacity

    def step(self, action: torch.Tensor):
        active = ~self.done
        a = action
        self.current = torch.where(active, a, self.current)
        if self.kind is ProblemKind.TSP:
            self.visited[self.rows[active], a[active]] = True
            self.done = self.visited.all(dim=1)
            return
        at_depot = active & (a == 0)
        cust = active & (a != 0)
        self.visited[self.rows[cust], a[cust]] = True
        dem = self.batch.demands[self.rows, a]
        self.remaining = torch.where(cust, self.remaining - dem, self.remaining)
        self.remaining = torch.where(at_depot, self.batch.capacity, self.remaining)
        self.done = self.done | (at_depot & self.visited[:, 1:].all(dim=1))


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutTrace:
    instances: list  # one Instance per row
    sequences: list  # list[tuple[int, ...]] per row
    step_logp: torch.Tensor  # (R, T) chosen-action log-probs, 0 where not counted
    step_active: torch.Tensor  # (R, T) bool: step counted in the log-prob
    log_prob: torch.Tensor  # (R,)
    lengths: torch.Tensor  # (R,) tour lengths (no grad)
    step_logp_full: Optional[torch.Tensor] = None  # (R, T, N) masked log-distributions
    step_masks: Optional[torch.Tensor] = None  # (R, T, N)
    n_starts: int = 1
    skip_first: bool = False

    @property
    def tours(self) -> list[Tour]:
        return [Tour(s, float(l)) for s, l in zip(self.sequences, self.lengths.tolist())]

    def probabilities(self) -> torch.Tensor:
        if self.step_logp_full is None:
            raise ValueError("distributions were not retained")
        return self.step_logp_full.exp()


def _sample_rows(probs: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    pick = (cum > u[:, None]).argmax(axis=1)
    # u rounding onto the last boundary: fall back to the highest feasible index
    bad = ~mask[np.arange(len(pick)), pick]
    if bad.any():
        last = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
        pick[bad] = last[bad]
    return pick


def _lengths(batch: InstanceBatch, seq: torch.Tensor, steps: torch.Tensor) -> torch.Tensor:
    """Closed length of padded action sequences (R, T) with ``steps`` valid entries per row."""
    coords = batch.coords
    r = coords.shape[0]
    rows = torch.arange(r)[:, None]
    pts = coords[rows, seq]  # (R, T, 2)
    if batch.kind is ProblemKind.TSP:
        nxt = torch.roll(pts, -1, dims=1)
        return (pts - nxt).norm(dim=-1).sum(dim=1)
    depot = coords[:, :1]
    path = torch.cat([depot, pts], dim=1)
    seg = (path[:, 1:] - path[:, :-1]).norm(dim=-1)
    valid = torch.arange(seq.shape[1])[None, :] < steps[:, None]
    return (seg * valid).sum(dim=1)


def run_policy(
    params: PolicyParams,
    instances: Sequence[Instance],
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    n_starts: Optional[int] = None,
    forced: Optional[Sequence[Sequence[int]]] = None,
    skip_first: Optional[bool] = None,
    keep_distributions: bool = False,
    embeddings: Optional[torch.Tensor] = None,
) -> RolloutTrace:
    """Construct tours for a batch of instances.

    ``mode`` is ``greedy``, ``sample`` or ``forced`` (replay ``forced``
    sequences, one per row).  With ``n_starts`` every instance is expanded
    into that many rows whose first action is forced to a distinct node
    (POMO); their first step is then excluded from the log-probability.
    """
    if mode not in ("greedy", "sample", "forced"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    instances = list(instances)
    base = InstanceBatch.from_instances(instances)
    kind = base.kind
    p = n_starts or 1
    if n_starts:
        limit = base.n_nodes - (1 if kind is ProblemKind.CVRP else 0)
        if not 1 <= n_starts <= limit:
            raise ValueError(f"n_starts must be in [1, {limit}]")
    if skip_first is None:
        skip_first = bool(n_starts)
    batch = base.repeat(p) if p > 1 else base
    rows_inst = [inst for inst in instances for _ in range(p)]
    r = batch.size
    emb = encode_batch(params, base) if embeddings is None else embeddings
    cache = precompute(params, emb)
    nb = base.size
    env = BatchEnv(batch)

    forced_t = None
    if mode == "forced":
        if forced is None or len(forced) != r:
            raise ValueError("forced mode needs one sequence per row")
        seqs = [canonical_sequence(inst, s) for inst, s in zip(rows_inst, forced)]
        for inst, s in zip(rows_inst, seqs):
            bad = validate_tour(inst, s)
            if bad is not None:
                raise FeasibilityError(str(bad))
        width = max(len(s) for s in seqs)
        forced_t = torch.zeros(r, width, dtype=torch.long)
        for i, s in enumerate(seqs):
            forced_t[i, : len(s)] = torch.tensor(s)
            if len(s) < width:
                forced_t[i, len(s):] = s[-1]
        forced_len = torch.tensor([len(s) for s in seqs])
    start_nodes = None
    if n_starts and mode != "forced":
        offset = 1 if kind is ProblemKind.CVRP else 0
        start_nodes = (torch.arange(p) + offset).repeat(base.size)

    actions, logps, actives, fulls, masks = [], [], [], [], []
    t = 0
    while not env.done.all():
        if t >= env.max_steps + 1:
            raise InvariantError("rollout did not terminate")
        mask = env.mask()
        active = ~env.done
        rem = env.remaining_fraction()
        logits = decoder_logits(
            params,
            cache,
            env.current.view(nb, p),
            None if rem is None else rem.view(nb, p),
            mask.view(nb, p, -1),
        ).reshape(r, -1)
        logp = masked_log_softmax(logits, mask)
        if forced_t is not None:
            if t >= forced_t.shape[1]:
                raise FeasibilityError("sequence ended before the tour was complete")
            a = forced_t[:, t]
            ended = active & (t >= forced_len)
            overrun = ~active & (t < forced_len)
            if ended.any() or overrun.any():
                raise FeasibilityError("sequence ended before the tour was complete")
        elif t == 0 and start_nodes is not None:
            a = start_nodes
        elif mode == "greedy":
            a = logp.detach().argmax(dim=-1)
        else:
            probs = logp.detach().exp().numpy()
            a = torch.from_numpy(_sample_rows(probs, mask.numpy(), rng))
        if not mask[env.rows, a].all():
            raise FeasibilityError("action is masked in the replayed state")
        chosen = logp.gather(1, a[:, None]).squeeze(1)
        counted = active.clone()
        if t == 0 and skip_first:
            counted[:] = False
        logps.append(torch.where(counted, chosen, torch.zeros_like(chosen)))
        actives.append(counted)
        actions.append(torch.where(active, a, env.current.clamp(min=0)))
        if keep_distributions:
            fulls.append(logp)
            masks.append(mask & active[:, None])
        env.step(a)
        t += 1
    if forced_t is not None and (forced_len > t).any():
        raise FeasibilityError("sequence continues after the tour is complete")

    act = torch.stack(actions, dim=1)
    step_logp = torch.stack(logps, dim=1)
    step_active = torch.stack(actives, dim=1)
    steps = _active_lengths(act, batch, kind)
    sequences = [tuple(act[i, : steps[i]].tolist()) for i in range(r)]
    with torch.no_grad():
        lengths = _lengths(batch, act, steps)
    trace = RolloutTrace(
        rows_inst,
        sequences,
        step_logp,
        step_active,
        step_logp.sum(dim=1),
        lengths,
        n_starts=p,
        skip_first=skip_first,
    )
    if keep_distributions:
        trace.step_logp_full = torch.stack(fulls, dim=1)
        trace.step_masks = torch.stack(masks, dim=1)
    return trace


def _active_lengths(act: torch.Tensor, batch: InstanceBatch, kind: ProblemKind) -> torch.Tensor:
    r, t = act.shape
    if kind is ProblemKind.TSP:
        return torch.full((r,), t, dtype=torch.long)
    # a CVRP row ends at its first depot visit after which every customer is served
    n = batch.n_nodes
    visited = torch.zeros(r, n, dtype=torch.bool)
    ends = torch.full((r,), t, dtype=torch.long)
    rows = torch.arange(r)
    for step in range(t):
        a = act[:, step]
        visited[rows, a] = True
        fin = (a == 0) & visited[:, 1:].all(dim=1) & (ends == t)
        ends[fin] = step + 1
    return ends


def rollout(
    instance_or_batch,
    params: PolicyParams,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    n_starts: Optional[int] = None,
    keep_distributions: bool = False,
) -> RolloutTrace:
    """``mode``: ``greedy``, ``sample`` or ``multistart`` (greedy from every start node)."""
    instances = [instance_or_batch] if isinstance(instance_or_batch, Instance) else list(instance_or_batch)
    if mode == "multistart":
        if n_starts is None:
            n = instances[0].n_nodes
            n_starts = n - 1 if instances[0].kind is ProblemKind.CVRP else n
        mode = "greedy"
    return run_policy(params, instances, mode, rng, n_starts=n_starts, keep_distributions=keep_distributions)


def score_tours(
    params: PolicyParams,
    instances: Sequence[Instance],
    sequences: Sequence[Sequence[int]],
    skip_first: bool = False,
    keep_distributions: bool = True,
) -> RolloutTrace:
    """Replay given tours through the MDP and record the policy's distributions."""
    return run_policy(
        params,
        instances,
        "forced",
        forced=sequences,
        skip_first=skip_first,
        keep_distributions=keep_distributions,
    )


def score_tour(instance: Instance, tour, params: PolicyParams, skip_first: bool = False):
    """Per-step distributions (T, N) and the total log-probability of ``tour``."""
    seq = tour.sequence if isinstance(tour, Tour) else tour
    with torch.no_grad():
        tr = score_tours(params, [instance], [seq], skip_first=skip_first)
    return tr.probabilities()[0], float(tr.log_prob[0])


def grad_log_prob(instance: Instance, tour, params: PolicyParams, skip_first: bool = False) -> dict[str, torch.Tensor]:
    """Exact gradient of the tour's total log-probability for every parameter tensor."""
    seq = tour.sequence if isinstance(tour, Tour) else tour
    work = params.clone(requires_grad=True)
    tr = score_tours(work, [instance], [seq], skip_first=skip_first, keep_distributions=False)
    total = tr.log_prob[0]
    if not torch.isfinite(total):
        raise NumericError("non-finite log-probability")
    grads = torch.autograd.grad(total, [work[n] for n in work.names()], allow_unused=True)
    out = {}
    for name, g in zip(work.names(), grads):
        out[name] = torch.zeros_like(work[name]) if g is None else g.detach()
        if not torch.isfinite(out[name]).all():
            raise NumericError(f"non-finite gradient for {name}")
    return out


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

DECODE_MODES = ("greedy", "greedy_aug8", "multistart", "multistart_aug8", "sample")


def best_of(
    params: PolicyParams,
    instances: Sequence[Instance],
    mode: str = "greedy_aug8",
    rng: Optional[np.random.Generator] = None,
    samples: int = 1280,
    chunk: int = 128,
) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Best tour per instance under an inference mode.

    ``greedy_aug8`` / ``multistart_aug8`` keep the best over the 8 square
    symmetries; ``sample`` keeps the best of ``samples`` sampled tours.
    Returned lengths are measured on the original coordinates.
    """
    from .problems import augment8

    if mode not in DECODE_MODES:
        raise ValueError(f"unknown decode mode {mode!r}")
    instances = list(instances)
    best_len = np.full(len(instances), np.inf)
    best_seq: list = [None] * len(instances)
    aug = mode.endswith("aug8")
    base = mode.replace("_aug8", "")
    with torch.no_grad():
        for lo in range(0, len(instances), chunk):
            part = instances[lo : lo + chunk]
            variants = [augment8(i) for i in part] if aug else [[i] for i in part]
            for v in range(len(variants[0])):
                batch = [variants[k][v] for k in range(len(part))]
                if base == "sample":
                    if rng is None:
                        raise ValueError("sampling needs an rng")
                    for _ in range(samples):
                        tr = run_policy(params, batch, "sample", rng)
                        _keep(tr, lo, 1, best_len, best_seq)
                    continue
                starts = None
                if base == "multistart":
                    n = batch[0].n_nodes
                    starts = n - 1 if batch[0].kind is ProblemKind.CVRP else n
                tr = run_policy(params, batch, "greedy", n_starts=starts)
                _keep(tr, lo, starts or 1, best_len, best_seq)
    return best_len, best_seq


def _keep(tr: RolloutTrace, offset: int, p: int, best_len, best_seq):
    # isometries preserve length, so lengths on augmented coords are valid
    lens = tr.lengths.view(-1, p)
    vals, idx = lens.min(dim=1)
    for k, (val, j) in enumerate(zip(vals.tolist(), idx.tolist())):
        if val < best_len[offset + k] - 1e-12:
            best_len[offset + k] = val
            best_seq[offset + k] = tr.sequences[k * p + j]
