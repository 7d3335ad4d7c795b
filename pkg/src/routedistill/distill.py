"""Adaptive multi-distribution knowledge distillation of one light student.

Each epoch picks one exemplar distribution (uniformly before
``adaptive_start``, then by a softmax over the student's validation gaps),
samples fresh instances from it and updates the student with a mix of the
REINFORCE task gradient and the per-step KL to that distribution's teacher.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .instancegen import DistributionKind, DistributionSpec, make_dataset, make_rng
from .policy import (
    ArchSpec,
    PolicyParams,
    RolloutTrace,
    best_of,
    init_params,
    load_checkpoint,
    run_policy,
    save_checkpoint,
    score_tours,
)
from .problems import Instance, ProblemKind
from .solvers import ReferenceCache, solve_reference
from .training import Adam, _grads, sample_batch, shared_baseline, task_surrogate, write_csv

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


class TrajectorySource(str, enum.Enum):
    ON_POLICY = "on_policy"
    OFF_POLICY = "off_policy"


class TeacherMode(str, enum.Enum):
    SINGLE_SELECTED = "single_selected"
    SIMULTANEOUS_MT = "simultaneous_MT"


@dataclass
class DistillConfig:
    problem: ProblemKind = ProblemKind.TSP
    n: int = 20
    exemplars: tuple = (DistributionKind.UNIFORM, DistributionKind.CLUSTER, DistributionKind.MIXED)
    teachers: dict = field(default_factory=dict)  # kind -> PolicyParams or checkpoint path
    student_arch: Optional[ArchSpec] = None  # None -> teacher arch halved
    alpha: float = 0.5
    epochs: int = 10
    adaptive_start: int = 1
    steps_per_epoch: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-4
    n_starts: Optional[int] = None
    grad_clip: float = 1.0
    validation_size: int = 1000
    validation_seed: int = 12345
    validation_decode: str = "greedy_aug8"
    trajectory_source: TrajectorySource = TrajectorySource.ON_POLICY
    teacher_mode: TeacherMode = TeacherMode.SINGLE_SELECTED
    adaptive: bool = True
    freeze_probs: bool = False
    freeze_tol: float = 1e-3
    freeze_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        self.problem = ProblemKind(self.problem)
        self.exemplars = tuple(DistributionKind(k) for k in self.exemplars)
        self.trajectory_source = TrajectorySource(self.trajectory_source)
        self.teacher_mode = TeacherMode(self.teacher_mode)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not self.exemplars:
            raise ConfigError("at least one exemplar distribution is required")
        if self.adaptive_start > self.epochs:
            raise ConfigError("adaptive_start must not exceed epochs")
        if self.validation_size < 1:
            raise ConfigError("validation_size must be >= 1")

    @property
    def starts(self) -> int:
        return self.n_starts or self.n


# ---------------------------------------------------------------------------
# Validation sets and gaps
# ---------------------------------------------------------------------------


@dataclass
class ValidationSet:
    instances: dict  # kind -> list[Instance]
    references: dict  # kind -> np.ndarray of reference lengths
    exact: dict = field(default_factory=dict)  # kind -> bool array

    def digest(self) -> str:
        h = hashlib.sha256()
        for kind in sorted(self.instances, key=lambda k: k.value):
            h.update(kind.value.encode())
            for inst in self.instances[kind]:
                h.update(inst.fingerprint().encode())
            h.update(np.ascontiguousarray(self.references[kind], dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def kinds(self):
        return list(self.instances)


def build_validation_set(problem, kinds, n, size, seed, cache: Optional[ReferenceCache] = None) -> ValidationSet:
    """Fixed per-distribution instance lists with reference lengths (solved once)."""
    insts, refs, exact = {}, {}, {}
    for k, kind in enumerate(kinds):
        kind = DistributionKind(kind)
        data = make_dataset(problem, DistributionSpec(kind), n, size, seed + 1000 * k)
        lens, ex = [], []
        for inst in data:
            if cache is not None:
                entry = cache.lookup_or_solve(inst)
                lens.append(entry["length"])
                ex.append(entry["is_exact"])
            else:
                res = solve_reference(inst)
                lens.append(res.length)
                ex.append(res.is_exact)
        insts[kind], refs[kind], exact[kind] = data, np.array(lens), np.array(ex)
    return ValidationSet(insts, refs, exact)


Solver = Union[PolicyParams, Callable[[Sequence[Instance]], np.ndarray]]


def avg_gap(solver: Solver, vset: ValidationSet, decode_mode: str = "greedy_aug8") -> dict:
    """Mean relative gap per distribution; ``solver`` is a policy or a callable returning lengths."""
    out = {}
    for kind, insts in vset.instances.items():
        if isinstance(solver, PolicyParams):
            lens, _ = best_of(solver, insts, decode_mode)
        else:
            lens = np.asarray(solver(insts), dtype=np.float64)
        ref = vset.references[kind]
        out[kind] = float(np.mean((lens - ref) / ref))
    return out


def adaptive_probs(gaps: Sequence[float], epoch: int, adaptive_start: int, adaptive: bool = True) -> np.ndarray:
    """Selection probability per exemplar distribution.

    Uniform before ``adaptive_start``; afterwards a softmax over the gaps
    expressed in percentage points.
    """
    g = np.asarray(gaps, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gaps must be finite")
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    if not adaptive or epoch < adaptive_start:
        return np.full(g.size, 1.0 / g.size)
    z = 100.0 * g
    z = np.exp(z - z.max())
    return z / z.sum()


# ---------------------------------------------------------------------------
# Distillation loss
# ---------------------------------------------------------------------------


def step_kl(teacher_logp: torch.Tensor, student_logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """KL(teacher || student) per step over feasible actions; shapes (..., N) -> (...)."""
    pt = teacher_logp.exp()
    lt = torch.log(pt.clamp(min=LOG_FLOOR))
    ls = torch.where(mask, student_logp, torch.zeros_like(student_logp))
    ls = torch.maximum(ls, torch.full_like(ls, math.log(LOG_FLOOR)))
    term = torch.where(mask, pt * (lt - ls), torch.zeros_like(pt))
    return term.sum(dim=-1)


def kd_loss_from_traces(student: RolloutTrace, teacher_traces: Sequence[RolloutTrace]) -> torch.Tensor:
    """Mean over rollouts of the summed per-step KL, averaged over teachers."""
    if not teacher_traces:
        raise ConfigError("empty teacher set")
    if student.step_logp_full is None:
        raise ValueError("student trace must retain distributions")
    mask = student.step_masks & student.step_active[..., None]
    total = 0.0
    for tt in teacher_traces:
        if tt.sequences != student.sequences:
            raise ValueError("teacher trace does not follow the student trajectories")
        kl = step_kl(tt.step_logp_full.detach(), student.step_logp_full, mask)
        total = total + kl.sum(dim=1).mean()
    return total / len(teacher_traces)


def teacher_view(teacher: PolicyParams, trace: RolloutTrace) -> RolloutTrace:
    """Teacher distributions along the trajectories of ``trace`` (no gradient)."""
    with torch.no_grad():
        return score_tours(teacher, trace.instances, trace.sequences, skip_first=trace.skip_first)


def _check_trace(trace: RolloutTrace, instance: Instance):
    if any(i is not instance for i in trace.instances):
        raise ValueError("trace was not produced on this instance")


def kd_loss(teacher_params, student_params, instance, student_trace) -> tuple[float, dict]:
    """Per-step KL of the teacher from the student along ``student_trace``; value and student gradient."""
    return kd_loss_multi([teacher_params], student_params, instance, student_trace)


def kd_loss_multi(teachers, student_params, instance, student_trace) -> tuple[float, dict]:
    if not teachers:
        raise ConfigError("empty teacher set")
    _check_trace(student_trace, instance)
    work = student_params.clone(requires_grad=True)
    st = score_tours(work, student_trace.instances, student_trace.sequences, skip_first=student_trace.skip_first)
    loss = kd_loss_from_traces(st, [teacher_view(t, student_trace) for t in teachers])
    return float(loss.detach()), {k: v.detach() for k, v in _grads(loss, work).items()}


# ---------------------------------------------------------------------------
# Combined update
# ---------------------------------------------------------------------------


def _trajectories(student, teacher, instances, config: DistillConfig, rng):
    """Trajectories plus the student's differentiable view of them."""
    if config.trajectory_source is TrajectorySource.ON_POLICY:
        tr = run_policy(student, instances, "sample", rng, n_starts=config.starts, keep_distributions=True)
        return tr
    with torch.no_grad():
        src = run_policy(teacher, instances, "sample", rng, n_starts=config.starts)
    return score_tours(student, src.instances, src.sequences, skip_first=src.skip_first)


def combined_losses(student, teacher, all_teachers, instances, config: DistillConfig, rng):
    """Task and KD surrogate losses (both differentiable in ``student``) and the trace used."""
    tr = _trajectories(student, teacher, instances, config, rng)
    baseline = shared_baseline(tr.lengths, config.starts)
    task = task_surrogate(tr.log_prob, tr.lengths, baseline)
    if config.teacher_mode is TeacherMode.SIMULTANEOUS_MT:
        views = [teacher_view(t, tr) for t in all_teachers]
    else:
        views = [teacher_view(teacher, tr)]
    kd = kd_loss_from_traces(tr, views)
    return task, kd, tr


def combined_update(student: PolicyParams, teacher: PolicyParams, batch, config: DistillConfig, rng, optimizer: Adam, all_teachers=None) -> dict:
    """One student update with gradient ``alpha * g_task + (1 - alpha) * g_kd``."""
    student.requires_grad_(True)
    task, kd, tr = combined_losses(student, teacher, all_teachers or [teacher], batch, config, rng)
    a = config.alpha
    g_task = _grads(task, student, retain=a < 1) if a > 0 else None
    g_kd = _grads(kd, student) if a < 1 else None
    student.requires_grad_(False)
    grads = {}
    for name in student.names():
        g = torch.zeros_like(student[name])
        if g_task is not None:
            g = g + a * g_task[name]
        if g_kd is not None:
            g = g + (1 - a) * g_kd[name]
        grads[name] = g
    optimizer.step(student, grads)
    return {
        "task_loss": float(task.detach()),
        "kd_loss": float(kd.detach()),
        "mean_length": float(tr.lengths.mean()),
    }


# ---------------------------------------------------------------------------
# Full loop
# ---------------------------------------------------------------------------


def load_teachers(config: DistillConfig) -> dict:
    teachers = {}
    for kind in config.exemplars:
        src = config.teachers.get(kind, config.teachers.get(kind.value))
        if src is None:
            raise ConfigError(f"no teacher for exemplar {kind.value}")
        params = src if isinstance(src, PolicyParams) else load_checkpoint(src)[0]
        if params.arch.problem_kind is not config.problem:
            raise ConfigError(f"teacher for {kind.value} solves {params.arch.problem_kind.value}")
        teachers[kind] = params
    archs = {(t.arch.n_heads, t.arch.n_encoder_layers) for t in teachers.values()}
    if len(archs) != 1:
        raise ConfigError("teachers must share head count and depth")
    return teachers


def run_log_columns(kinds) -> list[str]:
    cols = ["epoch", "selected_distribution"]
    cols += [f"p_{k.value}" for k in kinds]
    cols += [f"gap_{k.value}" for k in kinds]
    cols += ["task_loss", "kd_loss", "wall_time"]
    return cols


def distill(config: DistillConfig, vset: Optional[ValidationSet] = None, out_dir=None, cache: Optional[ReferenceCache] = None):
    """Train a student from the exemplar teachers; returns ``(student, log_rows)``.

    ``wall_time`` is logged but kept out of the CSV written to ``out_dir``
    (it goes to a sidecar file) so repeated runs produce identical logs.
    """
    teachers = load_teachers(config)
    kinds = list(config.exemplars)
    if vset is None:
        vset = build_validation_set(config.problem, kinds, config.n, config.validation_size, config.validation_seed, cache)
    if set(vset.kinds) != set(kinds):
        raise ConfigError("validation set does not cover the exemplar distributions")
    for kind in kinds:
        if len(vset.references.get(kind, [])) != len(vset.instances[kind]):
            raise ConfigError(f"missing reference lengths for {kind.value}")
    digest = vset.digest()

    first = teachers[kinds[0]].arch
    arch = config.student_arch or first.halved()
    student = init_params(arch, config.seed)
    opt = Adam(student, config.learning_rate, clip=config.grad_clip)
    pick_rng = make_rng(config.seed, 11)
    data_rng = make_rng(config.seed, 12)
    act_rng = make_rng(config.seed, 13)

    gaps = avg_gap(student, vset, config.validation_decode)
    rows = []
    frozen_probs, stable = None, 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        if frozen_probs is not None:
            probs = frozen_probs
        else:
            probs = adaptive_probs([gaps[k] for k in kinds], epoch, config.adaptive_start, config.adaptive)
        d = kinds[int(pick_rng.choice(len(kinds), p=probs))]
        teacher = teachers[d]
        task_l, kd_l = [], []
        for _ in range(config.steps_per_epoch):
            batch = sample_batch(config.problem, DistributionSpec(d), config.n, config.batch_size, data_rng)
            stats = combined_update(student, teacher, batch, config, act_rng, opt, list(teachers.values()))
            task_l.append(stats["task_loss"])
            kd_l.append(stats["kd_loss"])
        if vset.digest() != digest:
            raise RuntimeError("validation set changed during the run")
        if frozen_probs is None:
            gaps = avg_gap(student, vset, config.validation_decode)
            if config.freeze_probs:
                nxt = adaptive_probs([gaps[k] for k in kinds], epoch + 1, config.adaptive_start, config.adaptive)
                stable = stable + 1 if np.max(np.abs(nxt - probs)) < config.freeze_tol else 0
                if stable >= config.freeze_patience:
                    frozen_probs = nxt
        row = {"epoch": epoch, "selected_distribution": d.value}
        row.update({f"p_{k.value}": float(p) for k, p in zip(kinds, probs)})
        row.update({f"gap_{k.value}": gaps[k] for k in kinds})
        row["task_loss"] = float(np.mean(task_l)) if config.alpha > 0 else 0.0
        row["kd_loss"] = float(np.mean(kd_l)) if config.alpha < 1 else 0.0
        row["wall_time"] = time.perf_counter() - t0
        rows.append(row)
        log.info(
            "epoch %d picked %s probs %s gaps %s",
            epoch,
            d.value,
            np.round(probs, 3).tolist(),
            {k.value: round(100 * g, 3) for k, g in gaps.items()},
        )
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = run_log_columns(kinds)
        write_csv(out / "distill_log.csv", rows, [c for c in cols if c != "wall_time"])
        write_csv(out / "distill_timing.csv", rows, ["epoch", "wall_time"])
        save_checkpoint(out / "student.ckpt", student, opt.state_tensors(), {"epochs": config.epochs})
    return student, rows


ABLATIONS = ("no_adaptive", "no_kd", "no_task", "off_policy", "multi_teacher")


def ablation_config(config: DistillConfig, switch: str) -> DistillConfig:
    from dataclasses import replace

    if switch == "no_adaptive":
        return replace(config, adaptive=False)
    if switch == "no_kd":
        return replace(config, alpha=1.0)
    if switch == "no_task":
        return replace(config, alpha=0.0)
    if switch == "off_policy":
        return replace(config, trajectory_source=TrajectorySource.OFF_POLICY)
    if switch == "multi_teacher":
        return replace(config, teacher_mode=TeacherMode.SIMULTANEOUS_MT)
    raise ConfigError(f"unknown ablation {switch!r}; choose from {', '.join(ABLATIONS)}")


def ablate(config: DistillConfig, switch: str, vset: Optional[ValidationSet] = None, out_dir=None):
    return distill(ablation_config(config, switch), vset, out_dir)
