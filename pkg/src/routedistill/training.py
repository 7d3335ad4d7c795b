"""REINFORCE pre-training of single-distribution teachers."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .instancegen import DistributionSpec, make_instance, make_rng
from .policy import (
    ArchSpec,
    NumericError,
    PolicyParams,
    init_params,
    run_policy,
    save_checkpoint,
    score_tours,
)
from .problems import Instance, ProblemKind

log = logging.getLogger(__name__)


class BaselineMode(str, enum.Enum):
    SHARED_MULTISTART = "shared_multistart"
    GREEDY_ROLLOUT = "greedy_rollout"


@dataclass
class TrainConfig:
    problem: ProblemKind = ProblemKind.TSP
    n: int = 20
    distribution: DistributionSpec = field(default_factory=DistributionSpec)
    arch: ArchSpec = field(default_factory=ArchSpec)
    epochs: int = 10
    steps_per_epoch: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-4
    baseline_mode: BaselineMode = BaselineMode.SHARED_MULTISTART
    n_starts: Optional[int] = None  # None -> every node (TSP) / customer (CVRP)
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.problem = ProblemKind(self.problem)
        self.baseline_mode = BaselineMode(self.baseline_mode)
        if isinstance(self.distribution, (str, enum.Enum)):
            self.distribution = DistributionSpec(self.distribution)
        if self.arch.problem_kind is not self.problem:
            raise ValueError("arch.problem_kind must match problem")
        for name in ("n", "epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @property
    def starts(self) -> int:
        return self.n_starts or self.n


class Adam:
    """Adam over a dict of tensors, with optional global-norm clipping."""

    def __init__(self, params: PolicyParams, lr: float, betas=(0.9, 0.999), eps=1e-8, clip: Optional[float] = 1.0):
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: PolicyParams, grads: dict[str, torch.Tensor]) -> float:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        b1, b2 = self.betas
        with torch.no_grad():
            for k, p in params.tensors.items():
                g = grads[k] * scale
                self.m[k].mul_(b1).add_(g, alpha=1 - b1)
                self.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
                mhat = self.m[k] / (1 - b1**self.t)
                vhat = self.v[k] / (1 - b2**self.t)
                p.sub_(self.lr * mhat / (vhat.sqrt() + self.eps))
        return norm

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = torch.tensor([float(self.t)], dtype=torch.float64)
        return out

    def load_state_tensors(self, extra: dict[str, torch.Tensor]):
        for k in self.m:
            self.m[k] = extra[f"adam.m.{k}"].clone()
            self.v[k] = extra[f"adam.v.{k}"].clone()
        self.t = int(extra["adam.t"][0])


def shared_baseline(lengths: torch.Tensor, n_starts: int) -> torch.Tensor:
    """Per-row baseline: mean length over the rows of the same instance."""
    per = lengths.view(-1, n_starts)
    return per.mean(dim=1, keepdim=True).expand_as(per).reshape(-1)


def task_surrogate(log_prob: torch.Tensor, lengths: torch.Tensor, baseline: torch.Tensor) -> torch.Tensor:
    """REINFORCE surrogate whose gradient is the policy-gradient estimate of E[L]."""
    adv = (lengths - baseline).detach()
    return (adv * log_prob).mean()


def frozen_task_surrogate(params, instances, sequences, lengths, baseline, skip_first=False) -> torch.Tensor:
    """Task surrogate re-evaluated at fixed trajectories (differentiable in ``params``)."""
    tr = score_tours(params, instances, sequences, skip_first=skip_first, keep_distributions=False)
    return task_surrogate(tr.log_prob, torch.as_tensor(lengths, dtype=torch.float64), torch.as_tensor(baseline, dtype=torch.float64))


def sample_batch(problem, spec: DistributionSpec, n: int, size: int, rng) -> list[Instance]:
    return [make_instance(problem, spec, n, rng) for _ in range(size)]


def _grads(loss: torch.Tensor, params: PolicyParams, retain: bool = False) -> dict[str, torch.Tensor]:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)}")
    gs = torch.autograd.grad(loss, [params[n] for n in params.names()], allow_unused=True, retain_graph=retain)
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(params.names(), gs)}


def reinforce_step(
    params: PolicyParams,
    instances: Sequence[Instance],
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: Adam,
    baseline_params: Optional[PolicyParams] = None,
) -> dict:
    """One policy-gradient update in place; returns batch statistics."""
    if not instances:
        raise ValueError("empty batch")
    params.requires_grad_(True)
    if config.baseline_mode is BaselineMode.SHARED_MULTISTART:
        tr = run_policy(params, instances, "sample", rng, n_starts=config.starts)
        baseline = shared_baseline(tr.lengths, config.starts)
    else:
        tr = run_policy(params, instances, "sample", rng)
        ref = baseline_params if baseline_params is not None else params
        with torch.no_grad():
            baseline = run_policy(ref, instances, "greedy").lengths
    loss = task_surrogate(tr.log_prob, tr.lengths, baseline)
    grads = _grads(loss, params)
    params.requires_grad_(False)
    norm = optimizer.step(params, grads)
    return {
        "mean_length": float(tr.lengths.mean()),
        "loss": float(loss.detach()),
        "grad_norm": norm,
        "sequences": tr.sequences,
    }


TRAIN_LOG_COLUMNS = ["epoch", "step", "mean_length", "baseline_mode", "seed"]


def train_teacher(config: TrainConfig, out_dir=None, init: Optional[PolicyParams] = None):
    """Run ``epochs x steps_per_epoch`` REINFORCE steps on fresh instances.

    Returns ``(params, log_rows)``.  With ``out_dir`` a CSV log and one
    checkpoint per epoch (plus ``final.ckpt``) are written.
    """
    params = init.clone() if init is not None else init_params(config.arch, config.seed)
    opt = Adam(params, config.learning_rate, clip=config.grad_clip)
    data_rng = make_rng(config.seed, 1)
    act_rng = make_rng(config.seed, 2)
    baseline = params.clone() if config.baseline_mode is BaselineMode.GREEDY_ROLLOUT else None
    rows = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, config.epochs + 1):
        for step in range(1, config.steps_per_epoch + 1):
            batch = sample_batch(config.problem, config.distribution, config.n, config.batch_size, data_rng)
            stats = reinforce_step(params, batch, config, act_rng, opt, baseline)
            rows.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "mean_length": stats["mean_length"],
                    "baseline_mode": config.baseline_mode.value,
                    "seed": config.seed,
                }
            )
        if baseline is not None:
            baseline = params.clone()
        ep = [r["mean_length"] for r in rows if r["epoch"] == epoch]
        log.info("teacher %s epoch %d mean length %.4f", config.distribution.kind.value, epoch, np.mean(ep))
        if out:
            save_checkpoint(out / f"epoch{epoch:04d}.ckpt", params, opt.state_tensors(), {"epoch": epoch})
    if out:
        save_checkpoint(out / "final.ckpt", params, opt.state_tensors(), {"epoch": config.epochs})
        write_csv(out / "train_log.csv", rows, TRAIN_LOG_COLUMNS)
    return params, rows


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
