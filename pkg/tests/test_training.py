import numpy as np
import pytest
import torch

from routedistill.instancegen import DistributionKind, DistributionSpec, make_rng
from routedistill.policy import ArchSpec, NumericError, grad_log_prob, init_params, load_checkpoint
from routedistill.problems import ProblemKind
from routedistill.training import (
    Adam,
    BaselineMode,
    TrainConfig,
    frozen_task_surrogate,
    reinforce_step,
    sample_batch,
    shared_baseline,
    task_surrogate,
    train_teacher,
)

SMALL = ArchSpec(embed_dim=16, n_heads=2, n_encoder_layers=1)


def test_adam_matches_torch_reference():
    params = init_params(SMALL, 0)
    ref = {k: v.clone().requires_grad_(True) for k, v in params.tensors.items()}
    torch_opt = torch.optim.Adam(list(ref.values()), lr=1e-2)
    ours = Adam(params, 1e-2, clip=None)
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        grads = {k: torch.randn(v.shape, generator=g, dtype=torch.float64) for k, v in params.tensors.items()}
        ours.step(params, grads)
        for k, t in ref.items():
            t.grad = grads[k].clone()
        torch_opt.step()
    for k in params.names():
        assert torch.allclose(params[k], ref[k].detach(), atol=1e-12, rtol=0)


def test_adam_clips_global_norm():
    params = init_params(SMALL, 0)
    before = params.clone()
    big = {k: torch.full_like(v, 100.0) for k, v in params.tensors.items()}
    opt_a = Adam(params, 1e-3, clip=1.0)
    norm = opt_a.step(params, big)
    assert norm == pytest.approx(100.0 * np.sqrt(params.num_params()))
    # with clipping the first Adam step is still sign-like: every entry moves by lr
    for k in params.names():
        assert torch.allclose(before[k] - params[k], torch.full_like(params[k], 1e-3), atol=1e-9)
    m = opt_a.m[params.names()[0]]
    assert torch.allclose(m, torch.full_like(m, 0.1 * 100.0 / norm), atol=1e-12)


def test_adam_rejects_nonfinite():
    params = init_params(SMALL, 0)
    grads = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
    grads[params.names()[0]][0, 0] = float("nan")
    with pytest.raises(NumericError):
        Adam(params, 1e-3).step(params, grads)


def test_adam_state_roundtrip():
    params = init_params(SMALL, 1)
    opt = Adam(params, 1e-3)
    grads = {k: torch.ones_like(v) for k, v in params.tensors.items()}
    opt.step(params, grads)
    other = Adam(params, 1e-3)
    other.load_state_tensors(opt.state_tensors())
    a, b = params.clone(), params.clone()
    opt.step(a, grads)
    other.step(b, grads)
    assert a.equal(b) and other.t == 2


def test_shared_baseline_groups():
    lengths = torch.tensor([1.0, 3.0, 10.0, 20.0, 30.0, 40.0], dtype=torch.float64)
    assert shared_baseline(lengths, 2).tolist() == [2.0, 2.0, 15.0, 15.0, 35.0, 35.0]
    adv = (lengths - shared_baseline(lengths, 3)).view(-1, 3)
    assert torch.allclose(adv.sum(1), torch.zeros(2, dtype=torch.float64))


def test_surrogate_gradient_equals_score_function_estimate():
    params = init_params(SMALL, 2)
    insts = sample_batch("tsp", DistributionSpec(), 6, 3, make_rng(0))
    seqs = [tuple(make_rng(i).permutation(6).tolist()) for i in range(3)]
    lengths = np.array([3.0, 2.0, 4.0])
    baseline = np.array([2.5, 2.5, 2.5])
    work = params.clone(requires_grad=True)
    loss = frozen_task_surrogate(work, insts, seqs, lengths, baseline)
    got = torch.autograd.grad(loss, [work[n] for n in work.names()], allow_unused=True)
    per = [grad_log_prob(i, s, params) for i, s in zip(insts, seqs)]
    for name, g in zip(work.names(), got):
        want = sum((l - b) * p[name] for l, b, p in zip(lengths, baseline, per)) / 3
        g = torch.zeros_like(want) if g is None else g
        assert torch.allclose(g, want, atol=1e-12)


def test_task_surrogate_detaches_advantage():
    lp = torch.tensor([0.5, -1.0], requires_grad=True, dtype=torch.float64)
    lengths = torch.tensor([2.0, 4.0], requires_grad=True, dtype=torch.float64)
    loss = task_surrogate(lp, lengths, torch.tensor([3.0, 3.0], dtype=torch.float64))
    loss.backward()
    assert lp.grad.tolist() == [-0.5, 0.5]
    assert lengths.grad is None


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(problem="cvrp")  # default arch is TSP
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    assert TrainConfig(distribution="cluster").distribution.kind is DistributionKind.CLUSTER
    assert TrainConfig(n=7).starts == 7


def _tiny(**kw):
    base = dict(n=8, arch=SMALL, epochs=2, steps_per_epoch=3, batch_size=4, learning_rate=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_train_teacher_deterministic(tmp_path):
    a, rows_a = train_teacher(_tiny(), tmp_path / "a")
    b, rows_b = train_teacher(_tiny())
    assert a.equal(b)
    assert [r["mean_length"] for r in rows_a] == [r["mean_length"] for r in rows_b]
    loaded, extra, meta = load_checkpoint(tmp_path / "a" / "final.ckpt")
    assert loaded.equal(a) and meta["epoch"] == 2 and "adam.t" in extra
    assert (tmp_path / "a" / "epoch0001.ckpt").exists()
    lines = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,mean_length,baseline_mode,seed" and len(lines) == 7


@pytest.mark.parametrize("mode", list(BaselineMode))
def test_both_baseline_modes_run(mode):
    params, rows = train_teacher(_tiny(baseline_mode=mode, epochs=1))
    params.check_finite()
    assert all(np.isfinite(r["mean_length"]) and r["baseline_mode"] == mode.value for r in rows)


def test_cvrp_teacher_step():
    arch = ArchSpec(embed_dim=16, n_heads=2, n_encoder_layers=1, problem_kind=ProblemKind.CVRP)
    cfg = TrainConfig(problem="cvrp", n=6, arch=arch, batch_size=3, epochs=1, steps_per_epoch=1)
    params = init_params(arch, 0)
    before = params.clone()
    stats = reinforce_step(params, sample_batch("cvrp", DistributionSpec(), 6, 3, make_rng(1)), cfg, make_rng(2), Adam(params, 1e-3))
    assert len(stats["sequences"]) == 3 * 6
    assert not params.equal(before)


@pytest.mark.slow
def test_short_training_reduces_length():
    cfg = TrainConfig(n=10, arch=SMALL, epochs=4, steps_per_epoch=25, batch_size=16, learning_rate=1e-3, seed=0)
    _, rows = train_teacher(cfg)
    first = np.mean([r["mean_length"] for r in rows[:10]])
    last = np.mean([r["mean_length"] for r in rows[-10:]])
    assert last < first
