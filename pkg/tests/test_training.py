import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from camf.data import SynthConfig, synthesize
from camf.errors import ConfigError, DataError
from camf.fusion import ModelConfig
from camf.training import (
    FoldSplit,
    TrainConfig,
    _optimizer,
    build_model,
    cross_validate,
    format_mean_std,
    init_params,
    load_checkpoint,
    make_folds,
    save_checkpoint,
    train_one,
)


def test_init_deterministic_and_zero_biases():
    a = build_model(ModelConfig(), seed=3)
    b = build_model(ModelConfig(), seed=3)
    c = build_model(ModelConfig(), seed=4)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb)
        if na.endswith("bias") or na == "fusion_logits":
            assert torch.all(pa == 0)
        else:
            assert not torch.equal(pa, pc)


def test_init_variance_matches_fan_in():
    model = build_model(ModelConfig(), seed=0, dtype=torch.float64)
    draws = {n: [] for n, p in model.named_parameters() if p.dim() >= 2}
    seed = 0
    while min(sum(len(d) for d in v) for v in draws.values()) < 10_000:
        init_params(model, seed)
        for n, p in model.named_parameters():
            if n in draws:
                draws[n].append(p.detach().flatten().numpy().copy())
        seed += 1
    for n, p in model.named_parameters():
        if n not in draws:
            continue
        fan_in = p.shape[0] if n.rsplit(".", 1)[-1] in ("W_q", "W_k", "W_v") else p[0].numel()
        var = np.concatenate(draws[n]).var()
        assert abs(var / (2.0 / fan_in) - 1.0) < 0.2, n


class Quadratic(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([[1.0, -2.0], [0.5, 3.0]], dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor([0.7, -0.3], dtype=torch.float64))

    def loss(self):
        a = torch.tensor([[1.0, 2.0], [3.0, 0.5]], dtype=torch.float64)
        return 0.5 * (a * self.w**2).sum() + (self.b**2).sum() - self.b.sum()


def test_adam_matches_hand_recurrence():
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.1)
    model = Quadratic()
    opt = _optimizer(model, cfg)
    a = np.array([[1.0, 2.0], [3.0, 0.5]])
    w, b = model.w.detach().numpy().copy(), model.b.detach().numpy().copy()
    state = {"w": [np.zeros_like(w), np.zeros_like(w)], "b": [np.zeros_like(b), np.zeros_like(b)]}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, 6):
        opt.zero_grad()
        model.loss().backward()
        opt.step()
        # decay only on the matrix, as an L2 term folded into the gradient
        grads = {"w": a * w + 0.1 * w, "b": 2 * b - 1.0}
        vals = {"w": w, "b": b}
        for k in ("w", "b"):
            m, v = state[k]
            m[:] = b1 * m + (1 - b1) * grads[k]
            v[:] = b2 * v + (1 - b2) * grads[k] ** 2
            mhat, vhat = m / (1 - b1**t), v / (1 - b2**t)
            vals[k] -= 0.01 * mhat / (np.sqrt(vhat) + eps)
        np.testing.assert_allclose(model.w.detach().numpy(), w, rtol=0, atol=1e-10)
        np.testing.assert_allclose(model.b.detach().numpy(), b, rtol=0, atol=1e-10)


def test_folds_620_subjects():
    folds = make_folds([f"s{i}" for i in range(620)], seed=0)
    assert [len(f.test_ids) for f in folds] == [124] * 5


def test_folds_forty_subjects():
    for f in make_folds([f"s{i}" for i in range(40)], seed=17):
        assert (len(f.test_ids), len(f.val_ids), len(f.train_ids)) == (8, 4, 28)


def test_folds_reject_tiny_or_duplicate():
    with pytest.raises(DataError):
        make_folds([f"s{i}" for i in range(9)], 0)
    with pytest.raises(DataError):
        make_folds(["a"] * 12, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 1000), st.integers(0, 2**32 - 1))
def test_fold_partition_laws(n, seed):
    ids = [f"s{i}" for i in range(n)]
    folds = make_folds(ids, seed)
    tests = [t for f in folds for t in f.test_ids]
    assert sorted(tests) == sorted(ids)
    sizes = [len(f.test_ids) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for f in folds:
        rest = n - len(f.test_ids)
        assert abs(len(f.val_ids) - rest / 8) <= 1
        assert set(f.train_ids) | set(f.val_ids) | set(f.test_ids) == set(ids)
        assert len(f.train_ids) + len(f.val_ids) + len(f.test_ids) == n


def test_folds_deterministic():
    ids = [f"s{i}" for i in range(50)]
    assert make_folds(ids, 5) == make_folds(ids, 5)
    assert make_folds(ids, 5) != make_folds(ids, 6)


@pytest.fixture(scope="module")
def small():
    return synthesize(SynthConfig(n_subjects=12, mode="volume_only", noise=0.1, seed=8)).samples


def test_zero_learning_rate_leaves_params(small):
    cfg = TrainConfig(learning_rate=0.0, max_epochs=2, batch_size=4)
    fold = FoldSplit(0, [s.subject_id for s in small], [], [])
    _, model = train_one(cfg, fold, small, ModelConfig())
    ref = build_model(ModelConfig(), cfg.seed)
    for (n, p), (_, q) in zip(model.named_parameters(), ref.named_parameters()):
        assert torch.equal(p, q), n


def test_training_logs_are_deterministic(small):
    cfg = TrainConfig(max_epochs=3, batch_size=4)
    fold = make_folds([s.subject_id for s in small], 0)[1]
    r1, m1 = train_one(cfg, fold, small, ModelConfig())
    r2, m2 = train_one(cfg, fold, small, ModelConfig())
    assert r1.log == r2.log
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)
    for rec in r1.log:
        assert math.isclose(sum(rec.alphas), 1.0, abs_tol=1e-6)
        assert all(a >= 0 for a in rec.alphas)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(fusion_mode="bogus").validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    TrainConfig(batch_size=1, fusion_mode="concat").validate()


def test_checkpoint_round_trip(tmp_path):
    model = build_model(ModelConfig(fusion_mode="sa_adaptive"), seed=1)
    path = save_checkpoint(tmp_path / "m.pt", model, {"epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert meta["epoch"] == 3
    assert loaded.fusion_mode == "sa_adaptive"
    for (n, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert torch.equal(p, q), n
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.pt")


def test_cross_validate_report(small):
    samples = small
    cfg = TrainConfig(max_epochs=2, batch_size=4, fusion_mode="concat")
    report = cross_validate(cfg, samples, ModelConfig())
    assert len(report["folds"]) == 5
    assert [f["fold"] for f in report["folds"]] == list(range(5))
    for key in ("f1", "acc", "mcc"):
        vals = [f[key] for f in report["folds"]]
        assert report["aggregate"][key]["mean"] == pytest.approx(np.mean(vals), abs=1e-15)
        assert report["aggregate"][key]["formatted"] == format_mean_std(vals)
    assert sum(f["n_test"] for f in report["folds"]) == len(samples)


def test_format_mean_std():
    assert format_mean_std([0.69, 0.71]) == "0.7000±0.0100"
