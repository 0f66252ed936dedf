import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from msmatch import trainer as T
from msmatch.datasets import make_partition, make_synthetic
from msmatch.model import ClassifierConfig, flat_parameters
import oracles


def _rand_case(rng):
    n, m, k = (int(v) for v in rng.integers(1, [9, 9, 6]))
    k = max(k, 2)
    scale = rng.choice([0.1, 1.0, 5.0])
    return (rng.normal(0, scale, (n, k)), rng.integers(0, k, n),
            rng.normal(0, scale, (m, k)), rng.normal(0, scale, (m, k)))


# --------------------------------------------------------------------------
# losses


def test_loss_oracles_500_cases():
    rng = np.random.default_rng(0)
    for _ in range(500):
        logits, labels, strong, weak = _rand_case(rng)
        tau = float(rng.choice([0.0, 0.3, 0.6, 0.95]))
        ls = T.supervised_loss(torch.tensor(logits), torch.tensor(labels)).item()
        assert ls == pytest.approx(oracles.supervised_loss(logits.tolist(), labels.tolist()), rel=1e-10)
        pseudo, mask = T.pseudo_label(torch.tensor(weak), tau)
        lu = T.unsupervised_loss(torch.tensor(strong), pseudo, mask).item()
        ref = oracles.unsupervised_loss(strong.tolist(), weak.tolist(), tau)
        assert lu == pytest.approx(ref, rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("k", [2, 3, 5, 10])
def test_uniform_logits_give_log_k(k):
    ls = T.supervised_loss(torch.zeros(4, k, dtype=torch.float64), torch.zeros(4, dtype=torch.long))
    assert ls.item() == pytest.approx(math.log(k), rel=1e-12)


def test_supervised_loss_examples():
    confident = torch.tensor([[50.0, 0.0], [0.0, 50.0]], dtype=torch.float64)
    assert T.supervised_loss(confident, torch.tensor([0, 1])).item() < 1e-20
    logits = torch.tensor([[1.0, 2.0], [0.5, -1.0]], dtype=torch.float64)
    a = T.supervised_loss(logits[:1], torch.tensor([0])).item()
    b = T.supervised_loss(logits[1:], torch.tensor([1])).item()
    assert T.supervised_loss(logits, torch.tensor([0, 1])).item() == pytest.approx((a + b) / 2, rel=1e-14)


def test_pseudo_label_examples():
    logits = torch.log(torch.tensor([[0.96, 0.04], [0.5, 0.5]], dtype=torch.float64))
    labels, mask = T.pseudo_label(logits, 0.95)
    assert labels[0] == 0 and mask.tolist() == [1.0, 0.0]
    _, mask = T.pseudo_label(logits, 1e-9)
    assert mask.tolist() == [1.0, 1.0]
    top = torch.softmax(logits, -1).max()
    _, mask = T.pseudo_label(logits, float(top) * 1.0001)
    assert mask.tolist() == [0.0, 0.0]


def test_pseudo_label_carries_no_gradient():
    weak = torch.randn(5, 3, requires_grad=True)
    labels, mask = T.pseudo_label(weak, 1e-9)
    assert not labels.requires_grad and not mask.requires_grad
    strong = torch.randn(5, 3, requires_grad=True)
    T.unsupervised_loss(strong, labels, mask).backward()
    assert weak.grad is None and strong.grad is not None


def test_unsupervised_loss_examples():
    strong = torch.tensor([[2.0, 0.0], [0.0, 3.0]], dtype=torch.float64)
    pseudo = torch.tensor([1, 0])
    assert T.unsupervised_loss(strong, pseudo, torch.zeros(2, dtype=torch.float64)).item() == 0.0
    a = oracles.cross_entropy([2.0, 0.0], 1)
    got = T.unsupervised_loss(strong, pseudo, torch.tensor([1.0, 0.0], dtype=torch.float64)).item()
    assert got == pytest.approx(a / 2, rel=1e-14)
    match = torch.tensor([[60.0, 0.0], [0.0, 60.0]], dtype=torch.float64)
    assert T.unsupervised_loss(match, torch.tensor([0, 1]), torch.ones(2, dtype=torch.float64)).item() < 1e-20


@given(m=st.integers(1, 8), keep=st.integers(0, 8), seed=st.integers(0, 10_000))
def test_denominator_contract(m, keep, seed):
    keep = min(keep, m)
    g = torch.Generator().manual_seed(seed)
    strong = torch.randn(m, 4, generator=g, dtype=torch.float64)
    pseudo = torch.randint(0, 4, (m,), generator=g)
    mask = torch.zeros(m, dtype=torch.float64)
    mask[:keep] = 1
    lu = T.unsupervised_loss(strong, pseudo, mask).item()
    if keep:
        mean_kept = torch.nn.functional.cross_entropy(strong[:keep], pseudo[:keep]).item()
        assert lu == pytest.approx(keep / m * mean_kept, rel=1e-12)
    else:
        assert lu == 0.0


def test_total_loss():
    assert T.total_loss(torch.tensor(1.0), torch.tensor(0.5), "ssl").item() == 1.5
    assert T.total_loss(torch.tensor(1.0), torch.tensor(0.5), "supervised").item() == 1.0
    assert T.total_loss(torch.tensor(0.0), torch.tensor(0.0), "ssl").item() == 0.0
    assert T.total_loss(torch.tensor(1.0), torch.tensor(0.5), "ssl", lambda_u=2.0).item() == 2.0


# --------------------------------------------------------------------------
# schedule and config


def test_cosine_schedule():
    assert T.cosine_lr(0, 5000, 0.03) == 0.03
    assert T.cosine_lr(2500, 5000, 0.03) == pytest.approx(0.015, abs=1e-15)
    assert T.cosine_lr(5000, 5000, 0.03) == pytest.approx(0.0, abs=1e-15)
    lrs = [T.cosine_lr(s, 5000, 0.03) for s in range(5001)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        T.cosine_lr(5001, 5000, 0.03)


def test_fixmatch_schedule_option():
    assert T.fixmatch_cosine_lr(0, 100, 0.03) == 0.03
    assert T.fixmatch_cosine_lr(100, 100, 0.03) == pytest.approx(0.03 * math.cos(7 * math.pi / 16))
    cfg = T.TrainConfig(schedule="fixmatch_cosine", epochs=1, iters_per_epoch=100)
    assert T.learning_rate(cfg, 100) == T.fixmatch_cosine_lr(100, 100, 0.03)


def test_train_config_defaults_and_checks():
    cfg = T.TrainConfig()
    assert (cfg.lr0, cfg.momentum, cfg.nesterov, cfg.weight_decay, cfg.threshold) == (0.03, 0.9, True, 7.5e-4, 0.95)
    assert cfg.total_steps == 500_000 and cfg.batch_unlabeled == 224
    assert T.TrainConfig(mode="supervised").batch_unlabeled == 0
    for bad in (dict(threshold=0), dict(unlabeled_ratio=-1), dict(mode="x"), dict(schedule="step")):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)


def test_index_stream_reshuffles_every_pass():
    s = T.IndexStream(10, 4, seed=0, stream=0)
    got = np.concatenate([s.next() for _ in range(5)])  # 20 draws = 2 passes
    assert sorted(got[:10]) == list(range(10)) and sorted(got[10:20]) == list(range(10))
    assert not np.array_equal(got[:10], got[10:20])


# --------------------------------------------------------------------------
# steps and loops


@pytest.fixture(scope="module")
def tiny_partition():
    ds = make_synthetic(4, 3, 16, 60, seed=0)
    return make_partition(ds, 0.2, 4, seed=0)


def _setup(partition, **kw):
    base = dict(batch_labeled=8, unlabeled_ratio=2, epochs=1, iters_per_epoch=10, seed=0, weight_decay=5e-4)
    base.update(kw)
    cfg = T.TrainConfig(**base)
    mcfg = ClassifierConfig(3, 4, "desk_tiny", 0.3)
    state = T.init_state(mcfg, cfg)
    builder = T.BatchBuilder(partition.train_labeled.value_range, T.partition_stats(partition), 3, cfg.seed, 3)
    return cfg, state, builder


def _batches(partition, cfg, k=0):
    lab = T.Batch.take(partition.train_labeled, (np.arange(cfg.batch_labeled) + k) % len(partition.train_labeled))
    unl = T.Batch.take(partition.train_unlabeled, np.arange(cfg.batch_labeled * cfg.unlabeled_ratio) + 3 * k)
    return lab, unl


def test_unreachable_threshold_matches_supervised_bit_for_bit(tiny_partition):
    cfg_s, st_s, b_s = _setup(tiny_partition, mode="supervised")
    cfg_u, st_u, b_u = _setup(tiny_partition, mode="ssl", threshold=2.0)
    for k in range(3):
        lab, unl = _batches(tiny_partition, cfg_u, k)
        T.train_step(st_s, lab, None, cfg_s, b_s)
        rec = T.train_step(st_u, lab, unl, cfg_u, b_u)
        assert rec["mask_rate"] == 0.0 and rec["Lu"] == 0.0
        for p, q in zip(st_s.model.parameters(), st_u.model.parameters()):
            assert torch.equal(p, q)


def test_supervised_step_equals_plain_ls_step(tiny_partition):
    cfg, state, builder = _setup(tiny_partition, mode="supervised")
    lab, _ = _batches(tiny_partition, cfg)
    ref = T.init_state(ClassifierConfig(3, 4, "desk_tiny", 0.3), cfg)
    ref.model.train()
    for g in ref.optimizer.param_groups:
        g["lr"] = T.learning_rate(cfg, 0)
    x = builder.weak(lab, 0, T.STREAM_LABELED)
    torch.manual_seed(T._torch_seed(cfg.seed, 0, T.STREAM_LABELED))
    loss = T.supervised_loss(ref.model(x), torch.as_tensor(np.array(lab.labels)))
    ref.optimizer.zero_grad()
    loss.backward()
    ref.optimizer.step()
    T.train_step(state, lab, None, cfg, builder)
    assert torch.equal(flat_parameters(state.model), flat_parameters(ref.model))


def test_weight_decay_is_coupled_l2(tiny_partition):
    cfg, state, builder = _setup(tiny_partition, mode="supervised", momentum=0.0, nesterov=False,
                                 weight_decay=0.1)
    cfg0, state0, _ = _setup(tiny_partition, mode="supervised", momentum=0.0, nesterov=False, weight_decay=0.0)
    lab, _ = _batches(tiny_partition, cfg)
    p0 = flat_parameters(state.model).clone()
    T.train_step(state, lab, None, cfg, builder)
    T.train_step(state0, lab, None, cfg0, builder)
    diff = flat_parameters(state0.model) - flat_parameters(state.model)
    torch.testing.assert_close(diff, T.learning_rate(cfg, 0) * 0.1 * p0, atol=1e-7, rtol=1e-5)


def test_step_record_and_mask_rate(tiny_partition):
    cfg, state, builder = _setup(tiny_partition, threshold=1e-9)
    lab, unl = _batches(tiny_partition, cfg)
    rec = T.train_step(state, lab, unl, cfg, builder)
    assert set(rec) == {"step", "Ls", "Lu", "mask_rate", "lr", "pseudo_acc"}
    assert rec["mask_rate"] == 1.0 and rec["Lu"] > 0 and 0 <= rec["pseudo_acc"] <= 1
    assert state.step == 1 and state.history == [rec]


def test_divergence_reports_batch_ids(tiny_partition):
    cfg, state, builder = _setup(tiny_partition, mode="supervised")
    with torch.no_grad():
        next(state.model.parameters()).fill_(float("nan"))
    lab, _ = _batches(tiny_partition, cfg)
    with pytest.raises(T.TrainingDiverged) as info:
        T.train_step(state, lab, None, cfg, builder)
    assert info.value.step == 0 and info.value.ids == list(lab.ids)


def test_mode_batch_contract(tiny_partition):
    cfg, state, builder = _setup(tiny_partition, mode="supervised")
    lab, unl = _batches(tiny_partition, cfg)
    with pytest.raises(ValueError):
        T.train_step(state, lab, unl, cfg, builder)
    cfg, state, builder = _setup(tiny_partition, mode="ssl")
    with pytest.raises(ValueError):
        T.train_step(state, lab, None, cfg, builder)


def test_loss_decreases_over_200_steps(tiny_partition):
    cfg = T.TrainConfig(batch_labeled=16, unlabeled_ratio=2, epochs=1, iters_per_epoch=200, seed=0,
                        weight_decay=5e-4, log_every=1)
    res = T.train(cfg, tiny_partition, ClassifierConfig(3, 4, "desk_tiny", 0.0))
    ls = np.array([r["Ls"] for r in res.history])
    assert len(ls) == 200
    assert ls[190:200].mean() < ls[0:10].mean()


def test_train_reproducible_and_artifacts(tiny_partition, tmp_path):
    cfg = T.TrainConfig(batch_labeled=8, unlabeled_ratio=2, epochs=2, iters_per_epoch=10, seed=3,
                        log_every=5, eval_every=10)
    a = T.train(cfg, tiny_partition, out_dir=tmp_path / "a")
    b = T.train(cfg, tiny_partition, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "history.jsonl").read_text() == (tmp_path / "b" / "history.jsonl").read_text()
    assert a.report.to_dict() == b.report.to_dict()
    lines = (tmp_path / "a" / "history.jsonl").read_text().splitlines()
    assert len(lines) == 4
    recs = [json.loads(x) for x in lines]
    assert [r["step"] for r in recs] == [4, 9, 14, 19]
    assert "test_acc" in recs[1] and "test_acc" not in recs[0]
    assert all(r2["lr"] <= r1["lr"] for r1, r2 in zip(recs, recs[1:]))
    assert (tmp_path / "a" / "checkpoint.pt").exists()


def test_config_steps_for_reference_recipes():
    eurosat = T.TrainConfig(batch_labeled=32, unlabeled_ratio=7, epochs=500, iters_per_epoch=1000)
    assert eurosat.total_steps == 500_000 and eurosat.batch_unlabeled == 224
    ucm = T.TrainConfig(batch_labeled=16, unlabeled_ratio=4, epochs=1000, iters_per_epoch=1000)
    assert ucm.total_steps == 1_000_000 and ucm.batch_unlabeled == 64


def test_ema_option_runs(tiny_partition):
    cfg = T.TrainConfig(batch_labeled=8, unlabeled_ratio=1, epochs=1, iters_per_epoch=3, ema_decay=0.9)
    res = T.train(cfg, tiny_partition)
    assert res.state.ema is not None
    assert not torch.equal(flat_parameters(res.state.ema), flat_parameters(res.state.model))


def test_train_rejects_mismatched_model(tiny_partition):
    cfg = T.TrainConfig(epochs=1, iters_per_epoch=1)
    with pytest.raises(ValueError):
        T.train(cfg, tiny_partition, ClassifierConfig(13, 4, "desk_tiny"))
    empty = dataclasses.replace(tiny_partition, train_unlabeled=tiny_partition.train_unlabeled.subset([]))
    with pytest.raises(ValueError):
        T.train(cfg, empty)
