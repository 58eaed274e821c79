import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gaptext.model import count_params, expected_param_count
from gaptext.trainer import (
    FREEZE_STRATEGIES, Dataset, FreezeError, TrainConfig, TrainingDiverged, apply_freeze, bootstrap_metrics,
    evaluate, freeze_flags, grad_check, metrics_from_predictions, mse_loss, train,
)

from conftest import tiny_model
from oracles import metrics as oracle_metrics


def test_mse_examples():
    assert float(mse_loss(torch.tensor([1.0, 2.0]), [1.0, 2.0])) == 0.0
    assert float(mse_loss(torch.tensor([1.0, 3.0]), [0.0, 0.0])) == 5.0
    with pytest.raises(ValueError):
        mse_loss(torch.tensor([1.0]), [1.0, 2.0])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(0.1, 10))
def test_mse_homogeneous(errors, c):
    e = torch.tensor(errors, dtype=torch.float64)
    z = torch.zeros_like(e)
    assert math.isclose(float(mse_loss(c * e, z)), c * c * float(mse_loss(e, z)), rel_tol=1e-9, abs_tol=1e-12)


def test_metric_fixture():
    m = metrics_from_predictions([0, 1, 2], [1, 1, 1])
    assert m.mae == 2 / 3 and m.rmse == math.sqrt(2 / 3) and m.r2 == 0.0
    p = metrics_from_predictions([0.5, 1, 2], [0.5, 1, 2])
    assert (p.mae, p.rmse, p.r2) == (0.0, 0.0, 1.0)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30).filter(lambda y: max(y) - min(y) > 1e-3),
       st.randoms(use_true_random=False))
def test_metrics_against_oracle(y, rnd):
    p = [v + rnd.uniform(-1, 1) for v in y]
    m = metrics_from_predictions(y, p)
    mae, rmse, r2 = oracle_metrics(y, p)
    assert math.isclose(m.mae, mae, abs_tol=1e-12)
    assert math.isclose(m.rmse, rmse, abs_tol=1e-12)
    assert math.isclose(m.r2, r2, rel_tol=1e-9, abs_tol=1e-9)
    assert m.rmse >= m.mae - 1e-12
    perm = rnd.sample(range(len(y)), len(y))
    m2 = metrics_from_predictions([y[i] for i in perm], [p[i] for i in perm])
    assert math.isclose(m.mae, m2.mae, abs_tol=1e-12) and math.isclose(m.r2, m2.r2, abs_tol=1e-9)


def test_mean_predictor_r2_zero():
    y = np.random.default_rng(0).uniform(0, 5, 97)
    assert abs(metrics_from_predictions(y, np.full_like(y, y.mean())).r2) < 1e-12


def test_empty_dataset():
    with pytest.raises(ValueError):
        metrics_from_predictions([], [])


def test_bootstrap_spread():
    y = np.random.default_rng(1).uniform(0, 5, 50)
    sd = bootstrap_metrics(y, y + 0.1 * np.random.default_rng(2).standard_normal(50), n_resamples=200)
    assert 0 < sd["mae_sd"] < 0.05


def test_freeze_counts_l4():
    m = tiny_model(n_layers=4)
    counts = [apply_freeze(m, s).trainable for s in FREEZE_STRATEGIES]
    assert all(a > b for a, b in zip(counts, counts[1:]))
    groups = expected_param_count(m.cfg)
    assert counts[0] == sum(groups.values())
    assert counts[-1] == groups["head"]
    assert counts[2] == groups["layer.2"] * 3 + groups["final_norm"] + groups["head"]


def test_freeze_percent_exact():
    m = tiny_model(n_layers=4)
    r = apply_freeze(m, "all_but_final")
    assert r.percent == 100.0 * count_params(m, True) / count_params(m)
    assert apply_freeze(m, "none").percent == 100.0


def test_freeze_incompatible():
    with pytest.raises(FreezeError):
        freeze_flags("all_but_final_3", 2)
    with pytest.raises(FreezeError):
        freeze_flags("some", 4)


def _data(seqs, n=12, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(seqs[:n], rng.uniform(0, 5, n).tolist())


def test_lr_zero_keeps_weights(small_seqs, small_vocab):
    m = tiny_model(vocab_size=len(small_vocab))
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train(m, _data(small_seqs), None, TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, weight_decay=0.0))
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k


@pytest.mark.parametrize("strategy", ["all", "all_but_final", "first_layer"])
def test_frozen_tensors_bitwise_unchanged(small_seqs, small_vocab, strategy):
    m = tiny_model(vocab_size=len(small_vocab))
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    train(m, _data(small_seqs), _data(small_seqs[12:], 6, 1),
          TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2, freeze_strategy=strategy))
    flags = freeze_flags(strategy, 2)
    changed = set()
    for group, params in m.param_groups().items():
        for p in params:
            name = next(n for n, q in m.named_parameters() if q is p)
            if not flags[group]:
                assert torch.equal(p.detach(), before[name]), name
            elif not torch.equal(p.detach(), before[name]):
                changed.add(group)
    assert "head" in changed


def test_prefix_cache_matches_plain_training(small_seqs, small_vocab):
    # all_but_final caches the frozen first block; result must equal an uncached run
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2, freeze_strategy="all_but_final")
    a = tiny_model(vocab_size=len(small_vocab))
    b = tiny_model(vocab_size=len(small_vocab))
    train(a, _data(small_seqs), None, cfg)
    b.set_trainable(freeze_flags("all_but_final", 2))
    opt = torch.optim.AdamW([p for p in b.parameters() if p.requires_grad], lr=1e-2, weight_decay=0.01)
    data = _data(small_seqs)
    gen = torch.Generator().manual_seed(0)
    from gaptext.model import collate
    best, best_state = math.inf, None
    for _ in range(2):
        for start in range(0, 12, 4):
            idx = torch.randperm(12, generator=gen).tolist() if start == 0 else idx
            chunk = idx[start:start + 4]
            loss = mse_loss(b(collate([data.seqs[i] for i in chunk])).predictions,
                            [data.targets[i] for i in chunk])
            opt.zero_grad()
            loss.backward()
            opt.step()
        mae = evaluate(b, data).mae
        if mae < best:
            best, best_state = mae, {k: v.clone() for k, v in b.state_dict().items()}
    b.load_state_dict(best_state)
    assert math.isclose(evaluate(a, data).mae, evaluate(b, data).mae, rel_tol=1e-4)


def test_training_diverged(small_seqs, small_vocab):
    m = tiny_model(vocab_size=len(small_vocab))
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train(m, Dataset(small_seqs[:4], [float("nan")] * 4), None, TrainConfig(epochs=1, batch_size=2))


def test_report_csv(small_seqs, small_vocab):
    m = tiny_model(vocab_size=len(small_vocab))
    _, rep = train(m, _data(small_seqs), _data(small_seqs[12:], 6, 1), TrainConfig(epochs=3, batch_size=6))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_mae" and len(lines) == 4
    assert "val: mae=" in rep.summary()
    assert rep.trainable_percent == 100.0


def test_freeze_all_worse_than_none():
    from gaptext.records import stratified_split, synth_generate
    from gaptext.textgen import to_structured_string
    from gaptext.tokenizer import build_vocab, encode

    rs = synth_generate(160, seed=21)
    texts = [to_structured_string(r).text for r in rs]
    sp = stratified_split(rs, seed=0)
    v = build_vocab([texts[i] for i in sp.train], 1000)
    data = Dataset([encode(v, t, 96) for t in texts], rs.band_gaps().tolist())
    res = {}
    for s in ("all", "none"):
        m = tiny_model(d_model=32, d_ff=64, vocab_size=len(v), max_len=96, init_std=0.1)
        _, rep = train(m, data.subset(sp.train), data.subset(sp.val),
                       TrainConfig(epochs=15, batch_size=16, learning_rate=3e-3, weight_decay=0.0, freeze_strategy=s))
        res[s] = rep.final["val"].mae
    assert res["all"] > res["none"]


@pytest.mark.parametrize("flavor", ["encoder", "decoder"])
def test_grad_check_halving_eps(small_seqs, small_vocab, flavor):
    m = tiny_model(flavor, vocab_size=len(small_vocab))
    seqs, y = small_seqs[:3], [1.0, 2.0, 0.5]
    e1, _ = grad_check(m, seqs, y, eps=1e-4, per_group=20)
    e2, _ = grad_check(m, seqs, y, eps=5e-5, per_group=20)
    assert e2 <= 4 * e1 + 1e-9


def test_grad_check_skips_frozen(small_seqs, small_vocab):
    m = tiny_model(vocab_size=len(small_vocab))
    apply_freeze(m, "all")
    _, per = grad_check(m, small_seqs[:2], [1.0, 2.0], per_group=10)
    assert set(per) == {"head"}
