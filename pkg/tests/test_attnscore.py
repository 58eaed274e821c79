import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gaptext.attnscore import (
    SampleScores, average_over_samples, bar_chart_svg, feature_attention_report, feature_span_max, head_average,
    minmax_normalize, resolve_layers, score_sample, tables_to_csv,
)
from gaptext.model import ModelConfig, RegressorModel, collate
from gaptext.tokenizer import TokenSeq, token_spans

from conftest import tiny_model
from oracles import attribution

scores = st.dictionaries(st.sampled_from(list("abcdef")), st.floats(0, 1), min_size=1)


def test_head_average_examples():
    attn = [np.array([[[0.1, 0.9]], [[0.3, 0.7]]])]
    assert np.allclose(head_average(attn, 0, 0), [0.2, 0.8])
    one = [np.array([[[0.25, 0.75]]])]
    assert np.allclose(head_average(one, 0, 0), [0.25, 0.75])


def test_head_average_of_softmax_rows_sums_to_one():
    logits = torch.randn(1, 3, 5, 5)
    attn = [torch.softmax(logits, -1)[0].numpy()]
    assert abs(head_average(attn, 0, 2).sum() - 1) < 1e-6


def test_span_max_examples():
    s = [0.1, 0.4, 0.2, 0.3]
    raw, excluded = feature_span_max(s, {"f": (1, 3), "g": (2, 2), "h": (1, 3), "gone": None})
    assert raw == {"f": 0.4, "g": 0.2, "h": 0.4} and excluded == ["gone"]
    with pytest.raises(ValueError):
        feature_span_max(s, {})
    with pytest.raises(ValueError):
        feature_span_max(s, {"f": (2, 4)})


def test_minmax_examples():
    norm, deg = minmax_normalize({"a": 0.2, "b": 0.5, "c": 0.8})
    assert not deg and norm == pytest.approx({"a": 0.0, "b": 0.5, "c": 1.0})
    norm, deg = minmax_normalize({"a": 0.3, "b": 0.3})
    assert deg and norm == {"a": 0.0, "b": 0.0}


@given(scores, st.floats(0.1, 10), st.floats(-5, 5))
def test_minmax_affine_invariance(raw, scale, shift):
    a, da = minmax_normalize(raw)
    b, db = minmax_normalize({k: scale * v + shift for k, v in raw.items()})
    if not da and not db:
        assert all(math.isclose(a[k], b[k], abs_tol=1e-6) for k in raw)
        assert max(a.values()) == 1.0 and min(a.values()) == 0.0


def test_average_examples():
    one = SampleScores({"f": 0.3}, {"f": 0.7})
    assert average_over_samples([one]).values == {"f": 0.7}
    t = average_over_samples([SampleScores({}, {"f": 0.0}), SampleScores({}, {"f": 1.0})])
    assert t.values == {"f": 0.5}


@given(st.lists(scores, min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_average_permutation_invariant(tables, rnd):
    samples = [SampleScores(t, t) for t in tables]
    a = average_over_samples(samples).values
    rnd.shuffle(samples)
    b = average_over_samples(samples).values
    assert a.keys() == b.keys() and all(math.isclose(a[k], b[k], abs_tol=1e-12) for k in a)


def test_resolve_layers():
    assert resolve_layers(["first", "last", 2], 4) == [1, 4, 2]
    with pytest.raises(ValueError):
        resolve_layers([5], 4)


def _hand_model(s=3.0):
    # d=2, one block, one head; q is a constant (bias only), k is the identity,
    # so every query row puts logit s*ln(x)[0]/sqrt(2) on each key
    cfg = ModelConfig("encoder", d_model=2, n_layers=1, n_heads=1, d_ff=1, vocab_size=6, max_len=4)
    m = RegressorModel(cfg)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        for norm in (m.blocks[0].norm1, m.blocks[0].norm2, m.final_norm):
            norm.weight.fill_(1.0)
        m.tok_emb.weight[2] = torch.tensor([0.0, 1.0])  # BOS
        m.tok_emb.weight[3] = torch.tensor([1.0, 0.0])  # A
        m.tok_emb.weight[4] = torch.tensor([0.0, 1.0])  # B
        m.tok_emb.weight[5] = torch.tensor([1.0, 1.0])  # C
        m.blocks[0].q.bias.copy_(torch.tensor([s, 0.0]))
        m.blocks[0].k.weight.copy_(torch.eye(2))
    return m


def test_hand_built_model_trace():
    s = 3.0
    m = _hand_model(s)
    ts = TokenSeq([2, 3, 4, 5], [1] * 4, [(0, 0), (0, 1), (2, 3), (4, 5)])
    spans = [("f1", 0, 1), ("f2", 2, 3), ("f3", 2, 5)]
    (table,) = feature_attention_report(m, [ts], [spans], layers=["last"])
    z = 0.5 / math.sqrt(0.25 + 1e-5)  # layer norm of [1, 0] -> [z, -z]
    la = s * z / math.sqrt(2)
    logits = [-la, la, -la, 0.0]  # BOS, A, B, C
    e = [math.exp(x) for x in logits]
    w = [x / sum(e) for x in e]
    f3 = (w[3] - w[2]) / (w[1] - w[2])
    assert table.values == pytest.approx({"f1": 1.0, "f2": 0.0, "f3": f3}, abs=1e-6)
    assert 0 < f3 < 1


@pytest.mark.parametrize("flavor", ["encoder", "decoder"])
def test_report_matches_oracle_on_model(flavor, small_seqs, small_corpus, small_vocab):
    m = tiny_model(flavor, vocab_size=len(small_vocab))
    seqs, char_spans = small_seqs[:10], [a.spans for a in small_corpus[:10]]
    tables = feature_attention_report(m, seqs, char_spans, layers=["first", "last"])
    samples = []
    for ts, cs in zip(seqs, char_spans):
        out = m(collate([ts]))
        attn = [a[0].double().tolist() for a in out.attentions]
        samples.append((attn, int(out.pool_pos[0]), token_spans(ts, cs)))
    for t in tables:
        ref, _ = attribution(samples, t.layer)
        assert t.values.keys() == ref.keys()
        assert all(abs(t.values[k] - ref[k]) < 1e-9 for k in ref)


def test_identical_sequences_zero_variance(small_seqs, small_corpus, small_vocab):
    m = tiny_model(vocab_size=len(small_vocab))
    seqs, spans = [small_seqs[0]] * 4, [small_corpus[0].spans] * 4
    samples = []
    out = m(collate(seqs))
    for i in range(4):
        s = out.attentions[-1][i].detach().double().numpy()[:, 0, :].mean(0)
        samples.append(score_sample(s, token_spans(seqs[i], spans[i])))
    for k in samples[0].norm:
        assert np.var([x.norm[k] for x in samples]) == 0.0


def test_first_and_last_layers_differ_after_training(small_seqs, small_corpus, small_vocab, small_records):
    from gaptext.trainer import Dataset, TrainConfig, train
    m = tiny_model(vocab_size=len(small_vocab))
    train(m, Dataset(small_seqs, small_records.band_gaps().tolist()), None,
          TrainConfig(epochs=5, batch_size=8, learning_rate=3e-3))
    first, last = feature_attention_report(m, small_seqs, [a.spans for a in small_corpus])
    assert any(abs(first.values[k] - last.values[k]) > 1e-3 for k in first.values)


def test_truncated_sample_excluded(small_vocab):
    m = tiny_model(vocab_size=len(small_vocab))
    ts = TokenSeq([2, 5, 6], [1] * 3, [(0, 0), (0, 1), (2, 3)])
    gone = TokenSeq([2, 5], [1, 1], [(0, 0), (0, 1)], truncated=True)
    spans = [("a", 0, 1), ("b", 2, 3)]
    (t,) = feature_attention_report(m, [ts, gone], [spans, [("a", 10, 12)]], layers=["last"])
    assert t.n_excluded_samples == 1 and t.n_samples == 1


def test_decoder_first_token_warns(small_seqs, small_corpus, small_vocab, caplog):
    m = tiny_model("decoder", vocab_size=len(small_vocab), pooling="first_token")
    with caplog.at_level(logging.WARNING):
        (t,) = feature_attention_report(m, small_seqs[:3], [a.spans for a in small_corpus[:3]], layers=["last"])
    assert "degenerate" in caplog.text
    assert t.n_degenerate == 3  # BOS only attends to itself


def test_csv_and_svg(tmp_path):
    t = average_over_samples([SampleScores({}, {"a": 1.0, "b": 0.0})], layer=2)
    text = tables_to_csv([t], ["b", "a"])
    assert text.splitlines() == ["layer,feature,avg_attention,n_samples,n_degenerate",
                                 "2,b,0.0000000000,1,0", "2,a,1.0000000000,1,0"]
    p = tmp_path / "bar.svg"
    bar_chart_svg(t, p)
    assert p.read_text().lstrip().startswith("<?xml")
