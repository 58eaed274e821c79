import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaptext.tokenizer import (
    BOS_ID, PAD_ID, UNK_ID, Vocab, build_vocab, char_span_to_token_span, decode, encode, normalize,
    pretokenize, token_spans,
)


def test_specials_first():
    v = build_vocab(["a b"], 10)
    assert v.tokens[:3] == ("<pad>", "<unk>", "<bos>")
    assert (PAD_ID, UNK_ID, BOS_ID) == (0, 1, 2)


def test_frequency_order():
    v = build_vocab(["a b", "a"], 5)
    assert "a" in v and "b" in v
    assert v.id("a") < v.id("b")


def test_max_size_truncates_rare_pieces():
    v = build_vocab(["a a a b b c"], 5)
    assert len(v) == 5 and "c" not in v


def test_pieces_of_density():
    assert [p for p, _, _ in pretokenize("density: 7.274")] == ["density", ":", "7", ".", "2", "7", "4"]


def test_deterministic_vocab():
    corpus = ["x: 1, y: 22", "z_w: [3]"]
    assert build_vocab(corpus, 50) == build_vocab(corpus, 50)


def test_empty_text():
    ts = encode(build_vocab(["a"], 5), "")
    assert ts.ids == [BOS_ID] and ts.mask == [1] and not ts.truncated


def test_truncation_at_512():
    text = " ".join(["a"] * 600)
    ts = encode(build_vocab([text], 5), text, 512)
    assert len(ts.ids) == 512 and ts.truncated


def test_decode_examples():
    v = build_vocab(["compound: A1B1"], 20)
    assert decode(v, encode(v, "compound: A1B1")) == "compound : A 1 B 1"
    assert decode(v, encode(v, "")) == ""
    assert decode(v, encode(v, "compound Q")) == "compound <unk>"


def test_decode_rejects_bad_id():
    v = build_vocab(["a"], 5)
    ts = encode(v, "a")
    ts.ids[1] = 99
    with pytest.raises(ValueError):
        decode(v, ts)


text_st = st.text(alphabet=st.sampled_from(list("abcXYZ_019:.,[]' -#*")), max_size=80)


@given(text_st)
def test_decode_roundtrip_property(text):
    v = build_vocab([text or "a"], 10_000)
    ts = encode(v, text, 10_000)
    assert decode(v, ts) == normalize(text)


@given(text_st)
def test_offsets_cover_non_whitespace(text):
    v = build_vocab([text or "a"], 100)
    ts = encode(v, text, 10_000)
    covered = set()
    prev_end = 0
    for s, e in ts.offsets[1:]:
        assert s >= prev_end and e > s
        covered.update(range(s, e))
        prev_end = e
    assert covered == {i for i, c in enumerate(text) if not c.isspace()}
    assert all(0 <= i < len(v) for i in ts.ids)


@given(text_st, st.integers(0, 80), st.integers(2, 40))
def test_prefix_monotone(text, k, max_len):
    v = build_vocab([text or "a"], 100)
    full = encode(v, text, 10_000)
    k = min(k, len(full) - 1)
    cut = full.offsets[k][1] if k else 0
    assert encode(v, text[:cut], 10_000).ids == full.ids[:k + 1]
    assert encode(v, text, max_len).ids == full.ids[:max_len]


def _hand_seq():
    v = build_vocab(["aa b cc d ee f gg"], 30)
    return encode(v, "aa b cc d ee f gg")  # tokens 1..7 at offsets below


def test_span_exact_token():
    ts = _hand_seq()
    s, e = ts.offsets[3]
    assert char_span_to_token_span(ts, s, e) == (3, 3)


def test_span_straddling():
    ts = _hand_seq()
    assert char_span_to_token_span(ts, ts.offsets[4][1] - 1, ts.offsets[7][0] + 1) == (4, 7)


def test_span_beyond_truncation():
    v = build_vocab(["a b c d e f"], 30)
    ts = encode(v, "a b c d e f", 3)
    assert ts.truncated
    assert char_span_to_token_span(ts, 8, 11) is None


def test_token_spans_clip_partial():
    v = build_vocab(["k: 1 2 3 4"], 30)
    ts = encode(v, "k: 1 2 3 4", 5)  # keeps BOS k : 1 2
    spans = token_spans(ts, [("k", 0, 10), ("tail", 7, 10)])
    assert spans == {"k": (1, 4), "tail": None}


def test_vocab_save_load(tmp_path):
    v = build_vocab(["x y z x"], 10)
    p = tmp_path / "v.txt"
    v.save(p)
    assert p.read_text().splitlines()[3] == "x\t3"
    assert Vocab.load(p) == v
