import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaptext.records import (
    REQUIRED_FIELDS, RecordSet, SchemaError, Splits, ValidationError, filter_bandgap, filter_indices,
    gap_bins, load_records, save_records, split_sizes, stratified_split, synth_generate, synthetic_gap,
)
from gaptext.textgen import parse_structured_string

import si_strings


def _with_gaps(gaps):
    base = synth_generate(1, seed=0)[0]
    out = []
    for g in gaps:
        r = parse_structured_string(si_strings.CRO3TA, band_gap=float(g))
        out.append(r)
    assert base is not None
    return RecordSet(out)


def test_load_si_record(tmp_path):
    r = parse_structured_string(si_strings.CRO3TA, band_gap=1.25)
    p = tmp_path / "one.jsonl"
    save_records(RecordSet([r]), p)
    rs = load_records(p)
    assert len(rs) == 1
    assert rs[0].compound == "Cr1O3Ta1"
    assert rs[0].density == 7.274
    assert rs[0].spacegroup_relax == 221


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert len(load_records(p)) == 0


def test_validation_error_names_line(tmp_path):
    good = synth_generate(2, seed=1)
    bad = good[1].to_dict()
    bad["composition"] = [1, 3]
    bad["species"] = ["Cr", "O", "Ta"]
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(good[0].to_dict()) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ValidationError, match="line 2"):
        load_records(p)


def test_missing_field_is_schema_error(tmp_path):
    d = synth_generate(1, seed=2)[0].to_dict()
    del d["density"]
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(d) + "\n")
    with pytest.raises(SchemaError, match="line 1: missing required field 'density'"):
        load_records(p)


def test_unknown_field_is_schema_error(tmp_path):
    d = synth_generate(1, seed=2)[0].to_dict()
    d["extra"] = 1
    p = tmp_path / "u.jsonl"
    p.write_text(json.dumps(d) + "\n")
    with pytest.raises(SchemaError, match="unknown field 'extra'"):
        load_records(p)


def test_required_fields_are_the_23_features_plus_target():
    assert len(REQUIRED_FIELDS) == 24 and REQUIRED_FIELDS[-1] == "band_gap"


@pytest.mark.parametrize("gaps, lo, hi, kept", [
    ([0.0, 2.5, 5.0, 5.1], 0, 5, [0.0, 2.5, 5.0]),
    ([0.0, 1.0], 0, 0, [0.0]),
    ([], 0, 5, []),
])
def test_filter_bandgap_inclusive(gaps, lo, hi, kept):
    out = filter_bandgap(_with_gaps(gaps), lo, hi)
    assert [r.band_gap for r in out] == kept


@given(st.lists(st.floats(-1, 7, allow_nan=False), max_size=30), st.floats(0, 3), st.floats(0, 3))
def test_filter_idempotent(gaps, a, b):
    lo, hi = min(a, b), max(a, b)
    rs = _with_gaps(gaps)
    once = filter_bandgap(rs, lo, hi)
    assert [r.band_gap for r in filter_bandgap(once, lo, hi)] == [r.band_gap for r in once]
    assert [rs[i].band_gap for i in filter_indices(rs, lo, hi)] == [r.band_gap for r in once]


def test_filter_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        filter_bandgap(RecordSet([]), 2, 1)


def test_split_sizes_n1000():
    assert split_sizes(1000) == (720, 180, 100)


def test_split_deterministic_and_partition():
    rs = synth_generate(200, seed=3)
    a, b = stratified_split(rs, seed=9), stratified_split(rs, seed=9)
    assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
    assert sorted(a.train + a.val + a.test) == list(range(200))
    assert stratified_split(rs, seed=10).test != a.test


def test_split_respects_index_subset():
    rs = synth_generate(60, seed=4)
    keep = list(range(0, 60, 2))
    sp = stratified_split(rs, seed=0, indices=keep)
    assert sorted(sp.train + sp.val + sp.test) == keep


def test_split_too_small():
    with pytest.raises(ValueError):
        stratified_split(synth_generate(9, seed=0))


def test_splits_json_roundtrip():
    sp = Splits([3, 4], [1], [0, 2], 5, {"bins": 10})
    assert Splits.from_json(sp.to_json()) == sp


@settings(max_examples=60)
@given(st.integers(10, 400), st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_split_proportions_property(n, seed, bins):
    rng = np.random.default_rng(seed)
    rs = _with_gaps(np.round(rng.uniform(0, 5, n), 3))
    sp = stratified_split(rs, seed=seed, bins=bins)
    n_train, n_val, n_test = split_sizes(n)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (n_train, n_val, n_test)
    assert sorted(sp.train + sp.val + sp.test) == list(range(n))
    which = gap_bins(rs.band_gaps(), bins)
    for part, total in ((sp.test, n_test), (sp.val, n_val), (sp.train, n_train)):
        got = np.bincount(which[part], minlength=bins)
        quota = np.bincount(which, minlength=bins) * total / n
        assert np.all(np.abs(got - quota) <= 1.0 + 1e-9)


def test_synth_empty_and_deterministic(tmp_path):
    assert len(synth_generate(0, seed=1)) == 0
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_records(synth_generate(64, seed=7), a)
    save_records(synth_generate(64, seed=7), b)
    assert a.read_bytes() == b.read_bytes()


def test_synth_gaps_in_range_and_track_signal():
    rs = synth_generate(500, seed=8)
    g = rs.band_gaps()
    assert g.min() >= 0.0 and g.max() <= 5.0
    clean = np.array([synthetic_gap(r.valence_cell_iupac, r.density, r.spacegroup_relax, r.spin_cell) for r in rs])
    inside = (clean > 0.2) & (clean < 4.8)
    resid = g[inside] - clean[inside]
    assert abs(resid.mean()) < 0.02 and 0.03 < resid.std() < 0.07


def test_synth_records_validate():
    for r in synth_generate(100, seed=11, max_sites=8):
        r.validate()
