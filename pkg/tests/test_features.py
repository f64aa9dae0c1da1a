import json

import pytest
from hypothesis import given, strategies as st

from deserfilter.features import FEATURE_NAMES, WIDTH, FeatureVector, StateCatalog, build_catalog, encode

bits = st.tuples(*[st.booleans()] * WIDTH)
vectors = bits.map(FeatureVector)


def v(s):
    return FeatureVector.parse(s)


def test_width_and_names():
    assert WIDTH == 8
    assert FEATURE_NAMES[0] == "uses_reflection" and FEATURE_NAMES[-1] == "calls_compare"


def test_of_sets_named_bits():
    fv = FeatureVector.of(implements_map=True, overrides_hash_code=True)
    assert str(fv) == "00101000"
    assert fv["implements_map"] and not fv["uses_reflection"]


@pytest.mark.parametrize("bad", ["", "0101", "000000002", "0000000000", "abcdefgh"])
def test_parse_rejects_malformed(bad):
    with pytest.raises(ValueError):
        FeatureVector.parse(bad)


def test_wrong_width_rejected():
    with pytest.raises(ValueError):
        FeatureVector((True,) * 7)
    with pytest.raises(ValueError):
        FeatureVector.of(nonsense=True)


def test_empty_catalog_has_only_other():
    cat = build_catalog([])
    assert cat.size == 1 and cat.other_index == 0
    assert cat.encode(v("10000000")) == 0


def test_dedup_preserves_first_occurrence():
    v1, v2 = v("10000000"), v("00001000")
    cat = build_catalog([v1, v2, v1])
    assert cat.states == (v1, v2)
    assert cat.other_index == 2 and cat.size == 3


def test_encode_examples():
    vs = [v("00000000"), v("00000001"), v("00000010"), v("00000100")]
    cat = build_catalog(vs)
    assert encode(cat, vs[3]) == 3
    assert encode(cat, v("11111111")) == cat.other_index
    assert encode(cat, v("11111110")) == encode(cat, v("11111111"))


def test_full_catalog_bounded():
    all_vs = [FeatureVector.parse(format(i, "08b")) for i in range(256)]
    cat = build_catalog(all_vs + all_vs[:10])
    assert cat.size == 257
    assert cat.encode(all_vs[200]) == 200


def test_duplicate_states_rejected():
    with pytest.raises(ValueError):
        StateCatalog([v("00000000"), v("00000000")])


def test_catalog_file_format(tmp_path):
    cat = build_catalog([v("01000110"), v("00000000")])
    p = tmp_path / "cat.json"
    cat.dump(p)
    assert json.loads(p.read_text()) == {"width": 8, "states": ["01000110", "00000000"]}
    assert StateCatalog.load(p) == cat


def test_catalog_rejects_other_width():
    with pytest.raises(ValueError):
        StateCatalog.from_dict({"width": 9, "states": []})


@given(vectors)
def test_string_round_trip(fv):
    assert FeatureVector.parse(str(fv)) == fv
    assert len(str(fv)) == WIDTH


@given(st.lists(vectors), vectors)
def test_encode_total_and_in_range(train, probe):
    cat = build_catalog(train)
    i = cat.encode(probe)
    assert 0 <= i < cat.size <= 257
    assert (i == cat.other_index) == (probe not in train)


@given(st.lists(vectors))
def test_build_catalog_idempotent(train):
    cat = build_catalog(train)
    assert build_catalog(cat.states) == cat
    assert len(set(cat.states)) == len(cat.states)
