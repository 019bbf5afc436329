import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crepe import token_schema as ts
from crepe.token_schema import Branch, Leaf, Vocabulary
from helpers import depth, leaf_count, random_tree, trees

V = Vocabulary.load()
FIELDS = list(V.fields)


def toks(vocab, ids):
    return [vocab.token_of(i) for i in ids]


def hot_coffee():
    return Branch(ts.ROOT, [Branch("menu", [Leaf(["hot", "coffee"])])])


# vocabulary ---------------------------------------------------------------

def test_pad_is_zero_and_ids_are_a_bijection():
    assert V.id_of("<pad>") == 0
    for i, tok in enumerate(V.tokens):
        assert V.id_of(tok) == i
        assert V.token_of(i) == tok
    assert len(set(V.tokens)) == len(V.tokens)


def test_character_tokens_never_shadow_specials():
    assert all(len(t) > 1 for t in V.special_tokens)
    assert all(len(t) == 1 for t in V.char_tokens)


def test_charset_contents():
    assert set("abcdefghijklmnopqrstuvwxyz0123456789 .,:;-/()%$#&*") == set(V.char_tokens)


def test_uppercase_folds_to_lowercase():
    assert V.encode_text("HoT") == V.encode_text("hot")


def test_unknown_token_and_id_raise():
    with pytest.raises(ts.SchemaError):
        V.id_of("<field:nope>")
    with pytest.raises(ts.SchemaError):
        V.token_of(len(V))


def test_trigger_sets_are_non_empty_special_subsets():
    assert V.triggers["ocr"] == {"</ocr>"}
    assert V.triggers["layout"] == {"</layout>"}
    assert V.triggers["scene"] == {"</obj>", "</ocr>"}
    for toks_ in V.triggers.values():
        assert toks_ and toks_ <= set(V.special_tokens)


def test_schema_file_round_trip(tmp_path):
    p = tmp_path / "schema.json"
    p.write_text(json.dumps(V.to_schema()))
    assert Vocabulary.load(p) == V


def test_bad_trigger_set_rejected():
    schema = V.to_schema()
    schema["triggers"]["ocr"] = ["<nope>"]
    with pytest.raises(ts.SchemaError):
        Vocabulary.from_schema(schema)


# serialize_tree -------------------------------------------------------------

def test_hot_coffee_serialization():
    seq = ts.serialize_tree(hot_coffee(), V)
    assert toks(V, seq) == ["<field:menu>", "<ocr>", "h", "o", "t", "</ocr>",
                            "<ocr>", "c", "o", "f", "f", "e", "e", "</ocr>", "</field:menu>"]


def test_empty_leaf_serialization():
    seq = ts.serialize_tree(Branch(ts.ROOT, [Branch("total", [Leaf()])]), V)
    assert toks(V, seq) == ["<field:total>", "</field:total>"]
    assert ts.deserialize_sequence(seq, V).tree == Branch(ts.ROOT, [Branch("total", [Leaf()])])


def test_unknown_field_is_schema_error():
    with pytest.raises(ts.SchemaError):
        ts.serialize_tree(Branch(ts.ROOT, [Branch("nope", [Leaf(["a"])])]), V)


def test_out_of_charset_is_charset_error():
    with pytest.raises(ts.CharsetError):
        ts.serialize_tree(Branch(ts.ROOT, [Leaf(["café"])]), V)


def test_one_trigger_per_segment():
    seq = ts.serialize_tree(hot_coffee(), V)
    assert sum(t in V.trigger_ids("parse") for t in seq) == 2


def test_hot_coffee_round_trip_positions():
    seq = ts.serialize_tree(hot_coffee(), V)
    dec = ts.deserialize_sequence(seq, V)
    assert dec.tree == hot_coffee()
    assert dec.trigger_positions == [5, 13]
    assert dec.diagnostics == []
    assert [(s.text, s.path) for s in dec.spans] == [("hot", "menu"), ("coffee", "menu")]


@settings(max_examples=300, deadline=None)
@given(trees(FIELDS))
def test_round_trip_property(tree):
    seq = ts.serialize_tree(tree, V)
    dec = ts.deserialize_sequence(seq, V)
    assert dec.tree == tree
    assert dec.diagnostics == []
    assert len(dec.trigger_positions) == leaf_count(tree)


def test_seeded_random_trees_respect_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t = random_tree(rng, FIELDS)
        assert depth(t) <= 3 and leaf_count(t) <= 12
        ts.validate_tree(t, V)


# deserialization recovery ----------------------------------------------------

def test_empty_sequence():
    dec = ts.deserialize_sequence([], V)
    assert dec.tree == Branch(ts.ROOT, [])
    assert dec.trigger_positions == [] and dec.diagnostics == []


def test_stray_close_ocr_is_dropped_with_diagnostic():
    seq = ts.serialize_tree(hot_coffee(), V)
    bad = seq[:6] + [V.id_of("</ocr>")] + seq[6:]
    dec = ts.deserialize_sequence(bad, V)
    assert dec.tree == hot_coffee()
    assert dec.diagnostics


def test_unmatched_open_field_is_closed_at_scope_end():
    seq = [V.field_open("menu"), V.id_of("<ocr>"), *V.encode_text("tea"), V.id_of("</ocr>")]
    dec = ts.deserialize_sequence(seq, V)
    assert dec.tree == Branch(ts.ROOT, [Branch("menu", [Leaf(["tea"])])])
    assert dec.diagnostics


def test_unmatched_close_field_is_dropped():
    seq = ts.serialize_tree(hot_coffee(), V) + [V.field_close("total")]
    dec = ts.deserialize_sequence(seq, V)
    assert dec.tree == hot_coffee()
    assert dec.diagnostics


def test_close_of_outer_field_closes_inner_first():
    seq = [V.field_open("item"), V.field_open("name"), V.id_of("<ocr>"), *V.encode_text("x"),
           V.id_of("</ocr>"), V.field_close("item")]
    dec = ts.deserialize_sequence(seq, V)
    assert dec.tree == Branch(ts.ROOT, [Branch("item", [Branch("name", [Leaf(["x"])])])])
    assert dec.diagnostics


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, len(V) + 3), max_size=60), st.sampled_from(ts.TASKS))
def test_deserialization_is_total(ids, task):
    dec = ts.decode_task(ids, V, task)
    assert isinstance(dec.diagnostics, list)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, len(V) - 1), max_size=60))
def test_trigger_positions_list_every_trigger(ids):
    dec = ts.deserialize_sequence(ids, V)
    trig = V.trigger_ids("parse")
    eos = ids.index(V.eos_id) if V.eos_id in ids else len(ids)
    assert dec.trigger_positions == [i for i, t in enumerate(ids[:eos]) if t in trig]


# layout, scene, class --------------------------------------------------------

def test_layout_example():
    seq = ts.serialize_layout([("title", (0.1, 0.1, 0.9, 0.2)), ("text", (0.1, 0.3, 0.9, 0.8))], V)
    assert toks(V, seq) == ["<layout>", "<cat:title>", "</layout>", "<layout>", "<cat:text>", "</layout>"]
    assert ts.serialize_layout([], V) == []


def test_layout_order_is_reading_order():
    rng = random.Random(3)
    elems = [("text", (rng.random(), rng.random(), 1, 1)) for _ in range(6)] + [("title", (0.2, 0.0, 1, 1))]
    expected = ts.serialize_layout(sorted(elems, key=lambda e: (e[1][1], e[1][0])), V)
    for _ in range(5):
        rng.shuffle(elems)
        assert ts.serialize_layout(elems, V) == expected


def test_layout_unknown_category():
    with pytest.raises(ts.SchemaError):
        ts.serialize_layout([("nope", (0, 0, 1, 1))], V)


def test_scene_example_with_bus_category():
    schema = V.to_schema()
    schema["categories"] = schema["categories"] + ["bus"]
    vb = Vocabulary.from_schema(schema)
    seq = ts.serialize_scene([("bus", (0, 0, 1, 1))], [("201", None), ("Hyakumanben", None)], vb)
    assert vb.render(seq) == "<obj> <cat:bus> </obj> <ocr> 201 </ocr> <ocr> hyakumanben </ocr>"
    dec = ts.decode_task(seq, vb, "scene")
    assert len(dec.trigger_positions) == 3
    assert dec.elements == [("bus", 2)]


def test_scene_trigger_count():
    seq = ts.serialize_scene([("circle", (0, 0, 1, 1)), ("square", (0, 0, 1, 1))], [("go", None)], V)
    assert sum(t in V.trigger_ids("scene") for t in seq) == 3
    assert ts.serialize_scene([], [], V) == []


def test_class_round_trip_and_unknown_label():
    seq = ts.serialize_class("letter", V)
    assert toks(V, seq) == ["<cat:letter>"]
    assert ts.decode_task(seq, V, "class").label == "letter"
    with pytest.raises(ts.SchemaError):
        ts.serialize_class("memo", V)


# instances -------------------------------------------------------------------

def test_wrap_examples():
    s1 = ts.serialize_tree(hot_coffee(), V)
    s2 = ts.serialize_tree(Branch(ts.ROOT, [Branch("total", [Leaf(["5"])])]), V)
    o, c = V.id_of("<instance>"), V.id_of("</instance>")
    assert ts.wrap_instances([s1, s2], V) == [o, *s1, c, o, *s2, c]
    assert ts.wrap_instances([s1], V) == [o, *s1, c]


@settings(max_examples=100, deadline=None)
@given(st.lists(trees(FIELDS), min_size=1, max_size=4))
def test_wrap_unwrap_identity(tree_list):
    seqs = [ts.serialize_tree(t, V) for t in tree_list]
    parts, offsets, diags = ts.unwrap_instances(ts.wrap_instances(seqs, V), V)
    assert parts == seqs and diags == []
    dec = ts.decode_task(ts.wrap_instances(seqs, V), V, "multi")
    assert dec.instances == tree_list


def test_tree_json_round_trip():
    t = hot_coffee()
    assert ts.tree_from_json(json.loads(json.dumps(ts.tree_to_json(t)))) == t
