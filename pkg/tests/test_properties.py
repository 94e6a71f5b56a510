import re

from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sgnlg.metrics import distinct_n, novelty, ser, slot_match, vocab_n
from sgnlg.preprocess import delexicalize, lexicalize
from sgnlg.schema import MRTriple, SchemaInstance, SGNLGRecord, SlotDescription, parse_record, render_record

words = st.text(alphabet="abcdefgh ,.?", min_size=1, max_size=8)
slot_names = st.sampled_from(["city", "date", "time", "cuisine", "count"])
placeholder = st.builds(lambda s, k: f"${s}_{k}", slot_names, st.integers(1, 3))


@st.composite
def records(draw):
    mr = draw(st.lists(st.builds(MRTriple, st.sampled_from(["INFORM", "REQUEST", "OFFER"]), slot_names, placeholder),
                       min_size=1, max_size=4))
    descs = tuple(SlotDescription(t.slot, draw(words), draw(st.booleans())) for t in mr)
    schema = SchemaInstance(tuple(mr), descs, service="Restaurants_1", service_description=draw(words),
                            intent="FindRestaurants", intent_description=draw(words), nl_mr=draw(words))
    texts = draw(st.lists(st.builds(lambda w, p: f"{w} {p}", words, placeholder), min_size=1, max_size=3))
    return SGNLGRecord(schema, texts)


@settings(max_examples=100, deadline=None)
@given(records())
def test_record_round_trip(rec):
    assert parse_record(render_record(rec)) == rec


@st.composite
def utterance_with_spans(draw):
    pieces = draw(st.lists(st.tuples(st.text(alphabet="abc xyz.,", max_size=6),
                                     st.one_of(st.none(), st.tuples(slot_names, st.text("MNOPQ RS", min_size=1, max_size=6)))),
                           max_size=6))
    text, spans = "", []
    for filler, slot in pieces:
        text += filler
        if slot:
            name, value = slot
            spans.append((name, len(text), len(text) + len(value)))
            text += value
            text += " "
    return text, spans


@settings(max_examples=200, deadline=None)
@given(utterance_with_spans())
def test_delexicalization_is_lossless(case):
    text, spans = case
    tpl, assignment = delexicalize(text, spans)
    assert lexicalize(tpl, assignment) == text
    # indices count per slot type from 1 in reading order
    for name in {s for s, _, _ in spans}:
        found = re.findall(rf"\${name}_(\d+)", tpl.text)
        assert [int(k) for k in found] == list(range(1, len(found) + 1))


tokens = st.lists(st.one_of(placeholder, st.sampled_from(["the", "in", "at", "."])), max_size=10)


def mr_of(expected):
    return [MRTriple("INFORM", p[1:].rsplit("_", 1)[0], p) for p in expected]


@settings(max_examples=300, deadline=None)
@given(tokens, st.lists(placeholder, min_size=1, max_size=4))
def test_ser_matches_oracle_and_invariants(out, expected):
    b = ser(" ".join(out), mr_of(expected))
    assert (b.deletions, b.repetitions, b.hallucinations) == oracles.ser_counts(out, expected)
    assert b.ser >= 0
    # editing non-placeholder words leaves SER unchanged
    edited = [t if t.startswith("$") else "zz" for t in out] + ["extra", "words"]
    assert ser(" ".join(edited), mr_of(expected)) == b
    if slot_match(" ".join(out), mr_of(expected)):
        assert b.errors == 0
    # a perfect output scores zero
    assert ser(" ".join(expected), mr_of(expected)).ser == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(tokens, min_size=1, max_size=5), st.lists(tokens, max_size=5),
       st.dictionaries(placeholder, placeholder, max_size=4))
def test_novelty_invariant_to_placeholder_reindexing(outs, train, remap):
    def reindex(ts):
        return " ".join(t if not t.startswith("$") else f"{t.rsplit('_', 1)[0]}_{int(t.rsplit('_', 1)[1]) + 3}"
                        for t in ts)
    a = [" ".join(o) for o in outs]
    b = [reindex(o) for o in outs]
    t = [" ".join(x) for x in train]
    assert novelty(a, t) == novelty(b, t)


@settings(max_examples=100, deadline=None)
@given(st.lists(tokens, min_size=1, max_size=6))
def test_vocab_monotone_and_distinct_bounded(outs):
    texts = [" ".join(o) for o in outs]
    for n in (1, 2):
        sizes = [vocab_n(texts[:i], n) for i in range(len(texts) + 1)]
        assert sizes == sorted(sizes)
        d = distinct_n(texts, n)
        assert 0 <= d <= 1
        if any(len(o) >= n for o in outs):
            assert d > 0
