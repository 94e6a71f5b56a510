import random

import pytest
from nltk.stem.porter import PorterStemmer
from nltk.translate import bleu_score as nltk_bleu
from nltk.translate.meteor_score import meteor_score as nltk_meteor

import oracles
from sgnlg.metrics import (InstanceResult, aggregate_report, corpus_bleu, distinct_n, mean_meteor, meteor,
                           meteor_single, normalize_template, novelty, sentence_bleu, ser, slot_match_rate,
                           vocab_n, EvalReport)
from sgnlg.schema import MRTriple as T
from sgnlg.text import tokenize


class NoSynonyms:
    @staticmethod
    def synsets(word):
        return []


def nltk_meteor_tokens(hyp, refs):
    return nltk_meteor([tokenize(r) for r in refs], tokenize(hyp), stemmer=PorterStemmer(), wordnet=NoSynonyms())


def inform(*slots):
    return [T("INFORM", s.split("$")[1].rsplit("_", 1)[0], s) for s in slots]


FIVE = [
    ("the $restaurant_name_1 serves $cuisine_1 food .",
     ["$restaurant_name_1 serves $cuisine_1 food .", "the $restaurant_name_1 has $cuisine_1 food ."]),
    ("what time would you like ?", ["what time would you like the reservation for ?"]),
    ("your table is booked for $date_1 at $time_1 .", ["your table is reserved for $date_1 at $time_1 ."]),
    ("i found $count_1 hotels in $city_1", ["there are $count_1 hotels in $city_1 .", "i found $count_1 hotels ."]),
    ("goodbye and have a good day", ["have a nice day .", "goodbye ."]),
]


def test_ser_reference_examples():
    mr = [T("OFFER", "price_per_night", "$price-per-night1")]
    assert ser("It costs $price-per-night1 a night.", mr).ser == 0
    movies = [T("INFORM_COUNT", "count", "$count1")] + [T("OFFER", "movie_name", f"$movie-name{i}") for i in (1, 2, 3)]
    b = ser("I found $count1 movies, like $movie-name2.", movies)
    assert (b.deletions, b.repetitions, b.hallucinations, b.ser) == (2, 0, 0, 0.5)


def test_ser_mixed_errors():
    b = ser("on $date_1 or $date_1 in $city_9", inform("$date_1"))
    assert (b.deletions, b.repetitions, b.hallucinations) == (0, 1, 1)
    assert b.ser == 2.0


def test_ser_skips_instances_without_explicit_slots():
    b = ser("goodbye", [T("GOODBYE")])
    assert b.total_explicit_slots == 0 and b.ser is None
    implicit = ser("any price range?", [T("REQUEST", "price_range")])
    assert implicit.ser is None


def test_slot_match_rate():
    mrs = [inform("$city_1"), inform("$city_1", "$date_1")]
    assert slot_match_rate(["in $city_1", "$date_1 in $city_1"], mrs) == 1.0
    assert slot_match_rate(["in $city_1", "in $city_1"], mrs) == 0.5
    assert slot_match_rate(["$city_1 $city_1", "$date_1 in $city_1"], mrs) == 0.5


@pytest.mark.parametrize("seed", range(40))
def test_ser_matches_brute_force(seed):
    rng = random.Random(seed)
    pool = ["$city_1", "$city_2", "$date_1", "$time_1", "$count_1"]
    expected = rng.sample(pool, rng.randint(1, 4))
    out = [rng.choice(pool + ["the", "in", "at"]) for _ in range(rng.randint(0, 8))]
    b = ser(" ".join(out), inform(*expected))
    assert (b.deletions, b.repetitions, b.hallucinations) == oracles.ser_counts(out, expected)


def test_bleu_identity_and_disjoint():
    outs = [o for o, _ in FIVE]
    assert corpus_bleu(outs, [[o] for o in outs]) == pytest.approx(1.0)
    assert corpus_bleu(["x y z w"], [["a b c d"]]) == 0.0
    assert corpus_bleu(["goodbye", "see you soon then"], [["goodbye"], ["see you soon then"]]) == 1.0


def test_bleu_matches_nltk_on_five_instance_fixture():
    outs, refs = zip(*FIVE)
    want = nltk_bleu.corpus_bleu([[tokenize(r) for r in rs] for rs in refs], [tokenize(o) for o in outs])
    assert corpus_bleu(outs, refs) == pytest.approx(want, abs=1e-4)


@pytest.mark.parametrize("seed", range(30))
def test_bleu_matches_nltk_on_random_corpora(seed):
    rng = random.Random(seed)
    words = "a b c d e f $x_1".split()
    outs = [" ".join(rng.choices(words, k=rng.randint(3, 12))) for _ in range(6)]
    refs = [[" ".join(rng.choices(words, k=rng.randint(3, 12))) for _ in range(rng.randint(1, 3))] for _ in outs]
    want = nltk_bleu.corpus_bleu([[tokenize(r) for r in rs] for rs in refs], [tokenize(o) for o in outs])
    assert corpus_bleu(outs, refs) == pytest.approx(want, abs=1e-4)


@pytest.mark.parametrize("out,refs", FIVE)
def test_sentence_bleu_matches_nltk_smoothing(out, refs):
    want = nltk_bleu.sentence_bleu([tokenize(r) for r in refs], tokenize(out),
                                   smoothing_function=nltk_bleu.SmoothingFunction().method2)
    assert sentence_bleu(out, refs) == pytest.approx(want, abs=1e-4)


@pytest.mark.parametrize("out,refs", FIVE)
def test_meteor_matches_nltk(out, refs):
    assert meteor(out, refs) == pytest.approx(nltk_meteor_tokens(out, refs), abs=1e-4)


def test_meteor_properties():
    assert meteor_single("a b c", "a b c") == pytest.approx(1 - 0.5 / 27)
    assert meteor_single("", "a b") == 0.0
    # stem module matches inflections
    assert meteor_single("booking rooms", "booked room", stem=True) > meteor_single("booking rooms", "booked room", stem=False)
    outs, refs = zip(*FIVE)
    assert mean_meteor(outs, refs) == pytest.approx(sum(nltk_meteor_tokens(o, r) for o, r in FIVE) / 5, abs=1e-4)


def test_diversity_definitions():
    assert distinct_n(["a a b"], 1) == pytest.approx(2 / 3)
    assert vocab_n(["a a b", "b c"], 1) == 3
    assert vocab_n(["a a b", "b c"], 2) == 3
    assert novelty(["x y", "x y"], ["x y"]) == 0.0
    assert novelty(["table reserved for $date_1"], ["table reserved for $date_2"]) == 0.0
    assert novelty(["table reserved for $date_1"], ["table reserved for $date_2"], normalize=False) == 1.0
    assert normalize_template("On $date3 or $date_1") == "on $date or $date"


def _res(output, refs, service, split="seen", mr=None):
    return InstanceResult(output, refs, mr or inform("$city_1"), service, split)


def test_weighted_split_ser():
    results = [_res("in $city_1", ["in $city_1"] * 3, "A"),
               _res("in $city_1", ["in $city_1"] * 3, "A"),
               _res("nothing", ["in $city_1"] * 2, "B", mr=inform("$city_1", "$date_1", "$time_1", "$count_1", "$x_1")),
               ]
    # hand-made: service A holds 6 of 8 refs with SER 0; service B holds 2 of 8 with SER 1.0 -> 0.25
    rep = aggregate_report(results)
    assert rep.splits["seen"]["ser"] == pytest.approx(0.25)
    rows = {r.service: r for r in rep.services}
    assert rows["A"].ref_share == 0.75 and rows["B"].ref_share == 0.25


def test_weighted_split_ser_hand_example():
    a = [_res("in $city_1", ["r"] * 3, "A")]
    # SER 0.4: two of five expected slots missing
    b = [_res("$city_1 $date_1 $time_1", ["r"], "B", mr=inform("$city_1", "$date_1", "$time_1", "$count_1", "$x_1"))]
    rep = aggregate_report(a + b)
    assert {r.service: r.ser for r in rep.services} == {"A": 0.0, "B": pytest.approx(0.4)}
    assert rep.splits["seen"]["ser"] == pytest.approx(0.1)


def test_single_service_aggregate_equals_row():
    results = [_res("in $city_1", ["in $city_1 ."], "Alarm_1", "fully_unseen"),
               _res("at $city_1 now", ["now in $city_1"], "Alarm_1", "fully_unseen")]
    rep = aggregate_report(results)
    row = rep.services[0]
    agg = rep.splits["fully_unseen"]
    assert len(rep.services) == 1
    assert (agg["bleu"], agg["ser"], agg["meteor"]) == (row.bleu, row.ser, row.meteor)
    assert agg["ref_share"] == 1.0


def test_identity_outputs_report():
    refs = [o for o, _ in FIVE]
    mrs = [inform(*[t for t in tokenize(o) if t.startswith("$")]) for o in refs]
    results = [InstanceResult(o, [o], m, "S") for o, m in zip(refs, mrs)]
    rep = aggregate_report(results, train_references=refs)
    assert rep.bleu == pytest.approx(1.0)
    assert rep.ser == 0.0 and rep.slot_match == 1.0
    assert rep.novelty == 0.0
    assert rep.ser_skipped == 2
    short = aggregate_report([InstanceResult("bye", ["bye"], [T("GOODBYE")], "S")])
    assert short.bleu == 1.0
    assert EvalReport.from_dict(rep.to_dict()) == rep
    assert rep.to_csv().splitlines()[0].startswith("scope,name")
    assert "| BLEU |" in rep.to_markdown()
