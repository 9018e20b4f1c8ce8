import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from answercritic.metrics import (
    FILTERED,
    UNFILTERED,
    EvalPair,
    MetricError,
    accuracy,
    bleu,
    build_report,
    cider,
    corpus_rouge_l,
    rouge_l,
)

tokens = st.lists(st.sampled_from("a b c d".split()), min_size=1, max_size=6)


class TestBleu:
    def test_identity(self):
        assert bleu([("a", "b", "c", "d")], [[("a", "b", "c", "d")]], n=4) == 1.0

    def test_disjoint_unigrams(self):
        assert bleu([("x", "y")], [[("a", "b")]], n=1) == 0.0

    def test_worked_bigram_example(self):
        # p1 = 3/4, p2 = 1/3, brevity 1 -> sqrt(1/4) = 0.5
        value = bleu([("a", "b", "x", "d")], [[("a", "b", "c", "d")]], n=2)
        assert math.isclose(value, 0.5, rel_tol=1e-12)

    def test_smoothing_floor_for_zero_match_order(self):
        # no bigram matches: p2 floor = 1/(2*3); p1 = 2/4
        value = bleu([("a", "x", "b", "y")], [[("a", "b")]], n=2)
        p1 = 2 / 4
        p2 = 1 / 6
        brevity = 1.0  # candidate longer than reference
        assert math.isclose(value, brevity * math.sqrt(p1 * p2), rel_tol=1e-12)
        assert bleu([("a", "x", "b", "y")], [[("a", "b")]], n=2, smooth=False) == 0.0

    def test_brevity_penalty(self):
        # candidate shorter than reference: BP = exp(1 - r/c)
        value = bleu([("a", "b")], [[("a", "b", "c", "d")]], n=1)
        assert math.isclose(value, math.exp(1 - 4 / 2) * 1.0, rel_tol=1e-12)

    def test_clipping(self):
        # "a a a" vs "a": clipped matches 1 of 3
        value = bleu([("a", "a", "a")], [[("a",)]], n=1)
        assert math.isclose(value, 1 / 3, rel_tol=1e-12)

    def test_corpus_pooling(self):
        # counts pool over the corpus before the geometric mean
        cands = [("a", "b"), ("c", "d")]
        refs = [[("a", "b")], [("x", "y")]]
        value = bleu(cands, refs, n=1)
        assert math.isclose(value, 2 / 4, rel_tol=1e-12)

    def test_empty_candidate_set_rejected(self):
        with pytest.raises(MetricError, match="at least one"):
            bleu([], [], n=1)

    def test_bad_order_rejected(self):
        with pytest.raises(MetricError, match="1..4"):
            bleu([("a",)], [[("a",)]], n=5)


class TestRougeL:
    def test_identity(self):
        assert rouge_l(("a", "b", "c"), ("a", "b", "c")) == 1.0

    def test_disjoint(self):
        assert rouge_l(("a", "b"), ("x", "y")) == 0.0

    def test_worked_example(self):
        # LCS 3, P 0.75, R 1.0, beta 1.2
        value = rouge_l(("a", "b", "c", "d"), ("a", "c", "d"))
        expected = (1 + 1.2**2) * 0.75 * 1.0 / (1.0 + 1.2**2 * 0.75)
        assert math.isclose(value, expected, rel_tol=1e-12)
        assert math.isclose(value, 0.8798076923076923, rel_tol=1e-9)

    def test_empty_scores_zero(self):
        assert rouge_l((), ("a",)) == 0.0
        assert rouge_l(("a",), ()) == 0.0

    def test_corpus_mean(self):
        cands = [("a", "b"), ("x",)]
        refs = [[("a", "b")], [("y",)]]
        assert math.isclose(corpus_rouge_l(cands, refs), 0.5, rel_tol=1e-12)


class TestCider:
    def test_identical_with_nonzero_idf(self):
        # two images with disjoint token sets: every gram has idf log(2) > 0,
        # identical candidate and reference, equal lengths -> exactly 10
        cands = [("a", "b", "a"), ("c", "d", "d")]
        refs = [[("a", "b", "a")], [("c", "d", "d")]]
        assert math.isclose(cider(cands, refs), 10.0, rel_tol=1e-12)

    def test_disjoint_scores_zero(self):
        cands = [("x", "y"), ("z", "w")]
        refs = [[("a", "b")], [("c", "d")]]
        assert cider(cands, refs) == 0.0

    def test_three_image_fixture(self):
        # hand-computed: image1 = 10*(1+1)/4 = 5.0 exactly;
        # image3 = 10*exp(-1/72)*(2/sqrt(5) + 1/sqrt(2))/4;
        # corpus value frozen from the committed brute-force computation
        cands = [("a", "b"), ("a", "c"), ("d", "d")]
        refs = [[("a", "b")], [("b", "c")], [("d", "d", "e")]]
        value = cider(cands, refs)
        image3 = 10 * math.exp(-1 / 72) * (2 / math.sqrt(5) + 1 / math.sqrt(2)) / 4
        assert math.isclose(image3, 3.9486105027, rel_tol=1e-9)
        assert math.isclose(value, 3.535677644517411, rel_tol=1e-6)

    def test_single_image_rejected(self):
        with pytest.raises(MetricError, match="IDF"):
            cider([("a",)], [[("a",)]])

    def test_idf_deterministic(self):
        cands = [("a", "b"), ("b", "c"), ("c", "a")]
        refs = [[("a", "c")], [("b", "a")], [("c", "b")]]
        assert cider(cands, refs) == cider(cands, refs)


class TestAccuracy:
    def make_pair(self, i, generated, reference):
        return EvalPair(
            sample_id=i,
            generated_rationale=("because",),
            reference_rationales=(("because",),),
            generated_answer=generated,
            reference_answer=reference,
        )

    def test_all_correct(self):
        pairs = [self.make_pair(i, ("red",), ("red",)) for i in range(3)]
        assert accuracy(pairs) == 1.0

    def test_none_correct(self):
        pairs = [self.make_pair(i, ("red",), ("blue",)) for i in range(3)]
        assert accuracy(pairs) == 0.0

    def test_three_of_four(self):
        pairs = [self.make_pair(i, ("red",), ("red",)) for i in range(3)]
        pairs.append(self.make_pair(3, ("no",), ("yes",)))
        assert accuracy(pairs) == 0.75

    def test_exact_sequence_match(self):
        assert not self.make_pair(0, ("red", "red"), ("red",)).answer_correct


def example_pairs():
    ref1 = ("because", "the", "circle", "is", "red")
    ref2 = ("because", "there", "are", "2", "square")
    return [
        EvalPair(0, ref1, (ref1,), ("red",), ("red",)),
        EvalPair(1, ("because", "the", "circle", "is", "blue"), (ref1,), ("blue",), ("red",)),
        EvalPair(2, ref2, (ref2,), ("2",), ("2",)),
        EvalPair(3, ("because", "no", "object"), (ref2,), ("0",), ("2",)),
        EvalPair(4, ("because",), (), ("yes",), ("yes",)),  # unlabelled: no reference
    ]


class TestReports:
    def test_modes_and_counts(self):
        pairs = example_pairs()
        unfiltered = build_report(pairs, UNFILTERED)
        filtered = build_report(pairs, FILTERED)
        assert unfiltered.mode == UNFILTERED and filtered.mode == FILTERED
        assert unfiltered.n_evaluated == 4  # pairs with references
        assert filtered.n_evaluated == 2  # and answer correct
        assert filtered.n_evaluated <= unfiltered.n_evaluated
        # accuracy covers all pairs in both modes
        assert unfiltered.accuracy == filtered.accuracy == 3 / 5

    def test_filtered_equals_unfiltered_when_all_correct(self):
        pairs = [p for p in example_pairs() if p.answer_correct]
        unfiltered = build_report(pairs, UNFILTERED)
        filtered = build_report(pairs, FILTERED)
        assert unfiltered.as_dict() == {**filtered.as_dict(), "mode": UNFILTERED}

    def test_zero_correct_filtered_marks_undefined(self):
        pairs = [
            EvalPair(0, ("a",), (("b",),), ("no",), ("yes",)),
            EvalPair(1, ("a",), (("b",),), ("no",), ("yes",)),
        ]
        report = build_report(pairs, FILTERED)
        assert report.n_evaluated == 0
        assert report.bleu1 is None and report.cider is None and report.rouge_l is None
        assert report.accuracy == 0.0
        assert "undefined" in report.table()

    def test_single_pair_filtered_has_undefined_cider_only(self):
        pairs = [
            EvalPair(0, ("a", "b"), (("a", "b"),), ("yes",), ("yes",)),
            EvalPair(1, ("a",), (("b",),), ("no",), ("yes",)),
        ]
        report = build_report(pairs, FILTERED)
        assert report.n_evaluated == 1
        assert report.cider is None
        assert report.bleu1 == 1.0 and report.rouge_l == 1.0

    def test_permutation_invariance(self):
        pairs = example_pairs()
        shuffled = [pairs[3], pairs[0], pairs[4], pairs[2], pairs[1]]
        assert build_report(pairs, UNFILTERED) == build_report(shuffled, UNFILTERED)
        assert build_report(pairs, FILTERED) == build_report(shuffled, FILTERED)

    @settings(max_examples=30, deadline=None)
    @given(candidate=tokens, reference=tokens)
    def test_reference_candidate_never_scores_below(self, candidate, reference):
        # monotone sanity: the reference itself is always at least as good
        ref = tuple(reference)
        cand = tuple(candidate)
        for n in (1, 2):
            assert bleu([ref], [[ref]], n=n) >= bleu([cand], [[ref]], n=n) - 1e-12
        assert rouge_l(ref, ref) >= rouge_l(cand, ref) - 1e-12
