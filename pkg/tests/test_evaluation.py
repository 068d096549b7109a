"""Accuracy-by-turn, error taxonomy, and similarity-correlation tests."""

import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflectkit.core import EvalItemOutcome, GenerationPolicy
from reflectkit.evaluation import (
    TAXONOMY,
    UNLABELED,
    correlate_similarity_with_outcome,
    cosine_similarity,
    curve_csv,
    curve_rows,
    evaluate,
    parse_error_labels,
    pearson_r,
    reflection_thought_correlation,
    report_from_outcomes,
    report_to_dict,
    tag_errors,
    tag_histogram,
)
from reflectkit.gateway import MockRule, ScriptedBackend
from reflectkit.verification import OracleVerifier

from conftest import ANNOTATOR_MARKER, quiet_gateway, scripted, standard_mock


def outcome(task_id, solved_turn, attempted=None):
    return EvalItemOutcome(
        task_id=task_id,
        solved_turn=solved_turn,
        turns_attempted=attempted if attempted is not None else (solved_turn or 2),
    )


class TestAccuracyByTurn:
    def test_metric_arithmetic_reference_row(self):
        """151/500 then 219/500 must print as 30.2% / 43.8% / +13.6%."""
        outcomes = (
            [outcome(f"a{i:04d}", 1) for i in range(151)]
            + [outcome(f"b{i:04d}", 2) for i in range(219 - 151)]
            + [outcome(f"c{i:04d}", None) for i in range(500 - 219)]
        )
        report = report_from_outcomes(outcomes, 2)
        assert report.solved_counts == (151, 219)
        assert report.acc_at == (151 / 500, 219 / 500)
        assert report.summary() == "30.2% / 43.8% / +13.6%"

    def test_single_turn_summary_has_no_delta(self):
        report = report_from_outcomes([outcome("t1", 1), outcome("t2", None)], 1)
        assert report.summary() == "50.0%"
        assert report.delta_t1_t2 is None

    def test_zero_items(self):
        report = report_from_outcomes([], 2)
        assert report.acc_at == (0.0, 0.0)
        assert report.summary() == "0.0% / 0.0% / +0.0%"

    def test_cumulative_counting(self):
        outcomes = [outcome("t1", 1), outcome("t2", 3), outcome("t3", None)]
        report = report_from_outcomes(outcomes, 4)
        assert report.solved_counts == (1, 1, 2, 2)

    def test_curve_is_monotone(self):
        outcomes = [
            outcome(f"t{i}", turn)
            for i, turn in enumerate([1, 1, 2, 4, None, 3, None, 2])
        ]
        report = report_from_outcomes(outcomes, 4)
        assert list(report.acc_at) == sorted(report.acc_at)

    @given(
        st.lists(
            st.one_of(st.none(), st.integers(min_value=1, max_value=6)),
            min_size=0,
            max_size=40,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_curve_monotone_property(self, solved_turns):
        outcomes = [outcome(f"t{i:03d}", turn) for i, turn in enumerate(solved_turns)]
        report = report_from_outcomes(outcomes, 6)
        for a, b in zip(report.acc_at, report.acc_at[1:]):
            assert a <= b

    def test_per_item_sorted_by_task_id(self):
        report = report_from_outcomes([outcome("tz", 1), outcome("ta", None)], 2)
        assert [o.task_id for o in report.per_item] == ["ta", "tz"]

    def test_bad_max_turns(self):
        with pytest.raises(ValueError):
            report_from_outcomes([], 0)

    def test_curve_rows_and_csv(self):
        report = report_from_outcomes([outcome("t1", 1), outcome("t2", 2)], 2)
        assert curve_rows(report) == [(1, 1, 0.5), (2, 2, 1.0)]
        assert curve_csv(report) == (
            "turn,solved,accuracy\n1,1,0.500000\n2,2,1.000000\n"
        )

    def test_report_to_dict_shape(self):
        report = report_from_outcomes([outcome("t1", 1)], 2)
        d = report_to_dict(report)
        assert d["summary"] == report.summary()
        assert d["acc_at"] == [1.0, 1.0]
        assert d["per_item"][0]["task_id"] == "t1"
        assert d["error_tag_histogram"] is None


class TestEvaluateIntegration:
    def test_mock_run_second_turn_fixes_everything(self, twenty_tasks):
        gw = quiet_gateway(standard_mock())  # first answer a, retry answers b
        report = evaluate(
            twenty_tasks,
            gw,
            GenerationPolicy(max_turns=2, seed=3),
            OracleVerifier(),
            reflection_mode="plain",
        )
        assert report.summary() == "40.0% / 100.0% / +60.0%"

    def test_unsolvable_stays_flat(self, twenty_tasks):
        gw = quiet_gateway(standard_mock(correction_answer="a"))
        report = evaluate(
            [t for t in twenty_tasks if t.gold_answer == "b"],
            gw,
            GenerationPolicy(max_turns=3, seed=3),
            OracleVerifier(),
            reflection_mode="plain",
        )
        assert report.acc_at == (0.0, 0.0, 0.0)

    def test_backend_failure_counts_as_unsolved(self, twenty_tasks):
        backend = ScriptedBackend([MockRule(contains="", reply="", fail=True)])
        gw = quiet_gateway(backend, retries=1)
        report = evaluate(
            twenty_tasks[:4], gw, GenerationPolicy(max_turns=2), OracleVerifier()
        )
        assert report.acc_at == (0.0, 0.0)
        assert all(o.aborted for o in report.per_item)


class TestTaxonomy:
    def test_nine_fine_labels_five_coarse_groups(self):
        assert len(TAXONOMY) == 9
        assert len({t.coarse_code for t in TAXONOMY.values()}) == 5

    def test_group_membership(self):
        assert TAXONOMY["1-1"].label == "Calculation Error"
        assert TAXONOMY["1-2"].coarse_label == "Mathematical Errors"
        assert TAXONOMY["2-2"].label == "Internal Inconsistency"
        assert TAXONOMY["3-3"].coarse_label == "Instruction Violation"
        assert TAXONOMY["4-1"].label == "Factual Errors"
        assert TAXONOMY["5-1"].coarse_label == "No Errors"


class TestParseLabels:
    def test_labels_line_with_codes(self):
        tags = parse_error_labels("- Labels: [1-1, 2-2]")
        assert [t.code for t in tags] == ["1-1", "2-2"]

    def test_bare_bracket_with_names(self):
        tags = parse_error_labels("I think this is a [Calculation Error] case.")
        assert [t.code for t in tags] == ["1-1"]

    def test_names_case_insensitive(self):
        tags = parse_error_labels("Labels: [calculation error, FORMAT DISCREPANCY]")
        assert [t.code for t in tags] == ["1-1", "3-3"]

    def test_code_with_trailing_words(self):
        tags = parse_error_labels("Labels: [2-1 Flawed Rationale Error]")
        assert [t.code for t in tags] == ["2-1"]

    def test_duplicates_collapsed(self):
        tags = parse_error_labels("Labels: [1-1, Calculation Error]")
        assert [t.code for t in tags] == ["1-1"]

    def test_unknown_entry_fails_whole_parse(self):
        assert parse_error_labels("Labels: [1-1, Vibes Error]") is None

    def test_no_bracket_or_empty(self):
        assert parse_error_labels("no labels here") is None
        assert parse_error_labels("Labels: []") is None
        assert parse_error_labels("") is None


class TestTagErrors:
    ITEM = ("What is 2+2?", "I added 2 and 3.", "I should reread the numbers.")

    def test_happy_path(self):
        gw = quiet_gateway(scripted([(ANNOTATOR_MARKER, "- Labels: [1-1]")]))
        tags = tag_errors([self.ITEM], gw)
        assert [[t.code for t in row] for row in tags] == [["1-1"]]

    def test_retry_seed_changes_then_unlabeled(self):
        # Never parseable: both attempts burn, sentinel comes back.
        gw = quiet_gateway(scripted([(ANNOTATOR_MARKER, "shrug")]))
        assert tag_errors([self.ITEM], gw) == [[UNLABELED]]
        assert gw.calls == 2  # one retry, not an infinite loop

    def test_gateway_failure_gives_sentinel(self):
        backend = ScriptedBackend([MockRule(contains="", reply="", fail=True)])
        gw = quiet_gateway(backend, retries=1)
        assert tag_errors([self.ITEM], gw) == [[UNLABELED]]

    def test_empty_items(self):
        gw = quiet_gateway(scripted([]))
        assert tag_errors([], gw) == []

    def test_histogram_fine_and_coarse(self):
        rows = [
            [TAXONOMY["1-1"], TAXONOMY["1-2"]],
            [TAXONOMY["1-1"]],
            [TAXONOMY["5-1"]],
        ]
        assert tag_histogram(rows) == {
            "1-1 Calculation Error": 2,
            "1-2 Algorithm Error": 1,
            "5-1 No Errors Detected": 1,
        }
        assert tag_histogram(rows, coarse=True) == {
            "1 Mathematical Errors": 3,
            "5 No Errors": 1,
        }


class TestCosine:
    def test_identical_text(self):
        assert cosine_similarity("check the options", "check the options") == pytest.approx(1.0)

    def test_case_and_punctuation_ignored(self):
        assert cosine_similarity("Hello, World!", "hello world") == pytest.approx(1.0)

    def test_disjoint_vocab(self):
        assert cosine_similarity("alpha beta", "gamma delta") == 0.0

    def test_empty_side(self):
        assert cosine_similarity("", "anything") == 0.0
        assert cosine_similarity("anything", "") == 0.0
        assert cosine_similarity("!!!", "anything") == 0.0

    def test_hand_computed_overlap(self):
        # "a b" vs "a c": dot=1, norms=sqrt(2) each -> 0.5
        assert cosine_similarity("a b", "a c") == pytest.approx(0.5)

    @given(st.text(max_size=40), st.text(max_size=40))
    @settings(max_examples=60, deadline=None)
    def test_bounded_and_symmetric(self, a, b):
        s = cosine_similarity(a, b)
        assert 0.0 <= s <= 1.0 + 1e-12
        assert s == pytest.approx(cosine_similarity(b, a))


class TestPearson:
    def test_frozen_oracle_values(self):
        # Constants computed with exact rational arithmetic + math.sqrt,
        # cross-checked against statistics.correlation.
        assert pearson_r([0, 1, 2, 3], [1, 0, 2, 4]) == pytest.approx(
            0.8315218406202999, abs=1e-12
        )
        assert pearson_r([0.1, 0.2, 0.2, 0.9], [0.0, 1.0, 0.0, 1.0]) == pytest.approx(
            0.6246950475544243, abs=1e-12
        )

    def test_matches_stdlib_on_random_data(self):
        import random

        rng = random.Random(5)
        xs = [rng.random() for _ in range(50)]
        ys = [rng.random() for _ in range(50)]
        assert pearson_r(xs, ys) == pytest.approx(
            statistics.correlation(xs, ys), abs=1e-12
        )

    def test_perfect_positive_and_negative(self):
        assert pearson_r([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
        assert pearson_r([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_zero_variance_is_none(self):
        assert pearson_r([1, 1, 1], [1, 2, 3]) is None
        assert pearson_r([1, 2, 3], [7, 7, 7]) is None

    def test_too_short_is_none(self):
        assert pearson_r([], []) is None
        assert pearson_r([1.0], [2.0]) is None

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            pearson_r([1, 2], [1])


class TestBinning:
    def test_always_n_bins_rows(self):
        report = correlate_similarity_with_outcome([0.05, 0.95], [False, True])
        assert len(report.bins) == 10
        assert report.bins[0].n == 1
        assert report.bins[9].n == 1
        assert sum(b.n for b in report.bins) == 2

    def test_top_bin_closed(self):
        report = correlate_similarity_with_outcome([1.0], [True], n_bins=10)
        assert report.bins[9].n == 1

    def test_left_edges_half_open(self):
        # 0.1 belongs to [0.1, 0.2), not [0.0, 0.1)
        report = correlate_similarity_with_outcome([0.1], [True], n_bins=10)
        assert report.bins[0].n == 0
        assert report.bins[1].n == 1

    def test_bin_stats(self):
        report = correlate_similarity_with_outcome(
            [0.11, 0.19, 0.15], [True, False, True], n_bins=10
        )
        b = report.bins[1]
        assert b.n == 3
        assert b.mean_similarity == pytest.approx(0.15)
        assert b.accuracy == pytest.approx(2 / 3)

    def test_every_member_lands_in_exactly_one_bin(self):
        import random

        rng = random.Random(11)
        sims = [rng.random() for _ in range(200)] + [0.0, 1.0]
        correct = [rng.random() < 0.5 for _ in sims]
        report = correlate_similarity_with_outcome(sims, correct, n_bins=7)
        assert sum(b.n for b in report.bins) == len(sims)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            correlate_similarity_with_outcome([0.5], [True, False])
        with pytest.raises(ValueError):
            correlate_similarity_with_outcome([0.5], [True], n_bins=0)


class TestReflectionThoughtCorrelation:
    def test_end_to_end_shape(self):
        reflections = ["verify the options next time", "just guess again"]
        pads = [
            "Thought: verify the options now.\nAction: Finish[b]",
            "Thought: random pick.\nAction: Finish[c]",
        ]
        report = reflection_thought_correlation(
            reflections, pads, ["correct", "incorrect"]
        )
        assert report.n_pairs == 2
        assert len(report.bins) == 10

    def test_zero_variance_similarity_gives_none_pearson(self):
        reflections = ["same words", "same words"]
        pads = ["Thought: same words\nAction: Finish[a]"] * 2
        report = reflection_thought_correlation(
            reflections, pads, ["correct", "incorrect"]
        )
        assert report.pearson is None

    def test_uses_thought_text_not_action_line(self):
        # Reflection shares vocabulary only with the Action line, which the
        # thought extraction strips, so similarity must be 0.
        report = reflection_thought_correlation(
            ["finish b"], ["Thought: qqq zzz\nAction: Finish[b]"], ["correct"]
        )
        assert report.bins[0].n == 1  # similarity 0.0 -> bottom bin

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            reflection_thought_correlation(["a"], ["b"], [])

    def test_to_dict_rounding(self):
        report = correlate_similarity_with_outcome([1 / 3], [True], n_bins=3)
        d = report.to_dict()
        assert d["n_pairs"] == 1
        assert d["bins"][1]["mean_similarity"] == round(1 / 3, 6)
