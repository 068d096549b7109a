"""Training-file exporters: shapes, alignment, oracles, stats."""

import json

import pytest

from reflectkit.core import JUDGED_PREF, OUTCOME_PM, PairContext, PairMember, PreferencePair
from reflectkit.curation import PairingPolicy, build_outcome_pairs
from reflectkit.export import (
    COMPLETION_REFLECTION,
    COMPLETION_REFLECTION_AND_CORRECTION,
    SETTING_DPO_JUDGED,
    SETTING_DPO_OUTCOME,
    SETTING_ONE_STAGE,
    SETTING_TWO_STAGE_CORRECT,
    SETTING_TWO_STAGE_REFLECT,
    KindMismatchError,
    compute_stats,
    export_one_stage_sft,
    export_preference,
    export_two_stage_sft,
    outcome_histogram,
    read_preference_file,
    read_sft_file,
    stats_table,
    write_export,
)
from reflectkit.instructions import default_pool

from conftest import INCORRECT, make_candidate, make_reflection, make_task


def correct_set(n=3):
    cands = [
        make_candidate(
            f"t{i:03d}",
            outcome="correct",
            reflection_text=f"Reflection for item {i}: verify the options.",
            instruction_id="1-1+2-1+3-1" if i % 2 == 0 else "1-2+2-5+3-2",
            sample_index=i + 1,
        )
        for i in range(n)
    ]
    tasks = {c.task_id: make_task(c.task_id) for c in cands}
    return cands, tasks


def outcome_pairs():
    cands = [
        make_candidate("t001", outcome="correct", reflection_text="good: verify options"),
        make_candidate(
            "t001", outcome="incorrect", reflection_text="bad: keep guessing",
            corrected_answer="c", corrected_scratchpad="Thought: hm.\nAction: Finish[c]",
        ),
    ]
    tasks = {"t001": make_task("t001")}
    return build_outcome_pairs(cands, PairingPolicy(mode="cross_product")), tasks


def judged_pair():
    ctx = PairContext(
        task_id="t001",
        first_answer="a",
        first_feedback=INCORRECT,
        first_scratchpad="Thought: guessing.\nAction: Finish[a]",
    )
    member = lambda text, iid: PairMember(
        reflection=make_reflection(text, instruction_id=iid),
        corrected_answer="b",
        corrected_scratchpad="Thought: verified.\nAction: Finish[b]",
        outcome="correct",
    )
    pair = PreferencePair(
        context=ctx,
        chosen=member("thorough reflection", "1-1+2-1+3-1"),
        rejected=member("terse reflection", "1-1+2-2+3-1"),
        kind=JUDGED_PREF,
        judge_votes=(
            {"winner": "A", "swapped": False, "raw": "Student A"},
            {"winner": "B", "swapped": True, "raw": "Student B"},
        ),
    )
    return [pair], {"t001": make_task("t001")}


class TestOneStage:
    def test_target_reassembles_from_two_stage(self):
        """Single-pass target == reflection target + newline + correction target."""
        cands, tasks = correct_set()
        one = export_one_stage_sft(cands, tasks)
        refl, corr = export_two_stage_sft(cands, tasks)
        for a, r, c in zip(one, refl, corr):
            assert a.target == r.target + "\n" + c.target

    def test_prompt_contains_question_and_attempt(self):
        cands, tasks = correct_set(1)
        rec = export_one_stage_sft(cands, tasks)[0]
        assert tasks["t000"].question in rec.prompt
        assert cands[0].first_scratchpad in rec.prompt
        assert "{" not in rec.prompt.replace("{}", "")  # no leftover placeholders

    def test_meta(self):
        cands, tasks = correct_set(1)
        meta = export_one_stage_sft(cands, tasks)[0].meta
        assert meta["setting"] == SETTING_ONE_STAGE
        assert meta["task_id"] == "t000"
        assert meta["source_dataset"] == "toy"
        assert meta["instruction_id"] == "1-1+2-1+3-1"
        assert meta["sample_index"] == 1

    def test_rejects_incorrect_outcome(self):
        tasks = {"t001": make_task("t001")}
        bad = make_candidate("t001", outcome="incorrect")
        with pytest.raises(ValueError, match="correct-only"):
            export_one_stage_sft([bad], tasks)

    def test_missing_task_raises(self):
        with pytest.raises(KeyError, match="t9"):
            export_one_stage_sft([make_candidate("t9")], {})


class TestTwoStage:
    def test_row_aligned(self):
        cands, tasks = correct_set(5)
        refl, corr = export_two_stage_sft(cands, tasks)
        assert len(refl) == len(corr) == 5
        for r, c in zip(refl, corr):
            assert r.meta["task_id"] == c.meta["task_id"]
            assert r.meta["instruction_id"] == c.meta["instruction_id"]
            assert r.meta["sample_index"] == c.meta["sample_index"]

    def test_reflection_prompt_uses_originating_instruction(self):
        """The prompt must be the very frame the sample was collected with."""
        pool = default_pool()
        cands, tasks = correct_set(1)
        refl, _ = export_two_stage_sft(cands, tasks)
        expected = pool.render_reflection_prompt(
            pool.get("1-1+2-1+3-1"),
            question=tasks["t000"].question,
            scratchpad=cands[0].first_scratchpad,
        )
        assert refl[0].prompt == expected
        assert refl[0].target == cands[0].reflection.text

    def test_distinct_instructions_give_distinct_prompts(self):
        cands, tasks = correct_set(2)  # instruction ids differ between the two
        refl, _ = export_two_stage_sft(cands, tasks)
        assert refl[0].prompt != refl[1].prompt

    def test_plain_instruction_falls_back_to_failure_frame(self):
        cands = [make_candidate("t001", instruction_id="plain")]
        tasks = {"t001": make_task("t001")}
        refl, _ = export_two_stage_sft(cands, tasks)
        assert "unsuccessful" in refl[0].prompt
        assert tasks["t001"].question in refl[0].prompt

    def test_correction_prompt_embeds_reflection_with_blank_scratchpad(self):
        cands, tasks = correct_set(1)
        _, corr = export_two_stage_sft(cands, tasks)
        assert cands[0].reflection.text in corr[0].prompt
        assert tasks["t000"].question in corr[0].prompt
        assert "{Scratchpad}" not in corr[0].prompt
        assert "{Reflections}" not in corr[0].prompt
        assert corr[0].target == cands[0].corrected_scratchpad

    def test_settings_in_meta(self):
        cands, tasks = correct_set(1)
        refl, corr = export_two_stage_sft(cands, tasks)
        assert refl[0].meta["setting"] == SETTING_TWO_STAGE_REFLECT
        assert corr[0].meta["setting"] == SETTING_TWO_STAGE_CORRECT


class TestPreference:
    def test_outcome_pairs_export(self):
        pairs, tasks = outcome_pairs()
        recs = export_preference(pairs, tasks, kind=OUTCOME_PM)
        assert len(recs) == 1
        rec = recs[0]
        assert rec.chosen == "good: verify options"
        assert rec.rejected == "bad: keep guessing"
        assert rec.chosen != rec.rejected
        assert rec.meta["setting"] == SETTING_DPO_OUTCOME
        assert rec.meta["kind"] == OUTCOME_PM
        assert rec.meta["completion"] == COMPLETION_REFLECTION

    def test_judged_pairs_export(self):
        pairs, tasks = judged_pair()
        rec = export_preference(pairs, tasks, kind=JUDGED_PREF)[0]
        assert rec.meta["setting"] == SETTING_DPO_JUDGED
        assert rec.chosen == "thorough reflection"
        assert rec.rejected == "terse reflection"
        assert rec.meta["chosen_instruction_id"] == "1-1+2-1+3-1"
        assert rec.meta["rejected_instruction_id"] == "1-1+2-2+3-1"

    def test_prompt_is_pure_function_of_context(self):
        """Same question + failed attempt must give the same prompt text."""
        pairs, tasks = outcome_pairs()
        jpairs, _ = judged_pair()
        rec_a = export_preference(pairs, tasks, kind=OUTCOME_PM)[0]
        rec_b = export_preference(jpairs, tasks, kind=JUDGED_PREF)[0]
        assert rec_a.prompt == rec_b.prompt
        assert tasks["t001"].question in rec_a.prompt
        assert pairs[0].context.first_scratchpad in rec_a.prompt

    def test_reflection_and_correction_variant(self):
        pairs, tasks = outcome_pairs()
        recs = export_preference(
            pairs, tasks, kind=OUTCOME_PM, completion=COMPLETION_REFLECTION_AND_CORRECTION
        )
        rec = recs[0]
        assert rec.chosen == "good: verify options\nThought: verified.\nAction: Finish[b]"
        assert rec.rejected == "bad: keep guessing\nThought: hm.\nAction: Finish[c]"
        assert rec.meta["completion"] == COMPLETION_REFLECTION_AND_CORRECTION

    def test_kind_mismatch_rejected(self):
        pairs, tasks = outcome_pairs()
        with pytest.raises(KindMismatchError):
            export_preference(pairs, tasks, kind=JUDGED_PREF)
        with pytest.raises(KindMismatchError, match="unknown pair kind"):
            export_preference(pairs, tasks, kind="nonsense")

    def test_unknown_completion_rejected(self):
        pairs, tasks = outcome_pairs()
        with pytest.raises(ValueError, match="completion"):
            export_preference(pairs, tasks, kind=OUTCOME_PM, completion="everything")


class TestFiles:
    def test_sft_round_trip_and_keys(self, tmp_path):
        cands, tasks = correct_set()
        recs = export_one_stage_sft(cands, tasks)
        path = tmp_path / "sft.jsonl"
        assert write_export(path, recs) == 3
        for line in path.read_text().splitlines():
            assert set(json.loads(line)) == {"prompt", "target", "meta"}
        assert read_sft_file(path) == recs

    def test_preference_round_trip_and_keys(self, tmp_path):
        pairs, tasks = outcome_pairs()
        recs = export_preference(pairs, tasks, kind=OUTCOME_PM)
        path = tmp_path / "dpo.jsonl"
        write_export(path, recs)
        for line in path.read_text().splitlines():
            assert set(json.loads(line)) == {"prompt", "chosen", "rejected", "meta"}
        assert read_preference_file(path) == recs

    def test_readers_reject_wrong_keys(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"prompt": "p", "target": "t", "meta": {}, "extra": 1}\n')
        with pytest.raises(ValueError, match="bad SFT keys"):
            read_sft_file(bad)
        bad.write_text('{"prompt": "p", "chosen": "c", "meta": {}}\n')
        with pytest.raises(ValueError, match="bad preference keys"):
            read_preference_file(bad)

    def test_write_creates_parents(self, tmp_path):
        cands, tasks = correct_set(1)
        path = tmp_path / "exports" / "setting1_one_stage_sft" / "toy.jsonl"
        write_export(path, export_one_stage_sft(cands, tasks))
        assert path.exists()


class TestStats:
    def test_fourteen_of_one_hundred_is_exactly_fourteen_percent(self):
        cands = [
            make_candidate(f"t{i:03d}", outcome="correct" if i < 14 else "incorrect")
            for i in range(100)
        ]
        tasks = {c.task_id: make_task(c.task_id) for c in cands}
        stats = compute_stats(cands, tasks)
        assert stats.total.n_candidates == 100
        assert stats.total.n_correct == 14
        assert stats.total.pct_correct == 14.0

    def test_token_averages_hand_computed(self):
        cands = [
            make_candidate(
                "t001",
                first_scratchpad="one two three",          # 3 tokens
                reflection_text="a b",                     # 2 tokens
                corrected_scratchpad="x",                  # 1 token
            ),
            make_candidate(
                "t002",
                first_scratchpad="one two three four five",  # 5 tokens
                reflection_text="a b c d",                   # 4 tokens
                corrected_scratchpad="x y z",                # 3 tokens
            ),
        ]
        tasks = {
            "t001": make_task("t001", question="q one"),       # 2 tokens
            "t002": make_task("t002", question="q two more"),  # 3 tokens
        }
        total = compute_stats(cands, tasks).total
        assert total.avg_question_tokens == pytest.approx(2.5)
        assert total.avg_first_attempt_tokens == pytest.approx(4.0)
        assert total.avg_reflection_tokens == pytest.approx(3.0)
        assert total.avg_corrected_tokens == pytest.approx(2.0)

    def test_categories_reconcile_with_total(self):
        cands = []
        tasks = {}
        for i in range(12):
            tid = f"t{i:03d}"
            cat = ["math", "logic", "reading"][i % 3]
            cands.append(make_candidate(tid, outcome="correct" if i % 2 else "incorrect"))
            tasks[tid] = make_task(tid, category=cat)
        stats = compute_stats(cands, tasks)
        assert [c.name for c in stats.per_category] == ["logic", "math", "reading"]
        assert sum(c.n_candidates for c in stats.per_category) == stats.total.n_candidates
        assert sum(c.n_correct for c in stats.per_category) == stats.total.n_correct

    def test_category_falls_back_to_source_dataset(self):
        cand = make_candidate("t001")
        task = make_task("t001", dataset="quizbank", category=None)
        stats = compute_stats([cand], {"t001": task})
        assert stats.per_category[0].name == "quizbank"

    def test_empty_input(self):
        stats = compute_stats([], {})
        assert stats.total.n_candidates == 0
        assert stats.total.pct_correct == 0.0
        assert stats.per_category == ()

    def test_table_lists_every_category_and_total(self):
        cands = [make_candidate("t001"), make_candidate("t002", outcome="incorrect")]
        tasks = {
            "t001": make_task("t001", category="math"),
            "t002": make_task("t002", category="logic"),
        }
        table = stats_table(compute_stats(cands, tasks))
        lines = table.splitlines()
        assert lines[0].startswith("category")
        assert any(line.startswith("logic") for line in lines)
        assert any(line.startswith("math") for line in lines)
        assert lines[-1].startswith("total")

    def test_outcome_histogram(self):
        cands = [
            make_candidate("t001"),
            make_candidate("t002"),
            make_candidate("t003", outcome="incorrect"),
        ]
        assert outcome_histogram(cands) == {"correct": 2, "incorrect": 1}
