"""Shared builders for tests: tiny tasks, scripted backends, quiet gateways."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from reflectkit.core import (
    AnswerKind,
    CandidateSample,
    Feedback,
    FeedbackValue,
    ReflectionRecord,
    SamplingInfo,
    TaskItem,
)
from reflectkit.gateway import ChatGateway, MockRule, ScriptedBackend


def make_task(
    task_id: str = "t001",
    gold: str = "b",
    *,
    dataset: str = "toy",
    category: str = "logic",
    kind: AnswerKind = AnswerKind.MULTIPLE_CHOICE,
    question: str | None = None,
) -> TaskItem:
    return TaskItem(
        id=task_id,
        source_dataset=dataset,
        task_category=category,
        question=question or f"Question {task_id}: pick the right letter.",
        gold_answer=gold,
        answer_kind=kind,
    )


def make_reflection(
    text: str = "The plan was wrong; verify options next time.",
    *,
    instruction_id: str = "1-1+2-1+3-1",
    sample_index: int = 1,
    seed: int = 0,
) -> ReflectionRecord:
    return ReflectionRecord(
        instruction_id=instruction_id,
        text=text,
        sampling=SamplingInfo(temperature=0.7, seed=seed, sample_index=sample_index),
    )


INCORRECT = Feedback(FeedbackValue.INCORRECT)


def make_candidate(
    task_id: str = "t001",
    *,
    outcome: str = "correct",
    reflection_text: str = "Check the options more carefully.",
    instruction_id: str = "1-1+2-1+3-1",
    sample_index: int = 1,
    first_answer: str = "a",
    corrected_answer: str = "b",
    first_scratchpad: str = "Thought: guessing.\nAction: Finish[a]",
    corrected_scratchpad: str = "Thought: verified.\nAction: Finish[b]",
) -> CandidateSample:
    return CandidateSample(
        task_id=task_id,
        first_answer=first_answer,
        first_feedback=INCORRECT,
        first_scratchpad=first_scratchpad,
        reflection=make_reflection(
            reflection_text, instruction_id=instruction_id, sample_index=sample_index
        ),
        corrected_answer=corrected_answer,
        corrected_scratchpad=corrected_scratchpad,
        outcome=outcome,
    )


def quiet_gateway(backend, **kwargs) -> ChatGateway:
    """Gateway with retries but no real sleeping, for fast failure tests."""
    kwargs.setdefault("sleep", lambda _s: None)
    return ChatGateway(backend, **kwargs)


def scripted(rules: list[tuple[str, str]], default: str | None = None) -> ScriptedBackend:
    return ScriptedBackend([MockRule(contains=c, reply=r) for c, r in rules], default=default)


# Markers used by the standard scenario mock, mirroring the prompt templates.
CORRECTION_MARKER = "previous reflection that helps to revise"
REFLECTION_FRAME_MARKER = "you were unsuccessful in answering the question"
PLAIN_REFLECTION_MARKER = "You will be given a previous reasoning trial"
JUDGE_MARKER = "evaluating the quality of reflections"
ANNOTATOR_MARKER = "professional data annotator"


def standard_mock(
    *,
    correction_answer: str = "b",
    judge_reply: str = "Student A",
    default_answer: str = "a",
) -> ScriptedBackend:
    """First turns answer `default_answer`; corrections answer `correction_answer`."""
    return scripted(
        [
            (JUDGE_MARKER, judge_reply),
            (
                CORRECTION_MARKER,
                f"Thought: the reflection points elsewhere.\nAction: Finish[{correction_answer}]",
            ),
            (
                REFLECTION_FRAME_MARKER,
                "The first pass misread the options. Plan: verify each option. (seed {seed})",
            ),
            (
                PLAIN_REFLECTION_MARKER,
                "The attempt misread the question; next time verify. (seed {seed})",
            ),
        ],
        default=f"Thought: the first option looks right.\nAction: Finish[{default_answer}]",
    )


def mixed_outcome_mock_spec(
    policy_seed: int, dataset: str = "toy", *, judge_reply: str = "Student A"
) -> dict:
    """Scripted-backend spec (JSON-able) where, with k=2 and m=2, every failed
    task collects two correct and two incorrect retries: the first selected
    instruction yields a helpful reflection, the second a harmful one.

    Rule order matters: judge prompts embed reflection texts, so the judge
    rule must come before the correction rules keyed on those texts.
    """
    from reflectkit.gateway import derive_seed
    from reflectkit.instructions import default_pool

    pool = default_pool()
    sel = pool.select_instructions(2, derive_seed(policy_seed, "instructions", dataset))
    good, bad = sel[0].parts[1].text, sel[1].parts[1].text
    assert good != bad and good not in bad and bad not in good, (
        "scenario premise: the two selected instructions need distinguishing text"
    )
    helpful = "REFLECT-GOOD verify each option next time. (seed {seed})"
    return {
        "rules": [
            {"contains": JUDGE_MARKER, "reply": judge_reply},
            {
                "contains": "REFLECT-GOOD",
                "reply": "Thought: the advice says verify.\nAction: Finish[b]",
            },
            {
                "contains": "REFLECT-BAD",
                "reply": "Thought: went with the gut.\nAction: Finish[c]",
            },
            {"contains": good, "reply": helpful},
            {"contains": bad, "reply": "REFLECT-BAD answer faster next time. (seed {seed})"},
            {"contains": PLAIN_REFLECTION_MARKER, "reply": helpful},
        ],
        "default": "Thought: the first option looks right.\nAction: Finish[a]",
    }


def write_tasks_file(path: Path, tasks: list[TaskItem]) -> Path:
    from reflectkit.records import task_to_dict

    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(task_to_dict(t)) + "\n")
    return path


@pytest.fixture
def twenty_tasks() -> list[TaskItem]:
    """8 tasks the mock solves at turn 1 (gold a), 12 it fails (gold b)."""
    return [
        make_task(f"t{i:03d}", gold=("a" if i < 8 else "b")) for i in range(20)
    ]
