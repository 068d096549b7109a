"""JSON round-tripping for every record the pipeline persists.

All writers emit one canonical JSON object per line (sorted keys, UTF-8 kept
as-is), so identical data always serializes to identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, TypeVar

from .core import (
    AnswerKind,
    CandidateSample,
    Feedback,
    FeedbackValue,
    PairContext,
    PairMember,
    PreferencePair,
    ReflectionRecord,
    RolloutTrace,
    SamplingInfo,
    TaskItem,
    TraceStatus,
    Turn,
    VerifierKind,
)
from .rollout import AbortRecord

T = TypeVar("T")


def canonical_dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def feedback_to_dict(fb: Feedback) -> dict:
    return {
        "value": fb.value.value,
        "verifier_kind": fb.verifier_kind.value,
        "reason": fb.reason,
    }


def feedback_from_dict(d: dict) -> Feedback:
    return Feedback(
        value=FeedbackValue(d["value"]),
        verifier_kind=VerifierKind(d["verifier_kind"]),
        reason=d.get("reason"),
    )


def task_to_dict(t: TaskItem) -> dict:
    return {
        "id": t.id,
        "source_dataset": t.source_dataset,
        "task_category": t.task_category,
        "question": t.question,
        "gold_answer": t.gold_answer,
        "answer_kind": t.answer_kind.value,
        "fewshot": list(t.fewshot),
    }


def task_from_dict(d: dict) -> TaskItem:
    return TaskItem(
        id=d["id"],
        source_dataset=d["source_dataset"],
        task_category=d.get("task_category", ""),
        question=d["question"],
        gold_answer=d["gold_answer"],
        answer_kind=AnswerKind(d.get("answer_kind", "free_text")),
        fewshot=tuple(d.get("fewshot", [])),
    )


def turn_to_dict(t: Turn) -> dict:
    return {
        "index": t.index,
        "scratchpad": t.scratchpad,
        "extracted_answer": t.extracted_answer,
        "feedback": feedback_to_dict(t.feedback),
    }


def turn_from_dict(d: dict) -> Turn:
    return Turn(
        index=d["index"],
        scratchpad=d["scratchpad"],
        extracted_answer=d.get("extracted_answer"),
        feedback=feedback_from_dict(d["feedback"]),
    )


def sampling_to_dict(s: SamplingInfo) -> dict:
    return {"temperature": s.temperature, "seed": s.seed, "sample_index": s.sample_index}


def sampling_from_dict(d: dict) -> SamplingInfo:
    return SamplingInfo(
        temperature=d["temperature"], seed=d["seed"], sample_index=d["sample_index"]
    )


def reflection_to_dict(r: ReflectionRecord) -> dict:
    return {
        "instruction_id": r.instruction_id,
        "text": r.text,
        "sampling": sampling_to_dict(r.sampling),
        "source": r.source,
    }


def reflection_from_dict(d: dict) -> ReflectionRecord:
    return ReflectionRecord(
        instruction_id=d["instruction_id"],
        text=d["text"],
        sampling=sampling_from_dict(d["sampling"]),
        source=d.get("source", "self"),
    )


def status_to_dict(s: TraceStatus) -> dict:
    return {"kind": s.kind, "turn": s.turn, "reason": s.reason}


def status_from_dict(d: dict) -> TraceStatus:
    return TraceStatus(kind=d["kind"], turn=d.get("turn"), reason=d.get("reason"))


def trace_to_dict(t: RolloutTrace) -> dict:
    return {
        "task_id": t.task_id,
        "turns": [turn_to_dict(x) for x in t.turns],
        "reflections": [reflection_to_dict(r) for r in t.reflections],
        "status": status_to_dict(t.status),
    }


def trace_from_dict(d: dict) -> RolloutTrace:
    return RolloutTrace(
        task_id=d["task_id"],
        turns=tuple(turn_from_dict(x) for x in d["turns"]),
        reflections=tuple(reflection_from_dict(r) for r in d["reflections"]),
        status=status_from_dict(d["status"]),
    )


def candidate_to_dict(c: CandidateSample) -> dict:
    return {
        "task_id": c.task_id,
        "first_answer": c.first_answer,
        "first_feedback": feedback_to_dict(c.first_feedback),
        "first_scratchpad": c.first_scratchpad,
        "reflection": reflection_to_dict(c.reflection),
        "corrected_answer": c.corrected_answer,
        "corrected_scratchpad": c.corrected_scratchpad,
        "outcome": c.outcome,
    }


def candidate_from_dict(d: dict) -> CandidateSample:
    return CandidateSample(
        task_id=d["task_id"],
        first_answer=d["first_answer"],
        first_feedback=feedback_from_dict(d["first_feedback"]),
        first_scratchpad=d["first_scratchpad"],
        reflection=reflection_from_dict(d["reflection"]),
        corrected_answer=d["corrected_answer"],
        corrected_scratchpad=d["corrected_scratchpad"],
        outcome=d["outcome"],
    )


def _context_to_dict(c: PairContext) -> dict:
    return {
        "task_id": c.task_id,
        "first_answer": c.first_answer,
        "first_feedback": feedback_to_dict(c.first_feedback),
        "first_scratchpad": c.first_scratchpad,
    }


def _context_from_dict(d: dict) -> PairContext:
    return PairContext(
        task_id=d["task_id"],
        first_answer=d["first_answer"],
        first_feedback=feedback_from_dict(d["first_feedback"]),
        first_scratchpad=d["first_scratchpad"],
    )


def _member_to_dict(m: PairMember) -> dict:
    return {
        "reflection": reflection_to_dict(m.reflection),
        "corrected_answer": m.corrected_answer,
        "corrected_scratchpad": m.corrected_scratchpad,
        "outcome": m.outcome,
    }


def _member_from_dict(d: dict) -> PairMember:
    return PairMember(
        reflection=reflection_from_dict(d["reflection"]),
        corrected_answer=d["corrected_answer"],
        corrected_scratchpad=d["corrected_scratchpad"],
        outcome=d["outcome"],
    )


def pair_to_dict(p: PreferencePair) -> dict:
    return {
        "context": _context_to_dict(p.context),
        "chosen": _member_to_dict(p.chosen),
        "rejected": _member_to_dict(p.rejected),
        "kind": p.kind,
        "judge_votes": list(p.judge_votes) if p.judge_votes is not None else None,
    }


def pair_from_dict(d: dict) -> PreferencePair:
    votes = d.get("judge_votes")
    return PreferencePair(
        context=_context_from_dict(d["context"]),
        chosen=_member_from_dict(d["chosen"]),
        rejected=_member_from_dict(d["rejected"]),
        kind=d["kind"],
        judge_votes=tuple(votes) if votes is not None else None,
    )


def abort_to_dict(a: AbortRecord) -> dict:
    return {
        "task_id": a.task_id,
        "instruction_id": a.instruction_id,
        "sample_index": a.sample_index,
        "stage": a.stage,
        "reason": a.reason,
    }


def abort_from_dict(d: dict) -> AbortRecord:
    return AbortRecord(
        task_id=d["task_id"],
        instruction_id=d["instruction_id"],
        sample_index=d["sample_index"],
        stage=d["stage"],
        reason=d["reason"],
    )


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    """Write dicts as canonical JSONL; returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(canonical_dumps(row) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[dict]:
    rows: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def save_records(path: str | Path, items: Iterable[T], to_dict: Callable[[T], dict]) -> int:
    return write_jsonl(path, (to_dict(x) for x in items))


def load_records(path: str | Path, from_dict: Callable[[dict], T]) -> list[T]:
    return [from_dict(d) for d in read_jsonl(path)]


def load_tasks(path: str | Path) -> list[TaskItem]:
    return load_records(path, task_from_dict)


def save_candidates(path: str | Path, items: Iterable[CandidateSample]) -> int:
    return save_records(path, items, candidate_to_dict)


def load_candidates(path: str | Path) -> list[CandidateSample]:
    return load_records(path, candidate_from_dict)


def save_pairs(path: str | Path, items: Iterable[PreferencePair]) -> int:
    return save_records(path, items, pair_to_dict)


def load_pairs(path: str | Path) -> list[PreferencePair]:
    return load_records(path, pair_from_dict)
