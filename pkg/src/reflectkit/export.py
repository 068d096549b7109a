"""Render curated data into training-ready JSONL files.

Four shapes, one per fine-tuning setting:

1. single-pass SFT: prompt shows the failed attempt, the target is the
   reflection followed by the corrected solution in one completion.
2. two-pass SFT: file A trains reflection writing (target is the reflection),
   file B trains correction (prompt embeds the reflection, target is the
   corrected solution). The files stay row-aligned.
3. preference tuning on outcome pairs (correct vs incorrect retry).
4. preference tuning on judged pairs (two correct retries, judge-ranked).

SFT rows are {prompt, target, meta}; preference rows are
{prompt, chosen, rejected, meta}.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .core import JUDGED_PREF, OUTCOME_PM, CandidateSample, PreferencePair, TaskItem
from .instructions import InstructionPool, default_pool, load_prompt
from .records import canonical_dumps

COMPLETION_REFLECTION = "reflection"
COMPLETION_REFLECTION_AND_CORRECTION = "reflection_and_correction"

SETTING_ONE_STAGE = "setting1_one_stage_sft"
SETTING_TWO_STAGE_REFLECT = "setting2_reflection_sft"
SETTING_TWO_STAGE_CORRECT = "setting2_correction_sft"
SETTING_DPO_OUTCOME = "setting3_dpo_outcome"
SETTING_DPO_JUDGED = "setting4_dpo_judged"

PAIR_KIND_TO_SETTING = {OUTCOME_PM: SETTING_DPO_OUTCOME, JUDGED_PREF: SETTING_DPO_JUDGED}


class KindMismatchError(ValueError):
    """A preference pair of the wrong kind reached an exporter."""


@dataclass(frozen=True)
class SftRecord:
    prompt: str
    target: str
    meta: dict

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "target": self.target, "meta": self.meta}


@dataclass(frozen=True)
class PreferenceRecord:
    prompt: str
    chosen: str
    rejected: str
    meta: dict

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "meta": self.meta,
        }


def _require_task(tasks: dict[str, TaskItem], task_id: str) -> TaskItem:
    task = tasks.get(task_id)
    if task is None:
        raise KeyError(f"no task item for id {task_id!r}")
    return task


def _failure_prompt(question: str, first_scratchpad: str) -> str:
    """Shared failed-attempt framing; a pure function of question + attempt."""
    template = load_prompt("reflexion.txt")
    return template.replace("{Question}", question).replace(
        "{Scratchpad}", first_scratchpad
    )


def _one_stage_prompt(question: str, first_scratchpad: str) -> str:
    template = load_prompt("one_stage.txt")
    return template.replace("{Question}", question).replace(
        "{Scratchpad}", first_scratchpad
    )


def _sft_meta(c: CandidateSample, task: TaskItem, setting: str) -> dict:
    return {
        "setting": setting,
        "task_id": c.task_id,
        "source_dataset": task.source_dataset,
        "task_category": task.task_category,
        "instruction_id": c.reflection.instruction_id,
        "sample_index": c.reflection.sampling.sample_index,
    }


def export_one_stage_sft(
    correct_set: list[CandidateSample], tasks: dict[str, TaskItem]
) -> list[SftRecord]:
    """Setting 1: reflect and re-solve in a single completion."""
    records = []
    for c in correct_set:
        _check_correct(c)
        task = _require_task(tasks, c.task_id)
        records.append(
            SftRecord(
                prompt=_one_stage_prompt(task.question, c.first_scratchpad),
                target=c.reflection.text + "\n" + c.corrected_scratchpad,
                meta=_sft_meta(c, task, SETTING_ONE_STAGE),
            )
        )
    return records


def _check_correct(c: CandidateSample) -> None:
    if c.outcome != "correct":
        raise ValueError(
            f"training exports take the correct-only set; got outcome {c.outcome!r} "
            f"for task {c.task_id}"
        )


def export_two_stage_sft(
    correct_set: list[CandidateSample],
    tasks: dict[str, TaskItem],
    *,
    pool: InstructionPool | None = None,
) -> tuple[list[SftRecord], list[SftRecord]]:
    """Setting 2: separate reflection and correction files, row-aligned.

    The reflection prompt reuses the exact instruction the sample was drawn
    with, so training matches collection.
    """
    pool = pool or default_pool()
    pool_ids = {spec.id for spec in pool.enumerate_pool()}
    correction_template = load_prompt("correction.txt")
    reflect_records: list[SftRecord] = []
    correct_records: list[SftRecord] = []
    for c in correct_set:
        _check_correct(c)
        task = _require_task(tasks, c.task_id)
        iid = c.reflection.instruction_id
        if iid in pool_ids:
            reflect_prompt = pool.render_reflection_prompt(
                pool.get(iid), question=task.question, scratchpad=c.first_scratchpad
            )
        else:
            reflect_prompt = _failure_prompt(task.question, c.first_scratchpad)
        reflect_records.append(
            SftRecord(
                prompt=reflect_prompt,
                target=c.reflection.text,
                meta=_sft_meta(c, task, SETTING_TWO_STAGE_REFLECT),
            )
        )
        correction_prompt = (
            correction_template.replace("{Examples}", "\n\n".join(task.fewshot))
            .replace("{Question}", task.question)
            .replace("{Reflections}", c.reflection.text)
            .replace("{Scratchpad}", "")
        )
        correct_records.append(
            SftRecord(
                prompt=correction_prompt,
                target=c.corrected_scratchpad,
                meta=_sft_meta(c, task, SETTING_TWO_STAGE_CORRECT),
            )
        )
    if len(reflect_records) != len(correct_records):
        raise AssertionError("two-stage files must stay row-aligned")
    return reflect_records, correct_records


def export_preference(
    pairs: list[PreferencePair],
    tasks: dict[str, TaskItem],
    *,
    kind: str,
    completion: str = COMPLETION_REFLECTION,
) -> list[PreferenceRecord]:
    """Settings 3 and 4: chosen/rejected completions over a failure prompt.

    By default the completions are the bare reflection texts; the
    reflection-and-correction variant appends each member's corrected
    solution and is flagged in meta.
    """
    if kind not in PAIR_KIND_TO_SETTING:
        raise KindMismatchError(f"unknown pair kind {kind!r}")
    if completion not in (COMPLETION_REFLECTION, COMPLETION_REFLECTION_AND_CORRECTION):
        raise ValueError(f"unknown completion variant {completion!r}")
    setting = PAIR_KIND_TO_SETTING[kind]
    records = []
    for p in pairs:
        if p.kind != kind:
            raise KindMismatchError(
                f"pair kind {p.kind!r} cannot be exported as {kind!r}"
            )
        task = _require_task(tasks, p.context.task_id)
        if completion == COMPLETION_REFLECTION:
            chosen = p.chosen.reflection.text
            rejected = p.rejected.reflection.text
        else:
            chosen = p.chosen.reflection.text + "\n" + p.chosen.corrected_scratchpad
            rejected = p.rejected.reflection.text + "\n" + p.rejected.corrected_scratchpad
        records.append(
            PreferenceRecord(
                prompt=_failure_prompt(task.question, p.context.first_scratchpad),
                chosen=chosen,
                rejected=rejected,
                meta={
                    "setting": setting,
                    "task_id": p.context.task_id,
                    "source_dataset": task.source_dataset,
                    "task_category": task.task_category,
                    "kind": p.kind,
                    "completion": completion,
                    "chosen_instruction_id": p.chosen.reflection.instruction_id,
                    "rejected_instruction_id": p.rejected.reflection.instruction_id,
                },
            )
        )
    return records


def write_export(path: str | Path, records: list[SftRecord] | list[PreferenceRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_dumps(rec.to_dict()) + "\n")
    return len(records)


def read_sft_file(path: str | Path) -> list[SftRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if set(d) != {"prompt", "target", "meta"}:
                raise ValueError(f"{path}:{i + 1}: bad SFT keys {sorted(d)}")
            records.append(SftRecord(prompt=d["prompt"], target=d["target"], meta=d["meta"]))
    return records


def read_preference_file(path: str | Path) -> list[PreferenceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if set(d) != {"prompt", "chosen", "rejected", "meta"}:
                raise ValueError(f"{path}:{i + 1}: bad preference keys {sorted(d)}")
            records.append(
                PreferenceRecord(
                    prompt=d["prompt"],
                    chosen=d["chosen"],
                    rejected=d["rejected"],
                    meta=d["meta"],
                )
            )
    return records


def _tokens(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class CategoryStats:
    """Counts and average whitespace-token lengths for one task category."""

    name: str
    n_candidates: int
    n_correct: int
    pct_correct: float
    avg_question_tokens: float
    avg_first_attempt_tokens: float
    avg_reflection_tokens: float
    avg_corrected_tokens: float

    def to_dict(self) -> dict:
        return {
            "category": self.name,
            "n_candidates": self.n_candidates,
            "n_correct": self.n_correct,
            "pct_correct": round(self.pct_correct, 2),
            "avg_question_tokens": round(self.avg_question_tokens, 1),
            "avg_first_attempt_tokens": round(self.avg_first_attempt_tokens, 1),
            "avg_reflection_tokens": round(self.avg_reflection_tokens, 1),
            "avg_corrected_tokens": round(self.avg_corrected_tokens, 1),
        }


@dataclass(frozen=True)
class DatasetStats:
    per_category: tuple[CategoryStats, ...]
    total: CategoryStats

    def to_dict(self) -> dict:
        return {
            "per_category": [c.to_dict() for c in self.per_category],
            "total": self.total.to_dict(),
        }


def _stats_for(name: str, rows: list[tuple[CandidateSample, TaskItem]]) -> CategoryStats:
    n = len(rows)
    n_correct = sum(1 for c, _ in rows if c.outcome == "correct")

    def avg(values: list[int]) -> float:
        return sum(values) / n if n else 0.0

    return CategoryStats(
        name=name,
        n_candidates=n,
        n_correct=n_correct,
        # multiply before dividing so e.g. 14/100 reports exactly 14.0
        pct_correct=(n_correct * 100.0 / n) if n else 0.0,
        avg_question_tokens=avg([_tokens(t.question) for _, t in rows]),
        avg_first_attempt_tokens=avg([_tokens(c.first_scratchpad) for c, _ in rows]),
        avg_reflection_tokens=avg([_tokens(c.reflection.text) for c, _ in rows]),
        avg_corrected_tokens=avg([_tokens(c.corrected_scratchpad) for c, _ in rows]),
    )


def compute_stats(
    candidates: list[CandidateSample], tasks: dict[str, TaskItem]
) -> DatasetStats:
    """Per-category candidate counts, correct rates, and length averages.

    Categories that collected nothing are omitted; the total row covers
    every candidate, so per-category counts reconcile with it.
    """
    rows = [(c, _require_task(tasks, c.task_id)) for c in candidates]
    by_cat: dict[str, list[tuple[CandidateSample, TaskItem]]] = {}
    for c, t in rows:
        by_cat.setdefault(t.task_category or t.source_dataset, []).append((c, t))
    per_category = tuple(
        _stats_for(name, group) for name, group in sorted(by_cat.items())
    )
    total = _stats_for("total", rows)
    if sum(c.n_candidates for c in per_category) != total.n_candidates:
        raise AssertionError("per-category counts must sum to the total")
    return DatasetStats(per_category=per_category, total=total)


def stats_table(stats: DatasetStats) -> str:
    """Aligned text table for terminals; same numbers as the JSON form."""
    header = (
        "category",
        "n",
        "correct",
        "pct",
        "q_tok",
        "first_tok",
        "refl_tok",
        "corr_tok",
    )
    rows = [header]
    for c in [*stats.per_category, stats.total]:
        d = c.to_dict()
        rows.append(
            (
                d["category"],
                str(d["n_candidates"]),
                str(d["n_correct"]),
                f"{d['pct_correct']:.2f}",
                f"{d['avg_question_tokens']:.1f}",
                f"{d['avg_first_attempt_tokens']:.1f}",
                f"{d['avg_reflection_tokens']:.1f}",
                f"{d['avg_corrected_tokens']:.1f}",
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(r)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def outcome_histogram(candidates: list[CandidateSample]) -> dict[str, int]:
    return dict(Counter(c.outcome for c in candidates))
