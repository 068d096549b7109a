"""Multi-turn scoring, error tagging, and reflection/thought correlation.

Accuracy-by-turn counts an item as solved at the first turn whose answer
verified correct; the rollout stops there, so with an oracle verifier the
curve can only rise. Error tagging asks an annotator model to label failed
attempts against a fixed taxonomy. Correlation scores whether reflections
that resemble the retry's reasoning actually lead to correct retries.
"""

from __future__ import annotations

import csv
import io
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import EvalItemOutcome, EvalReport, GenerationPolicy, TaskItem
from .gateway import (
    ChatGateway,
    CompletionRequest,
    ProtocolError,
    TransportError,
    user,
)
from .instructions import load_prompt
from .rollout import run_rollout, thought_text
from .verification import Verifier

# ---------------------------------------------------------------------------
# accuracy by turn


def report_from_outcomes(
    outcomes: list[EvalItemOutcome], max_turns: int
) -> EvalReport:
    """Fold per-item outcomes into the cumulative accuracy curve."""
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    n = len(outcomes)
    solved_counts = []
    for t in range(1, max_turns + 1):
        solved_counts.append(
            sum(
                1
                for o in outcomes
                if o.solved_turn is not None and o.solved_turn <= t
            )
        )
    acc_at = tuple((c / n if n else 0.0) for c in solved_counts)
    delta = acc_at[1] - acc_at[0] if max_turns >= 2 else None
    return EvalReport(
        n_items=n,
        max_turns=max_turns,
        acc_at=acc_at,
        solved_counts=tuple(solved_counts),
        delta_t1_t2=delta,
        per_item=tuple(sorted(outcomes, key=lambda o: o.task_id)),
    )


def evaluate(
    tasks: list[TaskItem],
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
    *,
    reflection_mode: str = "plain",
    workers: int = 4,
) -> EvalReport:
    """Run the retry loop on every task and report accuracy per turn.

    An aborted rollout counts as never solved at every turn.
    """
    tasks = sorted(tasks, key=lambda t: t.id)

    def one(task: TaskItem) -> EvalItemOutcome:
        trace = run_rollout(
            task, gateway, policy, verifier, reflection_mode=reflection_mode
        )
        return EvalItemOutcome(
            task_id=task.id,
            solved_turn=trace.status.turn if trace.status.is_solved else None,
            turns_attempted=len(trace.turns),
            aborted=trace.status.is_aborted,
            abort_reason=trace.status.reason,
        )

    if not tasks:
        return report_from_outcomes([], policy.max_turns)
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(tasks)))) as tp:
        outcomes = list(tp.map(one, tasks))
    return report_from_outcomes(outcomes, policy.max_turns)


def curve_rows(report: EvalReport) -> list[tuple[int, int, float]]:
    """(turn, solved count, cumulative accuracy) rows for the curve."""
    return [
        (t + 1, report.solved_counts[t], report.acc_at[t])
        for t in range(report.max_turns)
    ]


def curve_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["turn", "solved", "accuracy"])
    for turn, solved, acc in curve_rows(report):
        writer.writerow([turn, solved, f"{acc:.6f}"])
    return buf.getvalue()


def report_to_dict(report: EvalReport) -> dict:
    return {
        "n_items": report.n_items,
        "max_turns": report.max_turns,
        "acc_at": list(report.acc_at),
        "solved_counts": list(report.solved_counts),
        "delta_t1_t2": report.delta_t1_t2,
        "summary": report.summary(),
        "per_item": [
            {
                "task_id": o.task_id,
                "solved_turn": o.solved_turn,
                "turns_attempted": o.turns_attempted,
                "aborted": o.aborted,
                "abort_reason": o.abort_reason,
            }
            for o in report.per_item
        ],
        "error_tag_histogram": report.error_tag_histogram,
    }


# ---------------------------------------------------------------------------
# error taxonomy


@dataclass(frozen=True)
class ErrorTag:
    """One fine-grained label with its coarse group."""

    code: str
    label: str
    coarse_code: str
    coarse_label: str


_TAXONOMY_ROWS = [
    ("1-1", "Calculation Error", "1", "Mathematical Errors"),
    ("1-2", "Algorithm Error", "1", "Mathematical Errors"),
    ("2-1", "Flawed Rationale Error", "2", "Logic and Reasoning Errors"),
    ("2-2", "Internal Inconsistency", "2", "Logic and Reasoning Errors"),
    ("3-1", "Context Misinterpretation", "3", "Instruction Violation"),
    ("3-2", "Incomplete or Irrelevant Response", "3", "Instruction Violation"),
    ("3-3", "Format Discrepancy", "3", "Instruction Violation"),
    ("4-1", "Factual Errors", "4", "Factual Errors"),
    ("5-1", "No Errors Detected", "5", "No Errors"),
]

TAXONOMY: dict[str, ErrorTag] = {
    code: ErrorTag(code, label, coarse, coarse_label)
    for code, label, coarse, coarse_label in _TAXONOMY_ROWS
}

UNLABELED = ErrorTag("unlabeled", "Unlabeled", "unlabeled", "Unlabeled")

_BY_LABEL = {tag.label.lower(): tag for tag in TAXONOMY.values()}

_LABELS_LINE_RE = re.compile(r"Labels\s*:\s*\[([^\]]*)\]", re.IGNORECASE)
_BARE_BRACKET_RE = re.compile(r"\[([^\]]*)\]")


def parse_error_labels(reply: str) -> list[ErrorTag] | None:
    """Extract taxonomy tags from an annotator reply; None when unusable.

    Accepts "- Labels: [...]" or any bracketed list; entries may be codes
    ("2-1") or label names, comma-separated. Every entry must resolve.
    """
    m = _LABELS_LINE_RE.search(reply) or _BARE_BRACKET_RE.search(reply)
    if not m:
        return None
    entries = [e.strip() for e in m.group(1).split(",") if e.strip()]
    if not entries:
        return None
    tags: list[ErrorTag] = []
    for entry in entries:
        code_match = re.match(r"^(\d-\d)\b", entry)
        if code_match and code_match.group(1) in TAXONOMY:
            tag = TAXONOMY[code_match.group(1)]
        else:
            tag = _BY_LABEL.get(entry.lower())
        if tag is None:
            return None
        if tag not in tags:
            tags.append(tag)
    return tags


def tag_errors(
    items: list[tuple[str, str, str]],
    gateway: ChatGateway,
    *,
    model: str = "default",
    workers: int = 4,
) -> list[list[ErrorTag]]:
    """Label (question, failed thought, reflection) triples.

    One retry on an unusable reply; a second unusable reply or a gateway
    failure yields the Unlabeled sentinel, never a crash.
    """
    template = load_prompt("error_tags.txt")

    def one(item: tuple[str, str, str]) -> list[ErrorTag]:
        question, thought, reflection = item
        prompt = (
            template.replace("{Question}", question)
            .replace("{Thought}", thought)
            .replace("{Reflection}", reflection)
        )
        for attempt in range(2):
            req = CompletionRequest(
                messages=(user(prompt),),
                model=model,
                temperature=0.0,
                max_new_tokens=64,
                seed=attempt,
            )
            try:
                reply = gateway.complete(req).text or ""
            except (TransportError, ProtocolError):
                return [UNLABELED]
            tags = parse_error_labels(reply)
            if tags is not None:
                return tags
        return [UNLABELED]

    if not items:
        return []
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(items)))) as tp:
        return list(tp.map(one, items))


def tag_histogram(tag_lists: list[list[ErrorTag]], *, coarse: bool = False) -> dict[str, int]:
    counter: Counter[str] = Counter()
    for tags in tag_lists:
        for tag in tags:
            key = (
                f"{tag.coarse_code} {tag.coarse_label}"
                if coarse
                else f"{tag.code} {tag.label}"
            )
            counter[key] += 1
    return dict(sorted(counter.items()))


# ---------------------------------------------------------------------------
# reflection vs retry-thought similarity


_WORD_RE = re.compile(r"[a-z0-9']+")


def _bow(text: str) -> Counter:
    return Counter(_WORD_RE.findall(text.lower()))


def cosine_similarity(a: str, b: str) -> float:
    """Bag-of-words cosine in [0, 1]; 0 when either side has no tokens."""
    va, vb = _bow(a), _bow(b)
    if not va or not vb:
        return 0.0
    common = set(va) & set(vb)
    dot = sum(va[w] * vb[w] for w in common)
    na = np.sqrt(sum(v * v for v in va.values()))
    nb = np.sqrt(sum(v * v for v in vb.values()))
    return float(dot / (na * nb))


def pearson_r(xs: list[float], ys: list[float]) -> float | None:
    """Sample correlation; None when undefined (too short, zero variance)."""
    if len(xs) != len(ys):
        raise ValueError("length mismatch")
    if len(xs) < 2:
        return None
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    sx = float(np.std(x))
    sy = float(np.std(y))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.mean((x - np.mean(x)) * (y - np.mean(y))) / (sx * sy))


@dataclass(frozen=True)
class BinStat:
    """One similarity bin: its range, size, and the correct-retry rate."""

    lo: float
    hi: float
    n: int
    mean_similarity: float
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "lo": round(self.lo, 6),
            "hi": round(self.hi, 6),
            "n": self.n,
            "mean_similarity": round(self.mean_similarity, 6),
            "accuracy": round(self.accuracy, 6),
        }


@dataclass(frozen=True)
class CorrelationReport:
    n_pairs: int
    pearson: float | None
    bins: tuple[BinStat, ...]

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "pearson": self.pearson,
            "bins": [b.to_dict() for b in self.bins],
        }


def correlate_similarity_with_outcome(
    similarities: list[float], correct: list[bool], *, n_bins: int = 10
) -> CorrelationReport:
    """Pearson r between similarity and retry correctness, plus binned view.

    Bins split [0, 1] into equal widths; empty bins are kept so the report
    always has n_bins rows.
    """
    if len(similarities) != len(correct):
        raise ValueError("length mismatch")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    r = pearson_r(similarities, [1.0 if c else 0.0 for c in correct])
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins: list[BinStat] = []
    for i in range(n_bins):
        lo, hi = float(edges[i]), float(edges[i + 1])
        if i + 1 < n_bins:
            members = [
                (s, c) for s, c in zip(similarities, correct) if lo <= s < hi
            ]
        else:  # top bin closed so similarity 1.0 lands somewhere
            members = [
                (s, c) for s, c in zip(similarities, correct) if lo <= s <= hi
            ]
        n = len(members)
        bins.append(
            BinStat(
                lo=lo,
                hi=hi,
                n=n,
                mean_similarity=(sum(s for s, _ in members) / n) if n else 0.0,
                accuracy=(sum(1 for _, c in members if c) / n) if n else 0.0,
            )
        )
    return CorrelationReport(
        n_pairs=len(similarities), pearson=r, bins=tuple(bins)
    )


def reflection_thought_correlation(
    reflections: list[str],
    corrected_scratchpads: list[str],
    outcomes: list[str],
    *,
    n_bins: int = 10,
) -> CorrelationReport:
    """Similarity between each reflection and its retry's thought text,
    correlated with whether that retry was correct."""
    if not (len(reflections) == len(corrected_scratchpads) == len(outcomes)):
        raise ValueError("length mismatch")
    sims = [
        cosine_similarity(r, thought_text(s) or s)
        for r, s in zip(reflections, corrected_scratchpads)
    ]
    correct = [o == "correct" for o in outcomes]
    return correlate_similarity_with_outcome(sims, correct, n_bins=n_bins)
