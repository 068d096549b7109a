"""Domain types shared across the pipeline.

Everything here is an immutable value record: instances are safe to share
across worker threads and to use as inputs to pure transforms. The one
operation in this module, :func:`validate_trace`, reports invariant
violations instead of raising so that malformed traces can be logged and
reconciled rather than lost.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class AnswerKind(str, Enum):
    """How an extracted answer is matched against the gold answer."""

    MULTIPLE_CHOICE = "multiple_choice"
    NUMERIC = "numeric"
    FREE_TEXT = "free_text"
    CODE = "code"


class FeedbackValue(str, Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    UNVERIFIED = "Unverified"


class VerifierKind(str, Enum):
    ORACLE = "oracle"
    SELF_JUDGMENT = "self_judgment"
    EXTERNAL_RUNNER = "external_runner"


@dataclass(frozen=True)
class Feedback:
    """Binary correctness verdict attached to a turn."""

    value: FeedbackValue
    verifier_kind: VerifierKind = VerifierKind.ORACLE
    reason: str | None = None

    @property
    def is_correct(self) -> bool:
        return self.value is FeedbackValue.CORRECT

    @property
    def is_incorrect(self) -> bool:
        return self.value is FeedbackValue.INCORRECT


UNVERIFIED = Feedback(FeedbackValue.UNVERIFIED)


@dataclass(frozen=True)
class TaskItem:
    """One question with its gold answer and few-shot exemplars."""

    id: str
    source_dataset: str
    task_category: str
    question: str
    gold_answer: str
    answer_kind: AnswerKind
    fewshot: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be non-empty")
        if not self.gold_answer:
            raise ValueError(f"task {self.id}: gold_answer must be non-empty")


@dataclass(frozen=True)
class Turn:
    """One question-answering attempt inside a rollout.

    ``extracted_answer`` is the raw text captured from the terminal action,
    present iff the scratchpad contains one. Turn 1 holds the initial
    answer; later turns hold revised answers.
    """

    index: int
    scratchpad: str
    extracted_answer: str | None
    feedback: Feedback = UNVERIFIED

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("turn index starts at 1")


@dataclass(frozen=True)
class SamplingInfo:
    """How one reflection sample was drawn."""

    temperature: float
    seed: int
    sample_index: int  # j in 1..k


@dataclass(frozen=True)
class ReflectionRecord:
    """One reflection text plus the instruction and draw that produced it."""

    instruction_id: str
    text: str
    sampling: SamplingInfo
    source: str = "self"  # "self" | "teacher"


@dataclass(frozen=True)
class TraceStatus:
    """Terminal state of a rollout: solved at some turn, unsolved, or aborted."""

    kind: str  # "solved" | "unsolved" | "aborted"
    turn: int | None = None
    reason: str | None = None

    @classmethod
    def solved(cls, turn: int) -> "TraceStatus":
        return cls("solved", turn=turn)

    @classmethod
    def unsolved(cls) -> "TraceStatus":
        return cls("unsolved")

    @classmethod
    def aborted(cls, reason: str) -> "TraceStatus":
        return cls("aborted", reason=reason)

    @property
    def is_solved(self) -> bool:
        return self.kind == "solved"

    @property
    def is_aborted(self) -> bool:
        return self.kind == "aborted"


@dataclass(frozen=True)
class RolloutTrace:
    """Ordered turns and the reflections generated between them."""

    task_id: str
    turns: tuple[Turn, ...]
    reflections: tuple[ReflectionRecord, ...]
    status: TraceStatus


@dataclass(frozen=True)
class CandidateSample:
    """One (question, failed answer, feedback, reflection, revision) tuple.

    The atom of the raw candidate pool: generated only for first attempts
    judged Incorrect, with the outcome of the revised answer decided by the
    oracle verifier so that curation is replayable.
    """

    task_id: str
    first_answer: str
    first_feedback: Feedback
    first_scratchpad: str
    reflection: ReflectionRecord
    corrected_answer: str
    corrected_scratchpad: str
    outcome: str  # "correct" | "incorrect"

    def __post_init__(self) -> None:
        if not self.first_feedback.is_incorrect:
            raise ValueError("candidate requires an Incorrect first attempt")
        if self.outcome not in ("correct", "incorrect"):
            raise ValueError(f"bad outcome {self.outcome!r}")


@dataclass(frozen=True)
class PairContext:
    """The shared (question, failed answer, feedback) context of a pair."""

    task_id: str
    first_answer: str
    first_feedback: Feedback
    first_scratchpad: str


@dataclass(frozen=True)
class PairMember:
    reflection: ReflectionRecord
    corrected_answer: str
    corrected_scratchpad: str
    outcome: str


OUTCOME_PM = "outcome_pm"
JUDGED_PREF = "judged_pref"


@dataclass(frozen=True)
class PreferencePair:
    """A chosen/rejected reflection pair over one failed-attempt context."""

    context: PairContext
    chosen: PairMember
    rejected: PairMember
    kind: str  # OUTCOME_PM | JUDGED_PREF
    judge_votes: tuple[dict, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in (OUTCOME_PM, JUDGED_PREF):
            raise ValueError(f"bad pair kind {self.kind!r}")
        if self.chosen.reflection.text == self.rejected.reflection.text:
            raise ValueError("chosen and rejected reflections must differ")
        if self.kind == OUTCOME_PM:
            if self.chosen.outcome != "correct" or self.rejected.outcome != "incorrect":
                raise ValueError("outcome pair must be (correct, incorrect)")
        else:
            if self.chosen.outcome != "correct" or self.rejected.outcome != "correct":
                raise ValueError("judged pair members must both be correct outcomes")


POOL_MIN_PICK = 1
POOL_SIZE = 32


@dataclass(frozen=True)
class GenerationPolicy:
    """Knobs for candidate generation and rollouts.

    ``k`` reflection+revision samples are drawn for each of ``m``
    instructions per failed question; ``max_turns`` bounds the
    verify/reflect/revise loop.
    """

    k: int = 2
    m: int = 5
    max_turns: int = 2
    seed: int = 0
    sample_temperature: float = 0.7  # reflection + revision sampling
    qa_temperature: float = 0.0  # first-turn and evaluation turns
    max_new_tokens: int = 512
    step_budget: int = 6  # thought/action cycles within one turn
    per_dataset_cap: int | None = None
    per_question_instructions: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not POOL_MIN_PICK <= self.m <= POOL_SIZE:
            raise ValueError(f"m must be in [{POOL_MIN_PICK}, {POOL_SIZE}]")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.step_budget < 1:
            raise ValueError("step_budget must be >= 1")


@dataclass(frozen=True)
class EvalItemOutcome:
    """Per-task rollout result: the first turn at which it was solved, if any."""

    task_id: str
    solved_turn: int | None
    turns_attempted: int
    aborted: bool = False
    abort_reason: str | None = None


@dataclass(frozen=True)
class EvalReport:
    """Accuracy-by-turn report over a task set.

    ``acc_at[t-1]`` is the fraction of items solved by turn t under
    terminate-on-correct. ``delta_t1_t2`` is ``acc_at[1] - acc_at[0]``
    when at least two turns were run.
    """

    n_items: int
    max_turns: int
    acc_at: tuple[float, ...]
    solved_counts: tuple[int, ...]
    delta_t1_t2: float | None
    per_item: tuple[EvalItemOutcome, ...]
    error_tag_histogram: dict[str, int] | None = None

    def __post_init__(self) -> None:
        for a in self.acc_at:
            if not 0.0 <= a <= 1.0:
                raise ValueError("accuracy out of [0, 1]")

    def summary(self) -> str:
        """Formatted ``Acc@t1 / Acc@t2 / delta`` line, one decimal."""
        acc1 = self.acc_at[0] if self.acc_at else 0.0
        parts = [f"{100 * acc1:.1f}%"]
        if len(self.acc_at) >= 2:
            parts.append(f"{100 * self.acc_at[1]:.1f}%")
            parts.append(f"{100 * (self.delta_t1_t2 or 0.0):+.1f}%")
        return " / ".join(parts)


def _has_terminal_action(scratchpad: str) -> bool:
    return "Finish[" in scratchpad


def validate_trace(trace: RolloutTrace) -> list[str]:
    """Return human-readable descriptions of every invariant violation.

    An empty list means the trace is well-formed. Never raises.
    """
    problems: list[str] = []
    indices = [t.index for t in trace.turns]
    if indices != list(range(1, len(indices) + 1)):
        problems.append(f"non-contiguous turn indices: {indices}")

    status = trace.status
    if not status.is_aborted:
        expected = max(len(trace.turns) - 1, 0)
        if len(trace.reflections) != expected:
            problems.append(
                f"reflection count mismatch: {len(trace.reflections)} reflections "
                f"for {len(trace.turns)} turns"
            )

    if status.is_solved:
        solved = status.turn
        by_index = {t.index: t for t in trace.turns}
        turn = by_index.get(solved)
        if turn is None:
            problems.append(f"solved turn {solved} missing from trace")
        elif not turn.feedback.is_correct:
            problems.append(f"solved turn not Correct: turn {solved}")
        if any(t.index > solved for t in trace.turns):
            problems.append(f"turns present after solved turn {solved}")

    for turn in trace.turns:
        has_answer = turn.extracted_answer is not None
        if has_answer != _has_terminal_action(turn.scratchpad):
            problems.append(
                f"turn {turn.index}: extracted_answer inconsistent with scratchpad"
            )

    return problems
