"""Turn raw candidates into the three curated dataset families.

- correct-only: candidates whose retry was verified correct.
- outcome pairs: correct-vs-incorrect retries for the same failed attempt.
- judged pairs: two correct retries, ranked by a pairwise judge call with
  position debiasing (ask twice with sides swapped, keep only agreements).
"""

from __future__ import annotations

import itertools
import logging
import random
from dataclasses import dataclass

from .core import (
    JUDGED_PREF,
    OUTCOME_PM,
    CandidateSample,
    PairContext,
    PairMember,
    PreferencePair,
    TaskItem,
)
from .gateway import (
    ChatGateway,
    CompletionRequest,
    ProtocolError,
    TransportError,
    derive_seed,
    user,
)
from .instructions import load_prompt

log = logging.getLogger(__name__)

PAIRING_MODES = ("cross_product", "one_per_question", "capped_cross")
DEFAULT_PAIR_CAP = 8


@dataclass(frozen=True)
class PairingPolicy:
    """How many pairs to form per question group, and with what randomness."""

    mode: str = "capped_cross"
    cap: int = DEFAULT_PAIR_CAP
    seed: int = 0
    debias: bool = True  # judge twice with sides swapped

    def __post_init__(self) -> None:
        if self.mode not in PAIRING_MODES:
            raise ValueError(f"unknown pairing mode {self.mode!r}")
        if self.cap < 1:
            raise ValueError("cap must be >= 1")


def _sort_key(c: CandidateSample) -> tuple:
    return (c.task_id, c.reflection.instruction_id, c.reflection.sampling.sample_index)


def build_correct_set(candidates: list[CandidateSample]) -> list[CandidateSample]:
    """Keep only candidates whose retry landed on the right answer."""
    kept = sorted((c for c in candidates if c.outcome == "correct"), key=_sort_key)
    if candidates and not kept:
        log.warning("no candidate retries were correct; correct-only set is empty")
    return kept


def _context_of(c: CandidateSample) -> PairContext:
    return PairContext(
        task_id=c.task_id,
        first_answer=c.first_answer,
        first_feedback=c.first_feedback,
        first_scratchpad=c.first_scratchpad,
    )


def _member_of(c: CandidateSample) -> PairMember:
    return PairMember(
        reflection=c.reflection,
        corrected_answer=c.corrected_answer,
        corrected_scratchpad=c.corrected_scratchpad,
        outcome=c.outcome,
    )


def _group(candidates: list[CandidateSample]) -> dict[tuple[str, str], list[CandidateSample]]:
    groups: dict[tuple[str, str], list[CandidateSample]] = {}
    for c in sorted(candidates, key=_sort_key):
        groups.setdefault((c.task_id, c.first_answer), []).append(c)
    return groups


def build_outcome_pairs(
    candidates: list[CandidateSample], policy: PairingPolicy | None = None
) -> list[PreferencePair]:
    """Pair correct against incorrect retries within each question group.

    Groups are keyed by (task, first answer) so both members share one
    failure context. Identical reflection texts never form a pair.
    """
    policy = policy or PairingPolicy()
    pairs: list[PreferencePair] = []
    for (task_id, first_answer), group in sorted(_group(candidates).items()):
        correct = [c for c in group if c.outcome == "correct"]
        incorrect = [c for c in group if c.outcome == "incorrect"]
        if not correct or not incorrect:
            continue
        combos = [
            (c, w)
            for c, w in itertools.product(correct, incorrect)
            if c.reflection.text != w.reflection.text
        ]
        if not combos:
            continue
        if policy.mode == "one_per_question":
            rng = random.Random(derive_seed(policy.seed, "pm", task_id, first_answer))
            combos = [combos[rng.randrange(len(combos))]]
        elif policy.mode == "capped_cross" and len(combos) > policy.cap:
            rng = random.Random(derive_seed(policy.seed, "pm", task_id, first_answer))
            idx = sorted(rng.sample(range(len(combos)), policy.cap))
            combos = [combos[i] for i in idx]
        for c, w in combos:
            pairs.append(
                PreferencePair(
                    context=_context_of(c),
                    chosen=_member_of(c),
                    rejected=_member_of(w),
                    kind=OUTCOME_PM,
                )
            )
    return pairs


@dataclass(frozen=True)
class JudgeVote:
    """One judge call: which side of the presented pair won."""

    winner: str  # "A" | "B" | "unparsable"
    swapped: bool
    raw: str

    def to_dict(self) -> dict:
        return {"winner": self.winner, "swapped": self.swapped, "raw": self.raw}


@dataclass(frozen=True)
class JudgeDecision:
    """Aggregated verdict over one or two votes. first/second refer to the
    caller's argument order, not the presentation order."""

    winner: str  # "first" | "second" | "tie"
    votes: tuple[JudgeVote, ...]
    reason: str | None = None


_A_TOKEN = "Student A"
_B_TOKEN = "Student B"


def _parse_vote(raw: str, swapped: bool) -> JudgeVote:
    has_a = _A_TOKEN in raw
    has_b = _B_TOKEN in raw
    if has_a == has_b:  # both or neither
        return JudgeVote(winner="unparsable", swapped=swapped, raw=raw)
    return JudgeVote(winner="A" if has_a else "B", swapped=swapped, raw=raw)


def _vote_for_first(vote: JudgeVote) -> str | None:
    """Map a positional vote back to the caller's argument order."""
    if vote.winner == "unparsable":
        return None
    if not vote.swapped:
        return "first" if vote.winner == "A" else "second"
    return "second" if vote.winner == "A" else "first"


def judge_preference(
    task: TaskItem,
    first_scratchpad: str,
    reflection_first: str,
    reflection_second: str,
    gateway: ChatGateway,
    *,
    debias: bool = True,
    model: str = "default",
) -> JudgeDecision:
    """Ask which of two reflections better explains and fixes the failure.

    With debiasing the question is asked twice with sides swapped and the
    verdicts must agree; disagreement or any unparsable reply is a tie.
    """
    template = load_prompt("judge.txt")

    def ask(ra: str, rb: str, swapped: bool) -> JudgeVote:
        prompt = (
            template.replace("{Question}", task.question)
            .replace("{Answer}", task.gold_answer)
            .replace("{Scratchpad}", first_scratchpad)
            .replace("{ReflectionA}", ra)
            .replace("{ReflectionB}", rb)
        )
        req = CompletionRequest(
            messages=(user(prompt),), model=model, temperature=0.0, max_new_tokens=16
        )
        return _parse_vote(gateway.complete(req).text or "", swapped)

    votes = [ask(reflection_first, reflection_second, swapped=False)]
    if debias:
        votes.append(ask(reflection_second, reflection_first, swapped=True))
    mapped = [_vote_for_first(v) for v in votes]
    if any(m is None for m in mapped):
        return JudgeDecision("tie", tuple(votes), reason="unparsable vote")
    if len(set(mapped)) != 1:
        return JudgeDecision("tie", tuple(votes), reason="position disagreement")
    return JudgeDecision(mapped[0], tuple(votes))


@dataclass(frozen=True)
class JudgedPairStats:
    n_groups: int
    n_eligible_pairs: int
    n_judged: int
    n_kept: int
    n_ties: int
    n_errors: int


def build_judged_pairs(
    correct_set: list[CandidateSample],
    tasks: dict[str, TaskItem],
    gateway: ChatGateway,
    policy: PairingPolicy | None = None,
    *,
    model: str = "default",
) -> tuple[list[PreferencePair], JudgedPairStats]:
    """Rank same-question correct retries with the pairwise judge.

    Candidate pairs come from each (task, first answer) group of the
    correct-only set; the per-group count follows the pairing policy. Ties
    and judge failures drop the pair. Votes ride along on each kept pair.
    """
    policy = policy or PairingPolicy()
    pairs: list[PreferencePair] = []
    n_groups = n_eligible = n_judged = n_ties = n_errors = 0
    for (task_id, first_answer), group in sorted(_group(correct_set).items()):
        if any(c.outcome != "correct" for c in group):
            raise ValueError("judged pairs take the correct-only set as input")
        if len(group) < 2:
            continue
        task = tasks.get(task_id)
        if task is None:
            raise KeyError(f"no task item for candidate task id {task_id!r}")
        n_groups += 1
        combos = [
            (x, y)
            for x, y in itertools.combinations(group, 2)
            if x.reflection.text != y.reflection.text
        ]
        n_eligible += len(combos)
        if not combos:
            continue
        if policy.mode == "one_per_question":
            rng = random.Random(derive_seed(policy.seed, "pref", task_id, first_answer))
            combos = [combos[rng.randrange(len(combos))]]
        elif policy.mode == "capped_cross" and len(combos) > policy.cap:
            rng = random.Random(derive_seed(policy.seed, "pref", task_id, first_answer))
            idx = sorted(rng.sample(range(len(combos)), policy.cap))
            combos = [combos[i] for i in idx]
        for x, y in combos:
            n_judged += 1
            try:
                decision = judge_preference(
                    task,
                    x.first_scratchpad,
                    x.reflection.text,
                    y.reflection.text,
                    gateway,
                    debias=policy.debias,
                    model=model,
                )
            except (TransportError, ProtocolError) as exc:
                n_errors += 1
                log.warning("judge call failed for task %s: %s", task_id, exc)
                continue
            if decision.winner == "tie":
                n_ties += 1
                continue
            chosen, rejected = (x, y) if decision.winner == "first" else (y, x)
            pairs.append(
                PreferencePair(
                    context=_context_of(chosen),
                    chosen=_member_of(chosen),
                    rejected=_member_of(rejected),
                    kind=JUDGED_PREF,
                    judge_votes=tuple(v.to_dict() for v in decision.votes),
                )
            )
    stats = JudgedPairStats(
        n_groups=n_groups,
        n_eligible_pairs=n_eligible,
        n_judged=n_judged,
        n_kept=len(pairs),
        n_ties=n_ties,
        n_errors=n_errors,
    )
    return pairs, stats
