"""Turn execution: first attempts, reflections, corrected retries.

A turn is a budgeted loop of thought/action steps against the gateway; the
scratchpad accumulates model output. On a wrong first turn we draw
reflections (one per selected instruction, k samples each) and rerun the
question with the reflection in context. `generate_dataset` drives this over
a task list and returns every candidate plus an abort record for each draw
that produced nothing usable.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .core import (
    CandidateSample,
    GenerationPolicy,
    ReflectionRecord,
    RolloutTrace,
    SamplingInfo,
    TaskItem,
    TraceStatus,
    Turn,
)
from .gateway import (
    ChatGateway,
    CompletionRequest,
    ProtocolError,
    TransportError,
    derive_seed,
    user,
)
from .instructions import InstructionPool, InstructionSpec, default_pool, load_prompt
from .verification import Verifier

PLAIN_INSTRUCTION_ID = "plain"
ONE_STAGE_INSTRUCTION_ID = "one_stage"

_MARKER_RE = re.compile(r"(?m)^[ \t]*(Thought|Action|Observation)[ \t]*:")
_OBSERVATION_ACK = "Observation: OK. Continue with the next Thought or Action."


class TurnAbort(Exception):
    """A draw produced nothing usable (empty reflection, unparsable output)."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class AbortRecord:
    """Bookkeeping for a reflection/correction draw that was dropped."""

    task_id: str
    instruction_id: str
    sample_index: int
    stage: str  # "first_turn" | "reflection" | "correction" | "one_stage"
    reason: str


def extract_finish(text: str) -> str | None:
    """Pull the answer out of the last ``Finish[...]``, bracket-balanced."""
    start = text.rfind("Finish[")
    if start < 0:
        return None
    i = start + len("Finish[")
    depth = 1
    out: list[str] = []
    while i < len(text):
        ch = text[i]
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return "".join(out).strip()
        out.append(ch)
        i += 1
    return None  # unclosed bracket


def split_segments(scratchpad: str) -> list[tuple[str, str]]:
    """Break a scratchpad into (kind, text) pieces.

    Kinds are "thought", "action", "observation", or "other" for text before
    the first marker. Marker labels are stripped from the text.
    """
    pieces: list[tuple[str, str]] = []
    matches = list(_MARKER_RE.finditer(scratchpad))
    if not matches:
        body = scratchpad.strip()
        return [("other", body)] if body else []
    head = scratchpad[: matches[0].start()].strip()
    if head:
        pieces.append(("other", head))
    for idx, m in enumerate(matches):
        end = matches[idx + 1].start() if idx + 1 < len(matches) else len(scratchpad)
        body = scratchpad[m.end() : end].strip()
        pieces.append((m.group(1).lower(), body))
    return pieces


def thought_text(scratchpad: str) -> str:
    """All thought segments of a scratchpad joined, for similarity scoring."""
    return "\n".join(body for kind, body in split_segments(scratchpad) if kind == "thought")


def _render_examples(task: TaskItem) -> str:
    return "\n\n".join(task.fewshot)


def _fill(template: str, mapping: dict[str, str]) -> str:
    out = template
    for key, value in mapping.items():
        out = out.replace("{" + key + "}", value)
    return out


def _run_step_loop(
    task: TaskItem,
    gateway: ChatGateway,
    policy: GenerationPolicy,
    *,
    template: str,
    extra: dict[str, str],
    seed_parts: tuple,
    temperature: float,
) -> tuple[str, str | None]:
    """Shared thought/action loop; returns (scratchpad, extracted answer)."""
    scratchpad = ""
    for step in range(policy.step_budget):
        prompt = _fill(
            template,
            {
                "Examples": _render_examples(task),
                "Question": task.question,
                "Scratchpad": scratchpad,
                **extra,
            },
        )
        req = CompletionRequest(
            messages=(user(prompt),),
            temperature=temperature,
            max_new_tokens=policy.max_new_tokens,
            seed=derive_seed(policy.seed, *seed_parts, step),
        )
        reply = gateway.complete(req).text or ""
        reply = reply.strip()
        if not reply:
            break
        scratchpad = reply if not scratchpad else scratchpad + "\n" + reply
        answer = extract_finish(reply)
        if answer is not None:
            return scratchpad, answer
        # No terminal action yet: acknowledge and let the model continue.
        scratchpad += "\n" + _OBSERVATION_ACK
    return scratchpad, None


def run_first_turn(
    task: TaskItem,
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
) -> Turn:
    """Initial attempt. Budget exhaustion yields an answerless, wrong turn."""
    scratchpad, answer = _run_step_loop(
        task,
        gateway,
        policy,
        template=load_prompt("react.txt"),
        extra={},
        seed_parts=(task.id, "first"),
        temperature=policy.qa_temperature,
    )
    feedback = verifier.verify(task, answer)
    return Turn(index=1, scratchpad=scratchpad, extracted_answer=answer, feedback=feedback)


def generate_reflection(
    task: TaskItem,
    failed_turn: Turn,
    gateway: ChatGateway,
    policy: GenerationPolicy,
    *,
    instruction: InstructionSpec | None = None,
    pool: InstructionPool | None = None,
    sample_index: int = 1,
    source: str = "self",
) -> ReflectionRecord:
    """Draw one reflection on a failed turn.

    With an instruction the three-stage frame is used; without one the plain
    frame. Reflecting on a correct turn is a caller bug, not data.
    """
    if failed_turn.feedback.is_correct:
        raise ValueError("reflect_on_correct: refusing to reflect on a correct turn")
    if instruction is not None:
        prompt = (pool or default_pool()).render_reflection_prompt(
            instruction, question=task.question, scratchpad=failed_turn.scratchpad
        )
        instruction_id = instruction.id
    else:
        prompt = _fill(
            load_prompt("reflexion.txt"),
            {"Question": task.question, "Scratchpad": failed_turn.scratchpad},
        )
        instruction_id = PLAIN_INSTRUCTION_ID
    seed = derive_seed(policy.seed, task.id, instruction_id, sample_index)
    req = CompletionRequest(
        messages=(user(prompt),),
        temperature=policy.sample_temperature,
        max_new_tokens=policy.max_new_tokens,
        seed=seed,
    )
    text = (gateway.complete(req).text or "").strip()
    if not text:
        raise TurnAbort("empty_reflection")
    return ReflectionRecord(
        instruction_id=instruction_id,
        text=text,
        sampling=SamplingInfo(
            temperature=policy.sample_temperature, seed=seed, sample_index=sample_index
        ),
        source=source,
    )


def run_correction_turn(
    task: TaskItem,
    reflection: ReflectionRecord,
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
    *,
    turn_index: int = 2,
    temperature: float | None = None,
) -> Turn:
    """Retry the question with the reflection in context."""
    temp = policy.sample_temperature if temperature is None else temperature
    scratchpad, answer = _run_step_loop(
        task,
        gateway,
        policy,
        template=load_prompt("correction.txt"),
        extra={"Reflections": reflection.text},
        seed_parts=(
            task.id,
            reflection.instruction_id,
            reflection.sampling.sample_index,
            "correction",
            turn_index,
        ),
        temperature=temp,
    )
    feedback = verifier.verify(task, answer)
    return Turn(
        index=turn_index, scratchpad=scratchpad, extracted_answer=answer, feedback=feedback
    )


def split_one_stage_reply(reply: str) -> tuple[str, str]:
    """Separate a combined reflect-then-retry reply.

    The reflection is prose, the retry is marker-structured, so the retry
    starts at the first Thought/Action marker; without markers it starts at
    the line holding the terminal action. Raises TurnAbort when there is no
    terminal action at all.
    """
    fin = reply.rfind("Finish[")
    if fin < 0:
        raise TurnAbort("one_stage_parse: no terminal action")
    m = re.search(r"(?m)^[ \t]*(?:Thought|Action)[ \t]*:", reply)
    if m is not None and m.start() <= fin:
        start = m.start()
    else:
        start = reply.rfind("\n", 0, fin) + 1
    reflection_text = reply[:start].strip()
    corrected = reply[start:].strip()
    return reflection_text, corrected


def run_one_stage_reflect_correct(
    task: TaskItem,
    failed_turn: Turn,
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
    *,
    turn_index: int = 2,
    sample_index: int = 1,
    temperature: float | None = None,
) -> tuple[ReflectionRecord, Turn]:
    """One call emits the reflection and the retry together, then we split.

    An empty reflection half is allowed here; only a missing terminal action
    aborts the draw.
    """
    if failed_turn.feedback.is_correct:
        raise ValueError("reflect_on_correct: refusing to reflect on a correct turn")
    prompt = _fill(
        load_prompt("one_stage.txt"),
        {"Question": task.question, "Scratchpad": failed_turn.scratchpad},
    )
    temp = policy.sample_temperature if temperature is None else temperature
    seed = derive_seed(policy.seed, task.id, ONE_STAGE_INSTRUCTION_ID, sample_index, turn_index)
    req = CompletionRequest(
        messages=(user(prompt),),
        temperature=temp,
        max_new_tokens=policy.max_new_tokens,
        seed=seed,
    )
    reply = (gateway.complete(req).text or "").strip()
    reflection_text, corrected = split_one_stage_reply(reply)
    answer = extract_finish(corrected)
    feedback = verifier.verify(task, answer)
    reflection = ReflectionRecord(
        instruction_id=ONE_STAGE_INSTRUCTION_ID,
        text=reflection_text,
        sampling=SamplingInfo(temperature=temp, seed=seed, sample_index=sample_index),
    )
    turn = Turn(
        index=turn_index, scratchpad=corrected, extracted_answer=answer, feedback=feedback
    )
    return reflection, turn


def run_rollout(
    task: TaskItem,
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
    *,
    reflection_mode: str = "plain",
    instruction: InstructionSpec | None = None,
    pool: InstructionPool | None = None,
) -> RolloutTrace:
    """Multi-turn attempt loop, stopping at the first correct answer.

    Evaluation turns run at the question-answering temperature so the curve
    is reproducible; reflection_mode picks how retries are prompted.
    """
    if reflection_mode not in ("plain", "pool", "one_stage"):
        raise ValueError(f"unknown reflection_mode: {reflection_mode!r}")
    if reflection_mode == "pool" and instruction is None:
        raise ValueError("reflection_mode 'pool' needs an instruction")
    turns: list[Turn] = []
    reflections: list[ReflectionRecord] = []
    try:
        turns.append(run_first_turn(task, gateway, policy, verifier))
        while not turns[-1].feedback.is_correct and len(turns) < policy.max_turns:
            next_index = len(turns) + 1
            if reflection_mode == "one_stage":
                reflection, turn = run_one_stage_reflect_correct(
                    task,
                    turns[-1],
                    gateway,
                    policy,
                    verifier,
                    turn_index=next_index,
                    sample_index=next_index,
                    temperature=policy.qa_temperature,
                )
            else:
                reflection = generate_reflection(
                    task,
                    turns[-1],
                    gateway,
                    policy,
                    instruction=instruction if reflection_mode == "pool" else None,
                    pool=pool,
                    sample_index=next_index,
                )
                turn = run_correction_turn(
                    task,
                    reflection,
                    gateway,
                    policy,
                    verifier,
                    turn_index=next_index,
                    temperature=policy.qa_temperature,
                )
            reflections.append(reflection)
            turns.append(turn)
    except (TurnAbort, TransportError, ProtocolError) as exc:
        reason = exc.reason if isinstance(exc, TurnAbort) else f"gateway: {exc}"
        return RolloutTrace(
            task_id=task.id,
            turns=tuple(turns),
            reflections=tuple(reflections),
            status=TraceStatus.aborted(reason),
        )
    if turns[-1].feedback.is_correct:
        status = TraceStatus.solved(turns[-1].index)
    else:
        status = TraceStatus.unsolved()
    return RolloutTrace(
        task_id=task.id, turns=tuple(turns), reflections=tuple(reflections), status=status
    )


def sample_candidates(
    task: TaskItem,
    first_turn: Turn,
    instructions: list[InstructionSpec | None],
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
    *,
    pool: InstructionPool | None = None,
) -> tuple[list[CandidateSample], list[AbortRecord]]:
    """k reflection+retry draws per instruction for one failed first turn.

    Every draw ends up as exactly one candidate or one abort record, so
    callers can reconcile counts.
    """
    candidates: list[CandidateSample] = []
    aborts: list[AbortRecord] = []
    for instruction in instructions:
        instruction_id = instruction.id if instruction else PLAIN_INSTRUCTION_ID
        for j in range(1, policy.k + 1):
            try:
                reflection = generate_reflection(
                    task,
                    first_turn,
                    gateway,
                    policy,
                    instruction=instruction,
                    pool=pool,
                    sample_index=j,
                )
            except TurnAbort as exc:
                aborts.append(
                    AbortRecord(task.id, instruction_id, j, "reflection", exc.reason)
                )
                continue
            except (TransportError, ProtocolError) as exc:
                aborts.append(
                    AbortRecord(task.id, instruction_id, j, "reflection", f"gateway: {exc}")
                )
                continue
            try:
                turn = run_correction_turn(
                    task, reflection, gateway, policy, verifier, turn_index=2
                )
            except (TransportError, ProtocolError) as exc:
                aborts.append(
                    AbortRecord(task.id, instruction_id, j, "correction", f"gateway: {exc}")
                )
                continue
            candidates.append(
                CandidateSample(
                    task_id=task.id,
                    first_answer=first_turn.extracted_answer or "",
                    first_feedback=first_turn.feedback,
                    first_scratchpad=first_turn.scratchpad,
                    reflection=reflection,
                    corrected_answer=turn.extracted_answer or "",
                    corrected_scratchpad=turn.scratchpad,
                    outcome="correct" if turn.feedback.is_correct else "incorrect",
                )
            )
    return candidates, aborts


@dataclass(frozen=True)
class GenerationCounts:
    """Reconciliation: draws = reflected failures x instructions x k."""

    n_tasks: int
    n_first_correct: int
    n_first_aborted: int
    n_failed: int
    n_reflected: int  # failed tasks actually expanded (after any cap)
    instructions_per_task: int
    samples_per_instruction: int
    n_candidates: int
    n_aborts: int

    @property
    def expected_draws(self) -> int:
        return self.n_reflected * self.instructions_per_task * self.samples_per_instruction

    @property
    def reconciles(self) -> bool:
        return self.n_candidates + self.n_draw_aborts == self.expected_draws

    @property
    def n_draw_aborts(self) -> int:
        return self.n_aborts - self.n_first_aborted


@dataclass(frozen=True)
class GenerationResult:
    first_turns: dict[str, RolloutTrace]
    candidates: list[CandidateSample]
    aborts: list[AbortRecord]
    selections: dict[str, tuple[str, ...]]  # dataset (or task id) -> instruction ids
    counts: GenerationCounts
    policy: GenerationPolicy = field(default_factory=GenerationPolicy)


def _single_turn_trace(task_id: str, turn: Turn) -> RolloutTrace:
    status = (
        TraceStatus.solved(1) if turn.feedback.is_correct else TraceStatus.unsolved()
    )
    return RolloutTrace(task_id=task_id, turns=(turn,), reflections=(), status=status)


def generate_dataset(
    tasks: list[TaskItem],
    gateway: ChatGateway,
    policy: GenerationPolicy,
    verifier: Verifier,
    *,
    pool: InstructionPool | None = None,
    reflection_source: str = "pool",
    workers: int = 4,
) -> GenerationResult:
    """Run the full collection pass over a task list.

    Instruction subsets are drawn per source dataset (or per question when
    the policy says so); only tasks whose first attempt failed are expanded.
    Results are assembled in task-id order so thread scheduling cannot
    change the output.
    """
    if reflection_source not in ("pool", "plain"):
        raise ValueError(f"unknown reflection_source: {reflection_source!r}")
    pool = pool or default_pool()
    tasks = sorted(tasks, key=lambda t: t.id)
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids")

    def first(task: TaskItem) -> Turn | AbortRecord:
        try:
            return run_first_turn(task, gateway, policy, verifier)
        except (TransportError, ProtocolError) as exc:
            return AbortRecord(task.id, "", 0, "first_turn", f"gateway: {exc}")

    max_workers = max(1, min(workers, len(tasks))) if tasks else 1
    with ThreadPoolExecutor(max_workers=max_workers) as tp:
        first_results = list(tp.map(first, tasks))

    first_turns: dict[str, RolloutTrace] = {}
    aborts: list[AbortRecord] = []
    failed: list[tuple[TaskItem, Turn]] = []
    n_first_correct = 0
    for task, result in zip(tasks, first_results):
        if isinstance(result, AbortRecord):
            aborts.append(result)
            first_turns[task.id] = RolloutTrace(
                task_id=task.id,
                turns=(),
                reflections=(),
                status=TraceStatus.aborted(result.reason),
            )
            continue
        first_turns[task.id] = _single_turn_trace(task.id, result)
        if result.feedback.is_correct:
            n_first_correct += 1
        else:
            failed.append((task, result))
    n_first_aborted = len(aborts)

    if policy.per_dataset_cap is not None:
        taken: dict[str, int] = {}
        capped: list[tuple[TaskItem, Turn]] = []
        for task, turn in failed:
            if taken.get(task.source_dataset, 0) < policy.per_dataset_cap:
                taken[task.source_dataset] = taken.get(task.source_dataset, 0) + 1
                capped.append((task, turn))
        reflected = capped
    else:
        reflected = failed

    selections: dict[str, tuple[str, ...]] = {}
    per_task_specs: dict[str, list[InstructionSpec | None]] = {}
    if reflection_source == "plain":
        for task, _ in reflected:
            per_task_specs[task.id] = [None]
    elif policy.per_question_instructions:
        for task, _ in reflected:
            specs = pool.select_instructions(
                policy.m, seed=derive_seed(policy.seed, "instructions", task.id)
            )
            selections[task.id] = tuple(s.id for s in specs)
            per_task_specs[task.id] = list(specs)
    else:
        by_dataset: dict[str, list[InstructionSpec]] = {}
        for task, _ in reflected:
            ds = task.source_dataset
            if ds not in by_dataset:
                by_dataset[ds] = list(
                    pool.select_instructions(
                        policy.m, seed=derive_seed(policy.seed, "instructions", ds)
                    )
                )
                selections[ds] = tuple(s.id for s in by_dataset[ds])
            per_task_specs[task.id] = list(by_dataset[ds])

    def expand(item: tuple[TaskItem, Turn]) -> tuple[list[CandidateSample], list[AbortRecord]]:
        task, turn = item
        return sample_candidates(
            task, turn, per_task_specs[task.id], gateway, policy, verifier, pool=pool
        )

    candidates: list[CandidateSample] = []
    if reflected:
        with ThreadPoolExecutor(max_workers=max(1, min(workers, len(reflected)))) as tp:
            for cand, ab in tp.map(expand, reflected):
                candidates.extend(cand)
                aborts.extend(ab)

    instructions_per_task = 1 if reflection_source == "plain" else policy.m
    counts = GenerationCounts(
        n_tasks=len(tasks),
        n_first_correct=n_first_correct,
        n_first_aborted=n_first_aborted,
        n_failed=len(failed),
        n_reflected=len(reflected),
        instructions_per_task=instructions_per_task,
        samples_per_instruction=policy.k,
        n_candidates=len(candidates),
        n_aborts=len(aborts),
    )
    return GenerationResult(
        first_turns=first_turns,
        candidates=candidates,
        aborts=aborts,
        selections=selections,
        counts=counts,
        policy=policy,
    )
