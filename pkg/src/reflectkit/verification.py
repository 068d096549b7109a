"""Answer checking: turn an extracted answer into Correct/Incorrect feedback.

Three checkers share one interface. The oracle compares against the stored
gold answer (string normalization for choices and free text, exact-rational
then small-tolerance comparison for numbers). The self-judgment checker asks
the model itself, without the gold answer. The external-runner checker shells
out, for answers only a harness can score (code, retrieval).
"""

from __future__ import annotations

import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Protocol

from .core import AnswerKind, Feedback, FeedbackValue, TaskItem, VerifierKind
from .gateway import ChatGateway, CompletionRequest, ProtocolError, TransportError, user
from .instructions import load_prompt

NUMERIC_ABS_TOL = 1e-6

_CHOICE_RE = re.compile(r"^[\(\[]?([a-z])[\)\].:]?$")
_CHOICE_PREFIX_RE = re.compile(r"^(?:option|choice|answer)\s+[\(\[]?([a-z])[\)\].:]?$")
_BOXED_RE = re.compile(r"\\boxed\{([^{}]*)\}")
_FRAC_RE = re.compile(r"\\d?frac\{([^{}]+)\}\{([^{}]+)\}")


def _strip_wrappers(text: str) -> str:
    out = text.strip()
    out = out.replace("$", "")
    m = _BOXED_RE.search(out)
    if m:
        out = m.group(1)
    out = _FRAC_RE.sub(r"\1/\2", out)
    out = out.replace("\\left", "").replace("\\right", "")
    out = out.replace("\\!", "").replace("\\,", "").replace("\\ ", " ")
    return out.strip()


def parse_numeric(text: str) -> Fraction | None:
    """Parse a numeric answer to an exact rational; None when not a number.

    Handles $-signs, \\boxed{}, \\frac{a}{b}, a/b, percent signs, thousands
    commas, and leading +/-.
    """
    cleaned = _strip_wrappers(text)
    cleaned = cleaned.rstrip(".")
    cleaned = cleaned.replace(",", "")
    cleaned = cleaned.replace("%", "").strip()
    if not cleaned:
        return None
    if "/" in cleaned:
        num, _, den = cleaned.partition("/")
        try:
            return Fraction(Fraction(num.strip()), Fraction(den.strip()))
        except (ValueError, ZeroDivisionError):
            return None
    try:
        return Fraction(cleaned)
    except ValueError:
        pass
    try:
        return Fraction(str(float(cleaned)))
    except (ValueError, OverflowError):
        return None


def normalize_choice(text: str) -> str:
    """Map the many spellings of a letter choice to the bare lowercase letter."""
    out = text.strip().lower().rstrip(".")
    m = _CHOICE_PREFIX_RE.match(out)
    if m:
        return m.group(1)
    m = _CHOICE_RE.match(out)
    if m:
        return m.group(1)
    return out


def normalize_free_text(text: str) -> str:
    out = text.strip().lower()
    out = re.sub(r"\s+", " ", out)
    out = out.strip(" .\"'")
    return out


def normalize_answer(text: str, kind: AnswerKind) -> str:
    if kind is AnswerKind.MULTIPLE_CHOICE:
        return normalize_choice(text)
    if kind is AnswerKind.NUMERIC:
        value = parse_numeric(text)
        return str(value) if value is not None else normalize_free_text(text)
    return normalize_free_text(text)


def answers_match(candidate: str, gold: str, kind: AnswerKind) -> bool:
    if kind is AnswerKind.NUMERIC:
        got = parse_numeric(candidate)
        want = parse_numeric(gold)
        if got is not None and want is not None:
            if got == want:
                return True
            return abs(float(got) - float(want)) <= NUMERIC_ABS_TOL
        # fall through to string comparison when either side is non-numeric
    return normalize_answer(candidate, kind) == normalize_answer(gold, kind)


def verify_oracle(task: TaskItem, answer: str | None) -> Feedback:
    """Gold-answer check. Missing answers are Incorrect, never Unverified."""
    if answer is None or not answer.strip():
        return Feedback(FeedbackValue.INCORRECT, VerifierKind.ORACLE, reason="no answer")
    if answers_match(answer, task.gold_answer, task.answer_kind):
        return Feedback(FeedbackValue.CORRECT, VerifierKind.ORACLE)
    return Feedback(FeedbackValue.INCORRECT, VerifierKind.ORACLE)


class Verifier(Protocol):
    kind: VerifierKind

    def verify(self, task: TaskItem, answer: str | None) -> Feedback: ...


class OracleVerifier:
    kind = VerifierKind.ORACLE

    def verify(self, task: TaskItem, answer: str | None) -> Feedback:
        return verify_oracle(task, answer)


class SelfJudgmentVerifier:
    """Asks the model to grade its own answer; the gold answer stays hidden."""

    kind = VerifierKind.SELF_JUDGMENT

    def __init__(self, gateway: ChatGateway, *, model: str = "default"):
        self.gateway = gateway
        self.model = model
        self._template = load_prompt("self_judgment.txt")

    def verify(self, task: TaskItem, answer: str | None) -> Feedback:
        if answer is None or not answer.strip():
            return Feedback(
                FeedbackValue.INCORRECT, VerifierKind.SELF_JUDGMENT, reason="no answer"
            )
        prompt = self._template.replace("{Question}", task.question).replace(
            "{Answer}", answer
        )
        req = CompletionRequest(
            messages=(user(prompt),), model=self.model, temperature=0.0, max_new_tokens=8
        )
        try:
            result = self.gateway.complete(req)
        except (TransportError, ProtocolError) as exc:
            return Feedback(
                FeedbackValue.UNVERIFIED, VerifierKind.SELF_JUDGMENT, reason=str(exc)
            )
        verdict = (result.text or "").strip().lower()
        # "incorrect" contains "correct"; test the longer token first.
        if "incorrect" in verdict:
            return Feedback(FeedbackValue.INCORRECT, VerifierKind.SELF_JUDGMENT)
        if "correct" in verdict:
            return Feedback(FeedbackValue.CORRECT, VerifierKind.SELF_JUDGMENT)
        return Feedback(
            FeedbackValue.UNVERIFIED,
            VerifierKind.SELF_JUDGMENT,
            reason=f"unparsable verdict: {verdict[:40]!r}",
        )


@dataclass(frozen=True)
class ExternalRunnerVerifier:
    """Runs `command` with the answer written to a temp file.

    The command string may reference ``{file}`` (the answer path) and
    ``{task_id}``. Exit 0 means correct; nonzero means incorrect; a timeout
    counts as incorrect; failing to spawn leaves the answer unverified.
    """

    command: str
    timeout_s: float = 30.0
    kind: VerifierKind = VerifierKind.EXTERNAL_RUNNER

    def verify(self, task: TaskItem, answer: str | None) -> Feedback:
        if answer is None:
            return Feedback(
                FeedbackValue.INCORRECT, VerifierKind.EXTERNAL_RUNNER, reason="no answer"
            )
        with tempfile.TemporaryDirectory(prefix="reflectkit-run-") as tmp:
            path = Path(tmp) / "answer.txt"
            path.write_text(answer, encoding="utf-8")
            argv = [
                part.replace("{file}", str(path)).replace("{task_id}", task.id)
                for part in shlex.split(self.command)
            ]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, timeout=self.timeout_s, check=False
                )
            except subprocess.TimeoutExpired:
                return Feedback(
                    FeedbackValue.INCORRECT,
                    VerifierKind.EXTERNAL_RUNNER,
                    reason="timeout",
                )
            except OSError as exc:
                return Feedback(
                    FeedbackValue.UNVERIFIED,
                    VerifierKind.EXTERNAL_RUNNER,
                    reason=f"runner_error: {exc}",
                )
        if proc.returncode == 0:
            return Feedback(FeedbackValue.CORRECT, VerifierKind.EXTERNAL_RUNNER)
        return Feedback(FeedbackValue.INCORRECT, VerifierKind.EXTERNAL_RUNNER)
