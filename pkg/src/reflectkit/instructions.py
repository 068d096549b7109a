"""Three-stage reflection instruction pool.

Stage 1 verifies the failed solution, stage 2 locates errors and diagnoses
causes, stage 3 outlines a correction plan. Every instruction is one
variant per stage; the full pool is the cross product of the variants
(2 x 8 x 2 = 32). Template text lives in data files under
``prompts/reflection/`` so it stays auditable; this module only composes.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

STAGE_VARIANT_COUNTS = {1: 2, 2: 8, 3: 2}

# Placeholder tokens the templates are allowed to contain; anything from
# this vocabulary left in a rendered prompt is a render bug.
_PLACEHOLDER_RE = re.compile(
    r"\{(?:Question|Scratchpad|Examples|Reflections|Reflection[AB]?|Answer|"
    r"Thought|Stage[123])\}"
)


class TemplateError(Exception):
    """A template file is missing, malformed, or rendered incompletely."""


@dataclass(frozen=True)
class StageVariant:
    stage: int
    variant_id: str  # e.g. "2-5"
    text: str


@dataclass(frozen=True)
class InstructionSpec:
    """One composed instruction: a variant for each of the three stages."""

    id: str  # "<s1>+<s2>+<s3>", e.g. "1-1+2-5+3-2"
    parts: tuple[StageVariant, StageVariant, StageVariant]


def _prompt_root():
    return resources.files("reflectkit") / "prompts"


def load_prompt(name: str) -> str:
    """Read a prompt template from package data (UTF-8, LF endings)."""
    try:
        return (_prompt_root() / name).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise TemplateError(f"prompt template missing: {name}") from exc


def unresolved_placeholders(text: str) -> list[str]:
    return _PLACEHOLDER_RE.findall(text)


def _check_rendered(text: str, context: str) -> str:
    leftover = unresolved_placeholders(text)
    if leftover:
        raise TemplateError(f"unresolved placeholders in {context}: {leftover}")
    return text


class InstructionPool:
    """Loads the stage variants once and serves composed instructions."""

    def __init__(self, variants: dict[str, StageVariant], frame: str):
        self._variants = variants
        self._frame = frame
        self._specs = self._enumerate()

    @classmethod
    def load(cls) -> "InstructionPool":
        variants: dict[str, StageVariant] = {}
        for stage, count in STAGE_VARIANT_COUNTS.items():
            for n in range(1, count + 1):
                vid = f"{stage}-{n}"
                text = load_prompt(f"reflection/s{vid}.txt").strip()
                if not text:
                    raise TemplateError(f"empty stage variant s{vid}.txt")
                variants[vid] = StageVariant(stage=stage, variant_id=vid, text=text)
        frame = load_prompt("reflection/frame.txt")
        return cls(variants, frame)

    def _enumerate(self) -> tuple[InstructionSpec, ...]:
        specs = []
        by_id = lambda v: v.variant_id  # noqa: E731 - single-digit ids sort lexically
        stage1 = sorted((v for v in self._variants.values() if v.stage == 1), key=by_id)
        stage2 = sorted((v for v in self._variants.values() if v.stage == 2), key=by_id)
        stage3 = sorted((v for v in self._variants.values() if v.stage == 3), key=by_id)
        for a in stage1:
            for b in stage2:
                for c in stage3:
                    spec_id = f"{a.variant_id}+{b.variant_id}+{c.variant_id}"
                    specs.append(InstructionSpec(id=spec_id, parts=(a, b, c)))
        return tuple(specs)

    def enumerate_pool(self) -> list[InstructionSpec]:
        """All 32 instructions in lexicographic (s1, s2, s3) order."""
        return list(self._specs)

    def get(self, spec_id: str) -> InstructionSpec:
        for spec in self._specs:
            if spec.id == spec_id:
                return spec
        raise KeyError(f"unknown instruction id {spec_id!r}")

    def select_instructions(self, m: int, seed: int) -> list[InstructionSpec]:
        """Pick m distinct instructions via a seeded shuffle; same seed+m,
        same selection."""
        if not 1 <= m <= len(self._specs):
            raise ValueError(f"m must be in [1, {len(self._specs)}], got {m}")
        pool = list(self._specs)
        random.Random(seed).shuffle(pool)
        return pool[:m]

    def render_reflection_prompt(
        self, spec: InstructionSpec, question: str, scratchpad: str
    ) -> str:
        if not question or not scratchpad:
            raise ValueError("question and scratchpad must be non-empty")
        s1, s2, s3 = spec.parts
        text = self._frame
        text = text.replace("{Stage1}", s1.text)
        text = text.replace("{Stage2}", s2.text)
        text = text.replace("{Stage3}", s3.text)
        text = text.replace("{Question}", question)
        text = text.replace("{Scratchpad}", scratchpad)
        return _check_rendered(text, f"reflection prompt {spec.id}")


@lru_cache(maxsize=1)
def default_pool() -> InstructionPool:
    return InstructionPool.load()


def enumerate_pool() -> list[InstructionSpec]:
    return default_pool().enumerate_pool()


def select_instructions(m: int, seed: int) -> list[InstructionSpec]:
    return default_pool().select_instructions(m, seed)


def render_reflection_prompt(spec: InstructionSpec, question: str, scratchpad: str) -> str:
    return default_pool().render_reflection_prompt(spec, question, scratchpad)
