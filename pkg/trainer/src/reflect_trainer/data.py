"""Read exported training files and turn them into padded token batches.

The input contract is the exporter's JSONL on disk, nothing else: SFT rows
are {prompt, target, meta}, preference rows are {prompt, chosen, rejected,
meta}. Text is tokenized at the byte level so no vocabulary files or
downloads are involved; three specials extend the 256 byte values.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import torch

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

IGNORE_INDEX = -100  # label value excluded from every loss


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_ids(ids: list[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class SftExample:
    prompt: str
    target: str
    meta: dict


@dataclass(frozen=True)
class PreferenceExample:
    prompt: str
    chosen: str
    rejected: str
    meta: dict


def _rows(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield i, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: not valid JSON: {exc}") from exc


def _check_keys(path, i, row, expected: set[str]) -> None:
    if not isinstance(row, dict) or set(row) != expected:
        got = sorted(row) if isinstance(row, dict) else type(row).__name__
        raise ValueError(f"{path}:{i}: expected keys {sorted(expected)}, got {got}")
    for key in expected - {"meta"}:
        if not isinstance(row[key], str):
            raise ValueError(f"{path}:{i}: {key!r} must be a string")
    if not isinstance(row["meta"], dict):
        raise ValueError(f"{path}:{i}: 'meta' must be an object")


def read_sft_file(path: str | Path) -> list[SftExample]:
    examples = []
    for i, row in _rows(path):
        _check_keys(path, i, row, {"prompt", "target", "meta"})
        examples.append(SftExample(row["prompt"], row["target"], row["meta"]))
    return examples


def read_preference_file(path: str | Path) -> list[PreferenceExample]:
    """Load preference pairs, rejecting any row whose sides are identical.

    Equal chosen/rejected text breaks the exporter's invariant and would
    train on a zero margin, so it is a hard error, not a skip.
    """
    examples = []
    for i, row in _rows(path):
        _check_keys(path, i, row, {"prompt", "chosen", "rejected", "meta"})
        if row["chosen"] == row["rejected"]:
            raise ValueError(
                f"{path}:{i}: chosen and rejected completions are identical"
            )
        examples.append(
            PreferenceExample(row["prompt"], row["chosen"], row["rejected"], row["meta"])
        )
    return examples


@dataclass(frozen=True)
class TokenRow:
    """One training sequence with next-token labels, prompt positions masked."""

    ids: tuple[int, ...]
    labels: tuple[int, ...]


def build_token_row(prompt: str, completion: str, max_seq_len: int) -> TokenRow:
    """[BOS] + prompt bytes + completion bytes + [EOS], labels masked over
    the BOS and prompt span; truncated on the right to max_seq_len + 1 so
    the shifted pair is at most max_seq_len long."""
    prompt_ids = encode_text(prompt)
    completion_ids = encode_text(completion)
    ids = [BOS_ID, *prompt_ids, *completion_ids, EOS_ID]
    labels = [IGNORE_INDEX] * (1 + len(prompt_ids)) + completion_ids + [EOS_ID]
    limit = max_seq_len + 1
    return TokenRow(ids=tuple(ids[:limit]), labels=tuple(labels[:limit]))


def collate(rows: list[TokenRow]) -> dict[str, torch.Tensor]:
    """Right-pad and shift: input_ids[t] predicts labels[t].

    Right padding plus causal attention means real positions never see a
    pad, so no separate attention mask is needed; pad labels are ignored.
    """
    if not rows:
        raise ValueError("empty batch")
    width = max(len(r.ids) for r in rows)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    labels = torch.full((len(rows), width), IGNORE_INDEX, dtype=torch.long)
    for j, row in enumerate(rows):
        ids[j, : len(row.ids)] = torch.tensor(row.ids, dtype=torch.long)
        labels[j, : len(row.labels)] = torch.tensor(row.labels, dtype=torch.long)
    return {"input_ids": ids[:, :-1], "labels": labels[:, 1:]}


def batch_indices(n: int, batch_size: int, rng: random.Random | None) -> list[list[int]]:
    """Index batches for one epoch; shuffled when an RNG is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(n))
    if rng is not None:
        rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
