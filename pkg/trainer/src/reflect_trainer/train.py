"""Run the four tuning settings on exported files at desk scale.

Setting 1 fine-tunes on the single-pass file; setting 2 runs two
sequential stages (reflection file, then correction file) with their own
learning rates; settings 3 and 4 run preference optimization against a
frozen reference copy. Each run writes a checkpoint, a config snapshot,
and a step log (JSONL rows carrying step, loss, lr, stage).
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .data import (
    build_token_row,
    batch_indices,
    collate,
    read_preference_file,
    read_sft_file,
)
from .losses import dpo_loss, sequence_logprobs, sft_loss
from .model import LoraParams, ModelConfig, TinyLM, build_model, trainable_parameters

# Per-setting defaults; the decimals follow the published recipe this
# pipeline mirrors (two rates for the two-stage setting).
DEFAULT_LEARNING_RATES: dict[int, tuple[float, ...]] = {
    1: (1e-3,),
    2: (1e-5, 1e-3),
    3: (5e-7,),
    4: (7e-7,),
}
MAX_WEIGHT_DECAY = 0.01

CHECKPOINT_NAME = "checkpoint.pt"
LOG_NAME = "train.log.jsonl"
CONFIG_NAME = "train_config.json"

SFT_SETTINGS = (1, 2)
DPO_SETTINGS = (3, 4)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run; unset learning rates pick the defaults."""

    setting: int
    learning_rates: tuple[float, ...] = ()
    beta: float = 0.01
    lora: LoraParams | None = field(default_factory=LoraParams)
    batch_size: int = 4
    grad_accumulation: int = 1
    max_new_tokens: int = 512
    max_seq_len: int = 256
    precision: str = "fp32"
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.setting not in (1, 2, 3, 4):
            raise ValueError(f"setting must be 1-4, got {self.setting}")
        if not self.learning_rates:
            object.__setattr__(
                self, "learning_rates", DEFAULT_LEARNING_RATES[self.setting]
            )
        expected = 2 if self.setting == 2 else 1
        if len(self.learning_rates) != expected:
            raise ValueError(
                f"setting {self.setting} takes {expected} learning rate(s), "
                f"got {len(self.learning_rates)}"
            )
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if self.setting in DPO_SETTINGS and self.beta <= 0:
            raise ValueError("beta must be > 0 for preference settings")
        for name in ("batch_size", "grad_accumulation", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.precision != "fp32":
            raise ValueError("only fp32 is supported in this build")
        if not 0.0 <= self.weight_decay <= MAX_WEIGHT_DECAY:
            raise ValueError(f"weight_decay must be in [0, {MAX_WEIGHT_DECAY}]")
        if self.max_seq_len < 8 or self.max_seq_len > self.model.max_len:
            raise ValueError("max_seq_len must be in [8, model.max_len]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"] = asdict(self.lora) if self.lora else None
        d["model"] = asdict(self.model)
        d["learning_rates"] = list(self.learning_rates)
        return d


@dataclass(frozen=True)
class StepRecord:
    step: int
    stage: str
    loss: float
    lr: float
    # per-pair (policy_chosen, ref_chosen, policy_rejected, ref_rejected)
    # summed log-probabilities; preference steps only
    dpo_logps: tuple[tuple[float, float, float, float], ...] | None = None

    def log_row(self) -> dict:
        return {"step": self.step, "loss": self.loss, "lr": self.lr, "stage": self.stage}


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: tuple[StepRecord, ...]

    def stage_names(self) -> list[str]:
        names: list[str] = []
        for rec in self.steps:
            if not names or names[-1] != rec.stage:
                names.append(rec.stage)
        return names


def _write_outputs(out_dir: Path, model: TinyLM, cfg: TrainConfig, steps) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / CHECKPOINT_NAME
    torch.save(model.state_dict(), checkpoint_path)
    (out_dir / CONFIG_NAME).write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log_path = out_dir / LOG_NAME
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in steps:
            fh.write(json.dumps(rec.log_row(), sort_keys=True) + "\n")
    return TrainResult(
        checkpoint_path=checkpoint_path, log_path=log_path, steps=tuple(steps)
    )


def _prepare_model(cfg: TrainConfig, model: TinyLM | None) -> TinyLM:
    if model is None:
        model = build_model(cfg.seed, cfg.model, lora=cfg.lora)
    model.train()
    params = trainable_parameters(model)
    if not params:
        raise ValueError("model has no trainable parameters")
    return model


def train_sft(
    files: list[str | Path],
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    model: TinyLM | None = None,
) -> TrainResult:
    """Supervised tuning on target tokens only; prompts never contribute loss.

    Setting 1 takes one file; setting 2 takes the reflection file then the
    correction file and trains them as sequential stages.
    """
    if cfg.setting not in SFT_SETTINGS:
        raise ValueError(f"train_sft handles settings {SFT_SETTINGS}, got {cfg.setting}")
    if len(files) != len(cfg.learning_rates):
        raise ValueError(
            f"setting {cfg.setting} takes {len(cfg.learning_rates)} file(s), "
            f"got {len(files)}"
        )
    model = _prepare_model(cfg, model)
    rng = random.Random(cfg.seed)
    steps: list[StepRecord] = []
    step = 0
    for stage_index, (path, lr) in enumerate(zip(files, cfg.learning_rates)):
        stage = (
            "sft" if cfg.setting == 1 else ("reflection", "correction")[stage_index]
        )
        examples = read_sft_file(path)
        if not examples:
            raise ValueError(f"{path}: no training records")
        rows = [
            build_token_row(ex.prompt, ex.target, cfg.max_seq_len) for ex in examples
        ]
        optimizer = torch.optim.AdamW(
            trainable_parameters(model), lr=lr, weight_decay=cfg.weight_decay
        )
        optimizer.zero_grad()
        for _epoch in range(cfg.epochs):
            for b, idx in enumerate(
                batch_indices(len(rows), cfg.batch_size, rng), start=1
            ):
                batch = collate([rows[i] for i in idx])
                loss = sft_loss(model(batch["input_ids"]), batch["labels"])
                (loss / cfg.grad_accumulation).backward()
                if b % cfg.grad_accumulation == 0:
                    optimizer.step()
                    optimizer.zero_grad()
                step += 1
                steps.append(
                    StepRecord(step=step, stage=stage, loss=float(loss.detach()), lr=lr)
                )
        optimizer.step()  # flush any remainder accumulation
        optimizer.zero_grad()
    return _write_outputs(Path(out_dir), model, cfg, steps)


def train_dpo(
    pair_file: str | Path,
    cfg: TrainConfig,
    out_dir: str | Path,
    *,
    model: TinyLM | None = None,
) -> TrainResult:
    """Preference tuning against a frozen copy of the starting weights."""
    if cfg.setting not in DPO_SETTINGS:
        raise ValueError(f"train_dpo handles settings {DPO_SETTINGS}, got {cfg.setting}")
    model = _prepare_model(cfg, model)
    reference = copy.deepcopy(model)
    reference.eval()
    for p in reference.parameters():
        p.requires_grad_(False)

    examples = read_preference_file(pair_file)
    if not examples:
        raise ValueError(f"{pair_file}: no preference pairs")
    chosen_rows = [
        build_token_row(ex.prompt, ex.chosen, cfg.max_seq_len) for ex in examples
    ]
    rejected_rows = [
        build_token_row(ex.prompt, ex.rejected, cfg.max_seq_len) for ex in examples
    ]

    lr = cfg.learning_rates[0]
    optimizer = torch.optim.AdamW(
        trainable_parameters(model), lr=lr, weight_decay=cfg.weight_decay
    )
    optimizer.zero_grad()
    rng = random.Random(cfg.seed)
    steps: list[StepRecord] = []
    step = 0
    for _epoch in range(cfg.epochs):
        for b, idx in enumerate(
            batch_indices(len(examples), cfg.batch_size, rng), start=1
        ):
            chosen = collate([chosen_rows[i] for i in idx])
            rejected = collate([rejected_rows[i] for i in idx])
            policy_c = sequence_logprobs(model(chosen["input_ids"]), chosen["labels"])
            policy_r = sequence_logprobs(
                model(rejected["input_ids"]), rejected["labels"]
            )
            with torch.no_grad():
                ref_c = sequence_logprobs(
                    reference(chosen["input_ids"]), chosen["labels"]
                )
                ref_r = sequence_logprobs(
                    reference(rejected["input_ids"]), rejected["labels"]
                )
            loss = dpo_loss(policy_c, ref_c, policy_r, ref_r, cfg.beta)
            (loss / cfg.grad_accumulation).backward()
            if b % cfg.grad_accumulation == 0:
                optimizer.step()
                optimizer.zero_grad()
            step += 1
            logps = tuple(
                (float(pc), float(rc), float(pr), float(rr))
                for pc, rc, pr, rr in zip(
                    policy_c.detach(), ref_c, policy_r.detach(), ref_r
                )
            )
            steps.append(
                StepRecord(
                    step=step,
                    stage="dpo",
                    loss=float(loss.detach()),
                    lr=lr,
                    dpo_logps=logps,
                )
            )
    optimizer.step()
    optimizer.zero_grad()
    return _write_outputs(Path(out_dir), model, cfg, steps)
