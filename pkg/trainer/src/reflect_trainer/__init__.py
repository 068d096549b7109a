"""Desk-scale trainer for exported reflection datasets.

Consumes the data pipeline's JSONL export files and runs the four tuning
settings (single-pass SFT, two-stage SFT, and two preference-pair
variants) on a seed-initialized tiny byte-level model, entirely on CPU.
"""

from .data import (
    BOS_ID,
    EOS_ID,
    IGNORE_INDEX,
    PAD_ID,
    VOCAB_SIZE,
    PreferenceExample,
    SftExample,
    TokenRow,
    build_token_row,
    collate,
    decode_ids,
    encode_text,
    read_preference_file,
    read_sft_file,
)
from .losses import dpo_loss, dpo_loss_oracle, sequence_logprobs, sft_loss
from .model import (
    LoraParams,
    ModelConfig,
    TinyLM,
    apply_lora,
    build_model,
    trainable_parameters,
)
from .train import (
    DEFAULT_LEARNING_RATES,
    StepRecord,
    TrainConfig,
    TrainResult,
    train_dpo,
    train_sft,
)

__version__ = "0.1.0"

__all__ = [
    "BOS_ID",
    "EOS_ID",
    "IGNORE_INDEX",
    "PAD_ID",
    "VOCAB_SIZE",
    "PreferenceExample",
    "SftExample",
    "TokenRow",
    "build_token_row",
    "collate",
    "decode_ids",
    "encode_text",
    "read_preference_file",
    "read_sft_file",
    "dpo_loss",
    "dpo_loss_oracle",
    "sequence_logprobs",
    "sft_loss",
    "LoraParams",
    "ModelConfig",
    "TinyLM",
    "apply_lora",
    "build_model",
    "trainable_parameters",
    "DEFAULT_LEARNING_RATES",
    "StepRecord",
    "TrainConfig",
    "TrainResult",
    "train_dpo",
    "train_sft",
    "__version__",
]
