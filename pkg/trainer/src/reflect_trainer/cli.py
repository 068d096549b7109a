"""Minimal command line for the trainer: one `train` run per invocation.

Exit codes match the data pipeline's convention: 0 ok, 1 user error
(bad flags, bad files), 2 internal.
"""

from __future__ import annotations

import argparse
import sys

from .model import LoraParams
from .train import DPO_SETTINGS, SFT_SETTINGS, TrainConfig, train_dpo, train_sft


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reflect-trainer",
        description="Fine-tune a tiny local model on exported reflection data.",
    )
    parser.add_argument("--setting", type=int, required=True, choices=(1, 2, 3, 4))
    parser.add_argument(
        "--file",
        action="append",
        default=[],
        help="SFT file; give twice for setting 2 (reflection file first).",
    )
    parser.add_argument("--pairs", help="Preference pair file (settings 3/4).")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument(
        "--lr",
        action="append",
        type=float,
        default=[],
        help="Learning rate; repeat for setting 2. Defaults follow the setting.",
    )
    parser.add_argument("--beta", type=float, default=0.01)
    parser.add_argument("--epochs", type=int, default=1)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--grad-accumulation", type=int, default=1)
    parser.add_argument("--max-seq-len", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--weight-decay", type=float, default=0.0)
    parser.add_argument(
        "--no-lora",
        action="store_true",
        help="Train all weights instead of low-rank adapters.",
    )
    parser.add_argument("--lora-rank", type=int, default=8)
    parser.add_argument("--lora-scaling", type=float, default=32.0)
    parser.add_argument("--lora-dropout", type=float, default=0.1)
    return parser


def run(args: argparse.Namespace) -> int:
    lora = (
        None
        if args.no_lora
        else LoraParams(
            rank=args.lora_rank, scaling=args.lora_scaling, dropout=args.lora_dropout
        )
    )
    cfg = TrainConfig(
        setting=args.setting,
        learning_rates=tuple(args.lr),
        beta=args.beta,
        lora=lora,
        batch_size=args.batch_size,
        grad_accumulation=args.grad_accumulation,
        max_seq_len=args.max_seq_len,
        epochs=args.epochs,
        seed=args.seed,
        weight_decay=args.weight_decay,
    )
    if cfg.setting in SFT_SETTINGS:
        if args.pairs:
            raise ValueError("--pairs applies to settings 3/4; use --file")
        result = train_sft(args.file, cfg, args.out)
    else:
        if not args.pairs:
            raise ValueError(f"setting {cfg.setting} needs --pairs")
        if args.file:
            raise ValueError("--file applies to settings 1/2; use --pairs")
        result = train_dpo(args.pairs, cfg, args.out)
    last = result.steps[-1]
    print(
        f"trained {len(result.steps)} steps "
        f"(final loss {last.loss:.4f}); checkpoint at {result.checkpoint_path}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return 1 if exc.code else 0
    try:
        return run(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort guard for exit code 2
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
