"""Training losses plus a pure-float preference-loss reference.

The reference implementation (`dpo_loss_oracle`) uses only `math`, so the
torch training path can be cross-checked against it to tight tolerances.
"""

from __future__ import annotations

import math

import torch
from torch.nn import functional as F

from .data import IGNORE_INDEX


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow on either tail
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def dpo_loss_oracle(
    policy_chosen_logp: float,
    ref_chosen_logp: float,
    policy_rejected_logp: float,
    ref_rejected_logp: float,
    beta: float,
) -> float:
    """-log sigmoid(beta * [(lp_c - lr_c) - (lp_r - lr_r)]) in plain floats.

    At zero margin this is ln 2; it is the ground truth the torch loss is
    tested against.
    """
    margin = beta * (
        (policy_chosen_logp - ref_chosen_logp)
        - (policy_rejected_logp - ref_rejected_logp)
    )
    return _softplus(-margin)


def sft_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over unmasked label positions only."""
    return F.cross_entropy(
        logits.reshape(-1, logits.size(-1)),
        labels.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )


def sequence_logprobs(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum of label log-probabilities per sequence, masked positions excluded."""
    logprobs = F.log_softmax(logits, dim=-1)
    mask = labels != IGNORE_INDEX
    safe = labels.masked_fill(~mask, 0)
    per_token = logprobs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return (per_token * mask).sum(dim=-1)


def dpo_loss(
    policy_chosen_logp: torch.Tensor,
    ref_chosen_logp: torch.Tensor,
    policy_rejected_logp: torch.Tensor,
    ref_rejected_logp: torch.Tensor,
    beta: float,
) -> torch.Tensor:
    """Batch mean of the preference loss; inputs are per-pair summed logps."""
    margin = beta * (
        (policy_chosen_logp - ref_chosen_logp)
        - (policy_rejected_logp - ref_rejected_logp)
    )
    return F.softplus(-margin).mean()
