"""Model shapes, causal masking, seeded determinism, and low-rank adapters."""

from __future__ import annotations

import pytest
import torch
from torch import nn

from reflect_trainer.data import VOCAB_SIZE
from reflect_trainer.model import (
    LORA_TARGETS,
    LoraLinear,
    LoraParams,
    ModelConfig,
    TinyLM,
    apply_lora,
    build_model,
    trainable_parameters,
)
from trainer_helpers import TINY_MODEL


def random_ids(batch: int, length: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(0, VOCAB_SIZE, (batch, length), generator=gen)


class TestConfigs:
    def test_model_defaults(self):
        cfg = ModelConfig()
        assert (cfg.vocab_size, cfg.d_model, cfg.n_heads, cfg.n_layers) == (259, 64, 4, 2)
        assert cfg.max_len == 512

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError, match="heads"):
            ModelConfig(d_model=30, n_heads=4)

    def test_adapter_defaults(self):
        params = LoraParams()
        assert (params.rank, params.scaling, params.dropout) == (8, 32.0, 0.1)

    @pytest.mark.parametrize(
        "kwargs", [{"rank": 0}, {"dropout": 1.0}, {"dropout": -0.1}]
    )
    def test_adapter_validation(self, kwargs):
        with pytest.raises(ValueError):
            LoraParams(**kwargs)


class TestTinyLM:
    def test_forward_shape(self):
        model = build_model(0, TINY_MODEL)
        logits = model(random_ids(2, 11))
        assert logits.shape == (2, 11, VOCAB_SIZE)

    def test_rejects_sequences_beyond_max_len(self):
        model = build_model(0, TINY_MODEL)
        with pytest.raises(ValueError, match="exceeds max_len"):
            model(random_ids(1, TINY_MODEL.max_len + 1))

    def test_causality_later_tokens_cannot_reach_earlier_logits(self):
        model = build_model(0, TINY_MODEL)
        model.eval()
        ids = random_ids(1, 12)
        changed = ids.clone()
        changed[0, 5] = (changed[0, 5] + 1) % VOCAB_SIZE
        with torch.no_grad():
            base, perturbed = model(ids), model(changed)
        assert torch.equal(base[:, :5], perturbed[:, :5])
        assert not torch.equal(base[:, 5:], perturbed[:, 5:])

    def test_same_seed_same_weights(self):
        a, b = build_model(4, TINY_MODEL), build_model(4, TINY_MODEL)
        for key, value in a.state_dict().items():
            assert torch.equal(value, b.state_dict()[key]), key

    def test_different_seed_different_weights(self):
        a, b = build_model(4, TINY_MODEL), build_model(5, TINY_MODEL)
        assert any(
            not torch.equal(value, b.state_dict()[key])
            for key, value in a.state_dict().items()
        )


class TestLora:
    def test_adapted_model_starts_identical_to_base(self):
        base = build_model(1, TINY_MODEL)
        adapted = build_model(1, TINY_MODEL, lora=LoraParams())
        base.eval(), adapted.eval()
        ids = random_ids(2, 10)
        with torch.no_grad():
            assert torch.equal(base(ids), adapted(ids))

    def test_identity_holds_even_with_dropout_active(self):
        # The zero-initialized B matrix multiplies whatever dropout produces,
        # so train mode changes nothing until the adapters move.
        base = build_model(1, TINY_MODEL)
        adapted = build_model(1, TINY_MODEL, lora=LoraParams(dropout=0.5))
        base.eval()
        adapted.train()
        ids = random_ids(2, 10)
        with torch.no_grad():
            assert torch.equal(base(ids), adapted(ids))

    def test_only_adapter_weights_are_trainable(self):
        adapted = build_model(1, TINY_MODEL, lora=LoraParams())
        trainable = [n for n, p in adapted.named_parameters() if p.requires_grad]
        assert trainable
        assert all("lora_a" in n or "lora_b" in n for n in trainable)
        # two targets per layer, an A and a B matrix each
        assert len(trainable) == TINY_MODEL.n_layers * len(LORA_TARGETS) * 2
        frozen = [n for n, p in adapted.named_parameters() if not p.requires_grad]
        assert all("lora" not in n for n in frozen)

    def test_trainable_parameters_helper_matches(self):
        adapted = build_model(1, TINY_MODEL, lora=LoraParams())
        assert len(trainable_parameters(adapted)) == 8
        full = build_model(1, TINY_MODEL)
        assert len(trainable_parameters(full)) == len(list(full.parameters()))

    def test_missing_targets_is_an_error(self):
        model = TinyLM(TINY_MODEL)
        with pytest.raises(ValueError, match="no linear layers"):
            apply_lora(model, LoraParams(), targets=("not_a_projection",))

    def test_low_rank_residual_hand_math(self):
        base = nn.Linear(2, 2)
        with torch.no_grad():
            base.weight.copy_(torch.eye(2))
            base.bias.zero_()
        layer = LoraLinear(base, LoraParams(rank=1, scaling=3.0, dropout=0.0))
        assert layer.scale == 3.0
        with torch.no_grad():
            layer.lora_a.weight.copy_(torch.tensor([[1.0, 1.0]]))
            layer.lora_b.weight.copy_(torch.tensor([[2.0], [0.0]]))
            out = layer(torch.tensor([1.0, 2.0]))
        # base gives (1, 2); A maps to 3, B lifts to (6, 0), scaled by 3
        assert torch.allclose(out, torch.tensor([19.0, 2.0]))

    def test_adapted_build_is_seed_deterministic(self):
        a = build_model(9, TINY_MODEL, lora=LoraParams())
        b = build_model(9, TINY_MODEL, lora=LoraParams())
        for key, value in a.state_dict().items():
            assert torch.equal(value, b.state_dict()[key]), key
