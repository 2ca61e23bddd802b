from __future__ import annotations

import pytest
import torch

from latentswitch.corpus import TOKEN_ROLES
from latentswitch.model import ModelBundle, ModelConfig


def specials(vocab_size: int) -> dict[str, int]:
    roles = [r for r in TOKEN_ROLES if r != "latent_pad"]
    if vocab_size <= len(roles):
        return {}
    return {r: i for i, r in enumerate(roles)}


def make_model(d=16, V=32, layers=2, heads=2, ffn=None, max_seq_len=128, seed=0, dtype="float64") -> ModelBundle:
    cfg = ModelConfig(
        vocab_size=V,
        hidden_dim=d,
        num_layers=layers,
        num_heads=heads,
        ffn_dim=ffn or 4 * d,
        max_seq_len=max_seq_len,
        special_tokens=specials(V),
        dtype=dtype,
    )
    return ModelBundle(cfg, seed=seed)


def scale_weights(model: ModelBundle, factor: float = 10.0) -> ModelBundle:
    """Blow up the 0.02-scale init so outputs depend visibly on inputs."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not name.endswith("norm.weight"):
                p.mul_(factor)
    return model


@pytest.fixture
def toy():
    return make_model()
