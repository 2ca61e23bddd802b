"""Toy decoder-only transformer with incremental cached decoding.

Every forward entry point works on raw embedding vectors, so callers can feed
either token embeddings or projected hidden states. Hidden states returned to
callers are final-layer, post-final-norm vectors; logits are always
``output_projection @ hidden`` with no bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapacityError, ConfigError, InputError

SPECIAL_ROLES = (
    "latent_open",
    "latent_close",
    "think_open",
    "think_close",
    "end_of_message",
    "end_of_text",
)
# placeholder filling latent positions in rendered training examples
PAD_ROLE = "latent_pad"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int
    num_layers: int
    num_heads: int
    ffn_dim: int
    max_seq_len: int
    special_tokens: dict[str, int] = field(default_factory=dict)
    dtype: str = "float64"
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("num_heads must divide hidden_dim")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary position encoding")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        ids = list(self.special_tokens.values())
        if len(set(ids)) != len(ids):
            raise ConfigError("special-token ids must be distinct")
        for role, tid in self.special_tokens.items():
            if not 0 <= tid < self.vocab_size:
                raise ConfigError(f"special token {role}={tid} outside vocabulary")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def special(self, role: str) -> int:
        try:
            return self.special_tokens[role]
        except KeyError:
            raise ConfigError(f"model vocabulary has no {role!r} token") from None

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "max_seq_len": self.max_seq_len,
            "special_tokens": dict(self.special_tokens),
            "dtype": self.dtype,
            "rope_base": self.rope_base,
            "norm_eps": self.norm_eps,
        }


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float, dtype: torch.dtype) -> None:
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Block(nn.Module):
    """Pre-norm attention + two-matrix feed-forward."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        d, f, dt = config.hidden_dim, config.ffn_dim, config.torch_dtype
        self.attn_norm = RMSNorm(d, config.norm_eps, dt)
        self.wq = nn.Parameter(torch.empty(d, d, dtype=dt))
        self.wk = nn.Parameter(torch.empty(d, d, dtype=dt))
        self.wv = nn.Parameter(torch.empty(d, d, dtype=dt))
        self.wo = nn.Parameter(torch.empty(d, d, dtype=dt))
        self.ffn_norm = RMSNorm(d, config.norm_eps, dt)
        self.w_up = nn.Parameter(torch.empty(f, d, dtype=dt))
        self.w_down = nn.Parameter(torch.empty(d, f, dtype=dt))


class ModelBundle(nn.Module):
    """Weights of the toy transformer.

    ``input_embedding`` and ``output_projection`` are both V x d_h with one row
    per token; logits for a hidden state h are ``output_projection @ h``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, init_std: float = 0.02) -> None:
        super().__init__()
        self.config = config
        V, d, dt = config.vocab_size, config.hidden_dim, config.torch_dtype
        self.input_embedding = nn.Parameter(torch.empty(V, d, dtype=dt))
        self.output_projection = nn.Parameter(torch.empty(V, d, dtype=dt))
        self.layers = nn.ModuleList(Block(config) for _ in range(config.num_layers))
        self.final_norm = RMSNorm(d, config.norm_eps, dt)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    continue
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * init_std)
        self.audit_shapes()

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        V, d, f = c.vocab_size, c.hidden_dim, c.ffn_dim
        shapes = {"input_embedding": (V, d), "output_projection": (V, d), "final_norm.weight": (d,)}
        for i in range(c.num_layers):
            p = f"layers.{i}."
            shapes.update({
                p + "attn_norm.weight": (d,),
                p + "wq": (d, d),
                p + "wk": (d, d),
                p + "wv": (d, d),
                p + "wo": (d, d),
                p + "ffn_norm.weight": (d,),
                p + "w_up": (f, d),
                p + "w_down": (d, f),
            })
        return shapes

    def audit_shapes(self) -> None:
        expected = self.expected_shapes()
        actual = {n: tuple(p.shape) for n, p in self.named_parameters()}
        if actual != expected:
            bad = sorted(set(expected.items()) ^ set(actual.items()))
            raise ConfigError(f"shape audit failed: {bad}")
        for n, p in self.named_parameters():
            if p.dtype != self.config.torch_dtype:
                raise ConfigError(f"{n} has dtype {p.dtype}, expected {self.config.torch_dtype}")


@dataclass(frozen=True)
class LayerCache:
    """Per-layer keys/values, each of shape (positions, heads, head_dim).

    Caches are values: ``forward_step`` returns a new cache and never
    touches the one it was given.
    """

    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]

    @classmethod
    def empty(cls, config: ModelConfig) -> "LayerCache":
        shape = (0, config.num_heads, config.head_dim)
        z = torch.zeros(shape, dtype=config.torch_dtype)
        return cls(tuple(z for _ in range(config.num_layers)), tuple(z for _ in range(config.num_layers)))

    @property
    def length(self) -> int:
        return int(self.keys[0].shape[0]) if self.keys else 0

    def check(self) -> None:
        lengths = {k.shape[0] for k in self.keys} | {v.shape[0] for v in self.values}
        if len(lengths) > 1:
            raise InputError(f"cache layers disagree on length: {sorted(lengths)}")


@dataclass(frozen=True)
class StepOutput:
    hidden: torch.Tensor
    logits: torch.Tensor


def embed(model: ModelBundle, token_id: int) -> torch.Tensor:
    V = model.config.vocab_size
    if not isinstance(token_id, int) or isinstance(token_id, bool) or not 0 <= token_id < V:
        raise InputError(f"token id {token_id!r} outside [0, {V})")
    return model.input_embedding[token_id]


def embed_tokens(model: ModelBundle, token_ids: Sequence[int]) -> torch.Tensor:
    ids = list(token_ids)
    V = model.config.vocab_size
    for t in ids:
        if not 0 <= t < V:
            raise InputError(f"token id {t!r} outside [0, {V})")
    return model.input_embedding[torch.tensor(ids, dtype=torch.long)]


def decode_logits(model: ModelBundle, hidden: torch.Tensor) -> torch.Tensor:
    if hidden.shape[-1] != model.config.hidden_dim:
        raise InputError(f"hidden has dimension {hidden.shape[-1]}, expected {model.config.hidden_dim}")
    return hidden @ model.output_projection.T


def _rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    # x: (T, H, hd); rotate-half convention
    hd = x.shape[-1]
    inv_freq = base ** (-torch.arange(0, hd, 2, dtype=torch.float64) / hd)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    cos = torch.cat([angles.cos(), angles.cos()], -1).to(x.dtype)[:, None, :]
    sin = torch.cat([angles.sin(), angles.sin()], -1).to(x.dtype)[:, None, :]
    x1, x2 = x[..., : hd // 2], x[..., hd // 2 :]
    rotated = torch.cat([-x2, x1], -1)
    return x * cos + rotated * sin


def forward_embeddings(
    model: ModelBundle, embeddings: torch.Tensor, cache: LayerCache | None = None
) -> tuple[torch.Tensor, LayerCache]:
    """Run T new positions after the cached ones; return (T, d_h) hidden states and the grown cache."""
    c = model.config
    if cache is None:
        cache = LayerCache.empty(c)
    if embeddings.dim() != 2 or embeddings.shape[1] != c.hidden_dim:
        raise InputError(f"embeddings must have shape (T, {c.hidden_dim}), got {tuple(embeddings.shape)}")
    T, past = embeddings.shape[0], cache.length
    if T == 0:
        raise InputError("empty input sequence")
    if past + T > c.max_seq_len:
        raise CapacityError(f"sequence of {past + T} positions exceeds max_seq_len={c.max_seq_len}")
    H, hd = c.num_heads, c.head_dim
    positions = torch.arange(past, past + T)
    # key s visible from query t iff s <= past + t
    visible = torch.arange(past + T)[None, :] <= positions[:, None]
    x = embeddings.to(c.torch_dtype)
    new_keys, new_values = [], []
    for layer, k_past, v_past in zip(model.layers, cache.keys, cache.values):
        h = layer.attn_norm(x)
        q = _rope((h @ layer.wq.T).view(T, H, hd), positions, c.rope_base)
        k = _rope((h @ layer.wk.T).view(T, H, hd), positions, c.rope_base)
        v = (h @ layer.wv.T).view(T, H, hd)
        k_all = torch.cat([k_past, k], 0)
        v_all = torch.cat([v_past, v], 0)
        new_keys.append(k_all)
        new_values.append(v_all)
        scores = torch.einsum("thd,shd->hts", q, k_all) / math.sqrt(hd)
        scores = scores.masked_fill(~visible[None], float("-inf"))
        attn = torch.einsum("hts,shd->thd", torch.softmax(scores, -1), v_all).reshape(T, c.hidden_dim)
        x = x + attn @ layer.wo.T
        h = layer.ffn_norm(x)
        x = x + F.gelu(h @ layer.w_up.T) @ layer.w_down.T
    return model.final_norm(x), LayerCache(tuple(new_keys), tuple(new_values))


def forward_step(model: ModelBundle, input: torch.Tensor, cache: LayerCache) -> tuple[StepOutput, LayerCache]:
    if input.dim() != 1 or input.shape[0] != model.config.hidden_dim:
        raise InputError(f"step input must have shape ({model.config.hidden_dim},), got {tuple(input.shape)}")
    if cache.length >= model.config.max_seq_len:
        raise CapacityError(f"cache is full at max_seq_len={model.config.max_seq_len}")
    hidden, cache = forward_embeddings(model, input[None, :], cache)
    h = hidden[0]
    return StepOutput(h, decode_logits(model, h)), cache


def forward_prefix(model: ModelBundle, embeddings: torch.Tensor | Sequence[torch.Tensor]) -> tuple[list[StepOutput], LayerCache]:
    """Prefill from an empty cache in one pass."""
    if not isinstance(embeddings, torch.Tensor):
        embeddings = list(embeddings)
        if not embeddings:
            raise InputError("empty prefix")
        embeddings = torch.stack(embeddings)
    if embeddings.shape[0] == 0:
        raise InputError("empty prefix")
    hidden, cache = forward_embeddings(model, embeddings, None)
    return [StepOutput(h, decode_logits(model, h)) for h in hidden], cache


def forward_tokens(model: ModelBundle, token_ids: Sequence[int]) -> torch.Tensor:
    """Plain teacher-forced pass; returns (T, V) logits."""
    hidden, _ = forward_embeddings(model, embed_tokens(model, token_ids))
    return decode_logits(model, hidden)
