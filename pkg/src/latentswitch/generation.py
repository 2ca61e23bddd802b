"""Two-phase generation: prefill, latent rollout, cache-preserving switch, explicit sampling."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import CapacityError, ConfigError, InputError, NumericError
from .latent import LatentProjector, ProbeResult, latent_step, probe_logits
from .model import LayerCache, ModelBundle, decode_logits, embed, embed_tokens, forward_embeddings, forward_step
from .switching import SwitchConfig, should_switch


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    max_new_tokens: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be positive")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; only explicit sampling draws from it."""
    return np.random.Generator(np.random.Philox(seed % 2**64))


def sample_token(logits, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    """Temperature, then top-k, then nucleus over the renormalised top-k set."""
    z = np.asarray(logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("sampling from non-finite logits")
    z = z / sampler.temperature
    # stable sort on -z: ties keep ascending token id
    order = np.argsort(-z, kind="stable")[: sampler.top_k]
    kept = z[order]
    p = np.exp(kept - kept[0])
    p /= p.sum()
    cum = np.cumsum(p)
    n = min(int(np.searchsorted(cum, sampler.top_p - 1e-12)) + 1, len(order))
    order, p = order[:n], p[:n]
    p = p / p.sum()
    u = rng.random()
    idx = min(int(np.searchsorted(np.cumsum(p), u, side="right")), n - 1)
    return int(order[idx])


@dataclass
class GenerationTrace:
    prompt_token_ids: list[int]
    latent_entropies: list[float] = field(default_factory=list)
    latent_probe_tokens: list[int] = field(default_factory=list)
    latent_hidden_log: list[list[float]] | None = None
    switch_step: int = 0
    switch_reason: str | None = None
    explicit_token_ids: list[int] = field(default_factory=list)
    total_tokens: int = 0
    terminated_by: str = "length_limit"
    explicit_entropies: list[float] | None = None
    explicit_hidden_log: list[list[float]] | None = None
    forward_calls: int = 0
    cache_length: int = 0

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, record: dict) -> "GenerationTrace":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in record.items() if k in names})


class _Run:
    """Per-run state: cache, rng, counters and the trace being filled."""

    def __init__(self, model: ModelBundle, sampler: SamplerConfig, prompt: Sequence[int],
                 log_hidden: bool, log_entropy: bool) -> None:
        self.model = model
        self.sampler = sampler
        self.rng = make_rng(sampler.seed)
        self.trace = GenerationTrace(list(prompt))
        self.log_hidden = log_hidden
        self.log_entropy = log_entropy
        if log_hidden:
            self.trace.latent_hidden_log = []
            self.trace.explicit_hidden_log = []
        if log_entropy:
            self.trace.explicit_entropies = []
        self.cache: LayerCache | None = None
        self.hidden: torch.Tensor | None = None
        self.logits: torch.Tensor | None = None

    def prefill(self, tokens: Sequence[int]) -> None:
        hidden, self.cache = forward_embeddings(self.model, embed_tokens(self.model, tokens), self.cache)
        self.trace.forward_calls += len(tokens)
        self.hidden = hidden[-1]
        self.logits = decode_logits(self.model, self.hidden)

    def feed(self, token: int) -> None:
        out, self.cache = forward_step(self.model, embed(self.model, token), self.cache)
        self.trace.forward_calls += 1
        self.hidden, self.logits = out.hidden, out.logits

    def record_latent(self, h: torch.Tensor, pr: ProbeResult) -> None:
        self.trace.latent_entropies.append(pr.entropy)
        self.trace.latent_probe_tokens.append(pr.argmax_token)
        if self.log_hidden:
            self.trace.latent_hidden_log.append(h.tolist())

    def emit_forced(self, token: int) -> None:
        self.trace.explicit_token_ids.append(token)
        self.feed(token)

    def explicit_phase(self, stop_ids: set[int]) -> None:
        """Sample from the current state's logits until a stop token or the length limit."""
        t = self.trace
        for n in range(1, self.sampler.max_new_tokens + 1):
            if self.log_entropy:
                t.explicit_entropies.append(probe_logits(self.logits).entropy)
            tok = sample_token(self.logits, self.sampler, self.rng)
            t.explicit_token_ids.append(tok)
            self.feed(tok)
            if self.log_hidden:
                t.explicit_hidden_log.append(self.hidden.tolist())
            if tok in stop_ids:
                t.terminated_by = "stop_token"
                return
        t.terminated_by = "length_limit"

    def finish(self) -> GenerationTrace:
        t = self.trace
        t.switch_step = len(t.latent_entropies)
        t.total_tokens = t.switch_step + len(t.explicit_token_ids)
        t.cache_length = self.cache.length
        return t


def _stop_ids(model: ModelBundle) -> set[int]:
    st = model.config.special_tokens
    return {st[r] for r in ("end_of_message", "end_of_text") if r in st}


def _check_prompt(model: ModelBundle, prompt: Sequence[int], needed: int) -> None:
    if len(prompt) == 0:
        raise InputError("prompt is empty")
    if needed > model.config.max_seq_len:
        raise CapacityError(f"run may need {needed} positions but max_seq_len={model.config.max_seq_len}")


@torch.no_grad()
def generate_later(
    model: ModelBundle,
    projector: LatentProjector,
    switch: SwitchConfig,
    sampler: SamplerConfig,
    prompt: Sequence[int],
    *,
    log_hidden: bool = False,
    log_entropy: bool = False,
) -> GenerationTrace:
    """Latent rollout under ``switch``, then explicit decoding on the same cache.

    The first explicit token is sampled from the last latent state's logits, so
    the switch costs no extra forward pass.
    """
    switch.validate_vocab(model.config.vocab_size)
    _check_prompt(model, prompt, len(prompt) + switch.latent_budget + sampler.max_new_tokens)
    run = _Run(model, sampler, prompt, log_hidden, log_entropy)
    run.prefill(prompt)
    if switch.mode == "fixed" and switch.fixed_steps == 0:
        run.trace.switch_reason = "fixed_budget"
    else:
        s = 0
        while True:
            h, pr, run.cache = latent_step(model, projector, run.hidden, run.cache)
            run.trace.forward_calls += 1
            s += 1
            run.hidden = h
            run.logits = decode_logits(model, h)
            run.record_latent(h, pr)
            decision = should_switch(switch, s, pr)
            if decision.switch:
                run.trace.switch_reason = decision.reason
                break
    run.explicit_phase(_stop_ids(model))
    return run.finish()


@torch.no_grad()
def generate_cot(
    model: ModelBundle,
    sampler: SamplerConfig,
    prompt: Sequence[int],
    *,
    log_hidden: bool = False,
    log_entropy: bool = False,
) -> GenerationTrace:
    """Plain discrete decoding baseline."""
    _check_prompt(model, prompt, len(prompt) + sampler.max_new_tokens)
    run = _Run(model, sampler, prompt, log_hidden, log_entropy)
    run.prefill(prompt)
    run.trace.switch_reason = "fixed_budget"
    run.explicit_phase(_stop_ids(model))
    return run.finish()


def boundary_fires(logits: torch.Tensor, close_id: int) -> bool:
    z = logits.detach()
    return bool(torch.sigmoid(z[close_id]) > 0.5) or int(np.argmax(z.cpu().numpy())) == close_id


@torch.no_grad()
def generate_trained_later(
    model: ModelBundle,
    projector: LatentProjector,
    sampler: SamplerConfig,
    prompt: Sequence[int],
    *,
    max_latent_steps: int = 128,
    fallback: SwitchConfig | None = None,
    log_hidden: bool = False,
    log_entropy: bool = False,
) -> GenerationTrace:
    """Trained-mode inference: the model's own latent_close logit ends the latent phase.

    ``explicit_token_ids`` holds every emitted discrete token in output order,
    including the forced latent_open, latent_close and think_open markers, so
    they count toward ``total_tokens``. ``fallback`` optionally adds the
    adaptive entropy/stop rule as an extra exit trigger.
    """
    c = model.config
    open_id, close_id, think_id = c.special("latent_open"), c.special("latent_close"), c.special("think_open")
    if max_latent_steps < 1:
        raise ConfigError("max_latent_steps must be positive")
    _check_prompt(model, prompt, len(prompt) + 3 + max_latent_steps + sampler.max_new_tokens)
    run = _Run(model, sampler, prompt, log_hidden, log_entropy)
    run.prefill(prompt)
    run.emit_forced(open_id)
    s = 0
    while True:
        h, pr, run.cache = latent_step(model, projector, run.hidden, run.cache)
        run.trace.forward_calls += 1
        s += 1
        run.hidden = h
        run.logits = decode_logits(model, h)
        run.record_latent(h, pr)
        if boundary_fires(run.logits, close_id):
            run.trace.switch_reason = "boundary"
            break
        if fallback is not None:
            d = should_switch(fallback, s, pr)
            if d.switch and d.reason != "hard_cap":
                run.trace.switch_reason = d.reason
                break
        if s >= max_latent_steps:
            run.trace.switch_reason = "hard_cap"
            break
    run.emit_forced(close_id)
    run.emit_forced(think_id)
    run.explicit_phase(_stop_ids(model))
    return run.finish()


def dump_trace_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True)


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start
