import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentswitch.errors import CapacityError, ConfigError, InputError
from latentswitch.generation import (
    GenerationTrace,
    SamplerConfig,
    dump_trace_record,
    generate_cot,
    generate_later,
    generate_trained_later,
    make_rng,
    sample_token,
)
from latentswitch.latent import build_analytic_projector, build_learned_projector
from latentswitch.switching import SwitchConfig

from conftest import make_model, scale_weights
from oracles import entropy_nats, reference_hidden, reference_logits, softmax


def _model(seed=0, max_seq_len=128):
    return scale_weights(make_model(seed=seed, max_seq_len=max_seq_len), 10.0)


def _filtered_support(z, sampler):
    """Independent top-k / nucleus support computation."""
    z = np.asarray(z, dtype=float) / sampler.temperature
    order = sorted(range(len(z)), key=lambda i: (-z[i], i))[: sampler.top_k]
    p = softmax(z[order])
    kept, mass = [], 0.0
    for i, pi in zip(order, p):
        kept.append(i)
        mass += pi
        if mass >= sampler.top_p - 1e-12:
            break
    return set(kept)


def test_sampler_validation():
    for kw in ({"temperature": 0}, {"top_p": 0}, {"top_p": 1.5}, {"top_k": 0}, {"max_new_tokens": 0}):
        with pytest.raises(ConfigError):
            SamplerConfig(**kw)


def test_degenerate_and_greedy_sampling():
    z = np.zeros(10)
    z[7] = 100.0
    rng = make_rng(3)
    assert all(sample_token(z, SamplerConfig(temperature=2.0, top_p=1.0, top_k=10), rng) == 7 for _ in range(50))
    z = np.random.default_rng(0).normal(size=32)
    for temp, p in ((0.1, 0.5), (5.0, 1.0)):
        s = SamplerConfig(temperature=temp, top_p=p, top_k=1)
        assert sample_token(z, s, make_rng(0)) == int(np.argmax(z))


def test_uniform_frequencies_within_three_sigma():
    s = SamplerConfig(temperature=1.0, top_p=1.0, top_k=8)
    rng = make_rng(12345)
    n = 100_000
    counts = np.bincount([sample_token(np.zeros(8), s, rng) for _ in range(n)], minlength=8)
    sigma = math.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - n / 8) < 3 * sigma)


def test_samples_stay_in_filtered_support():
    rng = np.random.default_rng(5)
    for trial in range(20):
        z = rng.normal(scale=3.0, size=16)
        s = SamplerConfig(temperature=float(rng.uniform(0.3, 2.0)), top_p=float(rng.uniform(0.2, 1.0)),
                          top_k=int(rng.integers(1, 17)))
        support = _filtered_support(z, s)
        g = make_rng(trial)
        assert {sample_token(z, s, g) for _ in range(300)} <= support


def test_zero_budget_equals_cot():
    m = _model()
    proj = build_analytic_projector(m)
    sampler = SamplerConfig(max_new_tokens=20, seed=99)
    a = generate_later(m, proj, SwitchConfig("fixed", fixed_steps=0), sampler, [10, 11, 12])
    b = generate_cot(m, sampler, [10, 11, 12])
    assert a.to_record() == b.to_record()
    assert dump_trace_record(a.to_record()) == dump_trace_record(b.to_record())
    assert a.switch_step == 0


def test_fixed_budget_accounting():
    m = _model()
    proj = build_analytic_projector(m)
    tr = generate_later(m, proj, SwitchConfig("fixed", fixed_steps=5), SamplerConfig(max_new_tokens=12, seed=1),
                        [20, 21])
    assert tr.switch_step == 5 and tr.switch_reason == "fixed_budget"
    assert tr.total_tokens == 5 + len(tr.explicit_token_ids)
    assert len(tr.latent_entropies) == len(tr.latent_probe_tokens) == 5
    if tr.terminated_by == "length_limit":
        assert len(tr.explicit_token_ids) == 12
        assert tr.total_tokens == 17


def test_adaptive_cache_length_and_offline_replay():
    m = _model(seed=2)
    proj = build_analytic_projector(m)
    prompt = [14, 15, 16, 17]
    sw = SwitchConfig("adaptive", entropy_threshold=3.3, stop_tokens={4, 5}, max_latent_steps=10)
    tr = generate_later(m, proj, sw, SamplerConfig(max_new_tokens=6, seed=4), prompt, log_hidden=True)
    S = tr.switch_step
    assert tr.cache_length == len(prompt) + S + len(tr.explicit_token_ids)
    assert tr.forward_calls == tr.cache_length

    W_in = m.input_embedding.detach().numpy()
    W_a = proj.matrix.numpy()
    seq = [W_in[t] for t in prompt]
    h = reference_hidden(m, np.stack(seq))[-1]
    for s in range(S):
        seq.append(h @ W_a)
        h = reference_hidden(m, np.stack(seq))[-1]
        H = entropy_nats(softmax(reference_logits(m, h)))
        assert abs(H - tr.latent_entropies[s]) < 1e-6
        np.testing.assert_allclose(tr.latent_hidden_log[s], h, rtol=1e-6, atol=1e-9)


def test_cot_determinism_and_length_one():
    m = _model()
    s = SamplerConfig(max_new_tokens=15, seed=7)
    assert generate_cot(m, s, [9, 8]).to_record() == generate_cot(m, s, [9, 8]).to_record()
    one = generate_cot(m, SamplerConfig(max_new_tokens=1, seed=7), [9, 8])
    assert len(one.explicit_token_ids) == 1 and one.total_tokens == 1
    assert one.terminated_by == "length_limit" or one.explicit_token_ids[0] in (4, 5)


def test_entry_errors():
    m = _model(max_seq_len=16)
    proj = build_analytic_projector(m)
    with pytest.raises(InputError):
        generate_cot(m, SamplerConfig(max_new_tokens=4), [])
    with pytest.raises(CapacityError):
        generate_later(m, proj, SwitchConfig("fixed", fixed_steps=8, max_latent_steps=8),
                       SamplerConfig(max_new_tokens=8), [10, 11])


def _dominant_first_coordinate(model, close_sign):
    """Make h[0] large and positive everywhere, and tie z_close to it."""
    close = model.config.special("latent_close")
    with torch.no_grad():
        model.input_embedding[:, 0] = 100.0
        model.output_projection[close] = 0.0
        model.output_projection[close, 0] = close_sign * 100.0
    return model


def test_trained_saturated_boundary_fires_immediately():
    m = _dominant_first_coordinate(make_model(seed=1), +1)
    proj = build_learned_projector(m)
    tr = generate_trained_later(m, proj, SamplerConfig(max_new_tokens=5, seed=0), [10, 11], max_latent_steps=16)
    c = m.config
    assert tr.switch_step == 1 and tr.switch_reason == "boundary"
    assert tr.explicit_token_ids[:3] == [c.special("latent_open"), c.special("latent_close"), c.special("think_open")]
    assert tr.total_tokens == 1 + len(tr.explicit_token_ids)
    assert tr.forward_calls == tr.cache_length == 2 + 1 + len(tr.explicit_token_ids)


def test_trained_boundary_never_fires_hits_cap():
    m = _dominant_first_coordinate(make_model(seed=1), -1)
    proj = build_learned_projector(m)
    tr = generate_trained_later(m, proj, SamplerConfig(max_new_tokens=5, seed=0), [10, 11], max_latent_steps=7)
    assert tr.switch_step == 7 and tr.switch_reason == "hard_cap"


def test_trained_fallback_rule_can_exit_early():
    m = _dominant_first_coordinate(make_model(seed=1), -1)
    proj = build_learned_projector(m)
    fb = SwitchConfig("adaptive", entropy_threshold=0.0, max_latent_steps=7)
    tr = generate_trained_later(m, proj, SamplerConfig(max_new_tokens=5, seed=0), [10, 11], max_latent_steps=7,
                                fallback=fb)
    assert tr.switch_step == 1 and tr.switch_reason == "entropy"


def test_trace_record_round_trip():
    m = _model()
    proj = build_analytic_projector(m)
    tr = generate_later(m, proj, SwitchConfig("fixed", fixed_steps=3), SamplerConfig(max_new_tokens=5), [12],
                        log_hidden=True, log_entropy=True)
    back = GenerationTrace.from_record(tr.to_record())
    assert back == tr
    assert len(tr.explicit_entropies) == len(tr.explicit_token_ids) == len(tr.explicit_hidden_log)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 6), st.lists(st.integers(6, 31), min_size=1, max_size=6))
def test_accounting_and_seed_determinism(seed, budget, prompt):
    m = _model(seed=seed % 3)
    proj = build_analytic_projector(m)
    sw = SwitchConfig("fixed", fixed_steps=budget)
    s = SamplerConfig(max_new_tokens=8, seed=seed)
    a = generate_later(m, proj, sw, s, prompt)
    b = generate_later(m, proj, sw, s, prompt)
    assert dump_trace_record(a.to_record()) == dump_trace_record(b.to_record())
    assert a.total_tokens == a.switch_step + len(a.explicit_token_ids)
    assert a.cache_length == len(prompt) + a.switch_step + len(a.explicit_token_ids)
