import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentswitch.diagnostics import (
    aggregate_entropy,
    fig3_rows,
    fig4_rows,
    fig7_rows,
    hidden_segments,
    pca_project,
    per_step_entropy_distribution,
    write_table,
)
from latentswitch.errors import InputError
from latentswitch.generation import GenerationTrace


def trace(latent, explicit_tokens=(), explicit_entropies=None, **kw):
    return GenerationTrace([1], latent_entropies=list(latent), switch_step=len(latent),
                           explicit_token_ids=list(explicit_tokens),
                           explicit_entropies=None if explicit_entropies is None else list(explicit_entropies), **kw)


def test_constant_entropy_profile():
    prof = aggregate_entropy([trace([2.5] * 37)], bins=10)
    assert all(b.mean == 2.5 for b in prof.latent if not b.empty)
    assert prof.explicit is None


def test_hand_binned_two_traces():
    # 4 bins; progress j/(S-1) lands length-2 steps in bins 0 and 3, length-4 steps in 0, 1, 2, 3
    prof = aggregate_entropy([trace([1.0, 3.0]), trace([2.0, 4.0, 6.0, 8.0])], bins=4)
    assert [b.count for b in prof.latent] == [2, 1, 1, 2]
    assert [b.mean for b in prof.latent] == [1.5, 4.0, 6.0, 5.5]
    assert prof.latent[0].q25 == 1.25 and prof.latent[0].q75 == 1.75


def test_empty_bins_are_marked_not_zero():
    prof = aggregate_entropy([trace([1.0, 2.0])], bins=5)
    assert [b.empty for b in prof.latent] == [False, True, True, True, False]
    assert prof.latent[2].mean is None


def test_zero_step_traces_skipped_and_empty_input():
    prof = aggregate_entropy([trace([]), trace([1.0])], bins=3)
    assert prof.skipped == 1 and prof.latent[0].count == 1
    with pytest.raises(InputError):
        aggregate_entropy([])


def test_explicit_within_sentence_progress():
    dot = 99
    # two sentences of lengths 3 and 2 ending at the terminal token
    tr = trace([0.0], [7, 7, dot, 7, dot], [1.0, 2.0, 3.0, 10.0, 20.0])
    prof = aggregate_entropy([tr], bins=2, terminal_ids=[dot])
    # sentence one: progress 0, .5, 1 -> bins 0, 1, 1; sentence two: progress 0, 1 -> bins 0, 1
    assert [b.count for b in prof.explicit] == [2, 3]
    assert prof.explicit[0].mean == 5.5
    assert prof.explicit[1].mean == pytest.approx(25.0 / 3)


def test_per_step_identical_and_survivorship():
    boxes = per_step_entropy_distribution([trace([1.0, 2.0, 3.0])] * 4)
    assert all(b.q1 == b.q3 for b in boxes)
    boxes = per_step_entropy_distribution([trace([1.0] * n) for n in (5, 2, 7, 7, 1)])
    counts = [b.count for b in boxes]
    assert counts == sorted(counts, reverse=True) and counts[0] == 5
    with pytest.raises(InputError):
        per_step_entropy_distribution([])


def _sorted_quartiles(vals):
    # linear-interpolation quartiles straight from the sorted sample
    v = sorted(vals)
    out = []
    for q in (0.25, 0.5, 0.75):
        pos = q * (len(v) - 1)
        lo = int(pos)
        hi = min(lo + 1, len(v) - 1)
        out.append(v[lo] + (pos - lo) * (v[hi] - v[lo]))
    return out


def test_three_trace_quartiles_against_sorting_oracle():
    traces = [trace([0.5, 4.0, 1.0]), trace([2.0, 3.0]), trace([9.0, 0.25, 6.0, 2.0])]
    boxes = per_step_entropy_distribution(traces)
    for b in boxes:
        vals = [t.latent_entropies[b.step - 1] for t in traces if len(t.latent_entropies) >= b.step]
        q1, med, q3 = _sorted_quartiles(vals)
        assert (b.q1, b.median, b.q3) == pytest.approx((q1, med, q3), abs=1e-12)
        assert b.count == len(vals)


def test_outlier_whiskers():
    traces = [trace([v]) for v in (1.0, 1.0, 1.0, 1.0, 100.0)]
    (b,) = per_step_entropy_distribution(traces)
    assert b.n_outliers == 1 and b.whisker_high == 1.0


def test_pca_rank_deficient_plane():
    rng = np.random.default_rng(0)
    basis = rng.normal(size=(2, 6))
    X = rng.normal(size=(40, 2)) @ basis
    p = pca_project([(0, "latent", X)], k=3)
    assert p.explained_variance_ratio[2] < 1e-9
    assert p.explained_variance_ratio[:2].sum() == pytest.approx(1.0, abs=1e-9)


def test_pca_full_rank_reconstruction():
    X = np.random.default_rng(1).normal(size=(30, 5))
    p = pca_project([(0, "latent", X)], k=5)
    np.testing.assert_allclose(p.coords @ p.components, X - X.mean(0), atol=1e-6)


def test_pca_matches_covariance_eigen_oracle():
    rng = np.random.default_rng(42)
    A = rng.normal(size=(8, 8))
    X = rng.multivariate_normal(np.zeros(8), A @ A.T, size=50)
    p = pca_project([(0, "latent", X)], k=8)
    evals, evecs = np.linalg.eigh(np.cov(X, rowvar=False))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    np.testing.assert_allclose(p.explained_variance_ratio, evals / evals.sum(), atol=1e-6)
    for i in range(8):
        assert abs(abs(p.components[i] @ evecs[:, i]) - 1.0) < 1e-6
        assert p.components[i][np.argmax(np.abs(p.components[i]))] > 0


def test_pca_errors_and_explicit_limit():
    with pytest.raises(InputError):
        pca_project([(0, "latent", np.ones((2, 4)))], k=3)
    with pytest.raises(InputError):
        pca_project([], k=1)
    p = pca_project([(0, "latent", np.eye(4)), (0, "explicit", np.random.default_rng(0).normal(size=(10, 4)))],
                    k=2, explicit_limit=3)
    assert len(p.rows) == 7 and p.rows[-1] == (0, "explicit", 3)


def test_hidden_segments_requires_logs():
    with pytest.raises(InputError, match="log-hidden"):
        hidden_segments([trace([1.0])])


def test_tables_are_deterministic(tmp_path):
    traces = [trace([1.0, 3.0], [4, 5], [0.5, 0.7]), trace([2.0])]
    for name, (header, rows) in (("a", fig3_rows(aggregate_entropy(traces, bins=4, terminal_ids=[5]))),
                                 ("b", fig7_rows(per_step_entropy_distribution(traces)))):
        write_table(tmp_path / f"{name}1.tsv", header, rows)
        write_table(tmp_path / f"{name}2.tsv", header, rows)
        assert (tmp_path / f"{name}1.tsv").read_bytes() == (tmp_path / f"{name}2.tsv").read_bytes()
    header, rows = fig4_rows(pca_project([(0, "latent", np.eye(3))], k=2))
    assert header == ("trace", "phase", "step", "pc1", "pc2") and len(rows) == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(2, 6), st.integers(0, 2**31))
def test_explained_variance_descends(n, d, seed):
    X = np.random.default_rng(seed).normal(size=(n + d, d))
    p = pca_project([(0, "latent", X)], k=d)
    r = p.explained_variance_ratio
    assert np.all(np.diff(r) <= 1e-12) and r.sum() <= 1 + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10), min_size=1, max_size=12), min_size=1, max_size=8), st.integers(1, 20))
def test_profile_means_finite_and_counts_conserved(ents, bins):
    prof = aggregate_entropy([trace(e) for e in ents], bins=bins)
    assert sum(b.count for b in prof.latent) == sum(map(len, ents))
    assert all(np.isfinite(b.mean) for b in prof.latent if not b.empty)
