"""Post-hoc trace analysis: entropy profiles, per-step boxplot stats, PCA of hidden trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .generation import GenerationTrace

EXPLICIT_PCA_LIMIT = 256


@dataclass(frozen=True)
class BinStat:
    count: int
    mean: float | None = None
    q25: float | None = None
    q75: float | None = None

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass(frozen=True)
class EntropyProfile:
    bins: int
    latent: list[BinStat]
    explicit: list[BinStat] | None
    skipped: int


def _progress_bin(j: int, length: int, bins: int) -> int:
    if length <= 1:
        return 0
    return min(j * bins // (length - 1), bins - 1)


def _bin_stats(buckets: list[list[float]]) -> list[BinStat]:
    out = []
    for vals in buckets:
        if not vals:
            out.append(BinStat(0))
            continue
        a = np.asarray(vals, dtype=np.float64)
        out.append(BinStat(len(vals), float(a.mean()), float(np.percentile(a, 25)), float(np.percentile(a, 75))))
    return out


def sentence_spans(token_ids: Sequence[int], terminal_ids: Iterable[int]) -> list[tuple[int, int]]:
    """``[start, end)`` spans; a sentence ends right after a terminal-punctuation token."""
    terminal = set(terminal_ids)
    spans, start = [], 0
    for i, t in enumerate(token_ids):
        if t in terminal:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(token_ids):
        spans.append((start, len(token_ids)))
    return spans


def aggregate_entropy(
    traces: Sequence[GenerationTrace], bins: int = 100, terminal_ids: Iterable[int] = ()
) -> EntropyProfile:
    """Bin latent entropies by normalised latent progress, and explicit entropies by within-sentence progress."""
    traces = list(traces)
    if not traces:
        raise InputError("no traces to aggregate")
    if bins < 1:
        raise InputError("bins must be positive")
    terminal_ids = list(terminal_ids)
    latent = [[] for _ in range(bins)]
    explicit = [[] for _ in range(bins)]
    have_explicit = False
    skipped = 0
    for tr in traces:
        S = len(tr.latent_entropies)
        if S == 0:
            skipped += 1
            continue
        for j, h in enumerate(tr.latent_entropies):
            latent[_progress_bin(j, S, bins)].append(h)
        if tr.explicit_entropies is not None:
            have_explicit = True
            ent = tr.explicit_entropies
            toks = tr.explicit_token_ids[len(tr.explicit_token_ids) - len(ent):]
            for a, b in sentence_spans(toks, terminal_ids):
                for j in range(a, b):
                    explicit[_progress_bin(j - a, b - a, bins)].append(ent[j])
    return EntropyProfile(bins, _bin_stats(latent), _bin_stats(explicit) if have_explicit else None, skipped)


@dataclass(frozen=True)
class StepBox:
    step: int
    count: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    n_outliers: int


def per_step_entropy_distribution(traces: Sequence[GenerationTrace]) -> list[StepBox]:
    """Boxplot statistics of latent entropy at each absolute step, over traces still latent there."""
    traces = list(traces)
    if not traces:
        raise InputError("no traces to summarise")
    max_s = max(len(t.latent_entropies) for t in traces)
    rows = []
    for s in range(1, max_s + 1):
        vals = np.sort(np.asarray([t.latent_entropies[s - 1] for t in traces if len(t.latent_entropies) >= s]))
        q1, med, q3 = (float(v) for v in np.percentile(vals, [25, 50, 75]))
        iqr = q3 - q1
        lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inside = vals[(vals >= lo_fence) & (vals <= hi_fence)]
        rows.append(StepBox(s, len(vals), med, q1, q3, float(inside.min()), float(inside.max()),
                            int(len(vals) - len(inside))))
    return rows


@dataclass(frozen=True)
class PcaProjection:
    k: int
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    rows: list[tuple[int, str, int]]
    coords: np.ndarray


def pca_project(segments: Sequence[tuple[int, str, np.ndarray]], k: int = 6,
                explicit_limit: int = EXPLICIT_PCA_LIMIT) -> PcaProjection:
    """PCA over pooled hidden states.

    ``segments`` are ``(trace_index, phase, vectors)``; explicit segments are
    truncated to their first ``explicit_limit`` vectors. Each component's
    largest-magnitude coordinate is made positive.
    """
    rows, blocks = [], []
    for idx, phase, vecs in segments:
        v = np.asarray(vecs, dtype=np.float64)
        if v.size == 0:
            continue
        if v.ndim != 2:
            raise InputError("hidden vectors must form a 2-D array per segment")
        if phase == "explicit":
            v = v[:explicit_limit]
        blocks.append(v)
        rows += [(idx, phase, j + 1) for j in range(len(v))]
    if not blocks:
        raise InputError("no hidden vectors to project")
    X = np.concatenate(blocks)
    n, d = X.shape
    if not 1 <= k <= d:
        raise InputError(f"k={k} must lie in [1, {d}]")
    if n < k:
        raise InputError(f"{n} vectors are fewer than k={k}")
    mean = X.mean(0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:k].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    var = s**2
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PcaProjection(k, ratio, comps, mean, rows, Xc @ comps.T)


def hidden_segments(traces: Sequence[GenerationTrace]) -> list[tuple[int, str, np.ndarray]]:
    segs = []
    for i, t in enumerate(traces):
        if t.latent_hidden_log is None or t.explicit_hidden_log is None:
            raise InputError(f"trace {i} has no hidden-state log; re-run generate with --log-hidden")
        segs.append((i, "latent", np.asarray(t.latent_hidden_log, dtype=np.float64).reshape(-1, _dim(t))))
        segs.append((i, "explicit", np.asarray(t.explicit_hidden_log, dtype=np.float64).reshape(-1, _dim(t))))
    return segs


def _dim(t: GenerationTrace) -> int:
    for log in (t.latent_hidden_log, t.explicit_hidden_log):
        if log:
            return len(log[0])
    return 1


# ---------------------------------------------------------------- tables


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def fig3_rows(profile: EntropyProfile):
    header = ("bin", "progress_lo", "progress_hi", "latent_count", "latent_mean", "latent_q25", "latent_q75",
              "explicit_count", "explicit_mean", "explicit_q25", "explicit_q75")
    rows = []
    for b in range(profile.bins):
        lat = profile.latent[b]
        ex = profile.explicit[b] if profile.explicit is not None else BinStat(0)
        rows.append((b, b / profile.bins, (b + 1) / profile.bins,
                     lat.count, lat.mean, lat.q25, lat.q75, ex.count, ex.mean, ex.q25, ex.q75))
    return header, rows


def fig7_rows(boxes: Sequence[StepBox]):
    header = ("step", "count", "median", "q1", "q3", "whisker_low", "whisker_high", "n_outliers")
    return header, [(b.step, b.count, b.median, b.q1, b.q3, b.whisker_low, b.whisker_high, b.n_outliers) for b in boxes]


def fig4_rows(proj: PcaProjection):
    header = ("trace", "phase", "step") + tuple(f"pc{i + 1}" for i in range(proj.k))
    rows = [row + tuple(float(v) for v in c) for row, c in zip(proj.rows, proj.coords)]
    return header, rows
