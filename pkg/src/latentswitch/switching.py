"""Latent-phase exit policies and parameter sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import ConfigError, InputError
from .latent import ProbeResult

REASONS = ("entropy", "stop_token", "fixed_budget", "hard_cap", "forced_min_not_reached", "boundary")


@dataclass(frozen=True)
class SwitchConfig:
    mode: str = "adaptive"
    fixed_steps: int = 50
    entropy_threshold: float = 7.0
    stop_tokens: frozenset[int] = field(default_factory=frozenset)
    max_latent_steps: int = 128
    min_latent_steps: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigError(f"switch mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if self.fixed_steps < 0:
            raise ConfigError("fixed_steps must be nonnegative")
        if self.max_latent_steps < 1:
            raise ConfigError("max_latent_steps must be positive")
        if not 0 <= self.min_latent_steps <= self.max_latent_steps:
            raise ConfigError("need 0 <= min_latent_steps <= max_latent_steps")
        object.__setattr__(self, "stop_tokens", frozenset(int(t) for t in self.stop_tokens))

    def validate_vocab(self, vocab_size: int) -> None:
        bad = [t for t in self.stop_tokens if not 0 <= t < vocab_size]
        if bad:
            raise ConfigError(f"stop tokens {sorted(bad)} outside vocabulary of size {vocab_size}")

    @property
    def latent_budget(self) -> int:
        """Most latent steps a run under this config can take."""
        if self.mode == "fixed":
            return min(self.fixed_steps, self.max_latent_steps)
        return self.max_latent_steps


@dataclass(frozen=True)
class SwitchDecision:
    switch: bool
    reason: str | None = None


def should_switch(config: SwitchConfig, step: int, probe: ProbeResult) -> SwitchDecision:
    """Decide after ``step`` completed latent steps whether to leave the latent phase."""
    if config.mode == "fixed":
        if step >= config.fixed_steps:
            return SwitchDecision(True, "fixed_budget")
        if step >= config.max_latent_steps:
            return SwitchDecision(True, "hard_cap")
        return SwitchDecision(False)
    if step < config.min_latent_steps:
        return SwitchDecision(False, "forced_min_not_reached")
    if probe.argmax_token in config.stop_tokens:
        return SwitchDecision(True, "stop_token")
    if probe.entropy > config.entropy_threshold:
        return SwitchDecision(True, "entropy")
    if step >= config.max_latent_steps:
        return SwitchDecision(True, "hard_cap")
    return SwitchDecision(False)


def replay_switch_step(
    config: SwitchConfig, entropies: Sequence[float], probe_tokens: Sequence[int]
) -> tuple[int, str] | None:
    """Where a recorded latent trajectory would have switched under ``config``.

    Returns ``(step, reason)`` or None if the recording ends first.
    """
    if config.mode == "fixed" and config.fixed_steps == 0:
        return 0, "fixed_budget"
    for s, (h, tok) in enumerate(zip(entropies, probe_tokens), 1):
        pr = ProbeResult(None, int(tok), float(h))  # distribution unused by the rule
        d = should_switch(config, s, pr)
        if d.switch:
            return s, d.reason
    return None


@dataclass(frozen=True)
class RunResult:
    """One task's outcome under a generation callback."""

    total_tokens: int
    latent_steps: int
    correct: bool | None = None


@dataclass(frozen=True)
class SweepRow:
    value: float
    accuracy: float
    mean_total_tokens: float
    mean_latent_steps: float
    n_runs: int


class SweepError(RuntimeError):
    def __init__(self, value, cause: BaseException) -> None:
        super().__init__(f"sweep failed at grid point {value!r}: {cause}")
        self.value = value
        self.__cause__ = cause


def _aggregate(value, results: Iterable[RunResult]) -> SweepRow:
    results = list(results)
    if not results:
        raise InputError(f"callback returned no runs for grid point {value!r}")
    graded = [r.correct for r in results if r.correct is not None]
    acc = sum(graded) / len(graded) if graded else math.nan
    n = len(results)
    return SweepRow(
        value,
        acc,
        sum(r.total_tokens for r in results) / n,
        sum(r.latent_steps for r in results) / n,
        n,
    )


def _sweep(grid: Sequence, runner: Callable[[object], Iterable[RunResult]]) -> list[SweepRow]:
    grid = list(grid)
    if not grid:
        raise InputError("sweep grid is empty")
    rows = []
    for value in grid:
        try:
            results = list(runner(value))
        except Exception as exc:
            raise SweepError(value, exc) from exc
        rows.append(_aggregate(value, results))
    return rows


def sweep_fixed_budgets(budgets: Sequence[int], runner: Callable[[int], Iterable[RunResult]]) -> list[SweepRow]:
    """Run ``runner(budget)`` over a task set for each fixed latent budget."""
    for b in budgets:
        if int(b) != b or b < 0:
            raise InputError(f"latent budget must be a nonnegative integer, got {b!r}")
    return _sweep(budgets, runner)


def sweep_entropy_thresholds(
    thresholds: Sequence[float], runner: Callable[[float], Iterable[RunResult]]
) -> list[SweepRow]:
    return _sweep(thresholds, runner)


def write_sweep_table(rows: Sequence[SweepRow], path: str | Path, kind: str) -> None:
    key = {"fixed": "budget", "entropy": "threshold"}[kind]
    lines = [f"{key}\taccuracy\tmean_total_tokens\tmean_latent_steps"]
    for r in rows:
        value = int(r.value) if kind == "fixed" else r.value
        lines.append(f"{value}\t{r.accuracy!r}\t{r.mean_total_tokens!r}\t{r.mean_latent_steps!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
