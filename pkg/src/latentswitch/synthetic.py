"""Seeded synthetic source records for toy-scale runs and tests."""

from __future__ import annotations

import numpy as np

from .corpus import DIFFICULTIES, SourceRecord

_LETTERS = "abcdef"
_FILLER = "0123456789abcdef"


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _text(rng: np.random.Generator, alphabet: str, n: int) -> str:
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def copy_arith_records(n: int, seed: int = 0, budgets: tuple[int, int] = (2, 8)) -> list[SourceRecord]:
    """Alternating copy and addition tasks; intuition length ``2m`` gives latent budget ``m``."""
    rng = _rng(seed)
    lo, hi = budgets
    out = []
    for i in range(n):
        m = int(rng.integers(lo, hi + 1))
        if i % 2 == 0:
            word = _text(rng, _LETTERS, int(rng.integers(2, 5)))
            problem, cot, answer = f"{word}?", f"{word}.", word
        else:
            a, b = (int(x) for x in rng.integers(0, 50, 2))
            problem, cot, answer = f"{a}+{b}=", f"{a}+{b}={a + b}.", str(a + b)
        out.append(SourceRecord(
            record_id=f"syn-{seed}-{i}",
            problem=problem,
            intuition=_text(rng, _FILLER, 2 * m),
            short_cot=cot,
            answer=answer,
            difficulty=DIFFICULTIES[i % 3],
            original_cot_len=2 * len(cot),
        ))
    return out


def uniform_length_records(n: int, lo: int = 20, hi: int = 200, seed: int = 0) -> list[SourceRecord]:
    """Records whose intuition lengths are uniform on ``[lo, hi]`` characters."""
    rng = _rng(seed)
    out = []
    for i in range(n):
        L = int(rng.integers(lo, hi + 1))
        cot = _text(rng, _FILLER, int(rng.integers(4, 40)))
        out.append(SourceRecord(
            record_id=f"len-{seed}-{i}",
            problem=_text(rng, _FILLER, int(rng.integers(3, 12))) + "?",
            intuition=_text(rng, _FILLER, L),
            short_cot=cot,
            answer=_text(rng, _FILLER, int(rng.integers(1, 5))),
            difficulty=DIFFICULTIES[int(rng.integers(0, 3))],
            original_cot_len=len(cot) + int(rng.integers(1, 60)),
        ))
    return out
