"""Training-corpus construction: budgets, template rendering, masks, teacher references, stats."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError
from .model import PAD_ROLE, SPECIAL_ROLES
from .training import IGNORE, TrainingExample

SCHEMA_VERSION = 1
DIFFICULTIES = ("easy", "medium", "hard")

DEFAULT_SPECIAL_STRINGS = {
    PAD_ROLE: "<|latent_pad|>",
    "latent_open": "<latent_think>",
    "latent_close": "</latent_think>",
    "think_open": "<think>",
    "think_close": "</think>",
    "end_of_message": "<|im_end|>",
    "end_of_text": "<|endoftext|>",
}
TOKEN_ROLES = (PAD_ROLE,) + SPECIAL_ROLES
# 25 characters: with the 7 reserved ids this gives a 32-token vocabulary
DEFAULT_ALPHABET = "0123456789+-*=.,?: abcdef"


class EncodingError(DataError):
    pass


class ToyTokenizer:
    """Reversible character-level tokenizer with reserved ids for the structural tokens.

    Ids ``0..6`` are the special tokens in ``TOKEN_ROLES`` order, then one id
    per alphabet character.
    """

    def __init__(self, alphabet: str = DEFAULT_ALPHABET, special_strings: dict[str, str] | None = None,
                 terminal: str = ".?!\n") -> None:
        specials = dict(DEFAULT_SPECIAL_STRINGS if special_strings is None else special_strings)
        missing = [r for r in TOKEN_ROLES if r not in specials]
        if missing:
            raise ConfigError(f"tokenizer spec lacks special tokens {missing}")
        if len(set(alphabet)) != len(alphabet):
            raise ConfigError("alphabet contains duplicate characters")
        if len(set(specials.values())) != len(specials):
            raise ConfigError("special-token strings must be distinct")
        self.alphabet = alphabet
        self.special_strings = {r: specials[r] for r in TOKEN_ROLES}
        self.special_tokens = {r: i for i, r in enumerate(TOKEN_ROLES)}
        self._char_to_id = {ch: len(TOKEN_ROLES) + i for i, ch in enumerate(alphabet)}
        self._id_to_str = [self.special_strings[r] for r in TOKEN_ROLES] + list(alphabet)
        # longest first so no special string is split by a shorter one
        self._specials_by_len = sorted(
            ((s, self.special_tokens[r]) for r, s in self.special_strings.items()), key=lambda x: -len(x[0])
        )
        self.terminal = terminal
        self.terminal_ids = sorted(self._char_to_id[c] for c in terminal if c in self._char_to_id)

    @property
    def vocab_size(self) -> int:
        return len(self._id_to_str)

    def vocabulary(self) -> list[str]:
        return list(self._id_to_str)

    def to_spec(self) -> dict:
        return {"alphabet": self.alphabet, "special_strings": dict(self.special_strings), "terminal": self.terminal}

    def encode(self, text: str) -> list[int]:
        ids, i = [], 0
        while i < len(text):
            for s, tid in self._specials_by_len:
                if text.startswith(s, i):
                    ids.append(tid)
                    i += len(s)
                    break
            else:
                ch = text[i]
                if ch not in self._char_to_id:
                    raise EncodingError(f"character {ch!r} at offset {i} is not in the tokenizer alphabet")
                ids.append(self._char_to_id[ch])
                i += 1
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for t in ids:
            if not 0 <= t < len(self._id_to_str):
                raise EncodingError(f"token id {t} outside vocabulary")
            out.append(self._id_to_str[t])
        return "".join(out)


def toy_tokenizer(spec: dict | None = None) -> ToyTokenizer:
    spec = spec or {}
    return ToyTokenizer(
        spec.get("alphabet", DEFAULT_ALPHABET),
        spec.get("special_strings"),
        spec.get("terminal", ".?!\n"),
    )


@dataclass(frozen=True)
class SourceRecord:
    record_id: str
    problem: str
    intuition: str
    short_cot: str
    answer: str
    difficulty: str = "medium"
    original_cot_len: int | None = None

    def __post_init__(self) -> None:
        for name in ("problem", "intuition", "short_cot", "answer"):
            value = getattr(self, name)
            if not isinstance(value, str) or not " ".join(value.split()):
                raise DataError(f"record {self.record_id!r}: {name} is empty")
        if self.difficulty not in DIFFICULTIES:
            raise DataError(f"record {self.record_id!r}: unknown difficulty {self.difficulty!r}")
        if self.original_cot_len is not None and self.original_cot_len <= 0:
            raise DataError(f"record {self.record_id!r}: original_cot_len must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SourceRecord":
        try:
            return cls(
                record_id=str(d["record_id"]),
                problem=d["problem"],
                intuition=d["intuition"],
                short_cot=d["short_cot"],
                answer=d["answer"],
                difficulty=d.get("difficulty", "medium"),
                original_cot_len=d.get("original_cot_len"),
            )
        except KeyError as exc:
            raise DataError(f"record {d.get('record_id', '?')!r}: missing field {exc.args[0]!r}") from None


def assign_latent_budget(intuition_token_len: int, cap: int = 128) -> int:
    """``clamp(round(L / 2), 1, cap)`` with halves rounded up."""
    if intuition_token_len < 1:
        raise DataError("intuition has no tokens; cannot assign a latent budget")
    if cap < 1:
        raise ConfigError("latent cap must be positive")
    return max(1, min(cap, (intuition_token_len + 1) // 2))


@dataclass
class RenderedExample:
    example: TrainingExample
    record_id: str
    explicit_offset_map: dict[int, int]
    teacher_token_ids: list[int]
    teacher_boundary: int
    prompt_len: int
    intuition_len: int
    difficulty: str = "medium"
    compression_ratio: float | None = None

    def to_record(self) -> dict:
        ex = self.example
        return {
            "schema_version": SCHEMA_VERSION,
            "record_id": self.record_id,
            "token_ids": ex.token_ids,
            "labels": ex.labels,
            "masks": {name: rle_encode(getattr(ex, name)) for name in _MASKS},
            "n_latent_steps": ex.n_latent_steps,
            "offset_map": [[s, t] for s, t in sorted(self.explicit_offset_map.items())],
            "teacher_token_ids": self.teacher_token_ids,
            "teacher_boundary": self.teacher_boundary,
            "prompt_len": self.prompt_len,
            "intuition_len": self.intuition_len,
            "difficulty": self.difficulty,
            "compression_ratio": self.compression_ratio,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RenderedExample":
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported rendered schema version {rec.get('schema_version')!r}")
        n = len(rec["token_ids"])
        masks = {name: rle_decode(rec["masks"][name], n) for name in _MASKS}
        ex = TrainingExample(rec["token_ids"], rec["labels"], n_latent_steps=rec["n_latent_steps"], **masks)
        return cls(
            ex,
            rec["record_id"],
            {int(s): int(t) for s, t in rec["offset_map"]},
            rec["teacher_token_ids"],
            rec["teacher_boundary"],
            rec["prompt_len"],
            rec["intuition_len"],
            rec.get("difficulty", "medium"),
            rec.get("compression_ratio"),
        )


_MASKS = (
    "mask_latent_interior",
    "mask_latent_all",
    "mask_cot_interior",
    "mask_noncot_supervised",
    "mask_kl_positions",
    "halt_targets",
)


def rle_encode(mask: Sequence[bool]) -> list[list[int]]:
    """``[[start, length], ...]`` runs of true bits."""
    runs, start = [], None
    for i, b in enumerate(list(mask) + [False]):
        if b and start is None:
            start = i
        elif not b and start is not None:
            runs.append([start, i - start])
            start = None
    return runs


def rle_decode(runs: Sequence[Sequence[int]], n: int) -> list[bool]:
    mask = [False] * n
    for start, length in runs:
        if start < 0 or start + length > n:
            raise DataError(f"mask run {start}+{length} outside sequence of length {n}")
        mask[start : start + length] = [True] * length
    return mask


def build_teacher_reference(record: SourceRecord, tokenizer: ToyTokenizer) -> tuple[list[int], int]:
    """Teacher input = problem + intuition; continuation = think_open, CoT, think_close, answer.

    Returns ``(tokens, boundary)`` with ``tokens[boundary:]`` the continuation.
    """
    st = tokenizer.special_tokens
    prefix = tokenizer.encode(record.problem) + tokenizer.encode(record.intuition)
    cont = [st["think_open"]] + tokenizer.encode(record.short_cot) + [st["think_close"]] + tokenizer.encode(record.answer)
    return prefix + cont, len(prefix)


def render_example(
    record: SourceRecord, tokenizer: ToyTokenizer, cap: int = 128, max_seq_len: int | None = None
) -> RenderedExample:
    """Tokenise a record into the two-part response template with labels and masks.

    Layout: prompt, latent_open, m placeholders, latent_close, think_open, CoT,
    think_close, answer, end_of_message.
    """
    st = tokenizer.special_tokens
    missing = [r for r in TOKEN_ROLES if r not in st]
    if missing:
        raise ConfigError(f"tokenizer lacks special tokens {missing}")
    prompt = tokenizer.encode(record.problem)
    intuition = tokenizer.encode(record.intuition)
    cot = tokenizer.encode(record.short_cot)
    answer = tokenizer.encode(record.answer)
    m = assign_latent_budget(len(intuition), cap)

    segments: list[tuple[str, list[int]]] = [
        ("prompt", prompt),
        ("latent_open", [st["latent_open"]]),
        ("latent", [st[PAD_ROLE]] * m),
        ("latent_close", [st["latent_close"]]),
        ("think_open", [st["think_open"]]),
        ("cot", cot),
        ("think_close", [st["think_close"]]),
        ("answer", answer),
        ("end", [st["end_of_message"]]),
    ]
    tokens: list[int] = []
    kinds: list[str] = []
    for kind, ids in segments:
        tokens += ids
        kinds += [kind] * len(ids)
    n = len(tokens)
    ref_tokens, boundary = build_teacher_reference(record, tokenizer)
    if max_seq_len is not None and max(n, len(ref_tokens)) > max_seq_len:
        raise DataError(f"record {record.record_id!r}: {max(n, len(ref_tokens))} tokens exceed max_seq_len={max_seq_len}")

    noncot_kinds = {"latent_open", "latent_close", "think_open", "think_close", "answer", "end"}
    kl_kinds = {"think_open", "cot", "think_close", "answer"}
    mask_int = [k == "latent" for k in kinds]
    mask_all = [k in ("latent", "latent_close") for k in kinds]
    mask_cot = [k == "cot" for k in kinds]
    mask_noncot = [k in noncot_kinds for k in kinds]
    mask_kl = [k in kl_kinds for k in kinds]
    halt = [k == "latent_close" for k in kinds]
    labels = [t if (c or nc) else IGNORE for t, c, nc in zip(tokens, mask_cot, mask_noncot)]
    example = TrainingExample(tokens, labels, mask_int, mask_all, mask_cot, mask_noncot, mask_kl, halt, m)

    kl_positions = [i for i, b in enumerate(mask_kl) if b]
    if len(kl_positions) != len(ref_tokens) - boundary:
        raise DataError(f"record {record.record_id!r}: teacher continuation does not align with KL positions")
    offset_map = {sp: boundary + j for j, sp in enumerate(kl_positions)}
    ratio = len(cot) / record.original_cot_len if record.original_cot_len else None
    return RenderedExample(
        example, record.record_id, offset_map, ref_tokens, boundary, len(prompt), len(intuition),
        record.difficulty, ratio,
    )


def parse_template(rendered: RenderedExample, tokenizer: ToyTokenizer) -> dict[str, list[int]]:
    """Split a rendered sequence back into its template segments (raises on malformed order)."""
    st = tokenizer.special_tokens
    ids = rendered.example.token_ids
    p = rendered.prompt_len
    try:
        if ids[p] != st["latent_open"]:
            raise DataError("expected latent_open after the prompt")
        close = ids.index(st["latent_close"], p + 1)
        if any(t != st[PAD_ROLE] for t in ids[p + 1 : close]):
            raise DataError("non-placeholder token inside the latent segment")
        if ids[close + 1] != st["think_open"]:
            raise DataError("expected think_open after latent_close")
        tclose = ids.index(st["think_close"], close + 2)
        if ids[-1] != st["end_of_message"]:
            raise DataError("expected end_of_message at the end")
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed template: {exc}") from None
    return {
        "prompt": ids[:p],
        "latent": ids[p + 1 : close],
        "cot": ids[close + 2 : tclose],
        "answer": ids[tclose + 1 : -1],
    }


def _histogram(values: Sequence[float], bins: int) -> dict:
    if not values:
        return {"edges": [], "counts": []}
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def corpus_stats(rendered: Sequence[RenderedExample], bins: int = 20) -> dict:
    """Counts, difficulty shares (percent), compression-ratio and latent-step summaries, histograms."""
    rendered = list(rendered)
    if not rendered:
        raise InputError("corpus is empty")
    n = len(rendered)
    shares = {d: 100.0 * sum(r.difficulty == d for r in rendered) / n for d in DIFFICULTIES}
    ratios = [r.compression_ratio for r in rendered if r.compression_ratio is not None]
    steps = [r.example.n_latent_steps for r in rendered]
    cot_lens = [sum(r.example.mask_cot_interior) for r in rendered]
    intuition_lens = [r.intuition_len for r in rendered]

    def summary(xs):
        return {"mean": statistics.fmean(xs), "median": float(statistics.median(xs))} if xs else None

    return {
        "count": n,
        "difficulty_share_percent": shares,
        "compression_ratio": summary(ratios),
        "latent_steps": summary(steps),
        "histograms": {
            "latent_steps": _histogram(steps, bins),
            "intuition_tokens": _histogram(intuition_lens, bins),
            "cot_tokens": _histogram(cot_lens, bins),
            "compression_ratio": _histogram(ratios, bins),
        },
    }


def curriculum_order(rendered: Sequence[RenderedExample], seed: int) -> list[RenderedExample]:
    """Easy, then medium, then hard; shuffled within each bucket."""
    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    for d in DIFFICULTIES:
        bucket = [r for r in rendered if r.difficulty == d]
        out += [bucket[i] for i in rng.permutation(len(bucket))]
    return out


def read_jsonl(path) -> list[tuple[int, dict | Exception]]:
    """Parse each non-blank line; malformed lines come back as the exception."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                out.append((lineno, DataError(f"line {lineno}: invalid JSON ({exc.msg})")))
    return out
