"""Latent teacher-forcing, split CE, top-k teacher KL, gated halting loss, optimisation.

Alignment convention used by every loss: the logit row at position ``i - 1``
scores the token at position ``i``. A mask bit at ``i`` therefore selects
``logits[i - 1]``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericError
from .latent import LatentProjector
from .model import ModelBundle, decode_logits, embed_tokens, forward_embeddings, forward_tokens

log = logging.getLogger(__name__)

IGNORE = -100
KL_PROB_FLOOR = 1e-12
DEFAULT_FORBIDDEN_ROLES = ("think_open", "think_close", "end_of_message", "end_of_text", "latent_open")

MASK_FIELDS = (
    "mask_latent_interior",
    "mask_latent_all",
    "mask_cot_interior",
    "mask_noncot_supervised",
    "mask_kl_positions",
    "halt_targets",
)


@dataclass
class TrainingExample:
    token_ids: list[int]
    labels: list[int]
    mask_latent_interior: list[bool]
    mask_latent_all: list[bool]
    mask_cot_interior: list[bool]
    mask_noncot_supervised: list[bool]
    mask_kl_positions: list[bool]
    halt_targets: list[bool]
    n_latent_steps: int

    def __len__(self) -> int:
        return len(self.token_ids)

    def positions(self, name: str) -> list[int]:
        return [i for i, b in enumerate(getattr(self, name)) if b]

    def latent_span(self) -> tuple[int, int]:
        """``(start, m)`` of the contiguous latent-interior block."""
        pos = self.positions("mask_latent_interior")
        if not pos:
            return len(self.token_ids), 0
        if pos != list(range(pos[0], pos[0] + len(pos))):
            raise DataError("latent interior positions are not contiguous")
        return pos[0], len(pos)

    def validate(self) -> None:
        n = len(self.token_ids)
        if len(self.labels) != n or any(len(getattr(self, f)) != n for f in MASK_FIELDS):
            raise DataError("token_ids, labels and masks must have equal length")
        interior = set(self.positions("mask_latent_interior"))
        lat_all = set(self.positions("mask_latent_all"))
        cot = set(self.positions("mask_cot_interior"))
        noncot = set(self.positions("mask_noncot_supervised"))
        halt = self.positions("halt_targets")
        if not interior < lat_all:
            raise DataError("latent interior must be a strict subset of the latent segment")
        if cot & noncot:
            raise DataError("CoT and non-CoT supervision sets overlap")
        supervised = {i for i, y in enumerate(self.labels) if y != IGNORE}
        if supervised != cot | noncot:
            raise DataError("labels must be set exactly on CoT and non-CoT positions")
        if len(halt) != 1 or halt[0] not in lat_all:
            raise DataError("exactly one halt target, inside the latent segment, is required")
        if len(interior) != self.n_latent_steps:
            raise DataError(f"{len(interior)} latent interior positions but n_latent_steps={self.n_latent_steps}")
        if 0 in supervised:
            raise DataError("position 0 cannot be supervised (nothing precedes it)")
        for i in supervised:
            if self.labels[i] != self.token_ids[i]:
                raise DataError(f"label at {i} differs from its token")
        self.latent_span()


@dataclass
class TeacherDistribution:
    """Top-k teacher probabilities keyed by student position (the row at ``i`` scores token ``i``)."""

    record_id: str
    positions: list[int]
    token_ids: np.ndarray
    probs: np.ndarray
    tail: np.ndarray

    def validate(self) -> None:
        if len({len(self.positions), len(self.token_ids), len(self.probs), len(self.tail)}) != 1:
            raise DataError(f"{self.record_id}: teacher arrays disagree in length")
        for row_ids, row_p, t in zip(self.token_ids, self.probs, self.tail):
            if len(set(row_ids.tolist())) != len(row_ids):
                raise DataError(f"{self.record_id}: duplicate teacher ids")
            if (row_p <= 0).any() or abs(row_p.sum() + t - 1) > 1e-6:
                raise DataError(f"{self.record_id}: teacher probabilities malformed")

    def to_record(self) -> dict:
        return {
            "record_id": self.record_id,
            "positions": list(self.positions),
            "token_ids": self.token_ids.tolist(),
            "probs": self.probs.tolist(),
            "tail": self.tail.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TeacherDistribution":
        return cls(
            rec["record_id"],
            [int(p) for p in rec["positions"]],
            np.asarray(rec["token_ids"], dtype=np.int64).reshape(len(rec["positions"]), -1),
            np.asarray(rec["probs"], dtype=np.float64).reshape(len(rec["positions"]), -1),
            np.asarray(rec["tail"], dtype=np.float64),
        )


def write_teacher_sidecar(path: str | Path, teachers: Iterable[TeacherDistribution]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in teachers:
            fh.write(json.dumps(t.to_record(), sort_keys=True) + "\n")


def read_teacher_sidecar(path: str | Path) -> dict[str, TeacherDistribution]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                t = TeacherDistribution.from_record(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad teacher record ({exc})") from exc
            out[t.record_id] = t
    return out


@dataclass
class TrainConfig:
    lambda_cot: float = 0.5
    lambda_kl: float = 0.25
    kl_temperature: float = 1.0
    lambda_halt_base: float = 0.025
    ema_decay: float = 0.99
    gate_epsilon: float = 1e-8
    lr_peak: float = 1e-7
    lr_min: float = 1e-8
    warmup_steps: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    accumulation: int = 4
    forbidden_roles: tuple[str, ...] = DEFAULT_FORBIDDEN_ROLES

    def __post_init__(self) -> None:
        for name in ("lambda_cot", "lambda_kl", "lambda_halt_base", "lr_peak", "lr_min", "weight_decay", "gate_epsilon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.kl_temperature <= 0:
            raise ConfigError("kl_temperature must be positive")
        if self.accumulation < 1:
            raise ConfigError("accumulation must be at least 1")
        if "latent_close" in self.forbidden_roles:
            raise ConfigError("latent_close cannot be a forbidden token")
        self.betas = tuple(self.betas)
        self.forbidden_roles = tuple(self.forbidden_roles)

    def forbidden_ids(self, model: ModelBundle) -> set[int]:
        st = model.config.special_tokens
        return {st[r] for r in self.forbidden_roles if r in st}


@dataclass
class LossReport:
    ce_noncot: float
    ce_cot: float
    ce_total: float
    kl: float
    halt_raw: float
    gate_alpha: float
    halt_effective: float
    total: float
    ema_ce: float


REPORT_FIELDS = tuple(LossReport.__dataclass_fields__)


# ---------------------------------------------------------------- forward


def latent_forward(model: ModelBundle, projector: LatentProjector, example: TrainingExample) -> torch.Tensor:
    """Per-position logits with latent-interior inputs replaced by projector outputs.

    Latent embeddings come from a sequential cached rollout
    (``e_t = g(h_{t-1})``); they are then written into the input sequence and
    the whole sequence is run teacher-forced in one pass. Gradients flow through
    the rollout.
    """
    start, m = example.latent_span()
    if m == 0:
        return forward_tokens(model, example.token_ids)
    if start == 0:
        raise DataError("latent segment cannot start at position 0")
    prefix = embed_tokens(model, example.token_ids[:start])
    hidden, cache = forward_embeddings(model, prefix)
    h = hidden[-1]
    latent = []
    for _ in range(m):
        e = projector(h)
        latent.append(e)
        hidden, cache = forward_embeddings(model, e[None, :], cache)
        h = hidden[0]
    rest = example.token_ids[start + m :]
    parts = [prefix, torch.stack(latent)]
    if rest:
        parts.append(embed_tokens(model, rest))
    full, _ = forward_embeddings(model, torch.cat(parts, 0))
    return decode_logits(model, full)


# ---------------------------------------------------------------- losses


def _rows(positions: Sequence[int]) -> torch.Tensor:
    if any(p < 1 for p in positions):
        raise DataError("position 0 has no preceding logit row")
    return torch.tensor([p - 1 for p in positions], dtype=torch.long)


def _mean_nll(logits: torch.Tensor, labels: Sequence[int], positions: list[int]) -> torch.Tensor:
    if not positions:
        return logits.new_zeros(())
    logp = F.log_softmax(logits[_rows(positions)], -1)
    targets = torch.tensor([labels[p] for p in positions], dtype=torch.long)
    return -logp.gather(1, targets[:, None]).mean()


def loss_ce(logits: torch.Tensor, example: TrainingExample, lambda_cot: float = 0.5):
    """Returns ``(ce_noncot, ce_cot, ce_total)``; each mean runs over its own position set."""
    if logits.shape[0] != len(example):
        raise DataError("logits and example disagree in length")
    noncot = example.positions("mask_noncot_supervised")
    if not noncot:
        raise DataError("degenerate example: no non-CoT supervised positions")
    ce_noncot = _mean_nll(logits, example.labels, noncot)
    ce_cot = _mean_nll(logits, example.labels, example.positions("mask_cot_interior"))
    return ce_noncot, ce_cot, ce_noncot + lambda_cot * ce_cot


class ClampCounter:
    """Counts student probabilities clamped at the KL floor."""

    count = 0


def loss_kl(
    logits: torch.Tensor, teacher: TeacherDistribution, example: TrainingExample, temperature: float = 1.0
) -> torch.Tensor:
    """Mean over teacher positions of KL(q || p) restricted to the stored ids.

    Stored top-k teacher probabilities are renormalised (tail dropped); at
    temperature T they are sharpened as ``q^(1/T)``, which equals the
    temperature-T softmax restricted to those ids. No T^2 factor.
    """
    if not teacher.positions:
        return logits.new_zeros(())
    kl_pos = set(example.positions("mask_kl_positions"))
    stray = [p for p in teacher.positions if p not in kl_pos]
    if stray:
        raise DataError(f"{teacher.record_id}: teacher positions {stray[:5]} outside the KL mask")
    log_p = F.log_softmax(logits[_rows(teacher.positions)] / temperature, -1)
    ids = torch.as_tensor(teacher.token_ids, dtype=torch.long)
    log_p_sel = log_p.gather(1, ids)
    floor = math.log(KL_PROB_FLOOR)
    clamped = int((log_p_sel.detach() < floor).sum())
    if clamped:
        ClampCounter.count += clamped
        log.warning("clamped %d student probabilities at %g", clamped, KL_PROB_FLOOR)
        log_p_sel = torch.clamp(log_p_sel, min=floor)
    q = torch.as_tensor(teacher.probs, dtype=logits.dtype)
    if temperature != 1.0:
        q = q ** (1.0 / temperature)
    q = q / q.sum(1, keepdim=True)
    kl = (q * (torch.log(q) - log_p_sel)).sum(1)
    return kl.mean()


def loss_halt(
    logits: torch.Tensor,
    example: TrainingExample,
    forbidden: set[int],
    close_id: int,
    structural: set[int],
) -> torch.Tensor:
    """Hinge on forbidden structural tokens over the latent interior + boundary BCE over the latent segment.

    ``structural`` is every special token id; the hinge reference is the
    largest logit outside it.
    """
    if close_id in forbidden:
        raise ConfigError("latent_close cannot be forbidden")
    V = logits.shape[1]
    term = logits.new_zeros(())
    interior = example.positions("mask_latent_interior")
    if interior and forbidden:
        z = logits[_rows(interior)]
        allowed = torch.ones(V, dtype=torch.bool)
        allowed[list(structural)] = False
        z_max = z.masked_fill(~allowed, float("-inf")).max(1, keepdim=True).values
        fid = torch.tensor(sorted(forbidden), dtype=torch.long)
        term = F.relu(z[:, fid] - z_max).sum(1).mean()
    lat = example.positions("mask_latent_all")
    if lat:
        zc = logits[_rows(lat), close_id]
        b = torch.tensor([float(example.halt_targets[p]) for p in lat], dtype=logits.dtype)
        term = term + F.binary_cross_entropy_with_logits(zc, b, reduction="mean")
    return term


def gate_alpha(ema_ce: float, ce_now: float, epsilon: float = 1e-8) -> float:
    return min(1.0, max(0.0, ema_ce / (ce_now + epsilon)))


@dataclass
class GateState:
    ema: float | None = None


def total_loss(
    ce_noncot,
    ce_cot,
    ce_total,
    kl,
    halt_raw,
    config: TrainConfig,
    state: GateState,
) -> tuple[LossReport, torch.Tensor]:
    """Combine the parts; the gate is computed from the current EMA, which is updated afterwards.

    The gate is a constant factor (no gradient flows through it).
    """
    as_t = lambda x: x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)
    ce_total, kl, halt_raw = as_t(ce_total), as_t(kl), as_t(halt_raw)
    ce_value = float(ce_total.detach())
    if state.ema is None:
        state.ema = ce_value
    alpha = gate_alpha(state.ema, ce_value, config.gate_epsilon)
    halt_eff = alpha * config.lambda_halt_base * halt_raw
    total = ce_total + config.lambda_kl * kl + halt_eff
    state.ema = config.ema_decay * state.ema + (1 - config.ema_decay) * ce_value
    report = LossReport(
        ce_noncot=float(as_t(ce_noncot).detach()),
        ce_cot=float(as_t(ce_cot).detach()),
        ce_total=ce_value,
        kl=float(kl.detach()),
        halt_raw=float(halt_raw.detach()),
        gate_alpha=alpha,
        halt_effective=float(halt_eff.detach()),
        total=float(total.detach()),
        ema_ce=state.ema,
    )
    return report, total


def example_losses(
    model: ModelBundle,
    projector: LatentProjector,
    example: TrainingExample,
    config: TrainConfig,
    teacher: TeacherDistribution | None = None,
) -> dict[str, torch.Tensor]:
    """All raw loss parts for one example."""
    logits = latent_forward(model, projector, example)
    ce_noncot, ce_cot, ce_total = loss_ce(logits, example, config.lambda_cot)
    zero = logits.new_zeros(())
    kl = loss_kl(logits, teacher, example, config.kl_temperature) if teacher is not None else zero
    st = model.config.special_tokens
    if "latent_close" in st and example.positions("mask_latent_all"):
        halt = loss_halt(logits, example, config.forbidden_ids(model), st["latent_close"], set(st.values()))
    else:
        halt = zero
    return {"ce_noncot": ce_noncot, "ce_cot": ce_cot, "ce_total": ce_total, "kl": kl, "halt_raw": halt}


# ---------------------------------------------------------------- optimisation


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup then cosine decay from ``lr_peak`` to ``lr_min``; ``step`` is 0-based."""
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr_peak * (step + 1) / config.warmup_steps
    span = max(1, total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1 + math.cos(math.pi * progress))


def trainable_parameters(model: ModelBundle, projector: LatentProjector) -> list[tuple[str, torch.nn.Parameter]]:
    params = [(f"model.{n}", p) for n, p in model.named_parameters()]
    params += [(f"projector.{n}", p) for n, p in projector.named_parameters()]
    return params


@dataclass
class TrainerState:
    optimizer: torch.optim.Optimizer
    total_steps: int
    gate: GateState = field(default_factory=GateState)
    step: int = 0


def make_trainer(model: ModelBundle, projector: LatentProjector, config: TrainConfig, total_steps: int) -> TrainerState:
    params = [p for _, p in trainable_parameters(model, projector)]
    opt = torch.optim.AdamW(
        params,
        lr=config.lr_peak,
        betas=config.betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        foreach=False,
    )
    return TrainerState(opt, total_steps)


def train_step(
    model: ModelBundle,
    projector: LatentProjector,
    batch: Sequence[TrainingExample],
    config: TrainConfig,
    state: TrainerState,
    teachers: Sequence[TeacherDistribution | None] | None = None,
    lr: float | None = None,
) -> tuple[LossReport, float]:
    """One optimiser update over ``batch`` (micro-batches accumulated, parts averaged).

    Returns the report and the learning rate that was applied.
    """
    if not batch:
        raise DataError("empty batch")
    teachers = list(teachers) if teachers is not None else [None] * len(batch)
    sums: dict[str, torch.Tensor] = {}
    for idx, (ex, teacher) in enumerate(zip(batch, teachers)):
        parts = example_losses(model, projector, ex, config, teacher)
        if not all(torch.isfinite(v) for v in parts.values()):
            state.optimizer.zero_grad(set_to_none=True)
            raise NumericError(f"non-finite loss on batch example {idx}")
        for k, v in parts.items():
            sums[k] = sums[k] + v if k in sums else v
    n = len(batch)
    mean = {k: v / n for k, v in sums.items()}
    report, loss = total_loss(
        mean["ce_noncot"], mean["ce_cot"], mean["ce_total"], mean["kl"], mean["halt_raw"], config, state.gate
    )
    if lr is None:
        lr = lr_at(state.step, state.total_steps, config)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return report, lr


def optimizer_tensors(state: TrainerState, model: ModelBundle, projector: LatentProjector) -> dict[str, torch.Tensor]:
    """Flatten AdamW moments into checkpoint tensors named ``optim.<param>.<slot>``."""
    out = {}
    for name, p in trainable_parameters(model, projector):
        st = state.optimizer.state.get(p)
        if not st:
            continue
        out[f"optim.{name}.exp_avg"] = st["exp_avg"]
        out[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
        out[f"optim.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(())
    return out


def restore_optimizer(
    state: TrainerState, model: ModelBundle, projector: LatentProjector, tensors: dict[str, torch.Tensor]
) -> None:
    for name, p in trainable_parameters(model, projector):
        key = f"optim.{name}"
        if f"{key}.exp_avg" not in tensors:
            continue
        state.optimizer.state[p] = {
            "step": tensors[f"{key}.step"].clone().to(torch.float32),
            "exp_avg": tensors[f"{key}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
        }


# ---------------------------------------------------------------- teacher


@torch.no_grad()
def precompute_teacher(
    teacher: ModelBundle,
    reference_tokens: Sequence[int],
    boundary: int,
    k: int,
    offset_map: dict[int, int],
    record_id: str = "",
    student_vocab_size: int | None = None,
) -> TeacherDistribution:
    """Top-k teacher distributions over the continuation ``reference_tokens[boundary:]``.

    ``offset_map`` sends student KL positions to teacher positions; the row for
    teacher position ``c`` comes from the teacher logits at ``c - 1``.
    """
    if student_vocab_size is not None and student_vocab_size != teacher.config.vocab_size:
        raise DataError(f"{record_id}: teacher and student vocabularies differ")
    n_cont = len(reference_tokens) - boundary
    if boundary < 1 or n_cont < 0:
        raise DataError(f"{record_id}: bad continuation boundary {boundary}")
    targets = sorted(offset_map.values())
    if len(offset_map) != n_cont or targets != list(range(boundary, len(reference_tokens))):
        raise DataError(
            f"{record_id}: offset map covers {len(offset_map)} positions, continuation has {n_cont}"
        )
    k = min(k, teacher.config.vocab_size)
    logits = forward_tokens(teacher, reference_tokens).to(torch.float64)
    probs = torch.softmax(logits, -1).numpy()
    positions = sorted(offset_map)
    ids = np.empty((len(positions), k), dtype=np.int64)
    top = np.empty((len(positions), k), dtype=np.float64)
    for r, sp in enumerate(positions):
        row = probs[offset_map[sp] - 1]
        order = np.argsort(-row, kind="stable")[:k]
        ids[r], top[r] = order, row[order]
    tail = np.clip(1.0 - top.sum(1), 0.0, None)
    return TeacherDistribution(record_id, positions, ids, top, tail)


def report_row(step: int, lr: float, report: LossReport) -> str:
    vals = asdict(report)
    return "\t".join([str(step), repr(lr)] + [repr(vals[f]) for f in REPORT_FIELDS])


def report_header() -> str:
    return "\t".join(("step", "lr") + REPORT_FIELDS)
