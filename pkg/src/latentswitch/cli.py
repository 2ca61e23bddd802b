"""``latentswitch`` command-line entry point.

Configuration is an INI file (sections ``run``, ``model``, ``switch``,
``sampler``, ``train``, ``corpus``) with ``--set section.key=value``
overrides taking precedence. All randomness derives from ``run.seed``: the
seed for a purpose is ``sub_seed(seed, label)``, the first 8 bytes of
BLAKE2b over ``"<seed>/<label>"`` read as a little-endian integer.

Every output artifact carries the effective configuration: JSONL files start
with a ``{"config": ...}`` line, TSV tables with a ``# config = ...`` line,
JSON reports under a ``config`` key and checkpoints as ``run.config``.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .checkpoint import load_bundle, save_bundle
from .corpus import RenderedExample, SourceRecord, corpus_stats, curriculum_order, read_jsonl, render_example, toy_tokenizer
from .diagnostics import (
    aggregate_entropy,
    fig3_rows,
    fig4_rows,
    fig7_rows,
    hidden_segments,
    pca_project,
    per_step_entropy_distribution,
    write_table,
)
from .errors import CapacityError, ConfigError, DataError, InputError, LatentSwitchError
from .generation import GenerationTrace, SamplerConfig, generate_cot, generate_later, generate_trained_later, timed
from .latent import build_analytic_projector, build_learned_projector
from .model import ModelBundle, ModelConfig
from .switching import RunResult, SwitchConfig, sweep_entropy_thresholds, sweep_fixed_budgets, write_sweep_table
from .training import (
    TrainConfig,
    make_trainer,
    optimizer_tensors,
    precompute_teacher,
    read_teacher_sidecar,
    report_header,
    report_row,
    restore_optimizer,
    train_step,
    write_teacher_sidecar,
)

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "seed": 0,
        "workers": 0,
        "mode": "latent",
        "log_hidden": False,
        "log_entropy": False,
        "record_timing": False,
    },
    "model": {
        "hidden_dim": 16,
        "num_layers": 2,
        "num_heads": 2,
        "ffn_dim": 64,
        "max_seq_len": 256,
        "dtype": "float64",
        "rope_base": 10000.0,
        "init_std": 0.02,
        "projector": "analytic",
        "projector_hidden_dim": 0,
    },
    "switch": {
        "mode": "adaptive",
        "fixed_steps": 50,
        "entropy_threshold": 7.0,
        "stop_tokens": "think_close,end_of_message,end_of_text",
        "max_latent_steps": 128,
        "min_latent_steps": 0,
    },
    "sampler": {
        "temperature": 0.6,
        "top_p": 0.95,
        "top_k": 20,
        "max_new_tokens": 256,
    },
    "train": {
        "epochs": 1,
        "batch_size": 4,
        "checkpoint_every": 50,
        "stop_after_steps": 0,
        "curriculum": False,
        "lambda_cot": 0.5,
        "lambda_kl": 0.25,
        "kl_temperature": 1.0,
        "lambda_halt_base": 0.025,
        "ema_decay": 0.99,
        "gate_epsilon": 1e-8,
        "lr_peak": 1e-7,
        "lr_min": 1e-8,
        "warmup_steps": 0,
        "weight_decay": 0.01,
        "beta1": 0.9,
        "beta2": 0.95,
        "adam_eps": 1e-8,
        "grad_clip": 1.0,
        "teacher_top_k": 20,
    },
    "corpus": {
        "latent_cap": 128,
        "alphabet": "0123456789+-*=.,?: abcdef",
        "terminal": ".?!",
        "bins": 20,
    },
}

MODES = ("latent", "cot", "trained", "paired")


# ---------------------------------------------------------------- config


def sub_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _coerce(section: str, key: str, raw: str) -> Any:
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _assign(cfg: dict, section: str, key: str, raw: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    cfg[section][key] = _coerce(section, key, raw)


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _assign(cfg, section, key, raw)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        _assign(cfg, section, key, raw.strip())
    return cfg


def config_echo(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True)


def _tokenizer(cfg: dict):
    return toy_tokenizer({"alphabet": cfg["corpus"]["alphabet"], "terminal": cfg["corpus"]["terminal"]})


def switch_config(cfg: dict, special_tokens: dict[str, int]) -> SwitchConfig:
    s = cfg["switch"]
    stops = set()
    for item in filter(None, (x.strip() for x in s["stop_tokens"].split(","))):
        if item.lstrip("-").isdigit():
            stops.add(int(item))
        elif item in special_tokens:
            stops.add(special_tokens[item])
        else:
            raise ConfigError(f"unknown stop token {item!r}")
    return SwitchConfig(s["mode"], s["fixed_steps"], s["entropy_threshold"], frozenset(stops),
                        s["max_latent_steps"], s["min_latent_steps"])


def sampler_config(cfg: dict, seed: int) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(s["temperature"], s["top_p"], s["top_k"], s["max_new_tokens"], seed)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lambda_cot=t["lambda_cot"], lambda_kl=t["lambda_kl"], kl_temperature=t["kl_temperature"],
        lambda_halt_base=t["lambda_halt_base"], ema_decay=t["ema_decay"], gate_epsilon=t["gate_epsilon"],
        lr_peak=t["lr_peak"], lr_min=t["lr_min"], warmup_steps=t["warmup_steps"],
        weight_decay=t["weight_decay"], betas=(t["beta1"], t["beta2"]), adam_eps=t["adam_eps"],
        grad_clip=t["grad_clip"], accumulation=t["batch_size"],
    )


# ---------------------------------------------------------------- io helpers


def _write_jsonl(path: str | Path, cfg: dict, records: Sequence[dict]) -> None:
    lines = [json.dumps({"config": cfg}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_records(path: str | Path) -> list[dict]:
    """Data lines of a JSONL artifact, skipping the config header."""
    try:
        parsed = read_jsonl(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    out = []
    for lineno, rec in parsed:
        if isinstance(rec, Exception):
            raise DataError(f"{path}: {rec}")
        if isinstance(rec, dict) and set(rec) == {"config"}:
            continue
        out.append(rec)
    return out


def _prepend_config(path: str | Path, cfg: dict) -> None:
    p = Path(path)
    p.write_text(f"# config = {config_echo(cfg)}\n" + p.read_text(encoding="utf-8"), encoding="utf-8")


def _load_model(path: str):
    model, projector, tensors, meta = load_bundle(path)
    if projector is None:
        raise InputError(f"checkpoint {path} has no latent projector")
    return model, projector, meta


def _tokenizer_from_meta(meta: dict, cfg: dict):
    spec = meta.get("tokenizer.spec")
    return toy_tokenizer(spec) if spec else _tokenizer(cfg)


# ---------------------------------------------------------------- init


def cmd_init(args, cfg: dict) -> int:
    """Write a freshly initialised model and projector checkpoint."""
    tok = _tokenizer(cfg)
    m = cfg["model"]
    seed = cfg["run"]["seed"]
    config = ModelConfig(
        vocab_size=tok.vocab_size, hidden_dim=m["hidden_dim"], num_layers=m["num_layers"], num_heads=m["num_heads"],
        ffn_dim=m["ffn_dim"], max_seq_len=m["max_seq_len"], special_tokens=dict(tok.special_tokens),
        dtype=m["dtype"], rope_base=m["rope_base"],
    )
    model = ModelBundle(config, seed=sub_seed(seed, "model-init") % 2**63, init_std=m["init_std"])
    if m["projector"] == "analytic":
        projector = build_analytic_projector(model)
    elif m["projector"] == "learned":
        projector = build_learned_projector(model, m["projector_hidden_dim"] or None,
                                            seed=sub_seed(seed, "projector-init") % 2**63)
    else:
        raise ConfigError(f"model.projector must be analytic or learned, got {m['projector']!r}")
    save_bundle(args.out, model, projector, extra_meta={"run.config": cfg, "tokenizer.spec": tok.to_spec()})
    return 0


# ---------------------------------------------------------------- prep


def cmd_prep(args, cfg: dict) -> int:
    tok = _tokenizer(cfg)
    try:
        parsed = read_jsonl(args.source)
    except OSError as exc:
        raise InputError(f"cannot read {args.source}: {exc}") from None
    if not parsed:
        raise InputError(f"source {args.source} has no records")
    rendered, errors = [], []
    max_len = cfg["model"]["max_seq_len"]
    for lineno, rec in parsed:
        if isinstance(rec, Exception):
            errors.append({"line": lineno, "record_id": None, "error": str(rec)})
            continue
        rid = rec.get("record_id") if isinstance(rec, dict) else None
        try:
            if not isinstance(rec, dict):
                raise DataError("record is not a JSON object")
            src = SourceRecord.from_dict(rec)
            rendered.append(render_example(src, tok, cap=cfg["corpus"]["latent_cap"], max_seq_len=max_len))
        except LatentSwitchError as exc:
            errors.append({"line": lineno, "record_id": rid, "error": str(exc)})
    out = Path(args.out)
    _write_jsonl(out, cfg, [r.to_record() for r in rendered])
    stats = corpus_stats(rendered, bins=cfg["corpus"]["bins"]) if rendered else {"count": 0}
    stats["errors"] = len(errors)
    stats["config"] = cfg
    stats["tokenizer"] = tok.to_spec()
    out.with_name(out.name + ".stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n",
                                                        encoding="utf-8")
    _write_jsonl(out.with_name(out.name + ".errors.jsonl"), cfg, errors)
    for e in errors:
        print(f"record {e['record_id']!r} (line {e['line']}): {e['error']}", file=sys.stderr)
    return DataError.exit_code if errors else 0


def load_corpus(path: str) -> list[RenderedExample]:
    recs = read_records(path)
    if not recs:
        raise InputError(f"corpus {path} is empty")
    out = []
    for r in recs:
        ex = RenderedExample.from_record(r)
        ex.example.validate()
        out.append(ex)
    return out


# ---------------------------------------------------------------- teacher


def cmd_teacher(args, cfg: dict) -> int:
    """Precompute top-k teacher distributions over each record's teacher reference."""
    teacher, _, _, _ = load_bundle(args.model)
    corpus = load_corpus(args.corpus)
    k = cfg["train"]["teacher_top_k"]
    dists = [
        precompute_teacher(teacher, r.teacher_token_ids, r.teacher_boundary, k, r.explicit_offset_map,
                           r.record_id, teacher.config.vocab_size)
        for r in corpus
    ]
    write_teacher_sidecar(args.out, dists)
    return 0


# ---------------------------------------------------------------- train


def epoch_order(n: int, seed: int, epoch: int, corpus: Sequence[RenderedExample], curriculum: bool) -> list[int]:
    s = sub_seed(seed, f"data-order/{epoch}")
    if curriculum:
        index = {id(r): i for i, r in enumerate(corpus)}
        return [index[id(r)] for r in curriculum_order(corpus, s)]
    rng = np.random.Generator(np.random.Philox(s))
    return [int(i) for i in rng.permutation(n)]


def _ckpt_meta(cfg: dict, step: int, total: int, ema: float | None, tok_spec: dict | None) -> dict:
    meta = {"run.config": cfg, "train.step": step, "train.total_steps": total, "train.ema_ce": ema}
    if tok_spec:
        meta["tokenizer.spec"] = tok_spec
    return meta


def cmd_train(args, cfg: dict) -> int:
    corpus = load_corpus(args.corpus)
    teachers = read_teacher_sidecar(args.teacher) if args.teacher else {}
    t = cfg["train"]
    tc = train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    last = out / "last"
    log_path = out / "loss_log.tsv"
    seed = cfg["run"]["seed"]
    n = len(corpus)
    bs = t["batch_size"]
    per_epoch = math.ceil(n / bs)
    total = per_epoch * t["epochs"]

    resume = args.resume and (out / "last.manifest").exists()
    model, projector, tensors, meta = load_bundle(last if resume else args.init)
    if projector is None:
        raise InputError("initial checkpoint has no latent projector")
    if max(max(r.example.token_ids) for r in corpus) >= model.config.vocab_size:
        raise DataError("corpus uses token ids outside the model vocabulary")
    tok_spec = meta.get("tokenizer.spec")
    state = make_trainer(model, projector, tc, total)
    log_rows: list[str] = []
    if resume:
        if meta.get("train.total_steps") != total:
            raise ConfigError("resumed run has a different step schedule; keep epochs and batch_size unchanged")
        restore_optimizer(state, model, projector, tensors)
        state.step = int(meta["train.step"])
        state.gate.ema = meta["train.ema_ce"]
        if log_path.exists():
            rows = [ln for ln in log_path.read_text(encoding="utf-8").splitlines()[2:] if ln]
            log_rows = [r for r in rows if int(r.split("\t", 1)[0]) <= state.step]

    def write_log() -> None:
        log_path.write_text("\n".join([f"# config = {config_echo(cfg)}", report_header()] + log_rows) + "\n",
                            encoding="utf-8")

    def checkpoint(step: int) -> None:
        extra = optimizer_tensors(state, model, projector)
        m = _ckpt_meta(cfg, step, total, state.gate.ema, tok_spec)
        save_bundle(last, model, projector, extra_tensors=extra, extra_meta=m)
        save_bundle(out / f"step{step:06d}", model, projector, extra_tensors=extra, extra_meta=m)
        write_log()

    if state.step == 0:
        checkpoint(0)
    stop = t["stop_after_steps"] or total
    orders: dict[int, list[int]] = {}
    while state.step < min(total, stop):
        epoch, b = divmod(state.step, per_epoch)
        if epoch not in orders:
            orders = {epoch: epoch_order(n, seed, epoch, corpus, t["curriculum"])}
        idx = orders[epoch][b * bs : (b + 1) * bs]
        batch = [corpus[i].example for i in idx]
        tbatch = [teachers.get(corpus[i].record_id) for i in idx]
        try:
            report, lr = train_step(model, projector, batch, tc, state, tbatch)
        except LatentSwitchError as exc:
            write_log()
            ids = [corpus[i].record_id for i in idx]
            raise type(exc)(f"step {state.step + 1} (records {ids}): {exc}") from exc
        log_rows.append(report_row(state.step, lr, report))
        if state.step % t["checkpoint_every"] == 0 or state.step == total:
            checkpoint(state.step)
    if not (out / f"step{state.step:06d}.manifest").exists():
        checkpoint(state.step)
    write_log()
    return 0


# ---------------------------------------------------------------- generate


def _prompt_ids(rec: dict, tok) -> list[int]:
    if "prompt_token_ids" in rec:
        return [int(t) for t in rec["prompt_token_ids"]]
    if "prompt" in rec:
        return tok.encode(rec["prompt"])
    if "problem" in rec:
        return tok.encode(rec["problem"])
    raise DataError("prompt record needs 'prompt', 'problem' or 'prompt_token_ids'")


def final_answer(text: str, tok) -> str:
    """Text after the last think_close marker, without end markers."""
    close = tok.special_strings["think_close"]
    tail = text.rsplit(close, 1)[-1]
    for role in ("end_of_message", "end_of_text"):
        tail = tail.replace(tok.special_strings[role], "")
    return tail.strip()


class _Generator:
    def __init__(self, model, projector, tok, cfg: dict, mode: str, switch: SwitchConfig | None = None) -> None:
        self.model, self.projector, self.tok, self.cfg, self.mode = model, projector, tok, cfg, mode
        self.switch = switch or switch_config(cfg, model.config.special_tokens)
        self.seed = cfg["run"]["seed"]

    def _one(self, mode: str, prompt: list[int], seed: int) -> GenerationTrace:
        sampler = sampler_config(self.cfg, seed)
        flags = {"log_hidden": self.cfg["run"]["log_hidden"], "log_entropy": self.cfg["run"]["log_entropy"]}
        if mode == "cot":
            return generate_cot(self.model, sampler, prompt, **flags)
        if mode == "trained":
            return generate_trained_later(self.model, self.projector, sampler, prompt,
                                          max_latent_steps=self.switch.max_latent_steps, **flags)
        return generate_later(self.model, self.projector, self.switch, sampler, prompt, **flags)

    def _result(self, mode: str, prompt: list[int], seed: int, answer: str | None) -> dict:
        try:
            trace, dt = timed(self._one, mode, prompt, seed)
        except (CapacityError, InputError, DataError) as exc:
            return {"error": {"type": type(exc).__name__, "message": str(exc)}}
        text = self.tok.decode(trace.explicit_token_ids)
        out = {
            "trace": trace.to_record(),
            "text": text,
            "duration_s": dt if self.cfg["run"]["record_timing"] else None,
        }
        if answer is not None:
            out["correct"] = final_answer(text, self.tok) == answer.strip()
        return out

    def __call__(self, item: tuple[int, dict]) -> dict:
        i, rec = item
        seed = sub_seed(self.seed, f"sample/{i}")
        base = {"index": i, "id": rec.get("id", rec.get("record_id")), "seed": seed}
        try:
            prompt = _prompt_ids(rec, self.tok)
        except LatentSwitchError as exc:
            return {**base, "mode": self.mode, "error": {"type": type(exc).__name__, "message": str(exc)}}
        answer = rec.get("answer")
        if self.mode == "paired":
            return {**base, "mode": "paired",
                    "cot": self._result("cot", prompt, seed, answer),
                    "latent": self._result("latent", prompt, seed, answer)}
        return {**base, "mode": self.mode, **self._result(self.mode, prompt, seed, answer)}


def _workers(cfg: dict) -> int:
    w = cfg["run"]["workers"]
    return w if w > 0 else (os.cpu_count() or 1)


def run_prompts(gen: _Generator, prompts: list[dict], workers: int) -> list[dict]:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(gen, enumerate(prompts)))  # map keeps input order


def _read_prompts(path: str) -> list[dict]:
    prompts = read_records(path)
    if not prompts:
        raise InputError(f"prompt file {path} is empty")
    return prompts


def cmd_generate(args, cfg: dict) -> int:
    mode = cfg["run"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, got {mode!r}")
    model, projector, meta = _load_model(args.model)
    tok = _tokenizer_from_meta(meta, cfg)
    prompts = _read_prompts(args.prompts)
    results = run_prompts(_Generator(model, projector, tok, cfg, mode), prompts, _workers(cfg))
    _write_jsonl(args.out, cfg, results)
    return 0


# ---------------------------------------------------------------- sweep


def _parse_grid(text: str, kind: str) -> list:
    items = [x.strip() for x in text.split(",") if x.strip()]
    try:
        return [int(x) for x in items] if kind == "fixed" else [float(x) for x in items]
    except ValueError:
        raise InputError(f"cannot parse sweep grid {text!r}") from None


def cmd_sweep(args, cfg: dict) -> int:
    model, projector, meta = _load_model(args.model)
    tok = _tokenizer_from_meta(meta, cfg)
    prompts = _read_prompts(args.prompts)
    grid = _parse_grid(args.grid, args.kind)
    base = switch_config(cfg, model.config.special_tokens)
    workers = _workers(cfg)

    def runner(value):
        if args.kind == "fixed":
            sw = SwitchConfig("fixed", int(value), base.entropy_threshold, base.stop_tokens,
                              max(base.max_latent_steps, int(value), 1), 0)
        else:
            sw = SwitchConfig("adaptive", base.fixed_steps, float(value), base.stop_tokens,
                              base.max_latent_steps, base.min_latent_steps)
        rows = run_prompts(_Generator(model, projector, tok, cfg, "latent", sw), prompts, workers)
        for r in rows:
            if "error" in r:
                raise InputError(f"prompt {r['index']}: {r['error']['message']}")
        return [RunResult(r["trace"]["total_tokens"], r["trace"]["switch_step"], r.get("correct")) for r in rows]

    if args.kind == "fixed":
        rows = sweep_fixed_budgets(grid, runner)
    else:
        rows = sweep_entropy_thresholds(grid, runner)
    write_sweep_table(rows, args.out, args.kind)
    _prepend_config(args.out, cfg)
    return 0


# ---------------------------------------------------------------- analyze


def load_traces(path: str) -> list[GenerationTrace]:
    """Traces from a generate output; paired records contribute their latent run."""
    traces = []
    for rec in read_records(path):
        if "latent" in rec and isinstance(rec["latent"], dict):
            rec = rec["latent"]
        if "trace" in rec:
            traces.append(GenerationTrace.from_record(rec["trace"]))
    if not traces:
        raise InputError(f"{path} holds no successful traces")
    return traces


def cmd_analyze(args, cfg: dict) -> int:
    traces = load_traces(args.traces)
    if args.which == "fig3":
        if any(t.explicit_entropies is None for t in traces):
            raise InputError("traces lack explicit entropies; re-run generate with --log-entropy")
        tok = _tokenizer(cfg)
        header, rows = fig3_rows(aggregate_entropy(traces, args.bins, tok.terminal_ids))
    elif args.which == "fig7":
        header, rows = fig7_rows(per_step_entropy_distribution(traces))
    else:
        proj = pca_project(hidden_segments(traces), k=args.k)
        header, rows = fig4_rows(proj)
        var_path = Path(str(args.out) + ".variance.tsv")
        write_table(var_path, ("component", "explained_variance_ratio"),
                    [(i + 1, float(v)) for i, v in enumerate(proj.explained_variance_ratio)])
        _prepend_config(var_path, cfg)
    write_table(args.out, header, rows)
    _prepend_config(args.out, cfg)
    return 0


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentswitch", description="Latent-then-explicit reasoning toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", parents=[common], help="write a freshly initialised model checkpoint")
    s.add_argument("--out", required=True, help="checkpoint stem")

    s = sub.add_parser("prep", parents=[common], help="render a source JSONL into a training corpus")
    s.add_argument("source")
    s.add_argument("--out", required=True)

    s = sub.add_parser("teacher", parents=[common], help="precompute top-k teacher distributions")
    s.add_argument("--model", required=True, help="teacher checkpoint stem")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train on a rendered corpus")
    s.add_argument("corpus")
    s.add_argument("--init", help="initial checkpoint stem")
    s.add_argument("--teacher", help="teacher sidecar JSONL")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last if present")

    s = sub.add_parser("generate", parents=[common], help="generate one trace per prompt")
    s.add_argument("--model", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--log-hidden", action="store_true")
    s.add_argument("--log-entropy", action="store_true")
    s.add_argument("--record-timing", action="store_true", help="store wall-clock durations (breaks byte identity)")
    s.add_argument("--workers", type=int)

    s = sub.add_parser("sweep", parents=[common], help="fixed-budget or entropy-threshold sweep")
    s.add_argument("kind", choices=("fixed", "entropy"))
    s.add_argument("--grid", required=True, help="comma-separated values")
    s.add_argument("--model", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("analyze", parents=[common], help="diagnostics tables from a trace file")
    s.add_argument("which", choices=("fig3", "fig7", "fig4"))
    s.add_argument("traces")
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=100)
    s.add_argument("-k", type=int, default=6, help="PCA components")
    return p


COMMANDS = {
    "init": cmd_init,
    "prep": cmd_prep,
    "teacher": cmd_teacher,
    "train": cmd_train,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
}


def _flag_overrides(args) -> list[str]:
    out = []
    if args.seed is not None:
        out.append(f"run.seed={args.seed}")
    for flag, key in (("log_hidden", "run.log_hidden"), ("log_entropy", "run.log_entropy"),
                      ("record_timing", "run.record_timing")):
        if getattr(args, flag, False):
            out.append(f"{key}=true")
    if getattr(args, "mode", None):
        out.append(f"run.mode={args.mode}")
    if getattr(args, "workers", None) is not None:
        out.append(f"run.workers={args.workers}")
    return out


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, list(args.set) + _flag_overrides(args))
        if args.command == "train" and not args.resume and not args.init:
            raise InputError("train needs --init (or --resume with an existing checkpoint)")
        if args.command == "train" and args.resume and not args.init and not (Path(args.out) / "last.manifest").exists():
            raise InputError(f"nothing to resume in {args.out}")
        torch.set_num_threads(1)
        return COMMANDS[args.command](args, cfg)
    except LatentSwitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
