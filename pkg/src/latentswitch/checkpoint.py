"""Manifest + raw blob checkpoint format.

``<stem>.manifest`` is ``key = value`` text; ``<stem>.bin`` holds tensors
back to back, little-endian. Tensor entries look like::

    tensor.layers.0.wq = dtype=float64 shape=16x16 offset=2048 nbytes=2048

Values of non-tensor keys are JSON literals. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, InputError

FORMAT = "latentswitch-checkpoint"
VERSION = 1
ORIENTATION = (
    "row_vector: embedding and output_projection rows are tokens; "
    "logits = output_projection @ h; analytic projector applied as h @ W_a with W_a = pinv(output_projection) @ input_embedding"
)

_NP = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
_TORCH = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def write_checkpoint(stem: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format = {json.dumps(FORMAT)}",
        f"version = {VERSION}",
        'endianness = "little"',
        f"orientation = {json.dumps(ORIENTATION)}",
    ]
    for key in sorted(meta or {}):
        if "\n" in key or "=" in key:
            raise InputError(f"bad manifest key {key!r}")
        lines.append(f"{key} = {json.dumps(meta[key], sort_keys=True)}")
    offset = 0
    chunks = []
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        dtype = _TORCH.get(t.dtype)
        if dtype is None:
            raise InputError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(t.numpy()).astype(_NP[dtype], copy=False).tobytes()
        shape = "x".join(str(s) for s in t.shape) or "scalar"
        lines.append(f"tensor.{name} = dtype={dtype} shape={shape} offset={offset} nbytes={len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def read_checkpoint(stem: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    manifest_path, blob_path = _paths(stem)
    if not manifest_path.exists():
        raise InputError(f"no checkpoint manifest at {manifest_path}")
    if not blob_path.exists():
        raise DataError(f"checkpoint blob {blob_path} is missing")
    blob = blob_path.read_bytes()
    tensors: dict[str, torch.Tensor] = {}
    meta: dict = {}
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataError(f"{manifest_path}:{lineno}: expected 'key = value'")
        if key.startswith("tensor."):
            fields = dict(item.split("=", 1) for item in value.split())
            dtype = fields["dtype"]
            shape = () if fields["shape"] == "scalar" else tuple(int(s) for s in fields["shape"].split("x"))
            start, n = int(fields["offset"]), int(fields["nbytes"])
            if start + n > len(blob):
                raise DataError(f"tensor {key} runs past the end of {blob_path}")
            arr = np.frombuffer(blob[start : start + n], dtype=_NP[dtype]).reshape(shape)
            tensors[key[len("tensor."):]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        else:
            meta[key] = json.loads(value)
    if meta.get("format") != FORMAT:
        raise DataError(f"{manifest_path} is not a {FORMAT} manifest")
    return tensors, meta


def save_bundle(
    stem: str | Path,
    model,
    projector=None,
    *,
    extra_tensors: dict[str, torch.Tensor] | None = None,
    extra_meta: dict | None = None,
) -> Path:
    """Write model weights (and optionally the projector under ``projector.``)."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {f"config.{k}": v for k, v in model.config.to_dict().items()}
    if projector is not None:
        meta["projector.mode"] = projector.mode
        meta["projector.dim"] = projector.dim
        if projector.mode == "learned":
            meta["projector.hidden_dim"] = projector.fc1.out_features
        tensors.update({f"projector.{k}": v for k, v in projector.state_dict().items()})
    tensors.update(extra_tensors or {})
    meta.update(extra_meta or {})
    return write_checkpoint(stem, tensors, meta)


def load_bundle(stem: str | Path):
    """Return ``(model, projector_or_None, tensors, meta)``."""
    from .latent import LatentProjector
    from .model import ModelBundle, ModelConfig

    tensors, meta = read_checkpoint(stem)
    cfg = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
    config = ModelConfig(**cfg)
    model = ModelBundle(config)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    projector = None
    try:
        model.load_state_dict(state, strict=True)
        model.audit_shapes()
        if "projector.mode" in meta:
            pstate = {k[len("projector."):]: v for k, v in tensors.items() if k.startswith("projector.")}
            mode, dim = meta["projector.mode"], meta["projector.dim"]
            if mode == "analytic":
                projector = LatentProjector(mode, dim, matrix=pstate["matrix"], dtype=config.torch_dtype)
            else:
                projector = LatentProjector(mode, dim, hidden_dim=meta["projector.hidden_dim"],
                                            dtype=config.torch_dtype)
                projector.load_state_dict(pstate, strict=True)
    except (RuntimeError, KeyError) as exc:
        raise DataError(f"checkpoint {stem} does not match its declared configuration: {exc}") from exc
    return model, projector, tensors, meta
