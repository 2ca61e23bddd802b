"""Hidden-state -> embedding projection, probe decoding and latent steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, NumericError
from .model import LayerCache, ModelBundle, decode_logits, forward_step

PINV_RCOND = 1e-6


def pinv(matrix: torch.Tensor, rcond: float = PINV_RCOND) -> torch.Tensor:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values at or below ``rcond * sigma_max`` are treated as zero.
    """
    if not torch.isfinite(matrix).all():
        raise NumericError("pseudo-inverse of a matrix with non-finite entries")
    a = matrix.detach().to(torch.float64)
    u, s, vh = torch.linalg.svd(a, full_matrices=False)
    if s.numel() == 0 or s[0] == 0:
        return torch.zeros(a.shape[1], a.shape[0], dtype=torch.float64)
    keep = s > rcond * s[0]
    s_inv = torch.where(keep, 1.0 / torch.where(keep, s, torch.ones_like(s)), torch.zeros_like(s))
    return (vh.T * s_inv) @ u.T


class LatentProjector(nn.Module):
    """Maps a final-layer hidden state to an input embedding.

    ``analytic``: ``e = h @ W_a`` with ``W_a = pinv(W_out) @ W_in`` (d_h x d_h).
    Row-vector convention, so each token's output-head row is sent to its
    input-embedding row in the least-squares sense.

    ``learned``: ``e = h + fc2(gelu(fc1(h)))`` with ``fc2`` zero-initialised,
    so a fresh projector is the identity map.
    """

    def __init__(
        self,
        mode: str,
        dim: int,
        *,
        matrix: torch.Tensor | None = None,
        hidden_dim: int | None = None,
        dtype: torch.dtype = torch.float64,
        seed: int = 0,
        init_std: float = 0.02,
    ) -> None:
        super().__init__()
        if mode not in ("analytic", "learned"):
            raise ConfigError(f"projector mode must be 'analytic' or 'learned', got {mode!r}")
        self.mode = mode
        self.dim = dim
        if mode == "analytic":
            if matrix is None or tuple(matrix.shape) != (dim, dim):
                raise ConfigError(f"analytic projector needs a {dim}x{dim} matrix")
            self.register_buffer("matrix", matrix.to(dtype).clone())
        else:
            hidden_dim = hidden_dim or dim
            self.fc1 = nn.Linear(dim, hidden_dim, dtype=dtype)
            self.fc2 = nn.Linear(hidden_dim, dim, dtype=dtype)
            gen = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                self.fc1.weight.copy_(torch.randn(self.fc1.weight.shape, generator=gen, dtype=torch.float64) * init_std)
                self.fc1.bias.zero_()
                self.fc2.weight.zero_()
                self.fc2.bias.zero_()

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.mode == "analytic":
            return hidden @ self.matrix
        return hidden + self.fc2(F.gelu(self.fc1(hidden)))


def build_analytic_projector(model: ModelBundle, rcond: float = PINV_RCOND) -> LatentProjector:
    model.audit_shapes()
    w_in = model.input_embedding.detach()
    w_out = model.output_projection.detach()
    if not (torch.isfinite(w_in).all() and torch.isfinite(w_out).all()):
        raise NumericError("model weights contain non-finite values")
    matrix = pinv(w_out, rcond) @ w_in.to(torch.float64)
    return LatentProjector("analytic", model.config.hidden_dim, matrix=matrix, dtype=model.config.torch_dtype)


def build_learned_projector(model: ModelBundle, hidden_dim: int | None = None, seed: int = 0) -> LatentProjector:
    c = model.config
    return LatentProjector("learned", c.hidden_dim, hidden_dim=hidden_dim, dtype=c.torch_dtype, seed=seed)


def project(projector: LatentProjector, hidden: torch.Tensor) -> torch.Tensor:
    if hidden.shape[-1] != projector.dim:
        raise InputError(f"hidden has dimension {hidden.shape[-1]}, projector expects {projector.dim}")
    return projector(hidden)


@dataclass(frozen=True)
class ProbeResult:
    distribution: np.ndarray
    argmax_token: int
    entropy: float


def probe_logits(logits: torch.Tensor | np.ndarray) -> ProbeResult:
    """Softmax (temperature 1, unfiltered) + argmax + entropy in nats."""
    z = np.asarray(logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("probe on non-finite logits")
    shifted = z - z.max()
    e = np.exp(shifted)
    total = e.sum()
    p = e / total
    logp = shifted - np.log(total)
    terms = np.where(p > 0, p * logp, 0.0)
    entropy = max(0.0, float(-terms.sum()))
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return ProbeResult(p, int(np.argmax(p)), entropy)


def probe(model: ModelBundle, hidden: torch.Tensor) -> ProbeResult:
    if not torch.isfinite(hidden).all():
        raise NumericError("probe on a non-finite hidden state")
    with torch.no_grad():
        return probe_logits(decode_logits(model, hidden))


def latent_step(
    model: ModelBundle,
    projector: LatentProjector,
    hidden: torch.Tensor,
    cache: LayerCache,
    *,
    with_probe: bool = True,
) -> tuple[torch.Tensor, ProbeResult | None, LayerCache]:
    """Project ``hidden`` back to embedding space and run one position.

    The probe is read-only; it never feeds back into the rollout.
    """
    e = project(projector, hidden)
    out, cache = forward_step(model, e, cache)
    return out.hidden, (probe(model, out.hidden) if with_probe else None), cache
