"""Text-guided part aggregation over RoI features.

Each pixel of a RoI feature grid is compared (cosine) with the prompt
embeddings of body parts, the similarities are softmax-normalized over parts,
and the grid is re-weighted per part and summed with learnable part weights.
With equal weights the softmax partition of unity makes this an identity
(scaled by the common weight).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from psearch.errors import ConfigError, ContractError


def _embedding_matrix(embeddings) -> torch.Tensor:
    if isinstance(embeddings, torch.Tensor):
        return embeddings
    rows = [getattr(e, "vector", e) for e in embeddings]
    if len(rows) == 0:
        raise ValueError("need at least one embedding")
    return torch.as_tensor(np.stack([np.asarray(r) for r in rows]))


def semantic_similarity(f: torch.Tensor, embeddings, projection: nn.Module | None = None) -> torch.Tensor:
    """Cosine maps ``S[..., c, i, j]`` between projected pixels and each embedding.

    ``f`` is ``[C, H, W]`` or ``[N, C, H, W]``. Pixels whose projection is the
    zero vector get similarity 0.
    """
    e = _embedding_matrix(embeddings).to(f.dtype)
    if e.shape[0] == 0:
        raise ValueError("need at least one embedding")
    x = f.movedim(-3, -1)  # [..., H, W, C]
    if projection is not None:
        in_features = getattr(projection, "in_features", x.shape[-1])
        if x.shape[-1] != in_features:
            raise ContractError(f"projection expects {in_features} channels, got {x.shape[-1]}")
        x = projection(x)
    if x.shape[-1] != e.shape[-1]:
        raise ContractError(f"projected width {x.shape[-1]} != embedding width {e.shape[-1]}")
    xn = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    en = torch.linalg.vector_norm(e, dim=-1)
    dots = x @ e.T  # [..., H, W, K]
    denom = xn * en
    cos = torch.where(denom > 0, dots / denom.clamp_min(torch.finfo(f.dtype).tiny), torch.zeros_like(dots))
    return cos.movedim(-1, -3)  # [..., K, H, W]


def normalize_semantic(maps: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Softmax over the category axis (``-3``)."""
    if maps.shape[-3] < 2:
        raise ValueError("softmax over a single category is degenerate")
    return torch.softmax(maps / temperature, dim=-3)


def aggregate_semantic(f: torch.Tensor, normalized: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """``sum_c W_c * (S_c * f)``, each ``S_c`` broadcast over channels."""
    if normalized.shape[-3] != weights.shape[0]:
        raise ConfigError(f"{normalized.shape[-3]} semantic maps but {weights.shape[0]} part weights")
    if tuple(normalized.shape[-2:]) != tuple(f.shape[-2:]):
        raise ContractError("semantic maps and features differ in spatial size")
    spatial = (weights[:, None, None] * normalized).sum(dim=-3)  # [..., H, W]
    return f * spatial.unsqueeze(-3)


class SFAN(nn.Module):
    def __init__(self, channels: int, embeddings, temperature: float = 1.0,
                 prompts: Sequence[str] | None = None):
        super().__init__()
        e = _embedding_matrix(embeddings).float()
        self.prompts = list(prompts) if prompts is not None else None
        self.temperature = temperature
        self.register_buffer("embeddings", e.clone())
        self.projection = nn.Linear(channels, e.shape[1], bias=False)
        self.part_weights = nn.Parameter(torch.ones(e.shape[0]))

    def semantic_maps(self, f):
        s = semantic_similarity(f, self.embeddings, self.projection)
        return normalize_semantic(s, self.temperature)

    def forward(self, f):
        return aggregate_semantic(f, self.semantic_maps(f), self.part_weights)
