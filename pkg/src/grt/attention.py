"""Gaussian vector attention over local neighborhoods.

Shapes: ``features`` is (N, D); ``neighbors`` is an (N, N_l) index array into
the same point set; ``displacements`` is (N, N_l, 2) with
``displacements[j, i] = p_j - p_neighbor(j, i)``.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from grt.diffmath import LayerNorm, Linear, gaussian_activation, gelu, softmax

NORMALIZATIONS = ("gaussian", "softmax")


class PositionalEncoding(nn.Module):
    """FC(2 -> D), GELU, FC(D -> D) applied to each displacement."""

    def __init__(self, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = Linear(2, dim, generator=generator)
        self.fc2 = Linear(dim, dim, generator=generator)

    def forward(self, displacements: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(displacements)))


def normalize_scores(scores: torch.Tensor, normalization: str) -> torch.Tensor:
    """Map pre-normalization scores (N, N_l, D) to attention weights.

    ``gaussian`` acts on every entry on its own. ``softmax`` normalizes over
    the neighbor axis separately for each (point, channel).
    """
    if normalization == "gaussian":
        return gaussian_activation(scores)
    if normalization == "softmax":
        return softmax(scores, axis=1)
    raise ValueError(f"unknown normalization {normalization!r}")


class GaussianTransformerLayer(nn.Module):
    """Vector self-attention with subtraction relation and Gaussian weights.

    For a center j with neighbors i::

        A[j, i] = G(q_j - k_i + pos_enc(p_j - p_i))
        o_j     = sum_i A[j, i] * v_i

    There is no output projection. With ``normalization="softmax"`` the
    Gaussian is replaced by a softmax over the neighbors (ablation only).
    """

    def __init__(self, dim: int, n_neighbors: int = 16, normalization: str = "gaussian",
                 generator: torch.Generator | None = None):
        super().__init__()
        if dim < 1 or n_neighbors < 1:
            raise ValueError("dim and n_neighbors must be positive")
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {normalization!r}")
        self.dim = dim
        self.n_neighbors = n_neighbors
        self.normalization = normalization
        self.qkv = Linear(dim, 3 * dim, generator=generator)
        self.pos_enc = PositionalEncoding(dim, generator=generator)

    def scores(self, features, neighbors, displacements):
        neighbors, displacements = _as_tensors(neighbors, displacements, features)
        # clouds smaller than N_l use every point as a neighbor
        expected = min(self.n_neighbors, len(features))
        if neighbors.shape[1] != expected:
            raise ValueError(
                f"neighbor table has width {neighbors.shape[1]}, layer expects {expected}"
            )
        q, k, v = self.qkv(features).split(self.dim, dim=-1)
        scores = q[:, None, :] - k[neighbors] + self.pos_enc(displacements)
        return scores, v[neighbors]

    def forward(self, features, neighbors, displacements):
        scores, values = self.scores(features, neighbors, displacements)
        weights = normalize_scores(scores, self.normalization)
        return (weights * values).sum(dim=1)


class GaussianTransformerBlock(nn.Module):
    """Residual block: ``x + FC2(GELU(LN(GTL(GELU(LN(FC1(x)))))))``.

    FC2 starts at zero so a fresh block is the identity map.
    """

    def __init__(self, dim: int, n_neighbors: int = 16, normalization: str = "gaussian",
                 generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = Linear(dim, dim, generator=generator)
        self.norm1 = LayerNorm(dim)
        self.attn = GaussianTransformerLayer(dim, n_neighbors, normalization, generator)
        self.norm2 = LayerNorm(dim)
        self.fc2 = Linear(dim, dim, zero_init=True)

    def forward(self, features, neighbors, displacements):
        h = gelu(self.norm1(self.fc1(features)))
        h = gelu(self.norm2(self.attn(h, neighbors, displacements)))
        return features + self.fc2(h)


def _as_tensors(neighbors, displacements, like: torch.Tensor):
    if isinstance(neighbors, np.ndarray):
        neighbors = torch.from_numpy(neighbors)
    if isinstance(displacements, np.ndarray):
        displacements = torch.from_numpy(displacements)
    displacements = displacements.to(like.dtype)
    if displacements.shape[:2] != neighbors.shape:
        raise ValueError(
            f"displacements {tuple(displacements.shape)} do not match neighbors {tuple(neighbors.shape)}"
        )
    return neighbors, displacements
