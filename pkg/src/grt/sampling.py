"""Attentive down- and upsampling and their conventional substitutes.

The modules take precomputed index arrays (see :func:`downsample_plan` and
:func:`upsample_plan`) so geometry is evaluated once per cloud. Every module
treats its input as a single cloud: the cloud-wide attention normalization
runs over all rows it is given.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from grt.diffmath import Linear, LinearNormGelu, softmax
from grt.geometry import CloudGeometry, farthest_point_sampling, knn


def target_count(n: int) -> int:
    return max(1, math.ceil(n / 2))


def downsample_plan(coords: np.ndarray, k: int, m: int | None = None):
    """FPS centers and their kNN rows over the full input cloud."""
    geom = CloudGeometry.single(coords)
    m = target_count(len(coords)) if m is None else m
    centers = farthest_point_sampling(geom, m)
    neighbors = knn(CloudGeometry.single(coords[centers]), geom, k).indices
    return centers, neighbors


def upsample_plan(coarse_coords: np.ndarray, skip_coords: np.ndarray, k: int):
    """kNN rows into the coarse set for every skip point, plus ``p_skip - p_coarse``."""
    coarse = CloudGeometry.single(coarse_coords)
    neighbors = knn(CloudGeometry.single(skip_coords), coarse, k).indices
    offsets = skip_coords[:, None, :] - coarse_coords[neighbors]
    return neighbors, offsets


def cloud_attention(scores: torch.Tensor) -> torch.Tensor:
    """Softmax over every row of the cloud, independently per channel."""
    flat = scores.reshape(-1, scores.shape[-1])
    return softmax(flat, axis=0).reshape(scores.shape)


def _tensor(a, like: torch.Tensor):
    if isinstance(a, np.ndarray):
        a = torch.from_numpy(a)
    return a.to(like.dtype) if a.is_floating_point() else a


class AttentiveDownsample(nn.Module):
    """Cloud-normalized attention pooling around FPS centers.

    Scores come from one FC over ``[x_j, p_j]``; after softmax over the
    whole cloud, center i aggregates ``sum_j A_j * x_j`` over its kNN and the
    result passes through FC, layer norm and GELU (the widening point).
    """

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        # no bias: it would shift a whole channel and cancel in the cloud softmax
        self.score = Linear(d_in + 2, d_in, bias=False, generator=generator)
        self.out = LinearNormGelu(d_in, d_out, generator=generator)

    def weights(self, features, coords):
        coords = _tensor(coords, features)
        return cloud_attention(self.score(torch.cat([features, coords], dim=-1)))

    def forward(self, features, coords, neighbors):
        """``neighbors`` is (M, k): input-cloud indices of each center's kNN."""
        weighted = self.weights(features, coords) * features
        return self.out(weighted[_tensor(neighbors, features)].sum(dim=1))


class MaxPoolDownsample(nn.Module):
    """Per-channel max over each center's kNN, then the same output head."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        self.out = LinearNormGelu(d_in, d_out, generator=generator)

    def pool(self, features, neighbors):
        return features[_tensor(neighbors, features)].amax(dim=1)

    def forward(self, features, coords, neighbors):
        return self.out(self.pool(features, neighbors))


class AttentiveUpsample(nn.Module):
    """Inter-attention from a coarse point set onto the finer skip set.

    Skip and coarse features are each projected to ``d_out`` (FC, layer norm,
    GELU). Every skip point attends to its k coarse neighbors using scores
    from FC over ``[p_skip - p_coarse, coarse feature]``, normalized by a
    softmax over all (skip point, neighbor) pairs per channel. The weighted
    sum is scaled by the skip count so the weights average one per skip point,
    added to the projected skip features and passed through FC, layer norm
    and GELU.
    """

    def __init__(self, d_coarse: int, d_skip: int, d_out: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.skip_proj = LinearNormGelu(d_skip, d_out, generator=generator)
        self.coarse_proj = LinearNormGelu(d_coarse, d_out, generator=generator)
        self.score = Linear(d_out + 2, d_out, bias=False, generator=generator)
        self.out = LinearNormGelu(d_out, d_out, generator=generator)

    def weights(self, coarse_features, neighbors, offsets):
        gathered = self.coarse_proj(coarse_features)[_tensor(neighbors, coarse_features)]
        offsets = _tensor(offsets, coarse_features)
        scores = self.score(torch.cat([offsets, gathered], dim=-1))
        return cloud_attention(scores), gathered

    def forward(self, coarse_features, skip_features, neighbors, offsets):
        weights, gathered = self.weights(coarse_features, neighbors, offsets)
        aggregated = (weights * gathered).sum(dim=1) * len(skip_features)
        return self.out(aggregated + self.skip_proj(skip_features))


def trilinear_interpolate(coarse_features, neighbors, distances):
    """Inverse-distance weighted average over the neighbor rows.

    A zero distance copies that neighbor's features verbatim (the first such
    neighbor in row order).
    """
    distances = _tensor(distances, coarse_features)
    neighbors = _tensor(neighbors, coarse_features)
    hit = distances == 0
    safe = torch.where(hit, torch.ones_like(distances), distances)
    inv = torch.where(hit, torch.zeros_like(distances), 1.0 / safe)
    w = inv / inv.sum(dim=1, keepdim=True).clamp_min(torch.finfo(inv.dtype).tiny)
    exact = hit.any(dim=1)
    first_hit = torch.zeros_like(w)
    first_hit[torch.arange(len(w)), hit.to(torch.int8).argmax(dim=1)] = 1.0
    w = torch.where(exact[:, None], first_hit, w)
    return (w[..., None] * coarse_features[neighbors]).sum(dim=1)


class TrilinearUpsample(nn.Module):
    """Interpolate coarse features, concatenate the skip features, FC/LN/GELU."""

    def __init__(self, d_coarse: int, d_skip: int, d_out: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.out = LinearNormGelu(d_coarse + d_skip, d_out, generator=generator)

    def forward(self, coarse_features, skip_features, neighbors, offsets):
        distances = np.linalg.norm(offsets, axis=-1) if isinstance(offsets, np.ndarray) \
            else torch.linalg.norm(offsets, dim=-1)
        interp = trilinear_interpolate(coarse_features, neighbors, distances)
        return self.out(torch.cat([interp, skip_features], dim=-1))
