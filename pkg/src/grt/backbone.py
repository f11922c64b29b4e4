"""The Gaussian Radar Transformer: a U-shaped stack of attention stages.

Encoder: stem + GTB at full resolution, then four (downsample, GTB) stages
that halve the point count and widen the features. Decoder: four
(upsample, GTB) stages back up the skip ladder. Head: FC, GELU, FC.

Clouds are processed one at a time. Each cloud is first put into a canonical
point order (lexicographic in coordinates, then features) and the logits are
scattered back afterwards, so the network is exactly permutation-equivariant
even though cloud-wide normalizations sum over points.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from grt.attention import NORMALIZATIONS, GaussianTransformerBlock
from grt.diffmath import Linear, LinearNormGelu, gelu
from grt.geometry import CloudGeometry, knn, relative_positions
from grt.sampling import (
    AttentiveDownsample,
    AttentiveUpsample,
    MaxPoolDownsample,
    TrilinearUpsample,
    downsample_plan,
    upsample_plan,
)

FEATURE_COLUMNS = {"x": 0, "y": 1, "v": 2, "s": 3}
NUM_STAGES = 4
TRILINEAR_K = 3


@dataclass(frozen=True)
class GRTConfig:
    features: str = "xyvs"
    stage_dims: tuple[int, ...] = (32, 64, 128, 256, 512)
    num_classes: int = 6
    n_neighbors: int = 16
    sampler_k: int = 9
    attention: str = "gaussian"
    downsample: str = "attentive"
    upsample: str = "attentive"
    # input scaling: meters -> model units, m/s and dBsm -> O(1)
    coord_scale: float = 0.1
    velocity_scale: float = 1.0
    rcs_scale: float = 0.1
    min_points: int = 16

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        self.validate()

    def validate(self):
        if len(self.stage_dims) != NUM_STAGES + 1 or min(self.stage_dims) < 1:
            raise ValueError(f"stage_dims needs {NUM_STAGES + 1} positive entries, got {self.stage_dims}")
        if not self.features or any(c not in FEATURE_COLUMNS for c in self.features) \
                or len(set(self.features)) != len(self.features):
            raise ValueError(f"features must be distinct letters from 'xyvs', got {self.features!r}")
        if min(self.num_classes, self.n_neighbors, self.sampler_k, self.min_points) < 1:
            raise ValueError("num_classes, n_neighbors, sampler_k and min_points must be positive")
        if self.attention not in NORMALIZATIONS:
            raise ValueError(f"attention must be one of {NORMALIZATIONS}")
        if self.downsample not in ("attentive", "maxpool"):
            raise ValueError("downsample must be 'attentive' or 'maxpool'")
        if self.upsample not in ("attentive", "trilinear"):
            raise ValueError("upsample must be 'attentive' or 'trilinear'")
        if min(self.coord_scale, self.velocity_scale, self.rcs_scale) <= 0:
            raise ValueError("input scales must be positive")
        if self.min_points < 2 ** NUM_STAGES:
            raise ValueError(f"min_points must be at least {2 ** NUM_STAGES}")

    @property
    def input_dim(self) -> int:
        return len(self.features)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GRTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CloudPlan:
    """All index arrays one forward pass needs, in canonical point order."""

    order: np.ndarray
    coords: list[np.ndarray] = field(default_factory=list)
    attn_neighbors: list[np.ndarray] = field(default_factory=list)
    attn_offsets: list[np.ndarray] = field(default_factory=list)
    down_neighbors: list[np.ndarray] = field(default_factory=list)
    up_neighbors: list[np.ndarray] = field(default_factory=list)
    up_offsets: list[np.ndarray] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.coords]

    def as_tensors(self, dtype: torch.dtype) -> "CloudPlan":
        """Copy with every array converted once, for repeated forward passes."""
        def conv(arrays):
            return [torch.from_numpy(a).to(dtype) if a.dtype.kind == "f" else torch.from_numpy(a)
                    for a in arrays]
        return CloudPlan(self.order, conv(self.coords), conv(self.attn_neighbors),
                         conv(self.attn_offsets), conv(self.down_neighbors),
                         conv(self.up_neighbors), conv(self.up_offsets))


def canonical_order(coords: np.ndarray, features: np.ndarray) -> np.ndarray:
    keys = [features[:, i] for i in range(features.shape[1] - 1, -1, -1)]
    return np.lexsort(keys + [coords[:, 1], coords[:, 0]])


class GaussianRadarTransformer(nn.Module):
    def __init__(self, config: GRTConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        g = generator
        dims = config.stage_dims
        k, norm = config.n_neighbors, config.attention
        self.stem = LinearNormGelu(config.input_dim, dims[0], generator=g)
        self.encoder = nn.ModuleList([GaussianTransformerBlock(dims[0], k, norm, g)])
        self.down = nn.ModuleList()
        for i in range(NUM_STAGES):
            cls = AttentiveDownsample if config.downsample == "attentive" else MaxPoolDownsample
            self.down.append(cls(dims[i], dims[i + 1], generator=g))
            self.encoder.append(GaussianTransformerBlock(dims[i + 1], k, norm, g))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in range(NUM_STAGES):
            cls = AttentiveUpsample if config.upsample == "attentive" else TrilinearUpsample
            self.up.append(cls(dims[i + 1], dims[i], dims[i], generator=g))
            self.decoder.append(GaussianTransformerBlock(dims[i], k, norm, g))
        self.head_fc1 = Linear(dims[0], dims[0], generator=g)
        self.head_fc2 = Linear(dims[0], config.num_classes, zero_init=True)

    # -- geometry ---------------------------------------------------------

    def input_features(self, features) -> torch.Tensor:
        """Select and scale the configured columns of an (N, 4) x/y/v/rcs grid."""
        cfg = self.config
        scale = {"x": cfg.coord_scale, "y": cfg.coord_scale, "v": cfg.velocity_scale,
                 "s": cfg.rcs_scale}
        features = torch.as_tensor(features, dtype=self.dtype)
        cols = [FEATURE_COLUMNS[c] for c in cfg.features]
        mult = torch.tensor([scale[c] for c in cfg.features], dtype=self.dtype)
        return features[:, cols] * mult

    def plan(self, coords: np.ndarray, features: np.ndarray | None = None, name: str = "cloud") -> CloudPlan:
        cfg = self.config
        coords = np.asarray(coords, dtype=np.float64)
        if len(coords) < cfg.min_points:
            raise ValueError(f"{name} has {len(coords)} points, the model needs at least {cfg.min_points}")
        if features is None:
            order = np.lexsort((coords[:, 1], coords[:, 0]))
        else:
            order = canonical_order(coords, np.asarray(features, dtype=np.float64))
        plan = CloudPlan(order=order)
        level = coords[order] * cfg.coord_scale
        for stage in range(NUM_STAGES + 1):
            plan.coords.append(level)
            geom = CloudGeometry.single(level)
            nb = knn(geom, geom, min(cfg.n_neighbors, len(level)))
            plan.attn_neighbors.append(nb.indices)
            plan.attn_offsets.append(relative_positions(geom, nb, geom))
            if stage < NUM_STAGES:
                centers, nbrs = downsample_plan(level, min(cfg.sampler_k, len(level)))
                plan.down_neighbors.append(nbrs)
                level = level[centers]
        up_k = cfg.sampler_k if cfg.upsample == "attentive" else TRILINEAR_K
        for stage in range(NUM_STAGES):
            coarse, skip = plan.coords[stage + 1], plan.coords[stage]
            nbrs, offs = upsample_plan(coarse, skip, min(up_k, len(coarse)))
            plan.up_neighbors.append(nbrs)
            plan.up_offsets.append(offs)
        return plan

    # -- forward ----------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.head_fc1.weight.dtype

    def forward_planned(self, x: torch.Tensor, plan: CloudPlan) -> torch.Tensor:
        """Logits for an already scaled, canonically ordered feature grid."""
        h = self.stem(x)
        h = self.encoder[0](h, plan.attn_neighbors[0], plan.attn_offsets[0])
        skips = [h]
        for i in range(NUM_STAGES):
            h = self.down[i](h, plan.coords[i], plan.down_neighbors[i])
            h = self.encoder[i + 1](h, plan.attn_neighbors[i + 1], plan.attn_offsets[i + 1])
            skips.append(h)
        for i in reversed(range(NUM_STAGES)):
            h = self.up[i](h, skips[i], plan.up_neighbors[i], plan.up_offsets[i])
            h = self.decoder[i](h, plan.attn_neighbors[i], plan.attn_offsets[i])
        return self.head_fc2(gelu(self.head_fc1(h)))

    def forward(self, features, coords, plan: CloudPlan | None = None) -> torch.Tensor:
        """Per-point logits (N, C) for one cloud, in the input point order.

        ``features`` is the raw (N, 4) x/y/v/rcs grid, ``coords`` its (N, 2)
        coordinates in meters.
        """
        features_np = np.asarray(features, dtype=np.float64)
        if plan is None:
            plan = self.plan(coords, features_np)
        x = self.input_features(features_np[plan.order])
        logits = self.forward_planned(x, plan)
        inverse = np.empty_like(plan.order)
        inverse[plan.order] = np.arange(len(plan.order))
        return logits[torch.from_numpy(inverse)]


def build(config: GRTConfig, seed: int = 0) -> GaussianRadarTransformer:
    """Deterministically initialized model for ``config``."""
    config.validate()
    generator = torch.Generator().manual_seed(seed)
    return GaussianRadarTransformer(config, generator)


def predict(logits) -> np.ndarray:
    """Argmax class per point; ties go to the smallest class id."""
    logits = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return np.argmax(logits, axis=-1)
