"""Finite-difference checks of every differentiable component.

Each check builds a float64 instance from a seed, contracts its output with a
fixed random tensor to get a scalar and hands the loss to
:func:`grt.diffmath.grad_check`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from grt import diffmath as dm
from grt.attention import GaussianTransformerBlock, GaussianTransformerLayer, PositionalEncoding
from grt.backbone import GRTConfig, build
from grt.geometry import CloudGeometry, knn, relative_positions
from grt.sampling import (
    AttentiveDownsample,
    AttentiveUpsample,
    MaxPoolDownsample,
    TrilinearUpsample,
    downsample_plan,
    upsample_plan,
)
from grt.training import LossConfig, lovasz_softmax, total_loss, weighted_cross_entropy

DTYPE = torch.float64
SCOPES = ("primitives", "layers", "losses", "model")
MIN_COORDS = 64


def _leaf(t):
    return t.detach().clone().requires_grad_(True)


def _contract(out, gen):
    weights = torch.randn(out.shape, generator=gen, dtype=DTYPE)
    return (out * weights).sum()


def _cloud(rng, n, spread=1.0):
    return rng.uniform(-spread, spread, (n, 2))


def _module_check(module, forward, gen, extra=None, **kw):
    module = module.to(DTYPE)
    params = dict(module.named_parameters())
    params.update(extra or {})
    out = forward()
    weights = torch.randn(out.shape, generator=gen, dtype=DTYPE)
    return dm.grad_check(lambda: (forward() * weights).sum(), params, **kw)


# -- primitives ---------------------------------------------------------------

def check_fully_connected(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    x = _leaf(torch.randn(5, 3, generator=gen, dtype=DTYPE))
    w = _leaf(torch.randn(3, 4, generator=gen, dtype=DTYPE))
    b = _leaf(torch.randn(4, generator=gen, dtype=DTYPE))
    r = torch.randn(5, 4, generator=gen, dtype=DTYPE)
    return dm.grad_check(lambda: (dm.fully_connected(x, w, b) * r).sum(),
                         {"input": x, "weight": w, "bias": b}, **kw)


def check_layer_norm(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    x = _leaf(torch.randn(4, 6, generator=gen, dtype=DTYPE))
    scale = _leaf(1 + 0.5 * torch.randn(6, generator=gen, dtype=DTYPE))
    shift = _leaf(torch.randn(6, generator=gen, dtype=DTYPE))
    r = torch.randn(4, 6, generator=gen, dtype=DTYPE)
    return dm.grad_check(lambda: (dm.layer_norm(x, scale, shift) * r).sum(),
                         {"input": x, "scale": scale, "shift": shift}, **kw)


def _elementwise(fn, n=50):
    def check(seed, **kw):
        gen = torch.Generator().manual_seed(seed)
        x = _leaf(2 * torch.randn(n, generator=gen, dtype=DTYPE))
        r = torch.randn(n, generator=gen, dtype=DTYPE)
        return dm.grad_check(lambda: (fn(x) * r).sum(), {"input": x}, max_coords=n, **kw)
    return check


def check_softmax(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    x = _leaf(torch.randn(3, 5, 4, generator=gen, dtype=DTYPE))
    r = torch.randn(3, 5, 4, generator=gen, dtype=DTYPE)
    return dm.grad_check(lambda: (dm.softmax(x, axis=1) * r).sum(), {"input": x}, **kw)


# -- layers -------------------------------------------------------------------

def _self_neighbors(coords, k):
    geom = CloudGeometry.single(coords)
    nb = knn(geom, geom, k)
    return nb.indices, relative_positions(geom, nb, geom)


def check_positional_encoding(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    pe = PositionalEncoding(8, generator=gen)
    d = torch.randn(6, 4, 2, generator=gen, dtype=DTYPE)
    return _module_check(pe, lambda: pe(d), gen, **kw)


def _gtl(normalization):
    def check(seed, **kw):
        gen = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        coords = _cloud(rng, 12)
        nb, disp = _self_neighbors(coords, 4)
        layer = GaussianTransformerLayer(8, 4, normalization, generator=gen)
        x = _leaf(torch.randn(12, 8, generator=gen, dtype=DTYPE))
        return _module_check(layer, lambda: layer(x, nb, disp), gen, {"input": x}, **kw)
    return check


def _randomize(module, gen, scale=0.3):
    # zero-initialized branches would hide gradients of the layers before them
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def check_gtb(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    coords = _cloud(rng, 12)
    nb, disp = _self_neighbors(coords, 4)
    block = _randomize(GaussianTransformerBlock(8, 4, generator=gen).to(DTYPE), gen)
    x = _leaf(torch.randn(12, 8, generator=gen, dtype=DTYPE))
    return _module_check(block, lambda: block(x, nb, disp), gen, {"input": x}, **kw)


def _down(cls):
    def check(seed, **kw):
        gen = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        coords = _cloud(rng, 16)
        _, nbrs = downsample_plan(coords, 3)
        layer = cls(4, 6, generator=gen)
        x = _leaf(torch.randn(16, 4, generator=gen, dtype=DTYPE))
        return _module_check(layer, lambda: layer(x, coords, nbrs), gen, {"input": x}, **kw)
    return check


def _up(cls, k):
    def check(seed, **kw):
        gen = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        skip_coords = _cloud(rng, 12)
        coarse_coords = skip_coords[rng.choice(12, 6, replace=False)]
        nbrs, offs = upsample_plan(coarse_coords, skip_coords, k)
        # keep exact-hit rows out of the trilinear check: their weights are piecewise
        if cls is TrilinearUpsample:
            skip_coords = skip_coords + 0.01 * rng.standard_normal(skip_coords.shape)
            nbrs, offs = upsample_plan(coarse_coords, skip_coords, k)
        layer = cls(5, 4, 4, generator=gen)
        coarse = _leaf(torch.randn(6, 5, generator=gen, dtype=DTYPE))
        skip = _leaf(torch.randn(12, 4, generator=gen, dtype=DTYPE))
        return _module_check(layer, lambda: layer(coarse, skip, nbrs, offs), gen,
                             {"coarse_input": coarse, "skip_input": skip}, **kw)
    return check


# -- losses ---------------------------------------------------------------------

def check_weighted_ce(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    logits = _leaf(torch.randn(10, 6, generator=gen, dtype=DTYPE))
    labels = torch.randint(0, 6, (10,), generator=gen)
    weights = LossConfig().class_weights
    return dm.grad_check(lambda: weighted_cross_entropy(logits, labels, weights),
                         {"logits": logits}, **kw)


def check_lovasz(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    logits = _leaf(torch.randn(10, 6, generator=gen, dtype=DTYPE))
    labels = torch.randint(0, 6, (10,), generator=gen)
    return dm.grad_check(lambda: lovasz_softmax(dm.softmax(logits, -1), labels),
                         {"logits": logits}, **kw)


def check_total_loss_head(seed, **kw):
    gen = torch.Generator().manual_seed(seed)
    fc1 = dm.Linear(8, 8, generator=gen).to(DTYPE)
    fc2 = dm.Linear(8, 6, generator=gen).to(DTYPE)
    h = torch.randn(12, 8, generator=gen, dtype=DTYPE)
    labels = torch.randint(0, 6, (12,), generator=gen)
    cfg = LossConfig()
    params = {f"fc1.{k}": v for k, v in fc1.named_parameters()}
    params.update({f"fc2.{k}": v for k, v in fc2.named_parameters()})
    return dm.grad_check(lambda: total_loss(fc2(dm.gelu(fc1(h))), labels, cfg), params, **kw)


# -- end to end -----------------------------------------------------------------

TOY_CONFIG = GRTConfig(stage_dims=(4, 8, 8, 8, 8), n_neighbors=4, sampler_k=3)


def _stages(model, plan):
    """The backbone forward split into (module prefixes, step) pairs.

    Each step maps the list of activations so far to the next one; running
    every step in order reproduces ``forward_planned``.
    """
    n = len(model.down)
    steps = [(("stem", "encoder.0"),
              lambda acts, x: model.encoder[0](model.stem(x), plan.attn_neighbors[0], plan.attn_offsets[0]))]
    for i in range(n):
        def enc(acts, x, i=i):
            h = model.down[i](acts[-1], plan.coords[i], plan.down_neighbors[i])
            return model.encoder[i + 1](h, plan.attn_neighbors[i + 1], plan.attn_offsets[i + 1])
        steps.append(((f"down.{i}", f"encoder.{i + 1}"), enc))
    for i in reversed(range(n)):
        def dec(acts, x, i=i):
            h = model.up[i](acts[-1], acts[i], plan.up_neighbors[i], plan.up_offsets[i])
            return model.decoder[i](h, plan.attn_neighbors[i], plan.attn_offsets[i])
        steps.append(((f"up.{i}", f"decoder.{i}"), dec))
    steps.append((("head_fc1", "head_fc2"),
                  lambda acts, x: model.head_fc2(dm.gelu(model.head_fc1(acts[-1])))))
    return steps


def staged_logits(model, x, plan, start=0, cache=None):
    """Run the stages from ``start`` on, reusing ``cache`` for the earlier ones."""
    acts = list(cache[:start]) if start else []
    for _, step in _stages(model, plan)[start:]:
        acts.append(step(acts, x))
    return acts[-1], acts


def check_model(seed, config: GRTConfig = TOY_CONFIG, n_points=24, max_coords=64, window=None, **kw):
    """Whole-backbone check; each stage's parameters are perturbed with the
    activations of the stages before it frozen, which leaves every derivative
    unchanged and skips recomputing the unaffected prefix."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = _randomize(build(config, seed).to(DTYPE), gen, scale=0.1)
    coords = rng.uniform(-20, 20, (n_points, 2))
    features = np.c_[coords, rng.normal(0, 3, n_points), rng.uniform(-10, 10, n_points)]
    labels = rng.integers(0, config.num_classes, n_points)
    plan = model.plan(coords, features).as_tensors(DTYPE)
    x = model.input_features(features[plan.order])
    lab = torch.from_numpy(labels[plan.order])
    cfg = LossConfig()
    with torch.no_grad():
        _, cache = staged_logits(model, x, plan)
    params = dict(model.named_parameters())
    report = dm.GradCheckReport(kw.get("tolerance", 1e-4))
    for start, (prefixes, _) in enumerate(_stages(model, plan)):
        group = {k: v for k, v in params.items() if k.split(".")[0] in prefixes
                 or ".".join(k.split(".")[:2]) in prefixes}

        def loss(start=start):
            return total_loss(staged_logits(model, x, plan, start, cache)[0], lab, cfg)

        report.merge(dm.grad_check(loss, group, max_coords=max_coords, seed=seed, window=window, **kw))
    missing = set(params) - set(report.errors)
    if missing:
        raise RuntimeError(f"parameters outside every stage: {sorted(missing)}")
    return report


CHECKS: dict[str, dict[str, Callable]] = {
    "primitives": {
        "fully_connected": check_fully_connected,
        "layer_norm": check_layer_norm,
        "gelu": _elementwise(dm.gelu),
        "gaussian_activation": _elementwise(dm.gaussian_activation),
        "softmax": check_softmax,
    },
    "layers": {
        "positional_encoding": check_positional_encoding,
        "gtl_gaussian": _gtl("gaussian"),
        "gtl_softmax": _gtl("softmax"),
        "gtb": check_gtb,
        "attentive_downsample": _down(AttentiveDownsample),
        "maxpool_downsample": _down(MaxPoolDownsample),
        "attentive_upsample": _up(AttentiveUpsample, 3),
        "trilinear_upsample": _up(TrilinearUpsample, 3),
    },
    "losses": {
        "weighted_cross_entropy": check_weighted_ce,
        "lovasz_softmax": check_lovasz,
        "total_loss_head": check_total_loss_head,
    },
    "model": {"toy_backbone": check_model},
}


@dataclass
class SuiteResult:
    tolerance: float
    rows: list = field(default_factory=list)  # (scope, name, seeds, max_error, seconds)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        out = [f"{'check':<32}{'seeds':>6}{'max rel err':>14}{'time s':>9}  status"]
        for scope, name, seeds, err, secs in self.rows:
            status = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{scope + '/' + name:<32}{seeds:>6}{err:>14.3e}{secs:>9.2f}  {status}")
        out.append(f"tolerance {self.tolerance:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(out)


def run_suite(scopes=SCOPES, seeds=range(10), tolerance: float = 1e-4, fault: str | None = None,
              log: Callable[[str], None] | None = None) -> SuiteResult:
    """Run every check of ``scopes`` for each seed; ``fault`` negates one primitive's adjoint."""
    result = SuiteResult(tolerance)
    seeds = list(seeds)
    for scope in scopes:
        if scope not in CHECKS:
            raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
        for name, check in CHECKS[scope].items():
            start = time.perf_counter()
            worst, bad = 0.0, []
            for pos, seed in enumerate(seeds):
                kw = {"tolerance": tolerance}
                if scope == "model":
                    # each seed takes a different block of coordinates, so every
                    # tensor accumulates >= 64 checked entries over the seeds
                    kw.update(max_coords=math.ceil(MIN_COORDS / len(seeds)), window=pos)
                with dm.inject_fault(*([fault] if fault else [])):
                    report = check(seed, **kw)
                worst = max(worst, report.max_error)
                bad.extend(f"{scope}/{name}[seed {seed}]:{p}" for p in report.failures)
            row = (scope, name, len(seeds), worst, time.perf_counter() - start)
            result.rows.append(row)
            result.failures.extend(bad)
            if log:
                log(f"{scope}/{name}: max rel err {worst:.3e} over {len(seeds)} seeds")
    return result
