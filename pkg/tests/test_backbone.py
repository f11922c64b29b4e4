import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grt.backbone import GRTConfig, build, canonical_order, predict
from grt.data import synth_generate, SyntheticSceneConfig

TOY = GRTConfig(stage_dims=(8, 16, 32, 64, 128))


def cloud_arrays(n, seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-20, 20, (n, 2))
    feats = np.column_stack([coords, rng.normal(0, 3, n), rng.normal(0, 8, n)])
    return feats, coords


# -- shape audit ------------------------------------------------------------------------

def lin(i, o, bias=True):
    return i * o + (o if bias else 0)


def lng(i, o):
    return lin(i, o) + 2 * o


def gtb(d):
    pos_enc = lin(2, d) + lin(d, d)
    return lin(d, d) + 2 * (2 * d) + lin(d, 3 * d) + pos_enc + lin(d, d)


def expected_count(cfg):
    dims = cfg.stage_dims
    total = lng(cfg.input_dim, dims[0]) + gtb(dims[0])
    for i in range(4):
        if cfg.downsample == "attentive":
            total += lin(dims[i] + 2, dims[i], bias=False) + lng(dims[i], dims[i + 1])
        else:
            total += lng(dims[i], dims[i + 1])
        total += gtb(dims[i + 1])
        if cfg.upsample == "attentive":
            total += lng(dims[i], dims[i]) + lng(dims[i + 1], dims[i])
            total += lin(dims[i] + 2, dims[i], bias=False) + lng(dims[i], dims[i])
        else:
            total += lng(dims[i + 1] + dims[i], dims[i])
        total += gtb(dims[i])
    return total + lin(dims[0], dims[0]) + lin(dims[0], cfg.num_classes)


@pytest.mark.parametrize("cfg", [
    GRTConfig(),
    TOY,
    GRTConfig(features="xy", downsample="maxpool", upsample="trilinear", attention="softmax"),
])
def test_parameter_count_closed_form(cfg):
    model = build(cfg)
    assert sum(p.numel() for p in model.parameters()) == expected_count(cfg)


def test_same_seed_same_parameters():
    a, b = build(TOY, seed=5).state_dict(), build(TOY, seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build(TOY, seed=6).state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("kwargs", [
    {"stage_dims": (8, 16, 32)},
    {"features": "xyz"},
    {"features": "xx"},
    {"attention": "linear"},
    {"downsample": "avg"},
    {"upsample": "nearest"},
    {"min_points": 8},
    {"velocity_scale": 0.0},
])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        GRTConfig(**kwargs)


def test_config_roundtrip():
    cfg = GRTConfig(features="xyv", attention="softmax")
    assert GRTConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GRTConfig.from_dict({**cfg.to_dict(), "depth": 3})


# -- forward --------------------------------------------------------------------------------

def test_toy_forward_32_points():
    model = build(TOY)
    feats, coords = cloud_arrays(32, 0)
    plan = model.plan(coords, feats)
    assert plan.sizes == [32, 16, 8, 4, 2]
    logits = model(feats, coords, plan)
    assert logits.shape == (32, 6)
    assert torch.isfinite(logits).all()


def test_fresh_model_uniform_posteriors():
    model = build(TOY)
    feats, coords = cloud_arrays(40, 1)
    assert torch.equal(model(feats, coords), torch.zeros(40, 6))


def test_undersized_cloud_named():
    feats, coords = cloud_arrays(10, 0)
    with pytest.raises(ValueError, match="scan_7"):
        build(TOY).plan(coords, feats, name="scan_7")


@settings(max_examples=25, deadline=None)
@given(st.integers(16, 70), st.integers(0, 2**31 - 1))
def test_stage_cardinalities_and_subsets(n, seed):
    model = build(GRTConfig(stage_dims=(4, 4, 4, 4, 4), n_neighbors=4, sampler_k=3))
    feats, coords = cloud_arrays(n, seed)
    plan = model.plan(coords, feats)
    sizes = plan.sizes
    for a, b in zip(sizes, sizes[1:]):
        assert b == -(-a // 2)
    base = {tuple(p) for p in plan.coords[0]}
    for level in plan.coords[1:]:
        assert {tuple(p) for p in level} <= base
    for i, nbrs in enumerate(plan.up_neighbors):
        assert len(nbrs) == sizes[i]
        assert nbrs.max() < sizes[i + 1]


def perturbed(model, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen))
    return model


@pytest.mark.parametrize("variant", [
    {},
    {"attention": "softmax", "downsample": "maxpool", "upsample": "trilinear"},
])
def test_permutation_equivariance(variant):
    model = perturbed(build(GRTConfig(stage_dims=(8, 16, 16, 16, 16), **variant)), 0)
    for seed in range(5):
        feats, coords = cloud_arrays(48, seed)
        perm = np.random.default_rng(100 + seed).permutation(48)
        with torch.no_grad():
            out = model(feats, coords)
            pout = model(feats[perm], coords[perm])
        assert torch.equal(pout, out[perm])


def test_canonical_order_breaks_coordinate_ties_by_features():
    coords = np.zeros((3, 2))
    feats = np.array([[0, 0, 2.0, 1.0], [0, 0, 1.0, 5.0], [0, 0, 1.0, -5.0]])
    assert canonical_order(coords, feats).tolist() == [2, 1, 0]


def test_forward_on_synthetic_scene_double():
    scene = synth_generate(SyntheticSceneConfig(n_scenes=1), 3)[0]
    model = perturbed(build(TOY), 1).double()
    logits = model(scene.features, scene.coords)
    assert logits.dtype == torch.float64 and logits.shape == (len(scene), 6)


# -- predict -------------------------------------------------------------------------------

def test_predict_ties_and_one_hot():
    assert predict(torch.zeros(1, 6)).tolist() == [0]
    assert predict(np.array([[0, 3, 3, 1, 0, 0]])).tolist() == [1]
    assert predict(5 * np.eye(6)).tolist() == list(range(6))


def test_predict_matches_scan():
    logits = np.random.default_rng(0).integers(-3, 3, (200, 6)).astype(float)
    expect = []
    for row in logits:
        best = 0
        for c in range(1, 6):
            if row[c] > row[best]:
                best = c
        expect.append(best)
    assert predict(logits).tolist() == expect


def test_predict_rejects_nan():
    with pytest.raises(ValueError):
        predict(np.array([[np.nan, 0.0]]))
