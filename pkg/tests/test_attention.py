import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from grt.attention import (
    GaussianTransformerBlock,
    GaussianTransformerLayer,
    PositionalEncoding,
    normalize_scores,
)
from grt.diffmath import grad_check
from grt.geometry import CloudGeometry, knn, relative_positions

D = torch.float64


def neighborhood(coords, k):
    g = CloudGeometry.single(coords)
    nb = knn(g, g, k)
    return nb.indices, relative_positions(g, nb, g)


def layer(dim, k, norm="gaussian", seed=0):
    gen = torch.Generator().manual_seed(seed)
    gtl = GaussianTransformerLayer(dim, k, norm, generator=gen).to(D)
    with torch.no_grad():
        for p in gtl.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=gen, dtype=D))
    return gtl


# -- loop-nest oracle ------------------------------------------------------------

def _fc(x, w, b):
    return [sum(x[i] * w[i][o] for i in range(len(x))) + b[o] for o in range(len(b))]


def _gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def gtl_oracle(gtl, feats, nbrs, disp):
    """Termwise evaluation of o_j = sum_i G(q_j - k_i + pe(p_j - p_i)) * v_i."""
    W = gtl.qkv.weight.tolist()
    B = gtl.qkv.bias.tolist()
    pw1, pb1 = gtl.pos_enc.fc1.weight.tolist(), gtl.pos_enc.fc1.bias.tolist()
    pw2, pb2 = gtl.pos_enc.fc2.weight.tolist(), gtl.pos_enc.fc2.bias.tolist()
    d = gtl.dim
    qkv = [_fc(f, W, B) for f in feats.tolist()]
    out = []
    for j in range(len(qkv)):
        o = [0.0] * d
        scores = []
        for slot, i in enumerate(nbrs[j]):
            pe = _fc([_gelu(v) for v in _fc(list(disp[j][slot]), pw1, pb1)], pw2, pb2)
            scores.append([qkv[j][c] - qkv[i][d + c] + pe[c] for c in range(d)])
        for c in range(d):
            if gtl.normalization == "gaussian":
                w = [math.exp(-s[c] ** 2 / 2) for s in scores]
            else:
                m = max(s[c] for s in scores)
                e = [math.exp(s[c] - m) for s in scores]
                w = [v / sum(e) for v in e]
            o[c] = sum(w[slot] * qkv[i][2 * d + c] for slot, i in enumerate(nbrs[j]))
        out.append(o)
    return np.array(out)


@pytest.mark.parametrize("norm", ["gaussian", "softmax"])
@pytest.mark.parametrize("seed", range(3))
def test_gtl_matches_loop_nest(norm, seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-2, 2, (8, 2))
    nbrs, disp = neighborhood(coords, 4)
    gtl = layer(4, 4, norm, seed)
    feats = torch.from_numpy(rng.normal(size=(8, 4)))
    out = gtl(feats, nbrs, disp).detach().numpy()
    np.testing.assert_allclose(out, gtl_oracle(gtl, feats, nbrs, disp), rtol=0, atol=1e-6)


def test_gtl_single_point_returns_value():
    gtl = GaussianTransformerLayer(3, 1, generator=torch.Generator().manual_seed(0)).to(D)
    with torch.no_grad():
        # equal query and key projections make q - k vanish
        gtl.qkv.weight[:, 3:6] = gtl.qkv.weight[:, 0:3]
    x = torch.tensor([[0.3, -1.2, 2.0]], dtype=D)
    out = gtl(x, np.array([[0]]), np.zeros((1, 1, 2)))
    v = (x @ gtl.qkv.weight + gtl.qkv.bias)[:, 6:9]
    assert torch.equal(out, v)


def test_softmax_gtl_single_neighbor_returns_value():
    gtl = layer(3, 1, "softmax")
    x = torch.randn(5, 3, dtype=D, generator=torch.Generator().manual_seed(1))
    nbrs = np.arange(5)[:, None]
    v = (x @ gtl.qkv.weight + gtl.qkv.bias)[:, 6:9]
    assert torch.equal(gtl(x, nbrs, np.zeros((5, 1, 2))), v)


def test_softmax_shift_invariance():
    scores = torch.randn(4, 5, 3, dtype=D, generator=torch.Generator().manual_seed(2))
    shift = torch.randn(4, 1, 3, dtype=D, generator=torch.Generator().manual_seed(3))
    a = normalize_scores(scores, "softmax")
    assert torch.allclose(normalize_scores(scores + shift, "softmax"), a, rtol=0, atol=1e-15)


def test_gtl_width_mismatch():
    gtl = layer(4, 4)
    nbrs, disp = neighborhood(np.random.default_rng(0).uniform(size=(8, 2)), 3)
    with pytest.raises(ValueError, match="width 3"):
        gtl(torch.zeros(8, 4, dtype=D), nbrs, disp)


def test_gtl_small_cloud_uses_all_points():
    gtl = layer(4, 16)
    nbrs, disp = neighborhood(np.random.default_rng(0).uniform(size=(5, 2)), 5)
    assert gtl(torch.zeros(5, 4, dtype=D), nbrs, disp).shape == (5, 4)


def test_unknown_normalization():
    with pytest.raises(ValueError):
        GaussianTransformerLayer(4, 4, "sparsemax")


# -- decoupling -------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decoupling_gaussian_vs_softmax(seed):
    rng = np.random.default_rng(seed)
    scores = torch.from_numpy(rng.normal(size=(6, 5, 3)))
    j, i, c = rng.integers(6), rng.integers(5), rng.integers(3)
    bumped = scores.clone()
    bumped[j, i, c] += rng.uniform(0.1, 1.0)

    g0, g1 = normalize_scores(scores, "gaussian"), normalize_scores(bumped, "gaussian")
    changed = g0 != g1
    assert changed[j, i, c]
    assert changed.sum() == 1

    s0, s1 = normalize_scores(scores, "softmax"), normalize_scores(bumped, "softmax")
    row = s0[j, :, c] != s1[j, :, c]
    assert torch.all(row)
    mask = torch.ones_like(changed)
    mask[j, :, c] = False
    assert torch.equal(s0[mask], s1[mask])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gaussian_weights_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-3, 3, (12, 2))
    nbrs, disp = neighborhood(coords, 4)
    gtl = layer(4, 4, seed=seed % 100)
    scores, _ = gtl.scores(torch.from_numpy(rng.normal(size=(12, 4)) * 3), nbrs, disp)
    w = normalize_scores(scores, "gaussian")
    assert torch.all(w > 0) and torch.all(w <= 1)


# -- positional encoding -----------------------------------------------------------

def test_positional_encoding_zero_displacement():
    pe = PositionalEncoding(6, generator=torch.Generator().manual_seed(0)).to(D)
    assert torch.equal(pe(torch.zeros(3, 2, 2, dtype=D)), torch.zeros(3, 2, 6, dtype=D))


def test_positional_encoding_is_pointwise():
    pe = PositionalEncoding(6, generator=torch.Generator().manual_seed(0)).to(D)
    d = torch.tensor([[[0.5, -1.0], [0.5, -1.0]]], dtype=D)
    out = pe(d)
    assert torch.equal(out[0, 0], out[0, 1])


def test_positional_encoding_gradient():
    gen = torch.Generator().manual_seed(1)
    pe = PositionalEncoding(5, generator=gen).to(D)
    d = torch.randn(4, 3, 2, generator=gen, dtype=D)
    r = torch.randn(4, 3, 5, generator=gen, dtype=D)
    report = grad_check(lambda: (pe(d) * r).sum(), dict(pe.named_parameters()), tolerance=1e-5)
    assert report.passed, report.errors


# -- equivariance ------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gtl_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-3, 3, (10, 2))
    feats = torch.from_numpy(rng.normal(size=(10, 4)))
    gtl = layer(4, 4, seed=1)
    perm = rng.permutation(10)
    nbrs, disp = neighborhood(coords, 4)
    pnbrs, pdisp = neighborhood(coords[perm], 4)
    out = gtl(feats, nbrs, disp)
    pout = gtl(feats[perm], pnbrs, pdisp)
    assert torch.equal(pout, out[perm])


# -- block ------------------------------------------------------------------------------

def test_gtb_fresh_block_is_identity():
    coords = np.random.default_rng(0).uniform(size=(9, 2))
    nbrs, disp = neighborhood(coords, 4)
    block = GaussianTransformerBlock(6, 4, generator=torch.Generator().manual_seed(0)).to(D)
    x = torch.randn(9, 6, dtype=D)
    assert torch.equal(block(x, nbrs, disp), x)


def test_gtb_gradient_check():
    gen = torch.Generator().manual_seed(3)
    coords = np.random.default_rng(3).uniform(-1, 1, (12, 2))
    nbrs, disp = neighborhood(coords, 4)
    block = GaussianTransformerBlock(8, 4, generator=gen).to(D)
    with torch.no_grad():
        for p in block.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=D))
    x = torch.randn(12, 8, generator=gen, dtype=D)
    r = torch.randn(12, 8, generator=gen, dtype=D)
    report = grad_check(lambda: (block(x, nbrs, disp) * r).sum(), dict(block.named_parameters()))
    assert report.passed, report.errors
