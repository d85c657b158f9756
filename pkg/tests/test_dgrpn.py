import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from psearch.dgrpn import (
    DGRPN,
    AnchorConfig,
    DgrpnParams,
    aggregate_gaussians,
    build_gaussian,
    make_anchors,
    modulate_features,
    peak_std,
    proposal_prior,
    propose_regions,
    select_peaks,
    smooth_l1,
    threshold_attention,
)
from psearch.errors import ContractError

maps16 = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


def test_threshold_examples():
    out = threshold_attention(np.array([[0.9, 0.3], [0.6, 0.8]]), 0.5)
    np.testing.assert_array_equal(out, [[0.9, 0], [0.6, 0.8]])
    m = np.random.default_rng(0).random((5, 5))
    assert not threshold_attention(m, 1.0).any()
    m = m + 0.01
    np.testing.assert_array_equal(threshold_attention(m, 0.0), m)
    with pytest.raises(ValueError):
        threshold_attention(m, 1.5)
    with pytest.raises(ValueError):
        threshold_attention(np.array([[np.nan]]), 0.5)


@given(maps16, st.floats(0, 1))
def test_threshold_entries_zero_or_above_tau(m, tau):
    th = threshold_attention(m, tau)
    assert np.all((th == 0) | ((th > tau) & (th <= m.max())))


def test_select_peaks_examples():
    assert select_peaks(np.zeros((4, 4)), 2) == []
    single = np.zeros((5, 5))
    single[1, 3] = 0.7
    assert select_peaks(single, 0) == [(3, 1)]
    assert select_peaks(single, 2) == [(3, 1)]
    yy, xx = np.mgrid[0:8, 0:8]
    blobs = np.maximum(np.exp(-((yy - 1) ** 2 + (xx - 2) ** 2) / 2.0),
                       0.9 * np.exp(-((yy - 6) ** 2 + (xx - 6) ** 2) / 2.0))
    blobs = threshold_attention(blobs, 0.05)
    want = [(c, r) for r, c in oracles_local_max(blobs, 2)]
    assert select_peaks(blobs, 2) == want == [(2, 1), (6, 6)]


def oracles_local_max(m, r):
    h, w = m.shape
    out = []
    for i in range(h):
        for j in range(w):
            if m[i, j] == 0:
                continue
            if all(m[i, j] > m[a, b] for a in range(max(0, i - r), min(h, i + r + 1))
                   for b in range(max(0, j - r), min(w, j + r + 1)) if (a, b) != (i, j)):
                out.append((i, j))
    return out


def test_peak_std_examples():
    m = np.zeros((7, 7))
    m[2, 2] = 1.0
    assert peak_std(m, (2, 2), 3, 5.0) == (5.0, 5.0)
    m[2, 4] = 1.0  # neighbor two columns right of the center
    assert peak_std(m, (2, 2), 3, 5.0) == (5.0, 5.0)
    assert peak_std(m, (2, 2), 3, 0.5) == pytest.approx((2.0, 0.5))
    m = np.random.default_rng(3).random((7, 7))
    got = peak_std(m, (3, 3), 3, 0.01)
    want = oracles.peak_std(m, 3, 3, 3, 0.01)
    assert abs(got[0] - want[0]) <= 1e-9 and abs(got[1] - want[1]) <= 1e-9
    with pytest.raises(ValueError):
        peak_std(m, (7, 0), 3, 1.0)


@given(maps16, st.integers(0, 15), st.integers(0, 15), st.integers(0, 5), st.floats(0.01, 10))
def test_peak_std_at_least_delta(m, cx, cy, r, delta):
    s = peak_std(m, (cx, cy), r, delta)
    assert s[0] >= delta and s[1] >= delta


def test_gaussian_examples():
    g = build_gaussian((4, 6), (5.0, 3.0), 2.0, (16, 16))
    assert g[6, 4] == 1.0
    assert float(g[6, 9]) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert float(g[6, 9]) == pytest.approx(0.60653, abs=1e-5)
    want = oracles.gaussian(4, 6, 5.0, 3.0, 2.0, 16, 16)
    assert np.abs(g.numpy() - want).max() <= 1e-7


def test_aggregate_examples():
    a = torch.rand(4, 4, dtype=torch.float64)
    assert torch.equal(aggregate_gaussians([a], (4, 4)), a)
    assert torch.equal(aggregate_gaussians([a, a + 1], (4, 4)), a + 1)
    assert torch.equal(aggregate_gaussians([], (3, 5)), torch.zeros(3, 5, dtype=torch.float64))
    with pytest.raises(ValueError):
        aggregate_gaussians([a, torch.rand(3, 4, dtype=torch.float64)], (4, 4))


@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 15), st.floats(0.5, 6), st.floats(0.5, 6)),
                min_size=1, max_size=5))
def test_gaussian_max_is_monotone_in_peaks(peaks):
    maps = [build_gaussian((x, y), (sw, sh), 2.0, (16, 16)) for x, y, sw, sh in peaks]
    prev = torch.zeros(16, 16, dtype=torch.float64)
    for k in range(1, len(maps) + 1):
        cur = aggregate_gaussians(maps[:k], (16, 16))
        assert bool((cur >= prev).all())
        prev = cur
    for x, y, _, _ in peaks:
        assert prev[y, x] == 1.0


def test_modulation_examples():
    f = torch.randn(3, 5, 5, dtype=torch.float64)
    g = torch.rand(5, 5, dtype=torch.float64)
    assert torch.equal(modulate_features(f, g, 0.0), f)
    assert torch.equal(modulate_features(f, torch.zeros(5, 5, dtype=torch.float64), 0.7), f)
    assert torch.allclose(modulate_features(f, torch.ones(5, 5, dtype=torch.float64), 1.0), 2 * f)
    want = oracles.modulate(f.numpy(), g.numpy(), 0.5)
    assert np.abs(modulate_features(f, g, 0.5).numpy() - want).max() <= 1e-7
    with pytest.raises(ContractError):
        modulate_features(f, torch.rand(4, 5), 0.5)


def test_proposal_prior_matches_composed_oracle():
    rng = np.random.default_rng(9)
    yy, xx = np.mgrid[0:16, 0:16]
    m = np.zeros((16, 16))
    for _ in range(3):
        cy, cx = rng.integers(0, 16, 2)
        m = np.maximum(m, rng.uniform(0.6, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 6.0))
    params = DgrpnParams(tau=0.5, delta=1.0, peak_radius=3)
    g = proposal_prior(m, params, 2.0, (16, 16)).numpy()
    th = oracles.threshold(m, 0.5)
    peaks = oracles_local_max(th, 3)
    maps = [oracles.gaussian(c, r, *oracles.peak_std(th, c, r, 3, 1.0), 2.0, 16, 16) for r, c in peaks]
    assert np.abs(g - oracles.elementwise_max(maps, 16, 16)).max() <= 1e-7


def test_dense_mode_uses_every_pixel():
    m = np.zeros((6, 6))
    m[1, 1], m[1, 2] = 0.9, 0.8
    assert select_peaks(m, 0) == [(1, 1), (2, 1)]
    g = proposal_prior(m, DgrpnParams(tau=0.5, delta=1.0, peak_radius=0), 2.0, (6, 6))
    assert g[1, 1] == 1.0 and g[1, 2] == 1.0


def test_anchor_layout():
    cfg = AnchorConfig(widths=(16.0,), aspect_ratios=(2.0,))
    a = make_anchors((2, 3), 8, cfg)
    assert a.shape == (6, 4)
    assert a[0].tolist() == [4 - 8, 4 - 16, 4 + 8, 4 + 16]
    assert a[1, 0] - a[0, 0] == 8  # next anchor is one column right


def _rpn(seed=0, gamma=0.0):
    torch.manual_seed(seed)
    return DGRPN(8, 8, DgrpnParams(gamma_init=gamma), AnchorConfig(post_nms_top_n=16))


def test_propose_regions_deterministic():
    f = torch.randn(8, 8, 8, generator=torch.Generator().manual_seed(1))
    a = propose_regions(f, _rpn(), (64, 64))
    b = propose_regions(f, _rpn(), (64, 64))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert len(a[0]) <= 16 and bool(((a[1] >= 0) & (a[1] <= 1)).all())


def test_zero_attention_matches_gamma_zero():
    f = torch.randn(1, 8, 8, 8, generator=torch.Generator().manual_seed(2))
    rpn = _rpn(gamma=0.8)
    f_det, g = rpn.modulate(f, [np.zeros((8, 8))])
    assert not g.any() and torch.equal(f_det, f)
    plain = _rpn(gamma=0.0)
    f0, _ = plain.modulate(f, [np.random.default_rng(0).random((8, 8))])
    assert torch.equal(f0, f)
    p1 = propose_regions(f_det[0], rpn, (64, 64))
    p0 = propose_regions(f[0], rpn, (64, 64))
    assert torch.equal(p1[0], p0[0]) and torch.equal(p1[1], p0[1])


def test_beta_and_gamma_receive_gradients():
    rpn = _rpn(gamma=0.5)
    yy, xx = np.mgrid[0:8, 0:8]
    att = np.exp(-((yy - 4) ** 2 + (xx - 3) ** 2) / 4.0)
    f = torch.randn(1, 8, 8, 8, generator=torch.Generator().manual_seed(3))
    targets = [torch.tensor([[16.0, 8.0, 40.0, 60.0]])]
    _, _, losses = rpn(f, [att], (64, 64), targets, torch.Generator().manual_seed(0))
    sum(losses.values()).backward()
    assert rpn.log_beta.grad is not None and rpn.log_beta.grad != 0
    assert rpn.gamma.grad is not None and rpn.gamma.grad != 0


def test_params_validation():
    for kw in ({"tau": 1.5}, {"delta": 0.0}, {"beta_init": -1.0}, {"peak_radius": -1}):
        with pytest.raises(ValueError):
            DgrpnParams(**kw)


def test_smooth_l1_branches():
    x = torch.tensor([0.5, -2.0, 1.0, 0.0], dtype=torch.float64)
    assert smooth_l1(x).tolist() == [0.125, 1.5, 0.5, 0.0]
    eps = 1e-9
    assert float(smooth_l1(torch.tensor(1 - eps, dtype=torch.float64))) == pytest.approx(0.5, abs=1e-8)
