import math
import warnings

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

import oracles
from psearch.errors import ConfigError, LabelError
from psearch.heads import (
    UNLABELED,
    BoundingBox,
    OIMLoss,
    StripeEncoder,
    detection_losses,
    oim_loss,
    roi_align,
    stripe_bounds,
    stripe_encode,
)

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


# -- RoI-Align -------------------------------------------------------------------

def bilinear(f, y, x):
    """Scalar bilinear read with the usual RoI-Align border rules."""
    c, h, w = f.shape
    if y < -1 or y > h or x < -1 or x > w:
        return np.zeros(c)
    y, x = max(y, 0.0), max(x, 0.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    if y0 >= h - 1:
        y0 = y1 = h - 1
        y = float(y0)
    else:
        y1 = y0 + 1
    if x0 >= w - 1:
        x0 = x1 = w - 1
        x = float(x0)
    else:
        x1 = x0 + 1
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * f[:, y0, x0] + (1 - ly) * lx * f[:, y0, x1]
            + ly * (1 - lx) * f[:, y1, x0] + ly * lx * f[:, y1, x1])


def roi_oracle(f, box, oh, ow, scale):
    x1, y1, x2, y2 = (v * scale - 0.5 for v in box)
    bh, bw = (y2 - y1) / oh, (x2 - x1) / ow
    ny, nx = max(1, math.ceil(bh)), max(1, math.ceil(bw))
    out = np.zeros((f.shape[0], oh, ow))
    for i in range(oh):
        for j in range(ow):
            acc = np.zeros(f.shape[0])
            for a in range(ny):
                for b in range(nx):
                    acc += bilinear(f, y1 + (i + (a + 0.5) / ny) * bh, x1 + (j + (b + 0.5) / nx) * bw)
            out[:, i, j] = acc / (ny * nx)
    return out


def test_roi_align_identity_crop():
    f = rand(3, 6, 5)
    crops, kept = roi_align(f, [[0, 0, 5, 6]], (6, 5))
    assert kept.tolist() == [0]
    assert float((crops[0] - f).abs().max()) <= 1e-6


def test_roi_align_constant_map():
    f = torch.full((2, 8, 8), 3.5, dtype=D)
    crops, _ = roi_align(f, [[1.3, 2.2, 6.1, 7.9], [0, 0, 2, 2]], (4, 3))
    assert torch.allclose(crops, torch.full_like(crops, 3.5))


@pytest.mark.parametrize("seed", range(10))
def test_roi_align_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rand(3, 8, 10, seed=seed)
    boxes = []
    for _ in range(4):
        x1, y1 = rng.uniform(-8, 60), rng.uniform(-8, 50)
        boxes.append([x1, y1, x1 + rng.uniform(2, 40), y1 + rng.uniform(2, 40)])
    crops, _ = roi_align(f, boxes, (5, 3), 1 / 8)
    for k, b in enumerate(boxes):
        assert np.abs(crops[k].numpy() - roi_oracle(f.numpy(), b, 5, 3, 1 / 8)).max() <= 1e-6


def test_roi_align_matches_torchvision():
    tv = pytest.importorskip("torchvision.ops")
    rng = np.random.default_rng(0)
    f = rand(4, 12, 9, seed=1)
    boxes = []
    for _ in range(8):
        x1, y1 = rng.uniform(-10, 60), rng.uniform(-10, 80)
        boxes.append([x1, y1, x1 + rng.uniform(1, 50), y1 + rng.uniform(1, 50)])
    boxes = torch.tensor(boxes, dtype=D)
    ours, _ = roi_align(f, boxes, (7, 4), 1 / 8)
    ref = tv.roi_align(f[None], [boxes], (7, 4), 1 / 8, sampling_ratio=-1, aligned=True)
    assert float((ours - ref).abs().max()) <= 1e-6


def test_roi_align_skips_degenerate_boxes():
    f = rand(2, 4, 4)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        crops, kept = roi_align(f, [[1, 1, 1, 3], [0, 0, 4, 4]], (2, 2))
    assert kept.tolist() == [1] and crops.shape == (1, 2, 2, 2)
    assert any("degenerate" in str(r.message) for r in rec)


# -- stripes ------------------------------------------------------------------------

@given(st.integers(1, 30), st.integers(1, 8))
def test_stripe_bounds_partition(height, k):
    if k > height:
        with pytest.raises(ConfigError):
            stripe_bounds(height, k)
        return
    b = stripe_bounds(height, k)
    assert b[0][0] == 0 and b[-1][1] == height
    assert all(lo < hi for lo, hi in b)
    assert all(b[i][1] == b[i + 1][0] for i in range(k - 1))


def test_stripe_encoder_oracle():
    enc = StripeEncoder(3, stripes=4, embed_dim=8).double()
    roi = rand(3, 8, 4, seed=1)
    got = enc(roi[None])[0].detach().numpy()
    parts = []
    for s, proj in enumerate(enc.projections):
        pooled = roi[:, 2 * s:2 * s + 2, :].mean(dim=(1, 2)).numpy()
        parts.append(proj.weight.detach().numpy() @ pooled + proj.bias.detach().numpy())
    v = np.concatenate(parts)
    assert np.abs(got - v / np.linalg.norm(v)).max() <= 1e-6
    assert abs(np.linalg.norm(got) - 1) <= 1e-6


def test_stripe_encoder_k1_and_constant():
    enc = StripeEncoder(3, stripes=1, embed_dim=4).double()
    roi = rand(3, 5, 4, seed=2)
    v = enc.projections[0](roi.mean(dim=(1, 2)))
    assert torch.allclose(enc(roi[None])[0], v / v.norm())
    enc4 = StripeEncoder(3, stripes=4, embed_dim=8).double()
    const = torch.ones(3, 8, 4, dtype=D) * torch.tensor([1.0, -2.0, 0.5], dtype=D)[:, None, None]
    pooled = enc4.pooled(const)
    assert all(torch.allclose(p, pooled[0]) for p in pooled)
    emb = stripe_encode(const, enc4, BoundingBox(0, 0, 4, 8))
    assert len(emb.parts) == 4 and emb.box.area == 32
    with pytest.raises(ConfigError):
        enc4(torch.ones(1, 3, 3, 4, dtype=D))
    with pytest.raises(ConfigError):
        StripeEncoder(3, stripes=3, embed_dim=8)


# -- OIM ------------------------------------------------------------------------

def unit(v):
    v = torch.as_tensor(v, dtype=D)
    return v / v.norm(dim=-1, keepdim=True)


def test_oim_two_row_closed_form():
    oim = OIMLoss(2, 2, queue_size=4, temperature=1.0).double()
    with torch.no_grad():
        oim.lut.copy_(torch.eye(2, dtype=D))
    loss, _ = oim_loss(unit([[1.0, 0.0]]), torch.tensor([0]), oim)
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert float(loss) == pytest.approx(0.31326, abs=1e-5)


def test_oim_momentum_one_keeps_lut():
    oim = OIMLoss(3, 4, queue_size=2, momentum=1.0).double()
    with torch.no_grad():
        oim.lut.copy_(unit(rand(3, 4)))
    before = oim.lut.clone()
    oim_loss(unit(rand(5, 4, seed=1)), torch.tensor([0, 1, 2, 0, 1]), oim)
    assert float((oim.lut - before).abs().max()) <= 1e-15  # renormalizing unit rows only


def oim_oracle(lut, queue, head, filled, emb, labels, m, temp):
    lut, queue = lut.copy(), queue.copy()
    table = np.concatenate([lut, queue[:filled]])
    losses = []
    for e, y in zip(emb, labels):
        if y < 0:
            continue
        logits = [float(row @ e) / temp for row in table]
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(l - mx) for l in logits))
        losses.append(lse - logits[y])
    for e, y in zip(emb, labels):
        if y >= 0:
            v = m * lut[y] + (1 - m) * e
            lut[y] = v / np.linalg.norm(v)
        else:
            queue[head] = e
            head = (head + 1) % len(queue)
            filled = min(filled + 1, len(queue))
    return sum(losses) / len(losses), lut, queue, head, filled


def test_oim_batch_matches_oracle():
    oim = OIMLoss(3, 5, queue_size=4, momentum=0.5, temperature=1 / 30).double()
    with torch.no_grad():
        oim.lut.copy_(unit(rand(3, 5, seed=1)))
        oim.queue[:3] = unit(rand(3, 5, seed=2))
        oim.queue_head.fill_(3)
        oim.queue_filled.fill_(3)
    emb = unit(rand(6, 5, seed=3))
    labels = torch.tensor([0, 2, UNLABELED, 1, UNLABELED, 0])
    want = oim_oracle(oim.lut.numpy(), oim.queue.numpy(), 3, 3, emb.numpy(), labels.tolist(), 0.5, 1 / 30)
    loss, state = oim_loss(emb, labels, oim)
    assert abs(float(loss) - want[0]) <= 1e-6
    assert np.abs(state.lut.numpy() - want[1]).max() <= 1e-6
    assert np.abs(state.queue.numpy() - want[2]).max() <= 1e-6
    assert int(state.queue_head) == want[3] == 1
    assert int(state.queue_filled) == want[4] == 4


def test_oim_rows_stay_unit_norm():
    oim = OIMLoss(5, 8, queue_size=7)
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        emb = F.normalize(torch.randn(3, 8, generator=g), dim=1)
        labels = torch.randint(-1, 5, (3,), generator=g)
        oim_loss(emb, labels, oim)
    touched = oim.lut.norm(dim=1) > 0
    assert float((oim.lut[touched].norm(dim=1) - 1).abs().max()) <= 1e-5
    assert float((oim.queue.norm(dim=1) - 1).abs().max()) <= 1e-5
    assert 0 <= int(oim.queue_head) < 7


def test_oim_label_error():
    oim = OIMLoss(3, 4)
    with pytest.raises(LabelError):
        oim(unit(rand(1, 4)).float(), torch.tensor([3]))


def test_oim_gradient_matches_finite_differences():
    oim = OIMLoss(4, 6, queue_size=3, temperature=0.5).double()
    with torch.no_grad():
        oim.lut.copy_(unit(rand(4, 6, seed=1)))
        oim.queue.copy_(unit(rand(3, 6, seed=2)))
        oim.queue_filled.fill_(3)
    oim.eval()  # stop-gradient contract: no state update inside the differentiated path
    raw = rand(5, 6, seed=3).requires_grad_()
    labels = torch.tensor([0, 3, -1, 1, 2])
    err = oracles.fd_relative_error(lambda: oim(F.normalize(raw, dim=1), labels), [raw])
    assert err <= 1e-4
    assert not oim.lut.requires_grad and not oim.queue.requires_grad


# -- detection losses ----------------------------------------------------------------

def test_detection_loss_examples():
    logits = torch.tensor([[20.0, -20.0], [-20.0, 20.0]], dtype=D)
    ce, reg = detection_losses(logits, torch.zeros(2, 4, dtype=D), torch.tensor([0, 1]), torch.zeros(2, 4, dtype=D))
    assert float(ce) < 1e-3 and float(reg) == 0.0
    deltas = torch.tensor([[0.5, -2.0, 0.0, 0.0]], dtype=D)
    _, reg = detection_losses(torch.zeros(1, 2, dtype=D), deltas, torch.tensor([1]), torch.zeros(1, 4, dtype=D))
    assert float(reg) == pytest.approx(0.125 + 1.5)
    _, reg = detection_losses(torch.zeros(3, 2, dtype=D), rand(3, 4), torch.tensor([0, 0, 0]), rand(3, 4, seed=1))
    assert float(reg) == 0.0


def test_detection_loss_gradients():
    logits = rand(6, 2, seed=1).requires_grad_()
    deltas = (3 * rand(6, 4, seed=2)).requires_grad_()
    labels = torch.tensor([1, 0, 1, 1, 0, 1])
    targets = rand(6, 4, seed=3)

    def total():
        ce, reg = detection_losses(logits, deltas, labels, targets)
        return ce + reg

    assert oracles.fd_relative_error(total, [logits, deltas]) <= 1e-4


def test_bounding_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 5, 3)
    assert BoundingBox(0, 0, 2, 3).area == 6
