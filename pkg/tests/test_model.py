import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from imtfa.core import Box, InstanceAnnotation
from imtfa.model import (
    ModelConfig,
    ModelError,
    RoIFeatureExtractor,
    build_model,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    paste_mask,
    roi_pool,
)
from torchvision.ops import nms


@pytest.fixture(scope="module")
def model():
    m = build_model(ModelConfig(), seed=0)
    m.eval()
    return m


def test_backbone_shapes(model):
    f = model.backbone_forward(np.zeros((128, 128, 3), dtype=np.uint8))
    assert f.shape == (1, 64, 16, 16)
    assert torch.isfinite(f).all()


def test_backbone_deterministic_in_eval(model):
    img = np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)
    with torch.no_grad():
        assert torch.equal(model.backbone_forward(img), model.backbone_forward(img))


def test_backbone_rejects_indivisible_size(model):
    with pytest.raises(ModelError, match="stride"):
        model.backbone_forward(np.zeros((60, 64, 3), dtype=np.uint8))


def test_roi_pool_constant_map():
    f = torch.full((3, 8, 8), 2.5)
    out = roi_pool(f, torch.tensor([[3.0, 5.0, 40.0, 33.0]]), 7, 8)
    assert out.shape == (1, 3, 7, 7)
    assert torch.allclose(out, torch.full_like(out, 2.5))


def test_roi_pool_identity_full_box():
    f = torch.randn(4, 6, 6, dtype=torch.float64)
    out = roi_pool(f, torch.tensor([[0.0, 0.0, 48.0, 48.0]], dtype=torch.float64), 6, 8)
    assert torch.allclose(out[0], f, atol=1e-6)


def test_roi_pool_linear_ramp_matches_bilinear_oracle():
    # value at feature cell (r, c) is 2c + 3r; cell centres sit at image coordinate (j + 0.5) * stride
    stride, size = 4.0, 10
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    f = torch.tensor(2.0 * cc + 3.0 * rr, dtype=torch.float64)[None]
    box = (10.0, 12.0, 26.0, 30.0)
    out = roi_pool(f, torch.tensor([box], dtype=torch.float64), 5, stride)[0, 0].numpy()
    x1, y1, x2, y2 = box
    for i in range(5):
        for j in range(5):
            x = x1 + (j + 0.5) / 5 * (x2 - x1)
            y = y1 + (i + 0.5) / 5 * (y2 - y1)
            fx, fy = x / stride - 0.5, y / stride - 0.5
            assert out[i, j] == pytest.approx(2 * fx + 3 * fy, abs=1e-9)


def test_roi_pool_gradient_finite_difference():
    torch.manual_seed(0)
    f = torch.randn(2, 5, 5, dtype=torch.float64, requires_grad=True)
    boxes = torch.tensor([[3.0, 4.0, 29.0, 31.0], [0.0, 0.0, 17.0, 9.0]], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: roi_pool(x, boxes, 3, 8), (f,), eps=1e-6, atol=1e-3)


def test_roi_pool_rejects_empty_box():
    with pytest.raises(ModelError):
        roi_pool(torch.zeros(1, 4, 4), torch.tensor([[2.0, 2.0, 2.0, 6.0]]), 7, 8)


def test_roi_extractor_zero_and_dense_oracle():
    torch.manual_seed(1)
    g = RoIFeatureExtractor(12, 6, 4).double()
    with torch.no_grad():
        g.fc1.bias.zero_()
        g.fc2.bias.zero_()
        assert torch.equal(g(torch.zeros(1, 3, 2, 2, dtype=torch.float64)), torch.zeros(1, 4, dtype=torch.float64))
        roi = torch.randn(5, 3, 2, 2, dtype=torch.float64)
        x = roi.numpy().reshape(5, -1)
        w1, w2 = g.fc1.weight.numpy(), g.fc2.weight.numpy()
        expected = np.maximum(x @ w1.T, 0) @ w2.T
        assert np.allclose(g(roi).numpy(), expected, atol=1e-5)


def test_box_codec_zero_delta_and_ln2():
    p = torch.tensor([[10.0, 20.0, 20.0, 30.0]])
    assert torch.allclose(decode_boxes(torch.zeros(1, 4), p), p)
    out = decode_boxes(torch.tensor([[0.0, 0.0, math.log(2), math.log(2)]]), p)
    assert torch.allclose(out, torch.tensor([[5.0, 15.0, 25.0, 35.0]]), atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1, 60), min_size=8, max_size=8), st.sampled_from([(1, 1, 1, 1), (10, 10, 5, 5)]))
def test_box_codec_round_trip(v, weights):
    gt = torch.tensor([[v[0], v[1], v[0] + v[2], v[1] + v[3]]], dtype=torch.float64)
    prop = torch.tensor([[v[4], v[5], v[4] + v[6], v[5] + v[7]]], dtype=torch.float64)
    back = decode_boxes(encode_boxes(gt, prop, weights), prop, weights)
    assert torch.allclose(back, gt, atol=1e-5)


def test_clip_boxes():
    out = clip_boxes(torch.tensor([[-5.0, 3.0, 70.0, 80.0]]), 64, 64)
    assert out.tolist() == [[0.0, 3.0, 64.0, 64.0]]


def test_mask_head_shapes_and_paste(model):
    roi = torch.randn(3, 64, 7, 7)
    with torch.no_grad():
        logits = model.mask_logits(roi)
    assert logits.shape == (3, 14, 14)
    p = torch.sigmoid(logits)
    assert ((p > 0) & (p < 1)).all()
    mask = paste_mask(torch.full((14, 14), 10.0), Box(4, 6, 20, 15), 32, 32)
    expected = np.zeros((32, 32), dtype=bool)
    expected[6:15, 4:20] = True
    assert np.array_equal(mask.data, expected)


def test_paste_clips_out_of_image():
    mask = paste_mask(torch.full((14, 14), 10.0), Box(20, -5, 40, 10), 16, 32)
    expected = np.zeros((16, 32), dtype=bool)
    expected[0:10, 20:32] = True
    assert np.array_equal(mask.data, expected)


def _brute_nms(boxes, scores, thr):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    kept = []
    for i in order:
        ok = True
        for k in kept:
            a, b = boxes[i], boxes[k]
            iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
            ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
            inter = iw * ih
            union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
            if inter / union > thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def test_nms_identical_boxes():
    b = torch.tensor([[0.0, 0.0, 10.0, 10.0]] * 2)
    keep = nms(b, torch.tensor([0.9, 0.8]), 0.5)
    assert keep.tolist() == [0]


def test_nms_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(1, 12)
        xy = rng.uniform(0, 40, (n, 2))
        wh = rng.uniform(2, 20, (n, 2))
        boxes = np.concatenate([xy, xy + wh], 1)
        scores = rng.permutation(n) / n + 0.01
        got = nms(torch.tensor(boxes), torch.tensor(scores), 0.5).tolist()
        assert got == _brute_nms(boxes.tolist(), scores.tolist(), 0.5)


def test_oracle_proposals_zero_jitter(model):
    gt = [InstanceAnnotation(1, Box(3, 4, 20, 30)), InstanceAnnotation(2, Box(30, 30, 50, 60))]
    feature = torch.zeros(1, 64, 8, 8)
    props = model.propose(feature, "oracle", gt)[0]
    assert props.boxes.tolist() == [[3, 4, 20, 30], [30, 30, 50, 60]]
    jittered = model.propose(feature, "oracle", gt, jitter=0.1, seed=3)[0].boxes
    assert torch.equal(jittered, model.propose(feature, "oracle", gt, jitter=0.1, seed=3)[0].boxes)
    assert not torch.equal(jittered, props.boxes)


def test_learned_proposals_bounded(model):
    with torch.no_grad():
        feature = model.backbone_forward(np.zeros((64, 64, 3), dtype=np.uint8))
        props = model.propose(feature)
    assert len(props) == 1 and len(props[0].boxes) <= model.config.rpn_post_nms


def test_specific_heads_reject_unknown_class():
    m = build_model(ModelConfig(box_mode="specific", mask_mode="specific"), class_ids=[1, 2, 3])
    z = torch.randn(2, 128)
    assert m.box_deltas(z, [1, 3]).shape == (2, 4)
    with pytest.raises(ModelError, match="out of range"):
        m.box_deltas(z, [1, 9])
    with pytest.raises(ModelError, match="out of range"):
        m.mask_logits(torch.randn(1, 64, 7, 7), [7])


def test_expand_keeps_existing_outputs():
    m = build_model(ModelConfig(box_mode="specific", mask_mode="specific"), class_ids=[1, 2])
    z = torch.randn(3, 128)
    roi = torch.randn(3, 64, 7, 7)
    with torch.no_grad():
        before = m.box_deltas(z, [1, 2, 1]), m.mask_logits(roi, [2, 1, 1])
        m.expand_classes([5])
        after = m.box_deltas(z, [1, 2, 1]), m.mask_logits(roi, [2, 1, 1])
    assert torch.equal(before[0], after[0]) and torch.allclose(before[1], after[1])
    assert m.box_deltas(z, [5]).shape == (3, 4)


def test_blocks_round_trip():
    m = build_model(seed=4)
    again = type(m).from_blocks(m.metadata(), m.blocks())
    for k, v in m.state_dict().items():
        assert torch.equal(v, again.state_dict()[k])


def test_set_frozen_disables_grads():
    m = build_model()
    m.set_frozen({"backbone": True, "rpn": True})
    assert not any(p.requires_grad for p in m.backbone.parameters())
    assert all(p.requires_grad for p in m.roi_extractor.parameters())
