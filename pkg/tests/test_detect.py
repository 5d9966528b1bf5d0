import math

import numpy as np
import pytest

from oriconv.detect import (
    AnchorSet,
    Detection,
    HBox,
    OBox,
    RpnHead,
    assign_pyramid_level,
    composite_loss,
    decode_hbb,
    decode_obb,
    encode_hbb,
    encode_obb,
    iou_hbb,
    iou_obb,
    match_anchors,
    nms,
    rpn_forward,
    smooth_l1,
)
from oriconv.errors import ShapeError


def mc_iou(a: OBox, b: OBox, rng, n=400_000):
    """Monte-Carlo area oracle for oriented IoU."""
    ha, hb = a.hull(), b.hull()
    x0, y0 = min(ha.xmin, hb.xmin), min(ha.ymin, hb.ymin)
    x1, y1 = max(ha.xmax, hb.xmax), max(ha.ymax, hb.ymax)
    pts = rng.uniform((x0, y0), (x1, y1), size=(n, 2))

    def inside(o, p):
        t = math.radians(o.theta)
        u = np.array([math.cos(t), -math.sin(t)])
        v = np.array([math.sin(t), math.cos(t)])
        d = p - np.array([o.xc, o.yc])
        return (np.abs(d @ u) <= o.w / 2) & (np.abs(d @ v) <= o.h / 2)

    ia, ib = inside(a, pts), inside(b, pts)
    union = int((ia | ib).sum())
    return int((ia & ib).sum()) / union if union else 0.0


class TestBoxes:
    def test_hbox_validation(self):
        with pytest.raises(ShapeError):
            HBox(3, 0, 3, 5)

    def test_obox_canonicalization(self):
        o = OBox(0, 0, 2, 5, 135.0)
        assert 0 <= o.theta < 90
        assert o.theta == pytest.approx(45.0)
        assert (o.w, o.h) == (5, 2)

    def test_hull_of_rotated_square(self):
        o = OBox(10, 10, 4, 2, 45.0)
        hull = o.hull()
        side = (4 + 2) / math.sqrt(2)
        assert hull.width == pytest.approx(side)
        assert hull.height == pytest.approx(side)

    def test_detection_requires_finite_score(self):
        with pytest.raises(ShapeError):
            Detection(1, float("nan"), HBox(0, 0, 1, 1))


class TestIouHbb:
    def test_identical(self):
        b = HBox(2, 3, 8, 9)
        assert iou_hbb(b, b) == 1.0

    def test_disjoint(self):
        assert iou_hbb(HBox(0, 0, 1, 1), HBox(5, 5, 6, 6)) == 0.0

    def test_half_offset_unit_squares(self):
        assert iou_hbb(HBox(0, 0, 1, 1), HBox(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)


class TestIouObb:
    def test_identical_rotated(self):
        o = OBox(5, 5, 3, 2, 37.0)
        assert iou_obb(o, OBox(5, 5, 3, 2, 37.0)) == pytest.approx(1.0)

    def test_axis_aligned_matches_hbb(self):
        a = OBox(5, 5, 4, 2, 0.0)
        b = OBox(6, 5.5, 3, 2, 0.0)
        assert abs(iou_obb(a, b) - iou_hbb(a.hull(), b.hull())) < 1e-9

    def test_square_vs_rotated_45(self):
        inter = 2 * (math.sqrt(2) - 1)
        want = inter / (2 - inter)
        got = iou_obb(OBox(0, 0, 1, 1, 0.0), OBox(0, 0, 1, 1, 45.0))
        assert got == pytest.approx(want, abs=1e-9)

    def test_monte_carlo_oracle_50_pairs(self, rng):
        for _ in range(50):
            a = OBox(
                rng.uniform(3, 7), rng.uniform(3, 7),
                rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 90),
            )
            b = OBox(
                rng.uniform(3, 7), rng.uniform(3, 7),
                rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 90),
            )
            v = iou_obb(a, b)
            assert 0.0 <= v <= 1.0
            assert v == pytest.approx(iou_obb(b, a), abs=1e-12)
            assert abs(v - mc_iou(a, b, rng)) < 2e-3


class TestEncoding:
    def test_hbb_roundtrip(self, rng):
        for _ in range(20):
            anchor = np.array([2.0, 3.0, 12.0, 11.0])
            g = HBox(*sorted(rng.uniform(0, 8, 2)), *sorted(rng.uniform(9, 20, 2)))
            g = HBox(g.xmin, g.ymin, g.xmax + 1, g.ymax + 1)
            back = decode_hbb(anchor, encode_hbb(anchor, g))
            assert np.abs(back.as_array() - g.as_array()).max() < 1e-6

    def test_obb_roundtrip(self, rng):
        anchor = np.array([2.0, 3.0, 12.0, 11.0])
        for _ in range(20):
            g = OBox(rng.uniform(4, 9), rng.uniform(4, 9), rng.uniform(2, 6),
                     rng.uniform(2, 6), rng.uniform(0, 90))
            back = decode_obb(anchor, encode_obb(anchor, g))
            assert np.abs(back.as_array() - g.as_array()).max() < 1e-6

    def test_identical_anchor_zero_offsets(self):
        anchor = np.array([0.0, 0.0, 10.0, 10.0])
        t = encode_hbb(anchor, HBox(0, 0, 10, 10))
        assert np.abs(t).max() < 1e-12


class TestMatching:
    def make_anchors(self):
        return AnchorSet.build((4, 4), 16, scales=[20.0], ratios=[1.0])

    def test_identical_anchor_positive_zero_target(self):
        an = self.make_anchors()
        gt = HBox(*an.boxes[5])
        m = match_anchors(an, [gt], stage="rpn")
        assert m.labels[5] == 1
        assert np.abs(m.hbb_targets[5]).max() < 1e-12

    def test_disjoint_all_negative(self):
        an = self.make_anchors()
        gt = HBox(1000, 1000, 1020, 1020)
        m = match_anchors(an, [gt], stage="rpn")
        # the forced best-anchor rule does not apply at IoU 0
        assert (m.labels <= 0).all()

    def test_intermediate_iou_ignored_in_rpn(self):
        an = self.make_anchors()
        # shift an anchor box to a 0.6-ish IoU with anchor 5 only
        base = an.boxes[5]
        w = base[2] - base[0]
        gt = HBox(base[0] + 0.25 * w, base[1], base[2] + 0.25 * w, base[3])
        m = match_anchors(an, [gt], stage="rpn")
        # anchor 5 is the best match for this gt, so the forced rule marks it
        # positive; a second overlapping gt-free anchor at 0.6 stays ignored
        assert m.labels[5] == 1
        others = [i for i in range(len(an.boxes)) if i != 5]
        assert set(np.unique(m.labels[others])) <= {0, -1}

    def test_head_stage_takes_class(self):
        an = self.make_anchors()
        gt = HBox(*an.boxes[3])
        m = match_anchors(an, [gt], [2], stage="head")
        assert m.labels[3] == 2
        assert (m.labels[m.labels >= 0] >= 0).all()

    def test_no_ground_truth_all_negative(self):
        an = self.make_anchors()
        m = match_anchors(an, [], stage="rpn")
        assert (m.labels == 0).all()

    def test_obb_target_fifth_offset(self):
        an = self.make_anchors()
        hb = HBox(*an.boxes[0])
        ob = OBox(0.5 * (hb.xmin + hb.xmax), 0.5 * (hb.ymin + hb.ymax),
                  hb.width, hb.height, 30.0)
        m = match_anchors(an, [(hb, ob)], stage="rpn")
        assert m.obb_targets[0][4] == pytest.approx(30.0 / 90.0)


class TestCompositeLoss:
    def perfect_case(self):
        n, m, k = 6, 8, 3
        rpn_labels = np.array([1, 0, 0, 1, 0, 0])
        preds = {
            "rpn_logits": np.where(rpn_labels == 1, 30.0, -30.0).astype(np.float64),
            "rpn_offsets": np.zeros((n, 4)),
            "cls_logits": np.zeros((m, k + 1)),
            "hbb_offsets": np.zeros((m, 4)),
            "obb_offsets": np.zeros((m, 5)),
        }
        cls_labels = np.array([1, 0, 0, 2, 0, 0, 3, 0])
        logits = np.full((m, k + 1), -30.0)
        logits[np.arange(m), cls_labels] = 30.0
        preds["cls_logits"] = logits
        tgts = {
            "rpn_labels": rpn_labels,
            "rpn_offsets": np.zeros((n, 4)),
            "cls_labels": cls_labels,
            "hbb_offsets": np.zeros((m, 4)),
            "obb_offsets": np.zeros((m, 5)),
        }
        return preds, tgts

    def test_zero_on_exact_predictions(self):
        preds, tgts = self.perfect_case()
        total, comps, _ = composite_loss(preds, tgts)
        assert total < 1e-6
        assert all(v >= 0 for v in comps.values())

    def test_smooth_l1_values(self):
        assert smooth_l1(np.array([0.5]))[0] == pytest.approx(0.125)
        assert smooth_l1(np.array([2.0]))[0] == pytest.approx(1.5)

    def test_background_only_image(self):
        preds, tgts = self.perfect_case()
        tgts["rpn_labels"] = np.zeros(6, dtype=np.int64)
        tgts["cls_labels"] = np.zeros(8, dtype=np.int64)
        preds["rpn_offsets"] = np.ones((6, 4))  # must not contribute
        preds["hbb_offsets"] = np.ones((8, 4))
        total, comps, _ = composite_loss(preds, tgts)
        assert comps["rpn_reg"] == 0.0
        assert comps["head_hbb"] == 0.0
        assert comps["head_obb"] == 0.0
        assert np.isfinite(total)

    def test_lambda_toggles(self):
        preds, tgts = self.perfect_case()
        preds["hbb_offsets"] = np.ones((8, 4))  # nonzero regression error
        total_on, comps_on, _ = composite_loss(preds, tgts, (1, 1, 1, 1, 1))
        total_off, comps_off, _ = composite_loss(preds, tgts, (1, 1, 1, 0, 1))
        assert comps_on["head_hbb"] > 0
        assert total_on - total_off == pytest.approx(comps_on["head_hbb"])

    def test_gradients_match_finite_differences(self, rng):
        from oriconv.tensor import finite_diff_check

        n, m, k = 5, 6, 2
        preds = {
            "rpn_logits": rng.normal(size=n),
            "rpn_offsets": rng.normal(size=(n, 4)),
            "cls_logits": rng.normal(size=(m, k + 1)),
            "hbb_offsets": rng.normal(size=(m, 4)),
            "obb_offsets": rng.normal(size=(m, 5)),
        }
        tgts = {
            "rpn_labels": np.array([1, 0, -1, 1, 0]),
            "rpn_offsets": rng.normal(size=(n, 4)),
            "cls_labels": np.array([1, 0, 2, -1, 0, 1]),
            "hbb_offsets": rng.normal(size=(m, 4)),
            "obb_offsets": rng.normal(size=(m, 5)),
        }
        _, _, grads = composite_loss(preds, tgts)
        for key in preds:
            def loss(p, key=key):
                q = dict(preds)
                q[key] = p
                return composite_loss(q, tgts)[0]

            err = finite_diff_check(loss, preds[key].copy(), grads[key], step=1e-5)
            assert err < 1e-4, key

    def test_loss_nonnegative(self, rng):
        preds, tgts = self.perfect_case()
        preds = {k: v + rng.normal(size=v.shape) for k, v in preds.items()}
        total, _, _ = composite_loss(preds, tgts)
        assert total >= 0


class TestNms:
    def test_single_detection(self):
        d = [Detection(0, 0.5, HBox(0, 0, 5, 5))]
        assert nms(d, 0.5) == d

    def test_identical_boxes_keep_best(self):
        d1 = Detection(0, 0.9, HBox(0, 0, 10, 10))
        d2 = Detection(0, 0.8, HBox(0, 0, 10, 10))
        kept = nms([d2, d1], 0.5)
        assert [k.score for k in kept] == [0.9]

    def test_chain_of_three(self):
        # pairwise IoUs {a-b: 0.6, b-c: 0.6, a-c: 0.1}: greedy keeps a and c
        a = Detection(0, 0.9, HBox(0, 0, 10, 4))
        b = Detection(0, 0.8, HBox(2.5, 0, 12.5, 4))
        c = Detection(0, 0.7, HBox(5.4, 0, 15.4, 4))
        assert iou_hbb(a.hbox, b.hbox) == pytest.approx(0.6, abs=0.01)
        assert iou_hbb(b.hbox, c.hbox) > 0.5
        assert iou_hbb(a.hbox, c.hbox) < 0.5
        kept = nms([a, b, c], 0.5)
        assert [k.score for k in kept] == [0.9, 0.7]

    def test_output_subset_no_retained_overlap(self, rng):
        dets = [
            Detection(0, float(rng.random()),
                      HBox(x, y, x + rng.uniform(2, 6), y + rng.uniform(2, 6)))
            for x, y in rng.uniform(0, 20, size=(30, 2))
        ]
        kept = nms(dets, 0.4)
        assert all(d in dets for d in kept)
        for i, d in enumerate(kept):
            for e in kept[i + 1 :]:
                assert iou_hbb(d.hbox, e.hbox) <= 0.4

    def test_oriented_mode(self):
        a = Detection(0, 0.9, obox=OBox(5, 5, 4, 2, 10.0))
        b = Detection(0, 0.8, obox=OBox(5, 5, 4, 2, 12.0))
        kept = nms([a, b], 0.5, oriented=True)
        assert len(kept) == 1


class TestRpn:
    def test_level_assignment(self):
        assert assign_pyramid_level(8, 8, 5, k0=1, s0=16.0) == 0
        assert assign_pyramid_level(128, 128, 5, k0=1, s0=16.0) == 4
        assert assign_pyramid_level(16, 16, 5, k0=1, s0=16.0) == 1

    def test_zero_features_deterministic(self, rng):
        anchors = AnchorSet.build((4, 4), 8, scales=[12.0], ratios=[1.0])
        head = RpnHead(np.zeros((3, 3, 2, 5)), np.zeros(5))
        feats = np.zeros((4, 4, 2))
        l1, o1, r1 = rpn_forward(feats, head, anchors, n_levels=2, top_k=4)
        l2, o2, r2 = rpn_forward(feats, head, anchors, n_levels=2, top_k=4)
        assert np.array_equal(l1, l2)
        assert [(roi.box.as_array().tolist(), roi.level) for roi in r1] == [
            (roi.box.as_array().tolist(), roi.level) for roi in r2
        ]

    def test_dominant_anchor_becomes_first_roi(self, rng):
        anchors = AnchorSet.build((4, 4), 8, scales=[12.0], ratios=[1.0])
        head = RpnHead(np.zeros((3, 3, 2, 5)), np.zeros(5))
        head.bias[0] = -5.0
        feats = np.zeros((4, 4, 2))
        raw_boost = np.zeros((4, 4, 2))
        raw_boost[2, 1, 0] = 1.0  # push one location's logit up through conv
        head2 = RpnHead(np.zeros((3, 3, 2, 5)), np.zeros(5))
        head2.weights[1, 1, 0, 0] = 10.0
        logits, offsets, rois = rpn_forward(raw_boost, head2, anchors, n_levels=2, top_k=3)
        best = int(np.argmax(logits))
        assert best == 2 * 4 + 1
        want = anchors.boxes[best]
        got = rois[0].box.as_array()
        assert np.abs(got - want).max() < 1e-5
