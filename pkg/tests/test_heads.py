import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asst import autograd as ag
from asst.autograd import ContractError, Tensor
from asst.heads import (Anchor, ClipHead, ClipWindow, anchor_grid, assign_positives, decode_window,
                        encode_targets, enumerate_segments, head_forward, roi_pool, segment_index,
                        tef, window_coords)


class TestSegments:
    def test_six_segments(self):
        segs = enumerate_segments(6, 5.0)
        assert len(segs) == 21
        assert segs[0] == ClipWindow(0, 5) and segs[-1] == ClipWindow(25, 30)
        assert ClipWindow(0, 30) in segs

    def test_small_cases(self):
        assert enumerate_segments(1, 5.0) == [ClipWindow(0, 5)]
        assert len(enumerate_segments(3, 1.0)) == 6

    def test_segment_index(self):
        segs = enumerate_segments()
        assert segs[segment_index(2, 4)] == ClipWindow(10, 25)


class TestTef:
    @pytest.mark.parametrize("w,expected", [((0, 30), (0, 1)), ((5, 10), (1 / 6, 1 / 3)),
                                            ((0, 5), (0, 1 / 6))])
    def test_examples(self, w, expected):
        assert tef(ClipWindow(*w), 30.0) == pytest.approx(expected)


class TestAnchors:
    def test_counts(self):
        grid = anchor_grid(30.0)
        counts = [sum(a.group == i for a in grid) for i in range(6)]
        assert counts == [2 ** (i + 2) - 3 for i in range(6)] == [1, 5, 13, 29, 61, 125]
        assert len(grid) == 234

    def test_first_group_covers_video(self):
        assert anchor_grid(30.0)[0].window == ClipWindow(0, 30)

    def test_inside_video(self):
        for a in anchor_grid(30.0):
            assert -1e-12 <= a.window.start and a.window.end <= 30.0 + 1e-12

    def test_quarter_spacing(self):
        g3 = [a for a in anchor_grid(32.0) if a.group == 3]
        assert np.allclose(np.diff([a.center for a in g3]), 1.0)


class TestRegression:
    def test_identity_deltas(self):
        a = Anchor(0, 10.0, 4.0)
        assert decode_window(a, 0.0, 0.0) == a.window

    def test_hand_decode(self):
        w = decode_window(Anchor(0, 10.0, 4.0), 0.5, math.log(2))
        assert (w.start, w.end) == pytest.approx((8.0, 16.0))

    def test_shrink(self):
        assert decode_window(Anchor(0, 10.0, 4.0), 0.0, -math.log(4)).length == pytest.approx(1.0)

    def test_encode_examples(self):
        a = Anchor(0, 10.0, 4.0)
        assert encode_targets(a, a.window) == (0.0, 0.0)
        assert encode_targets(a, ClipWindow(8, 16)) == pytest.approx((0.5, math.log(2)))

    def test_round_trip_1000(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            a = Anchor(0, rng.uniform(-5, 40), rng.uniform(0.1, 30))
            s = rng.uniform(-5, 40)
            g = ClipWindow(s, s + rng.uniform(0.01, 30))
            w = decode_window(a, *encode_targets(a, g))
            worst = max(worst, abs(w.start - g.start), abs(w.end - g.end))
        assert worst < 1e-9

    def test_decode_clips_to_tau(self):
        w = decode_window(Anchor(0, 28.0, 8.0), 0.0, 0.0, tau=30.0)
        assert w == ClipWindow(24.0, 30.0)

    def test_zero_length_gt(self):
        with pytest.raises(ContractError):
            encode_targets(Anchor(0, 1.0, 1.0), ClipWindow(2, 2))


class TestAssign:
    def test_examples(self):
        gt = ClipWindow(1, 3)
        pos, match, best = assign_positives([Anchor(0, 2.0, 2.0), Anchor(0, 1.0, 2.0)], [gt])
        assert pos.tolist() == [True, False] and best[0] == 1.0 and best[1] == pytest.approx(1 / 3)
        pos, _, best = assign_positives([Anchor(0, 2.0, 4.0)], [ClipWindow(1, 4)])
        assert pos[0] and best[0] == pytest.approx(0.75)
        assert match[0] == 0 and match[1] == -1

    def test_no_ground_truth(self):
        pos, match, _ = assign_positives(anchor_grid(30.0), [])
        assert not pos.any() and (match == -1).all()


class TestRoiPool:
    def test_on_grid_read(self, rng):
        rep = rng.normal(size=(7, 3))
        np.testing.assert_array_equal(roi_pool(Tensor(rep), ClipWindow(0, 12.0), 12.0).data, rep)

    def test_constant_field(self, rng):
        rep = np.tile(rng.normal(size=3), (9, 1))
        out = roi_pool(Tensor(rep), [ClipWindow(1.3, 4.4), ClipWindow(0.0, 8.0)], 8.0).data
        np.testing.assert_allclose(out, np.broadcast_to(rep[0], out.shape), rtol=1e-14)

    def test_ramp(self):
        rep = np.arange(10.0)[:, None]
        out = roi_pool(Tensor(rep), ClipWindow(0, 30.0), 30.0).data[:, 0]
        np.testing.assert_allclose(out, [0, 1.5, 3, 4.5, 6, 7.5, 9])

    @given(st.integers(2, 30), st.integers(0, 5))
    def test_integer_coordinates_read_frames(self, m, a):
        rep = np.random.default_rng(m).normal(size=(m, 2))
        tau = float(m - 1)
        # window [a, a+6k] in a frame-spaced clock hits integer coordinates
        k = 1
        if a + 6 * k > m - 1:
            return
        out = roi_pool(Tensor(rep), ClipWindow(a, a + 6.0 * k), tau).data
        np.testing.assert_array_equal(out, rep[a:a + 7 * k:k])

    def test_batched_shape(self, rng):
        out = roi_pool(Tensor(rng.normal(size=(2, 16, 3))), np.array([[0, 5.0], [3, 9.0]]), 30.0)
        assert out.shape == (2, 2, 7, 3)

    def test_zero_length_rejected(self):
        with pytest.raises(ContractError):
            window_coords(np.array([1.0]), np.array([1.0]), 30.0, 10)


class TestHead:
    def test_zero_weights(self, rng):
        head = ClipHead(3, 4, "detection", rng=rng)
        for p in head.parameters():
            p.data[...] = 0.0
        logits, dc, dl = head_forward(Tensor(rng.normal(size=(10, 7, 3))), head)
        assert not logits.data.any() and not dc.data.any() and not dl.data.any()

    def test_order_invariance(self, rng):
        head = ClipHead(3, 4, rng=rng)
        pooled = rng.normal(size=(12, 7, 3))
        perm = rng.permutation(12)
        a = head(Tensor(pooled)).data
        b = head(Tensor(pooled[perm])).data
        np.testing.assert_allclose(b, a[perm], atol=1e-14)

    def test_classification_scores(self, rng):
        head = ClipHead(3, 4, rng=rng)
        rep = Tensor(rng.normal(size=(12, 3)))
        scores = head(roi_pool(rep, enumerate_segments(), 30.0))
        assert scores.shape == (21,)
        probs = ag.softmax_axis(scores).data
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_detection_outputs(self, rng):
        head = ClipHead(3, 4, "detection", num_classes=4, rng=rng)
        logits, dc, dl = head(Tensor(rng.normal(size=(2, 234, 7, 3))))
        assert logits.shape == (2, 234, 5) and dc.shape == dl.shape == (2, 234)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            ClipHead(3, 4, "segmentation")
