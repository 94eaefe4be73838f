"""Tests for boxes, anchors, target assignment, loss, and decoding."""

import math

import numpy as np
import pytest
import torch

from sogvg.errors import InvalidInputError
from sogvg.head import (
    ANCHORS_PER_CELL,
    CH_CONF,
    CH_TH,
    CH_TW,
    CH_TX,
    CH_TY,
    AnchorSet,
    Box,
    PredictionHead,
    assign_target,
    decode_boxes,
    flat_position,
    flatten_predictions,
    grid_shapes,
    grounding_loss,
    iou,
    raw_offsets,
    select_prediction,
    targets_from_assignments,
)


def _anchors():
    return AnchorSet(
        per_level={
            3: ((10.0, 12.0), (16.0, 14.0), (20.0, 24.0)),
            4: ((30.0, 28.0), (36.0, 40.0), (48.0, 44.0)),
            5: ((60.0, 56.0), (80.0, 88.0), (120.0, 112.0)),
        }
    )


def _zero_preds(image_size, batch=1, dtype=torch.float32):
    shapes = grid_shapes(image_size)
    return {
        level: torch.zeros(batch, h, w, ANCHORS_PER_CELL, 5, dtype=dtype)
        for level, (h, w) in shapes.items()
    }


class TestBox:
    def test_properties(self):
        box = Box(2.0, 3.0, 10.0, 9.0)
        assert box.width == 8.0
        assert box.height == 6.0
        assert box.center == (6.0, 6.0)
        assert box.as_tuple() == (2.0, 3.0, 10.0, 9.0)

    def test_rejects_degenerate(self):
        with pytest.raises(InvalidInputError):
            Box(0.0, 0.0, 0.0, 5.0)
        with pytest.raises(InvalidInputError):
            Box(0.0, 5.0, 5.0, 5.0)
        with pytest.raises(InvalidInputError):
            Box(5.0, 0.0, 2.0, 3.0)


class TestIoU:
    def test_identical_boxes(self):
        box = Box(1.0, 2.0, 7.0, 8.0)
        assert iou(box, box) == 1.0

    def test_disjoint_boxes(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0
        assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0  # touching edges

    def test_hand_computed_third(self):
        """Two unit-height boxes overlapping by half: 1 / (2 + 2 - 1) = 1/3."""
        value = iou(Box(0, 0, 2, 1), Box(1, 0, 3, 1))
        np.testing.assert_allclose(value, 1.0 / 3.0, rtol=1e-12)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            a = rng.random(2) * 50
            b = a + 1 + rng.random(2) * 50
            c = rng.random(2) * 50
            d = c + 1 + rng.random(2) * 50
            box_a = Box(a[0], a[1], b[0], b[1])
            box_b = Box(c[0], c[1], d[0], d[1])
            forward = iou(box_a, box_b)
            assert 0.0 <= forward <= 1.0
            assert forward == iou(box_b, box_a)


class TestAnchorSet:
    def test_json_round_trip(self):
        anchors = _anchors()
        rebuilt = AnchorSet.from_json(anchors.to_json())
        assert rebuilt.per_level == anchors.per_level

    def test_rejects_bad_sets(self):
        with pytest.raises(InvalidInputError):
            AnchorSet(per_level={3: ((1.0, 1.0),) * 3, 4: ((1.0, 1.0),) * 3})
        with pytest.raises(InvalidInputError):
            AnchorSet(
                per_level={3: ((1.0, 1.0),) * 2, 4: ((1.0, 1.0),) * 3, 5: ((1.0, 1.0),) * 3}
            )
        with pytest.raises(InvalidInputError):
            AnchorSet(
                per_level={
                    3: ((0.0, 1.0),) * 3,
                    4: ((1.0, 1.0),) * 3,
                    5: ((1.0, 1.0),) * 3,
                }
            )


class TestGridGeometry:
    def test_grid_shapes(self):
        shapes = grid_shapes(256)
        assert shapes == {3: (32, 32), 4: (16, 16), 5: (8, 8)}
        assert grid_shapes((64, 128)) == {3: (8, 16), 4: (4, 8), 5: (2, 4)}
        with pytest.raises(InvalidInputError):
            grid_shapes(100)

    def test_flat_position_matches_flatten_order(self):
        """Values planted at (level, row, col, anchor) surface at the
        computed flat position after flattening."""
        shapes = grid_shapes(64)
        preds = _zero_preds(64)
        rng = np.random.default_rng(0)
        planted = []
        seen = set()
        while len(planted) < 20:
            level = int(rng.choice([3, 4, 5]))
            h, w = shapes[level]
            row, col = int(rng.integers(h)), int(rng.integers(w))
            anchor = int(rng.integers(ANCHORS_PER_CELL))
            position = flat_position(level, row, col, anchor, shapes)
            if position in seen:
                continue
            seen.add(position)
            value = float(rng.random())
            preds[level][0, row, col, anchor, CH_CONF] = value
            planted.append((position, value))
        flat = flatten_predictions(preds)
        total = sum(h * w * ANCHORS_PER_CELL for h, w in shapes.values())
        assert flat.shape == (1, total, 5)
        for position, value in planted:
            np.testing.assert_allclose(flat[0, position, CH_CONF].item(), value)


class TestPredictionHead:
    def test_output_shapes(self):
        torch.manual_seed(0)
        head = PredictionHead(8)
        maps = {3: torch.zeros(2, 8, 8, 8), 4: torch.zeros(2, 8, 4, 4), 5: torch.zeros(2, 8, 2, 2)}
        out = head(maps)
        assert out[3].shape == (2, 8, 8, ANCHORS_PER_CELL, 5)
        assert out[4].shape == (2, 4, 4, ANCHORS_PER_CELL, 5)
        assert out[5].shape == (2, 2, 2, ANCHORS_PER_CELL, 5)

    def test_blank_input_is_spatially_constant(self):
        """Zero maps leave only bias terms, identical at every cell."""
        torch.manual_seed(1)
        head = PredictionHead(8)
        maps = {3: torch.zeros(1, 8, 8, 8), 4: torch.zeros(1, 8, 4, 4), 5: torch.zeros(1, 8, 2, 2)}
        out = head(maps)
        for level in (3, 4, 5):
            grid = out[level][0]
            reference = grid[0, 0]
            assert torch.allclose(grid, reference.expand_as(grid))

    def test_gradient_spot_check(self):
        """Central finite differences on three random weights."""
        torch.manual_seed(2)
        head = PredictionHead(4).double()
        maps = {
            3: torch.randn(1, 4, 4, 4, dtype=torch.float64),
            4: torch.randn(1, 4, 2, 2, dtype=torch.float64),
            5: torch.randn(1, 4, 1, 1, dtype=torch.float64),
        }
        pos = torch.tensor([5])
        off = torch.tensor([[0.4, 0.6, 0.1, -0.2]], dtype=torch.float64)

        def loss():
            total, _, _ = grounding_loss(head(maps), pos, off)
            return total

        loss().backward()
        rng = np.random.default_rng(3)
        params = list(head.parameters())
        eps = 1e-6
        for _ in range(3):
            param = params[int(rng.integers(len(params)))]
            flat_param = param.data.view(-1)
            idx = int(rng.integers(flat_param.numel()))
            original = flat_param[idx].item()
            flat_param[idx] = original + eps
            hi = loss().item()
            flat_param[idx] = original - eps
            lo = loss().item()
            flat_param[idx] = original
            numeric = (hi - lo) / (2 * eps)
            analytic = param.grad.view(-1)[idx].item()
            assert abs(analytic - numeric) <= 1e-6 * max(abs(analytic), abs(numeric), 1.0)


class TestAssignTarget:
    def test_perfect_anchor_at_cell_center(self):
        """A gt that matches anchor 0 of level 4 exactly, centered in a cell."""
        anchors = _anchors()
        cx, cy = 24.0, 24.0  # center of level-4 cell (1, 1) at stride 16
        gt = Box(cx - 15.0, cy - 14.0, cx + 15.0, cy + 14.0)
        out = assign_target(gt, anchors, 256)
        assert out.level == 4
        assert out.anchor == 0
        assert out.cell == (1, 1)
        np.testing.assert_allclose([out.t_x, out.t_y], [0.5, 0.5])
        np.testing.assert_allclose([out.t_h, out.t_w], [0.0, 0.0], atol=1e-12)

    def test_center_on_cell_boundary_floors(self):
        """A center exactly on a stride multiple lands in the later cell
        with zero fractional offset."""
        anchors = _anchors()
        gt = Box(32.0 - 15.0, 48.0 - 14.0, 32.0 + 15.0, 48.0 + 14.0)
        out = assign_target(gt, anchors, 256)
        assert out.level == 4
        assert out.cell == (3, 2)
        np.testing.assert_allclose([out.t_x, out.t_y], [0.0, 0.0])

    def test_matches_exhaustive_search(self):
        """The assignment equals a brute-force scan over all nine anchors."""
        anchors = _anchors()
        rng = np.random.default_rng(4)
        for _ in range(50):
            w = float(rng.uniform(6, 120))
            h = float(rng.uniform(6, 120))
            cx = float(rng.uniform(w / 2, 256 - w / 2))
            cy = float(rng.uniform(h / 2, 256 - h / 2))
            gt = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            out = assign_target(gt, anchors, 256)

            best = None
            for level in (3, 4, 5):
                for a_idx, (aw, ah) in enumerate(anchors.per_level[level]):
                    cand = Box(cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2)
                    value = iou(cand, gt)
                    if best is None or value > best[0]:
                        best = (value, level, a_idx)
            assert (out.level, out.anchor) == (best[1], best[2])

    def test_rejects_out_of_image(self):
        anchors = _anchors()
        with pytest.raises(InvalidInputError):
            assign_target(Box(-1.0, 0.0, 10.0, 10.0), anchors, 256)
        with pytest.raises(InvalidInputError):
            assign_target(Box(0.0, 0.0, 10.0, 257.0), anchors, 256)


class TestGroundingLoss:
    def test_uniform_logits_give_log_position_count(self):
        """All-zero predictions score ln P on the confidence term."""
        preds = _zero_preds(64, batch=2)
        pos = torch.tensor([0, 10])
        off = torch.zeros(2, 4)
        total, l_conf, l_off = grounding_loss(preds, pos, off, lambda_off=5.0)
        positions = (8 * 8 + 4 * 4 + 2 * 2) * ANCHORS_PER_CELL
        np.testing.assert_allclose(l_conf.item(), math.log(positions), rtol=1e-6)
        # sigmoid(0) = 0.5 for the center channels, raw zeros for the sizes.
        np.testing.assert_allclose(l_off.item(), (2 * 0.25) / 4, rtol=1e-6)
        np.testing.assert_allclose(
            total.item(), l_conf.item() + 5.0 * l_off.item(), rtol=1e-6
        )

    def test_matches_numpy_oracle(self):
        """Loss equals log-sum-exp cross-entropy plus MSE computed in numpy."""
        rng = np.random.default_rng(5)
        shapes = grid_shapes(64)
        preds = {
            level: torch.from_numpy(
                rng.standard_normal((2, h, w, ANCHORS_PER_CELL, 5)).astype(np.float32)
            )
            for level, (h, w) in shapes.items()
        }
        total_positions = sum(h * w * ANCHORS_PER_CELL for h, w in shapes.values())
        pos = torch.tensor([7, total_positions - 3])
        off = torch.from_numpy(rng.random((2, 4)).astype(np.float32))
        total, l_conf, l_off = grounding_loss(preds, pos, off, lambda_off=5.0)

        flat = flatten_predictions(preds).numpy().astype(np.float64)
        conf_terms, off_terms = [], []
        for b in range(2):
            logits = flat[b, :, CH_CONF]
            log_z = np.log(np.exp(logits - logits.max()).sum()) + logits.max()
            conf_terms.append(log_z - logits[pos[b]])
            row = flat[b, pos[b]]
            pred = np.array(
                [
                    1 / (1 + np.exp(-row[CH_TX])),
                    1 / (1 + np.exp(-row[CH_TY])),
                    row[CH_TH],
                    row[CH_TW],
                ]
            )
            off_terms.append(((pred - off[b].numpy().astype(np.float64)) ** 2).mean())
        np.testing.assert_allclose(l_conf.item(), np.mean(conf_terms), rtol=1e-5)
        np.testing.assert_allclose(l_off.item(), np.mean(off_terms), rtol=1e-5)
        np.testing.assert_allclose(total.item(), l_conf.item() + 5 * l_off.item(), rtol=1e-6)

    def test_confidence_shift_invariance(self):
        """Adding a constant to every confidence logit leaves L_conf alone."""
        rng = np.random.default_rng(6)
        shapes = grid_shapes(64)
        preds = {
            level: torch.from_numpy(
                rng.standard_normal((1, h, w, ANCHORS_PER_CELL, 5)).astype(np.float32)
            )
            for level, (h, w) in shapes.items()
        }
        pos = torch.tensor([11])
        off = torch.zeros(1, 4)
        _, base, _ = grounding_loss(preds, pos, off)
        shifted = {level: t.clone() for level, t in preds.items()}
        for t in shifted.values():
            t[..., CH_CONF] += 7.5
        _, moved, _ = grounding_loss(shifted, pos, off)
        np.testing.assert_allclose(moved.item(), base.item(), rtol=1e-5)

    def test_planted_offsets_zero_offset_loss(self):
        anchors = _anchors()
        gt = Box(40.0, 52.0, 88.0, 96.0)
        assignment = assign_target(gt, anchors, 128)
        shapes = grid_shapes(128)
        preds = _zero_preds(128)
        position = flat_position(
            assignment.level, assignment.cell[0], assignment.cell[1], assignment.anchor, shapes
        )
        raw = raw_offsets(assignment)
        level_offset = position
        for level in (3, 4, 5):
            count = shapes[level][0] * shapes[level][1] * ANCHORS_PER_CELL
            if level_offset < count:
                break
            level_offset -= count
        cell, anchor = divmod(level_offset, ANCHORS_PER_CELL)
        row, col = divmod(cell, shapes[level][1])
        preds[level][0, row, col, anchor, :4] = torch.tensor(raw)
        pos, off = targets_from_assignments([assignment], 128)
        _, _, l_off = grounding_loss(preds, pos, off)
        assert l_off.item() < 1e-10


class TestDecodeBoxes:
    def test_zero_offsets_center_anchors_in_cells(self):
        anchors = _anchors()
        preds = _zero_preds(64)
        decoded = decode_boxes(preds, anchors)
        shapes = grid_shapes(64)
        total = sum(h * w * ANCHORS_PER_CELL for h, w in shapes.values())
        assert decoded.boxes.shape == (1, total, 4)

        position = flat_position(4, 2, 1, 0, shapes)
        box = decoded.boxes[0, position]
        cx, cy = (1 + 0.5) * 16, (2 + 0.5) * 16
        aw, ah = anchors.per_level[4][0]
        np.testing.assert_allclose(
            box.numpy(), [cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], rtol=1e-6
        )
        assert int(decoded.level[position]) == 4
        assert int(decoded.row[position]) == 2
        assert int(decoded.col[position]) == 1
        assert int(decoded.anchor[position]) == 0

    def test_round_trip_through_assignment(self):
        """Planting the raw offsets of an assignment decodes back to the gt."""
        anchors = _anchors()
        shapes = grid_shapes(256)
        rng = np.random.default_rng(7)
        for _ in range(100):
            w = float(rng.uniform(8, 140))
            h = float(rng.uniform(8, 140))
            cx = float(rng.uniform(w / 2, 256 - w / 2))
            cy = float(rng.uniform(h / 2, 256 - h / 2))
            gt = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            assignment = assign_target(gt, anchors, 256)
            preds = _zero_preds(256)
            raw = raw_offsets(assignment)
            row, col = assignment.cell
            preds[assignment.level][0, row, col, assignment.anchor, :4] = torch.tensor(raw)
            decoded = decode_boxes(preds, anchors)
            position = flat_position(assignment.level, row, col, assignment.anchor, shapes)
            np.testing.assert_allclose(
                decoded.boxes[0, position].numpy(),
                np.array(gt.as_tuple()),
                atol=1e-4,
            )

    def test_size_channels_are_monotonic(self):
        anchors = _anchors()
        preds = _zero_preds(64)
        preds[4][0, 1, 1, 0, CH_TW] = 1.0
        decoded = decode_boxes(preds, anchors)
        shapes = grid_shapes(64)
        position = flat_position(4, 1, 1, 0, shapes)
        grown = decoded.boxes[0, position]
        width = float(grown[2] - grown[0])
        np.testing.assert_allclose(width, anchors.per_level[4][0][0] * math.e, rtol=1e-6)


class TestSelectPrediction:
    def test_planted_maximum_wins(self):
        anchors = _anchors()
        preds = _zero_preds(64)
        preds[5][0, 1, 0, 2, CH_CONF] = 3.0
        decoded = decode_boxes(preds, anchors)
        chosen = select_prediction(decoded)
        assert (chosen.level, chosen.row, chosen.col, chosen.anchor) == (5, 1, 0, 2)
        assert chosen.confidence == 3.0

    def test_tie_takes_first_canonical_position(self):
        anchors = _anchors()
        preds = _zero_preds(64)
        preds[4][0, 0, 2, 1, CH_CONF] = 2.0
        preds[5][0, 1, 1, 0, CH_CONF] = 2.0
        decoded = decode_boxes(preds, anchors)
        chosen = select_prediction(decoded)
        assert (chosen.level, chosen.row, chosen.col) == (4, 0, 2)

    def test_matches_numpy_argmax(self):
        anchors = _anchors()
        rng = np.random.default_rng(8)
        shapes = grid_shapes(64)
        for _ in range(20):
            preds = {
                level: torch.from_numpy(
                    rng.standard_normal((1, h, w, ANCHORS_PER_CELL, 5)).astype(np.float32)
                )
                for level, (h, w) in shapes.items()
            }
            decoded = decode_boxes(preds, anchors)
            chosen = select_prediction(decoded)
            flat_conf = decoded.confidence[0].numpy()
            idx = int(np.argmax(flat_conf))
            assert (
                flat_position(chosen.level, chosen.row, chosen.col, chosen.anchor, shapes)
                == idx
            )
