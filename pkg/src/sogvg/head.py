"""Anchor-based prediction head, target assignment, loss, and box decoding.

Every pyramid level carries 3 anchors per cell and predicts a 5-tuple
(t_x, t_y, t_h, t_w, conf) per anchor.  Confidence is trained as a softmax
cross-entropy over all (level, cell, anchor) positions jointly with the single
assigned position as the true class; offsets are trained with MSE at that
position only.  Decoding inverts the parameterization: sigmoid on t_x/t_y plus
the cell index times the stride gives the center, anchor size times exp(t)
gives width and height.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import LEVEL_STRIDES, PYRAMID_LEVELS
from .errors import InvalidInputError

ANCHORS_PER_CELL = 3
# Channel order of the prediction 5-tuple: x offset, y offset, HEIGHT offset,
# width offset, confidence.  Height deliberately precedes width.
CH_TX, CH_TY, CH_TH, CH_TW, CH_CONF = 0, 1, 2, 3, 4


@dataclass
class Box:
    """Axis-aligned box in pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


@dataclass
class AnchorSet:
    """Three (width, height) anchor pairs per pyramid level, in pixels."""

    per_level: Dict[int, Tuple[Tuple[float, float], ...]]

    def __post_init__(self):
        if sorted(self.per_level) != list(PYRAMID_LEVELS):
            raise InvalidInputError(f"anchors must cover levels {PYRAMID_LEVELS}")
        for level, pairs in self.per_level.items():
            if len(pairs) != ANCHORS_PER_CELL:
                raise InvalidInputError(f"level {level} needs {ANCHORS_PER_CELL} anchors")
            if any(w <= 0 or h <= 0 for w, h in pairs):
                raise InvalidInputError(f"level {level} has non-positive anchor sizes")

    def to_json(self) -> Dict[str, List[List[float]]]:
        return {
            str(level): [[float(w), float(h)] for w, h in self.per_level[level]]
            for level in PYRAMID_LEVELS
        }

    @classmethod
    def from_json(cls, data: Dict[str, Sequence[Sequence[float]]]) -> "AnchorSet":
        return cls(
            per_level={
                int(level): tuple((float(w), float(h)) for w, h in pairs)
                for level, pairs in data.items()
            }
        )


@dataclass
class TargetAssignment:
    """The single positive (level, cell, anchor) for a ground-truth box.

    t_x and t_y are the fractional center position inside the cell, in (0, 1);
    the predicted raw values live in inverse-sigmoid space.  t_h and t_w are
    log size ratios against the assigned anchor.
    """

    level: int
    cell: Tuple[int, int]
    anchor: int
    t_x: float
    t_y: float
    t_h: float
    t_w: float


def grid_shapes(image_size: Union[int, Tuple[int, int]]) -> Dict[int, Tuple[int, int]]:
    """Grid (h, w) per level for an image of the given size."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    h, w = image_size
    if h % 32 != 0 or w % 32 != 0:
        raise InvalidInputError(f"image sides must be divisible by 32, got {h}x{w}")
    return {level: (h // LEVEL_STRIDES[level], w // LEVEL_STRIDES[level]) for level in PYRAMID_LEVELS}


def flat_position(
    level: int, row: int, col: int, anchor: int, shapes: Dict[int, Tuple[int, int]]
) -> int:
    """Position of (level, cell, anchor) in the canonical flatten order:
    levels 3,4,5, cells row-major, anchors innermost."""
    base = 0
    for lev in PYRAMID_LEVELS:
        if lev == level:
            break
        base += shapes[lev][0] * shapes[lev][1] * ANCHORS_PER_CELL
    _, w = shapes[level]
    return base + (row * w + col) * ANCHORS_PER_CELL + anchor


def flatten_predictions(preds: Dict[int, torch.Tensor]) -> torch.Tensor:
    """Concatenate the per-level grids into (B, P, 5) in canonical order."""
    flat = []
    for level in PYRAMID_LEVELS:
        t = preds[level]
        b = t.shape[0]
        flat.append(t.reshape(b, -1, 5))
    return torch.cat(flat, dim=1)


class PredictionHead(nn.Module):
    """Per-level 3x3 conv + ReLU, then 1x1 conv to 3 anchors x 5 channels."""

    def __init__(self, d_m: int):
        super().__init__()
        self.blocks = nn.ModuleDict(
            {
                str(level): nn.Sequential(
                    nn.Conv2d(d_m, d_m, 3, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(d_m, ANCHORS_PER_CELL * 5, 1),
                )
                for level in PYRAMID_LEVELS
            }
        )

    def forward(self, maps: Dict[int, torch.Tensor]) -> Dict[int, torch.Tensor]:
        out = {}
        for level in PYRAMID_LEVELS:
            x = self.blocks[str(level)](maps[level])
            b, _, h, w = x.shape
            out[level] = x.reshape(b, ANCHORS_PER_CELL, 5, h, w).permute(0, 3, 4, 1, 2)
        return out


def assign_target(
    gt: Box, anchors: AnchorSet, image_size: Union[int, Tuple[int, int]]
) -> TargetAssignment:
    """Assign the (level, cell, anchor) whose anchor box centered at the gt
    center has the highest IoU with the gt; ties keep the first candidate in
    (level, anchor) order.  The cell is the one containing the center (floor)."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    img_h, img_w = image_size
    if not (0 <= gt.x_min and gt.x_max <= img_w and 0 <= gt.y_min and gt.y_max <= img_h):
        raise InvalidInputError(f"gt box {gt.as_tuple()} not inside {img_w}x{img_h} image")
    cx, cy = gt.center

    best = None
    for level in PYRAMID_LEVELS:
        for a_idx, (aw, ah) in enumerate(anchors.per_level[level]):
            candidate = Box(cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2)
            value = iou(candidate, gt)
            if best is None or value > best[0]:
                best = (value, level, a_idx, aw, ah)

    _, level, a_idx, aw, ah = best
    stride = LEVEL_STRIDES[level]
    col = int(math.floor(cx / stride))
    row = int(math.floor(cy / stride))
    return TargetAssignment(
        level=level,
        cell=(row, col),
        anchor=a_idx,
        t_x=cx / stride - col,
        t_y=cy / stride - row,
        t_h=math.log(gt.height / ah),
        t_w=math.log(gt.width / aw),
    )


def raw_offsets(assignment: TargetAssignment, eps: float = 1e-7) -> Tuple[float, float, float, float]:
    """Raw prediction values (t_x, t_y, t_h, t_w) that decode back to the gt:
    inverse sigmoid on the fractional center, log ratios unchanged."""
    fx = min(max(assignment.t_x, eps), 1.0 - eps)
    fy = min(max(assignment.t_y, eps), 1.0 - eps)
    return (
        math.log(fx / (1.0 - fx)),
        math.log(fy / (1.0 - fy)),
        assignment.t_h,
        assignment.t_w,
    )


def targets_from_assignments(
    assignments: Sequence[TargetAssignment],
    image_size: Union[int, Tuple[int, int]],
    device: torch.device = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batch the assignments into (pos_index (B,), offsets (B, 4)) tensors.

    Offsets follow the channel order (t_x, t_y, t_h, t_w) with the center
    offsets kept as fractions; the loss applies sigmoid to the predictions."""
    shapes = grid_shapes(image_size)
    pos = torch.tensor(
        [flat_position(a.level, a.cell[0], a.cell[1], a.anchor, shapes) for a in assignments],
        dtype=torch.int64,
        device=device,
    )
    off = torch.tensor(
        [[a.t_x, a.t_y, a.t_h, a.t_w] for a in assignments],
        dtype=torch.float32,
        device=device,
    )
    return pos, off


def grounding_loss(
    preds: Dict[int, torch.Tensor],
    pos_index: torch.Tensor,
    offsets: torch.Tensor,
    lambda_off: float = 5.0,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total, confidence, and offset loss for a batch.

    L = L_conf + lambda_off * L_off where L_conf is softmax cross-entropy over
    all positions and L_off is the MSE over the 4 offsets at the positive."""
    flat = flatten_predictions(preds)
    b = flat.shape[0]
    logits = flat[..., CH_CONF]
    l_conf = F.cross_entropy(logits, pos_index)
    picked = flat.gather(1, pos_index.view(b, 1, 1).expand(b, 1, 5)).squeeze(1)
    pred_off = torch.cat(
        [torch.sigmoid(picked[:, CH_TX : CH_TY + 1]), picked[:, CH_TH : CH_TW + 1]], dim=1
    )
    l_off = F.mse_loss(pred_off, offsets.to(pred_off.dtype))
    return l_conf + lambda_off * l_off, l_conf, l_off


@dataclass
class DecodedPredictions:
    """All decoded boxes of a batch plus the shared location metadata.

    boxes: (B, P, 4) as (x_min, y_min, x_max, y_max)
    confidence: (B, P) raw logits
    level/row/col/anchor: (P,) location of each flat position
    """

    boxes: torch.Tensor
    confidence: torch.Tensor
    level: torch.Tensor
    row: torch.Tensor
    col: torch.Tensor
    anchor: torch.Tensor


def decode_boxes(preds: Dict[int, torch.Tensor], anchors: AnchorSet) -> DecodedPredictions:
    """Decode every (level, cell, anchor) prediction into a pixel box."""
    boxes, confs, meta = [], [], {"level": [], "row": [], "col": [], "anchor": []}
    for level in PYRAMID_LEVELS:
        t = preds[level]
        b, h, w, _, _ = t.shape
        stride = LEVEL_STRIDES[level]
        device, dtype = t.device, t.dtype

        grid_x = torch.arange(w, device=device, dtype=dtype).view(1, 1, w, 1)
        grid_y = torch.arange(h, device=device, dtype=dtype).view(1, h, 1, 1)
        cx = (grid_x + torch.sigmoid(t[..., CH_TX])) * stride
        cy = (grid_y + torch.sigmoid(t[..., CH_TY])) * stride
        sizes = torch.tensor(anchors.per_level[level], device=device, dtype=dtype)
        bw = sizes[:, 0].view(1, 1, 1, -1) * torch.exp(t[..., CH_TW])
        bh = sizes[:, 1].view(1, 1, 1, -1) * torch.exp(t[..., CH_TH])
        level_boxes = torch.stack(
            [cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1
        )
        boxes.append(level_boxes.reshape(b, -1, 4))
        confs.append(t[..., CH_CONF].reshape(b, -1))

        idx = torch.arange(h * w * ANCHORS_PER_CELL, device=device)
        cells = torch.div(idx, ANCHORS_PER_CELL, rounding_mode="floor")
        meta["level"].append(torch.full_like(idx, level))
        meta["row"].append(torch.div(cells, w, rounding_mode="floor"))
        meta["col"].append(cells % w)
        meta["anchor"].append(idx % ANCHORS_PER_CELL)

    return DecodedPredictions(
        boxes=torch.cat(boxes, dim=1),
        confidence=torch.cat(confs, dim=1),
        level=torch.cat(meta["level"]),
        row=torch.cat(meta["row"]),
        col=torch.cat(meta["col"]),
        anchor=torch.cat(meta["anchor"]),
    )


@dataclass
class SelectedPrediction:
    box: Box
    confidence: float
    level: int
    row: int
    col: int
    anchor: int


def select_prediction(decoded: DecodedPredictions, b: int = 0) -> SelectedPrediction:
    """Highest-confidence location for batch element b; ties keep the first
    position in the canonical flatten order."""
    conf = decoded.confidence[b]
    if conf.numel() == 0:
        raise InvalidInputError("no locations to select from")
    idx = int((conf == conf.max()).nonzero(as_tuple=False)[0, 0])
    coords = [float(v) for v in decoded.boxes[b, idx]]
    return SelectedPrediction(
        box=Box(*coords),
        confidence=float(conf[idx]),
        level=int(decoded.level[idx]),
        row=int(decoded.row[idx]),
        col=int(decoded.col[idx]),
        anchor=int(decoded.anchor[idx]),
    )
