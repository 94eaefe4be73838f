"""Training loop and verification harnesses.

Three explicitly seeded random streams keep runs reproducible and resumable:
the global torch seed for parameter init (set in build_model), a numpy
generator for data order, and a torch.Generator for the stochastic edge
construction.  The two loop streams are checkpointed, so resuming reproduces
the uninterrupted run exactly.
"""

import json
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import (
    CheckpointPayload,
    arrays_to_model,
    arrays_to_optimizer,
    load_checkpoint,
    model_to_arrays,
    optimizer_to_arrays,
    save_checkpoint,
)
from .config import RunConfig, config_from_dict, config_to_dict
from .dataset import (
    BACKGROUND,
    RELATION_TOKENS,
    GroundingArrays,
    pr_at_threshold,
    tokenize,
)
from .errors import InvalidInputError, NumericalError
from .head import (
    AnchorSet,
    Box,
    assign_target,
    decode_boxes,
    grounding_loss,
    iou,
    select_prediction,
    targets_from_assignments,
)
from .model import GroundingModel


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at step >= total."""
    if total <= 0:
        raise InvalidInputError(f"total steps must be positive, got {total}")
    if step < 0:
        raise InvalidInputError(f"step must be non-negative, got {step}")
    if step >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class MetricsRecord:
    """One epoch of training, as appended to the metrics log."""

    epoch: int
    loss_total: float
    loss_conf: float
    loss_off: float
    lr: float
    wall_time: float
    val_pr05: Optional[float] = None

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def batch_tensors(
    data: GroundingArrays, idx: np.ndarray, dtype: torch.dtype = torch.float32
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slice a batch and convert to model inputs (images scaled to [0, 1])."""
    images = torch.from_numpy(data.images[idx]).to(dtype).div_(255.0).permute(0, 3, 1, 2)
    tokens = torch.from_numpy(data.tokens[idx])
    mask = torch.from_numpy(data.mask[idx])
    return images.contiguous(), tokens, mask


def build_targets(
    data: GroundingArrays, anchors: AnchorSet, image_size: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    assignments = [assign_target(box, anchors, image_size) for box in data.boxes]
    return targets_from_assignments(assignments, image_size)


def translation_slack(images: np.ndarray) -> np.ndarray:
    """Background margin of each image on the (left, right, top, bottom) sides.

    Scenes are flat shapes on a uniform background, so the margins are exactly
    how far the whole scene can translate in each direction with every object
    staying in frame.  Relations between objects (and hence the referring
    expression) are unchanged by a common translation, which makes this a
    semantics-preserving augmentation.
    """
    bg = np.asarray(BACKGROUND, dtype=images.dtype)
    content = (images != bg).any(axis=3)
    n, h, w = content.shape
    slack = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        rows = content[i].any(axis=1).nonzero()[0]
        cols = content[i].any(axis=0).nonzero()[0]
        if len(rows) == 0:
            continue
        slack[i] = (cols[0], w - 1 - cols[-1], rows[0], h - 1 - rows[-1])
    return slack


def shift_scene(
    image: np.ndarray, box: Box, dx: int, dy: int
) -> Tuple[np.ndarray, Box]:
    """Translate one rendered scene and its target box, filling with background.

    Boxes are float-valued and can overhang their rendered pixels by a
    fraction, so the moved box is clamped to the frame; the pixel-derived
    shift bounds guarantee the clamp only ever trims that fraction.
    """
    h, w = image.shape[:2]
    out = np.empty_like(image)
    out[:] = BACKGROUND
    out[max(0, dy) : min(h, h + dy), max(0, dx) : min(w, w + dx)] = image[
        max(0, -dy) : min(h, h - dy), max(0, -dx) : min(w, w - dx)
    ]
    moved = Box(
        max(box.x_min + dx, 0),
        max(box.y_min + dy, 0),
        min(box.x_max + dx, w),
        min(box.y_max + dy, h),
    )
    return out, moved


# The eight symmetries of the square, indexed g = 4 * flip + quarter_turns:
# first rotate counter-clockwise by 90 degrees `quarter_turns` times, then
# mirror left-right if `flip`.  Rotating or mirroring a square scene keeps
# every spatial predicate decidable with the same margins, provided the
# direction words in the expression are rewritten alongside the pixels.
_QUARTER_TURN_PREDICATE = {
    "left_of": "below",
    "below": "right_of",
    "right_of": "above",
    "above": "left_of",
    "touching": "touching",
}
_MIRROR_PREDICATE = {
    "left_of": "right_of",
    "right_of": "left_of",
    "above": "above",
    "below": "below",
    "touching": "touching",
}
# Margin columns are (left, right, top, bottom); entry i of a map names the
# source column that lands in position i after the transform.
_QUARTER_TURN_MARGINS = (2, 3, 1, 0)
_MIRROR_MARGINS = (1, 0, 2, 3)


def _build_dihedral_tables():
    predicates = []
    margins = []
    for flip in (0, 1):
        for turns in range(4):
            pred = {p: p for p in _QUARTER_TURN_PREDICATE}
            cols = (0, 1, 2, 3)
            for _ in range(turns):
                pred = {p: _QUARTER_TURN_PREDICATE[q] for p, q in pred.items()}
                cols = tuple(cols[j] for j in _QUARTER_TURN_MARGINS)
            if flip:
                pred = {p: _MIRROR_PREDICATE[q] for p, q in pred.items()}
                cols = tuple(cols[j] for j in _MIRROR_MARGINS)
            predicates.append(pred)
            margins.append(cols)
    return tuple(predicates), np.array(margins, dtype=np.int64)


DIHEDRAL_PREDICATES, DIHEDRAL_MARGINS = _build_dihedral_tables()


def dihedral_image(image: np.ndarray, g: int) -> np.ndarray:
    if not 0 <= g < 8:
        raise InvalidInputError(f"dihedral element must lie in [0, 8), got {g}")
    out = np.rot90(image, g % 4)
    if g >= 4:
        out = np.fliplr(out)
    return out


def dihedral_box(box: Box, g: int, size: int) -> Box:
    """Apply symmetry g to a box in continuous image coordinates.

    A counter-clockwise quarter turn maps a point (x, y) to (y, size - x) and
    the mirror maps it to (size - x, y); corners are remapped and re-sorted.
    """
    if not 0 <= g < 8:
        raise InvalidInputError(f"dihedral element must lie in [0, 8), got {g}")
    x_min, y_min, x_max, y_max = box.as_tuple()
    for _ in range(g % 4):
        x_min, y_min, x_max, y_max = y_min, size - x_max, y_max, size - x_min
    if g >= 4:
        x_min, x_max = size - x_max, size - x_min
    return Box(x_min, y_min, x_max, y_max)


def dihedral_expression(expression: str, g: int) -> str:
    """Rewrite the direction words of a relational expression for symmetry g.

    Attribute-only expressions are returned unchanged; they hold under any
    rigid motion of the scene.
    """
    tokens = expression.split()
    if len(tokens) < 5:
        return expression
    rel_tokens = tuple(tokens[1:-3])
    predicate = next(
        (p for p, toks in RELATION_TOKENS.items() if toks == rel_tokens), None
    )
    if predicate is None:
        raise InvalidInputError(f"cannot parse relational expression {expression!r}")
    mapped = DIHEDRAL_PREDICATES[g][predicate]
    return " ".join([tokens[0], *RELATION_TOKENS[mapped], *tokens[-3:]])


def dihedral_margins(slack: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Permute per-sample (left, right, top, bottom) margins for symmetry g."""
    return np.take_along_axis(slack, DIHEDRAL_MARGINS[g], axis=1)


def build_model(cfg: RunConfig, vocab_size: int) -> GroundingModel:
    """Construct the model with parameter init driven by the config seed."""
    torch.manual_seed(cfg.train.seed)
    return GroundingModel(cfg.model, vocab_size)


@dataclass
class EvalResult:
    pr05: float
    records: List[dict]


def evaluate(
    model: GroundingModel,
    data: GroundingArrays,
    anchors: AnchorSet,
    image_size: int,
    batch_size: int = 32,
) -> EvalResult:
    """Pr@0.5 plus per-sample records over one split.

    The caller must put the model in eval mode first; evaluating with
    stochastic edge construction still active would be irreproducible, so
    that is a hard error rather than a silent mode switch.
    """
    if model.training:
        raise InvalidInputError(
            "model is in training mode; call model.eval() before evaluate() so "
            "stochastic edge construction is deactivated"
        )
    records = []
    pred_boxes: List[Box] = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            images, tokens, mask = batch_tensors(data, idx)
            out = model(images, tokens, mask)
            decoded = decode_boxes(out.predictions, anchors)
            for row, sample in enumerate(idx):
                selected = select_prediction(decoded, row)
                gt = data.boxes[sample]
                overlap = iou(selected.box, gt)
                pred_boxes.append(selected.box)
                records.append(
                    {
                        "index": int(data.indices[sample]),
                        "expression": data.expressions[sample],
                        "box": list(selected.box.as_tuple()),
                        "confidence": selected.confidence,
                        "gt_box": list(gt.as_tuple()),
                        "iou": overlap,
                        "hit": bool(overlap >= 0.5),
                    }
                )
    return EvalResult(pr05=pr_at_threshold(pred_boxes, data.boxes), records=records)


class Trainer:
    """Owns the optimizer, the seeded loop streams, metrics, and checkpoints."""

    def __init__(
        self,
        cfg: RunConfig,
        model: GroundingModel,
        train_data: GroundingArrays,
        anchors: AnchorSet,
        image_size: int,
        val_data: Optional[GroundingArrays] = None,
        out_dir: Optional[str] = None,
        meta: Optional[dict] = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.model = model
        self.train_data = train_data
        self.val_data = val_data
        self.anchors = anchors
        self.image_size = image_size
        self.out_dir = out_dir
        self.meta = meta or {}

        self.named_params = list(model.named_parameters())
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay
        )
        self.pos_index, self.offsets = build_targets(train_data, anchors, image_size)
        if cfg.train.max_shift > 0:
            self.slack = np.minimum(
                translation_slack(train_data.images), cfg.train.max_shift
            )
        else:
            self.slack = None
        if cfg.train.dihedral:
            vocabulary = self.meta.get("vocabulary")
            if not vocabulary:
                raise InvalidInputError(
                    "dihedral augmentation rewrites direction words, which "
                    "needs meta['vocabulary'] to retokenize expressions"
                )
            self.vocabulary = list(vocabulary)
        else:
            self.vocabulary = None
        self.augment = self.slack is not None or cfg.train.dihedral

        self.data_rng = np.random.default_rng([cfg.train.seed, 1])
        self.erc_generator = torch.Generator()
        self.erc_generator.manual_seed(cfg.train.seed + 2)

        self.epoch = 0
        self.global_step = 0
        self.steps_per_epoch = math.ceil(len(train_data) / cfg.train.batch_size)
        self.total_steps = self.steps_per_epoch * cfg.train.epochs
        self.records: List[MetricsRecord] = []
        self.best_pr05 = -1.0
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)

    def _set_lr(self) -> float:
        lr = cosine_lr(
            self.global_step, self.total_steps, self.cfg.train.lr, self.cfg.train.lr_min
        )
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def _augmented_batch(
        self, idx: np.ndarray
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """One batch with fresh per-sample augmentation.

        Each sample first gets a random square symmetry (when enabled), with
        the matching direction-word rewrite, then a random translation bounded
        by the transformed background margins.  The augmented boxes need fresh
        anchor assignments, so the precomputed targets are bypassed.  All
        augmentation draws come from the data stream and are therefore covered
        by checkpoint resume.
        """
        b = len(idx)
        g = self.data_rng.integers(0, 8, size=b) if self.cfg.train.dihedral else None
        if self.slack is not None:
            slack = self.slack[idx]
            if g is not None:
                slack = dihedral_margins(slack, g)
            dx = self.data_rng.integers(-slack[:, 0], slack[:, 1], endpoint=True)
            dy = self.data_rng.integers(-slack[:, 2], slack[:, 3], endpoint=True)
        else:
            dx = dy = np.zeros(b, dtype=np.int64)
        out_images = np.empty_like(self.train_data.images[idx])
        assignments = []
        token_rows: List[List[int]] = []
        for row, sample in enumerate(idx):
            image = self.train_data.images[sample]
            box = self.train_data.boxes[sample]
            if g is not None:
                element = int(g[row])
                image = dihedral_image(image, element)
                box = dihedral_box(box, element, self.image_size)
                token_rows.append(
                    tokenize(
                        dihedral_expression(
                            self.train_data.expressions[sample], element
                        ),
                        self.vocabulary,
                    )
                )
            image, box = shift_scene(image, box, int(dx[row]), int(dy[row]))
            out_images[row] = image
            assignments.append(assign_target(box, self.anchors, self.image_size))
        pos_index, offsets = targets_from_assignments(assignments, self.image_size)
        images = (
            torch.from_numpy(out_images)
            .to(torch.float32)
            .div_(255.0)
            .permute(0, 3, 1, 2)
        )
        if g is None:
            tokens = torch.from_numpy(self.train_data.tokens[idx])
            mask = torch.from_numpy(self.train_data.mask[idx])
        else:
            width = max(len(ids) for ids in token_rows)
            token_array = np.zeros((b, width), dtype=np.int64)
            mask_array = np.zeros((b, width), dtype=bool)
            for row, ids in enumerate(token_rows):
                token_array[row, : len(ids)] = ids
                mask_array[row, : len(ids)] = True
            tokens = torch.from_numpy(token_array)
            mask = torch.from_numpy(mask_array)
        return images.contiguous(), tokens, mask, pos_index, offsets

    def train_epoch(self) -> MetricsRecord:
        started = time.perf_counter()
        self.model.train()
        perm = self.data_rng.permutation(len(self.train_data))
        bs = self.cfg.train.batch_size
        sums = {"total": 0.0, "conf": 0.0, "off": 0.0}
        seen = 0
        last_lr = self.cfg.train.lr
        for start in range(0, len(perm), bs):
            idx = perm[start : start + bs]
            if not self.augment:
                images, tokens, mask = batch_tensors(self.train_data, idx)
                pos_index, offsets = self.pos_index[idx], self.offsets[idx]
            else:
                images, tokens, mask, pos_index, offsets = self._augmented_batch(idx)
            last_lr = self._set_lr()
            out = self.model(images, tokens, mask, generator=self.erc_generator)
            loss, l_conf, l_off = grounding_loss(
                out.predictions, pos_index, offsets, self.cfg.train.lambda_off
            )
            loss_val = float(loss.detach())
            conf_val = float(l_conf.detach())
            off_val = float(l_off.detach())
            if not math.isfinite(loss_val):
                diagnostics = {
                    "epoch": self.epoch,
                    "global_step": self.global_step,
                    "batch_indices": [int(i) for i in idx],
                    "loss_total": loss_val,
                    "loss_conf": conf_val,
                    "loss_off": off_val,
                }
                if out.diagnostics is not None:
                    diagnostics["alpha_min"] = float(out.diagnostics.alpha.min())
                    diagnostics["alpha_max"] = float(out.diagnostics.alpha.max())
                raise NumericalError("non-finite training loss", diagnostics)
            self.optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
            self.optimizer.step()
            self.global_step += 1
            n = len(idx)
            sums["total"] += loss_val * n
            sums["conf"] += conf_val * n
            sums["off"] += off_val * n
            seen += n

        self.epoch += 1
        record = MetricsRecord(
            epoch=self.epoch,
            loss_total=sums["total"] / seen,
            loss_conf=sums["conf"] / seen,
            loss_off=sums["off"] / seen,
            lr=last_lr,
            wall_time=time.perf_counter() - started,
        )
        if self.val_data is not None and self.epoch % self.cfg.train.eval_every == 0:
            self.model.eval()
            record.val_pr05 = evaluate(
                self.model, self.val_data, self.anchors, self.image_size
            ).pr05
            self.model.train()
        return record

    def _append_metrics(self, record: MetricsRecord) -> None:
        self.records.append(record)
        if self.out_dir is not None:
            with open(os.path.join(self.out_dir, "metrics.jsonl"), "a", encoding="utf-8") as f:
                f.write(record.to_json_line() + "\n")

    def fit(self, stop_at_pr05: Optional[float] = None) -> List[MetricsRecord]:
        """Run the remaining epochs; optionally stop early at a val Pr@0.5."""
        while self.epoch < self.cfg.train.epochs:
            record = self.train_epoch()
            self._append_metrics(record)
            if self.out_dir is not None:
                self.save(os.path.join(self.out_dir, "last.ckpt"))
                if record.val_pr05 is not None and record.val_pr05 > self.best_pr05:
                    self.best_pr05 = record.val_pr05
                    self.save(os.path.join(self.out_dir, "best.ckpt"))
            if (
                stop_at_pr05 is not None
                and record.val_pr05 is not None
                and record.val_pr05 >= stop_at_pr05
            ):
                break
        return self.records

    def payload(self) -> CheckpointPayload:
        arrays = model_to_arrays(self.model)
        arrays.update(optimizer_to_arrays(self.optimizer, self.named_params))
        rng = {
            "data": self.data_rng.bit_generator.state,
            "erc": self.erc_generator.get_state().numpy().tobytes().hex(),
        }
        return CheckpointPayload(
            epoch=self.epoch,
            global_step=self.global_step,
            config=config_to_dict(self.cfg),
            meta=self.meta,
            rng=rng,
            arrays=arrays,
        )

    def save(self, path: str) -> None:
        save_checkpoint(path, self.payload())

    @classmethod
    def from_checkpoint(
        cls,
        path: str,
        train_data: GroundingArrays,
        anchors: AnchorSet,
        image_size: int,
        val_data: Optional[GroundingArrays] = None,
        out_dir: Optional[str] = None,
    ) -> "Trainer":
        payload = load_checkpoint(path)
        cfg = config_from_dict(payload.config)
        model = build_model(cfg, vocab_size=len(payload.meta["vocabulary"]))
        arrays_to_model(model, payload.arrays)
        trainer = cls(
            cfg,
            model,
            train_data,
            anchors,
            image_size,
            val_data=val_data,
            out_dir=out_dir,
            meta=payload.meta,
        )
        arrays_to_optimizer(trainer.optimizer, trainer.named_params, payload.arrays)
        trainer.epoch = payload.epoch
        trainer.global_step = payload.global_step
        trainer.data_rng.bit_generator.state = payload.rng["data"]
        trainer.erc_generator.set_state(
            torch.frombuffer(bytearray.fromhex(payload.rng["erc"]), dtype=torch.uint8).clone()
        )
        return trainer


def model_from_checkpoint(path: str) -> Tuple[GroundingModel, RunConfig, dict]:
    """Rebuild a model and its config/meta from a checkpoint, in eval mode."""
    payload = load_checkpoint(path)
    cfg = config_from_dict(payload.config)
    model = build_model(cfg, vocab_size=len(payload.meta["vocabulary"]))
    arrays_to_model(model, payload.arrays)
    model.eval()
    return model, cfg, payload.meta


def grad_check(
    model: GroundingModel,
    images: torch.Tensor,
    tokens: torch.Tensor,
    mask: torch.Tensor,
    pos_index: torch.Tensor,
    offsets: torch.Tensor,
    lambda_off: float = 5.0,
    n_params: int = 20,
    epsilon: float = 1e-6,
    seed: int = 0,
    erc_seed: int = 1234,
) -> float:
    """Max relative error between autograd and central finite differences.

    The model must be in double precision.  The edge-construction generator is
    re-seeded before every loss evaluation, so the stochastic draws are pinned
    and the loss is a deterministic function of the parameters.  Sampled
    coordinates cover every top-level module that received a gradient.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise InvalidInputError("grad_check requires a double-precision model")

    def loss_value() -> torch.Tensor:
        generator = torch.Generator()
        generator.manual_seed(erc_seed)
        out = model(images, tokens, mask, generator=generator)
        loss, _, _ = grounding_loss(out.predictions, pos_index, offsets, lambda_off)
        return loss

    model.zero_grad()
    loss_value().backward()

    by_module: Dict[str, List[Tuple[str, torch.nn.Parameter]]] = {}
    for name, param in model.named_parameters():
        if param.grad is not None:
            by_module.setdefault(name.split(".")[0], []).append((name, param))
    if not by_module:
        raise InvalidInputError("no parameter received a gradient")

    rng = np.random.default_rng(seed)
    groups = sorted(by_module)
    picks: List[Tuple[str, torch.nn.Parameter, int]] = []
    cursor = 0
    while len(picks) < max(n_params, len(groups)):
        group = groups[cursor % len(groups)]
        name, param = by_module[group][int(rng.integers(len(by_module[group])))]
        flat_idx = int(rng.integers(param.numel()))
        picks.append((name, param, flat_idx))
        cursor += 1

    worst = 0.0
    with torch.no_grad():
        for name, param, flat_idx in picks:
            analytic = float(param.grad.reshape(-1)[flat_idx])
            flat = param.data.view(-1)
            original = float(flat[flat_idx])
            flat[flat_idx] = original + epsilon
            plus = float(loss_value())
            flat[flat_idx] = original - epsilon
            minus = float(loss_value())
            flat[flat_idx] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst
