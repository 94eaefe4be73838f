"""Diagnostics rendering for the visualize command.

Produces an activation-heatmap overlay with the selected node positions and
predicted vs ground-truth boxes, plus per-dilation-rate word-importance bar
charts, plus the raw diagnostics record as JSON.
"""

import json
import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw

from .head import Box

PRED_COLOR = (255, 140, 0)
GT_COLOR = (0, 230, 0)
NODE_COLOR = (255, 255, 255)


def heatmap_overlay(
    image: np.ndarray,
    activation: np.ndarray,
    regions: Sequence[Sequence[int]],
    alpha: Sequence[float],
    pred_box: Optional[Box] = None,
    gt_box: Optional[Box] = None,
) -> Image.Image:
    """Blend the activation map over the image and mark nodes and boxes.

    image: (H, W, 3) uint8; activation: (h, w) on the stride-16 grid;
    regions: (row, col) per node on that grid, most activated first.
    """
    img_h, img_w = image.shape[:2]
    act_h, act_w = activation.shape
    peak = float(activation.max())
    normalized = activation / peak if peak > 0 else np.zeros_like(activation)
    upsampled = np.kron(normalized, np.ones((img_h // act_h, img_w // act_w)))

    blend = image.astype(np.float64)
    blend[..., 0] = blend[..., 0] * (1 - 0.5 * upsampled) + 255.0 * 0.5 * upsampled
    blend[..., 1] *= 1 - 0.5 * upsampled
    blend[..., 2] *= 1 - 0.5 * upsampled
    canvas = Image.fromarray(blend.round().astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    cell_h, cell_w = img_h / act_h, img_w / act_w
    for rank, (row, col) in enumerate(regions):
        cx, cy = (col + 0.5) * cell_w, (row + 0.5) * cell_h
        radius = 5
        draw.ellipse(
            [cx - radius, cy - radius, cx + radius, cy + radius],
            outline=NODE_COLOR,
            width=2,
        )
        draw.text((cx + radius + 1, cy - radius), str(rank + 1), fill=NODE_COLOR)
    if gt_box is not None:
        draw.rectangle(gt_box.as_tuple(), outline=GT_COLOR, width=2)
    if pred_box is not None:
        draw.rectangle(pred_box.as_tuple(), outline=PRED_COLOR, width=2)
    return canvas


def word_importance_figure(
    tokens: Sequence[str], weights: Dict[int, np.ndarray]
) -> plt.Figure:
    """One bar panel per dilation rate showing each word's attention weight."""
    rates = sorted(weights)
    fig, axes = plt.subplots(1, len(rates), figsize=(3.2 * len(rates), 2.8), squeeze=False)
    positions = np.arange(len(tokens))
    for ax, rate in zip(axes[0], rates):
        ax.bar(positions, weights[rate][: len(tokens)], color="tab:blue")
        ax.set_xticks(positions)
        ax.set_xticklabels(tokens, rotation=45, ha="right", fontsize=8)
        ax.set_ylim(0, 1)
        ax.set_title(f"rate {rate}")
    fig.tight_layout()
    return fig


def save_visualization(
    out_dir: str,
    image: np.ndarray,
    activation: np.ndarray,
    record: dict,
    tokens: Sequence[str],
    pred_box: Optional[Box],
    gt_box: Optional[Box],
) -> List[str]:
    """Write overlay, word-importance figure (when present), and the record.

    Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    overlay = heatmap_overlay(
        image, activation, record["regions"], record["alpha"], pred_box, gt_box
    )
    overlay_path = os.path.join(out_dir, "overlay.png")
    overlay.save(overlay_path)
    written.append(overlay_path)

    if record.get("word_weights"):
        weights = {int(rate): np.asarray(w) for rate, w in record["word_weights"].items()}
        fig = word_importance_figure(tokens, weights)
        bars_path = os.path.join(out_dir, "word_importance.png")
        fig.savefig(bars_path)
        plt.close(fig)
        written.append(bars_path)

    record_path = os.path.join(out_dir, "diagnostics.json")
    with open(record_path, "w", encoding="utf-8") as handle:
        json.dump(record, handle, indent=1, sort_keys=True)
        handle.write("\n")
    written.append(record_path)
    return written
