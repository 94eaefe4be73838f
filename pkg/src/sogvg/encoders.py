"""Text and image encoders.

The text side produces one feature per word plus a sentence feature from a
bidirectional LSTM.  The image side is a small strided conv trunk that emits a
three-level feature pyramid at strides 8/16/32; each level is concatenated with
a normalized coordinate map and projected to a common channel width so later
stages can reason about absolute position.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InvalidInputError

PYRAMID_LEVELS = (3, 4, 5)
LEVEL_STRIDES = {3: 8, 4: 16, 5: 32}
COORD_CHANNELS = 8


def coordinate_map(
    h: int,
    w: int,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Per-cell geometry channels for an h x w grid, shape (h, w, 8).

    Channels are (x_min, y_min, x_center, y_center, x_max, y_max, 1/w, 1/h),
    all normalized to [0, 1].  Cell (i, j) covers the box
    [j/w, (j+1)/w] x [i/h, (i+1)/h] of the unit square.
    """
    if h < 1 or w < 1:
        raise InvalidInputError(f"coordinate map needs h, w >= 1, got {h}x{w}")
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    channels = [
        grid_x / w,
        grid_y / h,
        (grid_x + 0.5) / w,
        (grid_y + 0.5) / h,
        (grid_x + 1.0) / w,
        (grid_y + 1.0) / h,
        torch.full((h, w), 1.0 / w, dtype=dtype, device=device),
        torch.full((h, w), 1.0 / h, dtype=dtype, device=device),
    ]
    return torch.stack(channels, dim=-1)


@dataclass
class TextFeatures:
    """Word features (B, N, d_t), sentence feature (B, d_t), validity mask (B, N)."""

    words: torch.Tensor
    sentence: torch.Tensor
    mask: torch.Tensor


@dataclass
class FeaturePyramid:
    """Level -> (B, d_m, h_l, w_l) feature maps plus the stride of each level."""

    levels: Dict[int, torch.Tensor]
    strides: Dict[int, int]


class TextEncoder(nn.Module):
    """Embedding + bidirectional LSTM over a padded token batch.

    Padded positions never enter the recurrence (packed sequences) and their
    word features are zeroed afterwards, so adding padding to a sentence
    changes nothing downstream.
    """

    def __init__(self, vocab_size: int, d_t: int):
        super().__init__()
        if d_t % 2 != 0:
            raise InvalidInputError(f"d_t must be even to split across directions, got {d_t}")
        self.vocab_size = vocab_size
        self.d_t = d_t
        self.embed = nn.Embedding(vocab_size, d_t, padding_idx=0)
        self.rnn = nn.LSTM(d_t, d_t // 2, batch_first=True, bidirectional=True)
        self.word_proj = nn.Linear(d_t, d_t)
        self.sentence_proj = nn.Linear(d_t, d_t)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> TextFeatures:
        if tokens.dim() != 2 or tokens.shape[1] < 1:
            raise InvalidInputError(f"tokens must be (B, N) with N >= 1, got {tuple(tokens.shape)}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise InvalidInputError(
                f"token ids must lie in [0, {self.vocab_size}), got range "
                f"[{int(tokens.min())}, {int(tokens.max())}]"
            )
        lengths = mask.to(torch.int64).sum(dim=1)
        if (lengths < 1).any():
            raise InvalidInputError("every sequence needs at least one valid token")

        embedded = self.embed(tokens)
        packed = pack_padded_sequence(
            embedded, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, (h_n, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        words = self.word_proj(out) * mask.unsqueeze(-1).to(out.dtype)
        # h_n is (2, B, d_t/2): forward state at the true last token, backward at token 0.
        sentence = self.sentence_proj(torch.cat([h_n[0], h_n[1]], dim=1))
        return TextFeatures(words=words, sentence=sentence, mask=mask.bool())


def _conv_stage(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class ImageEncoder(nn.Module):
    """Five stride-2 conv stages; levels 3..5 are tapped, given coordinate
    channels, and projected to d_m."""

    def __init__(self, d_m: int, widths: Tuple[int, ...] = (16, 32, 64, 96, 128)):
        super().__init__()
        if len(widths) != 5:
            raise InvalidInputError(f"trunk needs 5 stage widths, got {len(widths)}")
        self.d_m = d_m
        chans = (3,) + tuple(widths)
        self.stages = nn.ModuleList(
            _conv_stage(chans[i], chans[i + 1]) for i in range(5)
        )
        self.projections = nn.ModuleDict(
            {
                str(level): nn.Conv2d(widths[level - 1] + COORD_CHANNELS, d_m, 1)
                for level in PYRAMID_LEVELS
            }
        )

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise InvalidInputError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise InvalidInputError(f"image sides must be divisible by 32, got {h}x{w}")

        x = images
        taps = {}
        for idx, stage in enumerate(self.stages):
            x = stage(x)
            level = idx + 1
            if level in PYRAMID_LEVELS:
                taps[level] = x

        levels = {}
        for level, feat in taps.items():
            coords = coordinate_map(
                feat.shape[2], feat.shape[3], dtype=feat.dtype, device=feat.device
            )
            coords = coords.permute(2, 0, 1).unsqueeze(0).expand(feat.shape[0], -1, -1, -1)
            levels[level] = self.projections[str(level)](torch.cat([feat, coords], dim=1))
        return FeaturePyramid(levels=levels, strides=dict(LEVEL_STRIDES))
