"""Language-conditioned fusion of the visual pyramid.

Each pyramid level is modulated by the sentence feature through a
feature-wise affine transform (per-level scale and shift projections), then a
shared single-channel conv with ReLU turns every level into a non-negative
activation map.  The three levels are collapsed onto the stride-16 grid by
average-pooling the finer level and nearest-upsampling the coarser one, and
averaged into a single multi-modal map and a single activation map.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import PYRAMID_LEVELS, FeaturePyramid
from .errors import InvalidInputError


class FilmLayer(nn.Module):
    """Feature-wise affine modulation: out = gamma(cond) * x + beta(cond).

    Accepts feature maps (B, C, H, W) with channels in dim 1, or vector sets
    (B, K, C) with channels last; gamma and beta broadcast accordingly.
    """

    def __init__(self, feature_dim: int, condition_dim: int):
        super().__init__()
        self.gamma_proj = nn.Linear(condition_dim, feature_dim)
        self.beta_proj = nn.Linear(condition_dim, feature_dim)

    def forward(self, x: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        gamma = self.gamma_proj(condition)
        beta = self.beta_proj(condition)
        if x.dim() == 4:
            gamma = gamma[:, :, None, None]
            beta = beta[:, :, None, None]
        elif x.dim() == 3:
            gamma = gamma[:, None, :]
            beta = beta[:, None, :]
        else:
            raise InvalidInputError(f"expected (B, C, H, W) or (B, K, C), got {tuple(x.shape)}")
        return gamma * x + beta


@dataclass
class MultiModalState:
    """Per-level fused maps and activation maps plus their stride-16 averages.

    m: level -> (B, d_m, h_l, w_l) language-modulated features
    c: level -> (B, 1, h_l, w_l) non-negative activation maps
    m_bar: (B, d_m, h4, w4) average of the three m levels on the level-4 grid
    c_bar: (B, 1, h4, w4) average of the three c levels on the level-4 grid
    """

    m: Dict[int, torch.Tensor]
    c: Dict[int, torch.Tensor]
    m_bar: torch.Tensor
    c_bar: torch.Tensor


def pyramid_average(maps: Dict[int, torch.Tensor]) -> torch.Tensor:
    """Collapse level 3/4/5 maps onto the level-4 grid and average them.

    Level 3 is average-pooled 2x2, level 5 is nearest-neighbor upsampled 2x.
    The operation is linear in the inputs.
    """
    down = F.avg_pool2d(maps[3], kernel_size=2)
    up = F.interpolate(maps[5], scale_factor=2, mode="nearest")
    if down.shape != maps[4].shape or up.shape != maps[4].shape:
        raise InvalidInputError(
            "pyramid levels are not stride-consistent: "
            f"{tuple(maps[3].shape)}, {tuple(maps[4].shape)}, {tuple(maps[5].shape)}"
        )
    return (down + maps[4] + up) / 3.0


class MultiModalFusion(nn.Module):
    """Per-level FiLM against the sentence feature plus a shared activation conv."""

    def __init__(self, d_m: int, d_t: int):
        super().__init__()
        self.films = nn.ModuleDict(
            {str(level): FilmLayer(d_m, d_t) for level in PYRAMID_LEVELS}
        )
        # One conv for all levels: the activation measure is level-agnostic.
        self.activation_conv = nn.Conv2d(d_m, 1, 1)

    def activation_map(self, fused: torch.Tensor) -> torch.Tensor:
        return F.relu(self.activation_conv(fused))

    def forward(self, pyramid: FeaturePyramid, sentence: torch.Tensor) -> MultiModalState:
        m = {
            level: self.films[str(level)](pyramid.levels[level], sentence)
            for level in PYRAMID_LEVELS
        }
        c = {level: self.activation_map(m[level]) for level in PYRAMID_LEVELS}
        return MultiModalState(m=m, c=c, m_bar=pyramid_average(m), c_bar=pyramid_average(c))
