"""Full grounding model: encoders, fusion, optional suspected-object graph,
prediction head."""

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .encoders import ImageEncoder, TextEncoder
from .fusion import MultiModalFusion, MultiModalState
from .head import PredictionHead
from .sog import GraphDiagnostics, SuspectedObjectGraph


@dataclass
class GroundingOutput:
    """Per-level prediction grids plus the intermediate state for diagnostics."""

    predictions: Dict[int, torch.Tensor]
    state: MultiModalState
    diagnostics: Optional[GraphDiagnostics]


class GroundingModel(nn.Module):
    """One-stage grounder.  With the graph disabled the head reads the fused
    maps directly (the baseline configuration)."""

    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d_m, d_t = cfg.d_m, cfg.resolved_d_t()
        self.text_encoder = TextEncoder(vocab_size, d_t)
        self.image_encoder = ImageEncoder(d_m, cfg.trunk_widths)
        self.fusion = MultiModalFusion(d_m, d_t)
        self.sog = (
            SuspectedObjectGraph(
                d_m,
                d_t,
                k=cfg.k,
                keep_prob=cfg.p,
                dilations=cfg.dilations,
                edge_strategy=cfg.edge_strategy,
                node_strategy=cfg.node_strategy,
            )
            if cfg.sog_enabled
            else None
        )
        self.head = PredictionHead(d_m)

    def forward(
        self,
        images: torch.Tensor,
        tokens: torch.Tensor,
        mask: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> GroundingOutput:
        text = self.text_encoder(tokens, mask)
        pyramid = self.image_encoder(images)
        state = self.fusion(pyramid, text.sentence)
        diagnostics = None
        maps = state.m
        if self.sog is not None:
            maps, diagnostics = self.sog(state, text, generator)
        return GroundingOutput(
            predictions=self.head(maps), state=state, diagnostics=diagnostics
        )
