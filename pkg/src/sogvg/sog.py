"""Suspected object graph over the fused multi-modal maps.

The K most activated cells of the averaged activation map become graph nodes.
Node features aggregate multi-scale context through dilated convolutions and
are modulated by keyword features distilled from the words (keyword-aware node
representation).  Edges are products of node activations; during training the
second factor of each edge can be randomly substituted by another node's
activation (exploration by random connection), which regularizes the graph.
One round of message passing updates the nodes, and the updates are written
back into the pyramid as residuals at the selected cells.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from .encoders import TextFeatures
from .errors import InvalidInputError
from .fusion import FilmLayer, MultiModalState

EDGE_STRATEGIES = ("erc", "original", "reverse", "average", "random")
NODE_STRATEGIES = ("knr", "none", "sentence", "word_average")


@dataclass
class SuspectedRegions:
    """Top-K cells of the averaged grid, most activated first.

    indices: (B, K, 2) long, (row, col) per region
    flat_indices: (B, K) long, row-major positions
    alpha: (B, K) activation values, non-increasing along K
    features: (B, K, C) rows of the averaged map at the selected cells
    """

    indices: torch.Tensor
    flat_indices: torch.Tensor
    alpha: torch.Tensor
    features: torch.Tensor


@dataclass
class GraphDiagnostics:
    """Per-forward record of what the graph saw and built."""

    indices: torch.Tensor
    alpha: torch.Tensor
    alpha_prime: torch.Tensor
    edges: torch.Tensor
    word_weights: Dict[int, torch.Tensor] = field(default_factory=dict)

    def sample_record(self, b: int) -> dict:
        """Plain-python record for one batch element, ready for JSON."""
        return {
            "regions": self.indices[b].tolist(),
            "alpha": [float(a) for a in self.alpha[b]],
            "alpha_prime": [float(a) for a in self.alpha_prime[b]],
            "edges": [[float(e) for e in row] for row in self.edges[b]],
            "word_weights": {
                str(rate): [float(d) for d in weights[b]]
                for rate, weights in self.word_weights.items()
            },
        }


def select_regions(m_bar: torch.Tensor, c_bar: torch.Tensor, k: int) -> SuspectedRegions:
    """Pick the k cells with the largest activation, ties toward smaller
    row-major index.

    Gradients flow into the activation values and the gathered features; the
    indices themselves are discrete and carry none.
    """
    b, c, h, w = m_bar.shape
    if c_bar.shape != (b, 1, h, w):
        raise InvalidInputError(
            f"activation map shape {tuple(c_bar.shape)} does not match features {tuple(m_bar.shape)}"
        )
    if not 1 <= k <= h * w:
        raise InvalidInputError(f"k={k} outside [1, {h * w}] for a {h}x{w} grid")

    flat = c_bar.reshape(b, h * w)
    # Stable descending sort keeps the earlier flat index first among ties.
    sorted_vals, sorted_idx = torch.sort(flat, dim=1, descending=True, stable=True)
    flat_indices = sorted_idx[:, :k]
    alpha = sorted_vals[:, :k]
    rows = torch.div(flat_indices, w, rounding_mode="floor")
    cols = flat_indices % w
    gather_idx = flat_indices.unsqueeze(1).expand(b, c, k)
    features = m_bar.reshape(b, c, h * w).gather(2, gather_idx).transpose(1, 2)
    return SuspectedRegions(
        indices=torch.stack([rows, cols], dim=-1),
        flat_indices=flat_indices,
        alpha=alpha,
        features=features,
    )


class ContextAggregator(nn.Module):
    """Per-rate dilated 3x3 convs (no bias) evaluated at the selected cells.

    Zero padding equal to the dilation rate keeps the output on the input grid,
    so neighborhoods reaching past the border read zeros.
    """

    def __init__(self, d_m: int, dilations: Tuple[int, ...] = (1, 6, 12)):
        super().__init__()
        if len(set(dilations)) != len(dilations) or any(s < 1 for s in dilations):
            raise InvalidInputError(f"dilation rates must be distinct positives, got {dilations}")
        self.dilations = tuple(dilations)
        self.convs = nn.ModuleDict(
            {
                str(rate): nn.Conv2d(d_m, d_m, 3, padding=rate, dilation=rate, bias=False)
                for rate in self.dilations
            }
        )

    def forward(
        self, m_bar: torch.Tensor, flat_indices: torch.Tensor
    ) -> Dict[int, torch.Tensor]:
        b, c, h, w = m_bar.shape
        k = flat_indices.shape[1]
        gather_idx = flat_indices.unsqueeze(1).expand(b, c, k)
        out = {}
        for rate in self.dilations:
            full = self.convs[str(rate)](m_bar)
            out[rate] = full.reshape(b, c, h * w).gather(2, gather_idx).transpose(1, 2)
        return out


class KeywordAttention(nn.Module):
    """Distill a keyword feature from the words, guided by pooled region context.

    Scores each word against the mean region feature, softmaxes over valid
    words, and returns the weights plus the weighted word sum.
    """

    def __init__(self, d_m: int, d_t: int):
        super().__init__()
        self.region_proj = nn.Linear(d_m, d_t) if d_m != d_t else None

    def forward(
        self, context: torch.Tensor, words: torch.Tensor, mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if (~mask).all(dim=1).any():
            raise InvalidInputError("attention needs at least one unpadded word per sample")
        pooled = context.mean(dim=1)
        if self.region_proj is not None:
            pooled = self.region_proj(pooled)
        logits = torch.bmm(words, pooled.unsqueeze(-1)).squeeze(-1)
        logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=1)
        keyword = torch.bmm(weights.unsqueeze(1), words).squeeze(1)
        return weights, keyword


def edge_transform(
    alpha: torch.Tensor,
    strategy: str,
    keep_prob: float,
    generator: Optional[torch.Generator],
    training: bool,
) -> torch.Tensor:
    """Produce the second edge factor alpha' from alpha.

    In evaluation mode every strategy collapses to the identity, so edges are
    the deterministic outer product.  During training:
      erc          keep alpha_j with probability keep_prob, otherwise substitute
                   a uniformly drawn other entry (resampled every call)
      original     identity
      reverse      alpha reversed along K
      average      every entry replaced by the mean over K
      random       standard normal draws
    """
    if strategy not in EDGE_STRATEGIES:
        raise InvalidInputError(f"unknown edge strategy {strategy!r}, expected one of {EDGE_STRATEGIES}")
    if strategy in ("erc", "reverse") and alpha.shape[1] < 2:
        raise InvalidInputError(f"strategy {strategy!r} needs at least 2 regions")
    if not training or strategy == "original":
        return alpha

    b, k = alpha.shape
    if strategy == "reverse":
        return alpha.flip(1)
    if strategy == "average":
        return alpha.mean(dim=1, keepdim=True).expand(b, k)
    if strategy == "random":
        return torch.randn(b, k, generator=generator, dtype=alpha.dtype, device=alpha.device)

    if k < 2:
        raise InvalidInputError("substitution needs at least 2 regions")
    if not 0.0 <= keep_prob <= 1.0:
        raise InvalidInputError(f"keep probability must lie in [0, 1], got {keep_prob}")
    keep = (
        torch.rand(b, k, generator=generator, device=alpha.device) < keep_prob
    )
    # Index plus uniform offset in [1, K-1] mod K is uniform over the other entries.
    offsets = torch.randint(1, k, (b, k), generator=generator, device=alpha.device)
    positions = torch.arange(k, device=alpha.device).unsqueeze(0)
    substitute = alpha.gather(1, (positions + offsets) % k)
    return torch.where(keep, alpha, substitute)


def build_edges(alpha: torch.Tensor, alpha_prime: torch.Tensor) -> torch.Tensor:
    """e_ij = alpha_i * alpha'_j, shape (B, K, K); self-loops included."""
    return alpha.unsqueeze(2) * alpha_prime.unsqueeze(1)


def message_pass(nodes: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """One aggregation round: updated node k = sum_j e_jk * v_j."""
    if nodes.shape[:2] != edges.shape[:2] or edges.shape[1] != edges.shape[2]:
        raise InvalidInputError(
            f"nodes {tuple(nodes.shape)} and edges {tuple(edges.shape)} disagree"
        )
    return torch.bmm(edges.transpose(1, 2), nodes)


class SuspectedObjectGraph(nn.Module):
    """Region selection, node construction, edge construction, one message
    pass, and residual fuse-back into the pyramid levels."""

    def __init__(
        self,
        d_m: int,
        d_t: int,
        k: int = 6,
        keep_prob: float = 0.5,
        dilations: Tuple[int, ...] = (1, 6, 12),
        edge_strategy: str = "erc",
        node_strategy: str = "knr",
    ):
        super().__init__()
        if edge_strategy not in EDGE_STRATEGIES:
            raise InvalidInputError(f"unknown edge strategy {edge_strategy!r}")
        if node_strategy not in NODE_STRATEGIES:
            raise InvalidInputError(f"unknown node strategy {node_strategy!r}")
        if k < 1 or (edge_strategy in ("erc", "reverse") and k < 2):
            raise InvalidInputError(f"k={k} too small for strategy {edge_strategy!r}")
        if not 0.0 <= keep_prob <= 1.0:
            raise InvalidInputError(f"keep probability must lie in [0, 1], got {keep_prob}")
        self.k = k
        self.keep_prob = keep_prob
        self.edge_strategy = edge_strategy
        self.node_strategy = node_strategy
        self.context = ContextAggregator(d_m, dilations)
        self.attention = KeywordAttention(d_m, d_t)
        self.node_film = FilmLayer(d_m, d_t)
        self.node_out = nn.Linear(d_m, d_m)
        # Zero bias so an all-zero message update leaves the maps untouched.
        nn.init.zeros_(self.node_out.bias)

    @property
    def stochastic_edges_active(self) -> bool:
        return self.training and self.edge_strategy in ("erc", "random")

    def _build_nodes(
        self, contexts: Dict[int, torch.Tensor], text: TextFeatures
    ) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
        word_weights: Dict[int, torch.Tensor] = {}
        if self.node_strategy == "none":
            return torch.stack(list(contexts.values())).mean(dim=0), word_weights

        modulated = []
        for rate, context in contexts.items():
            if self.node_strategy == "knr":
                weights, keyword = self.attention(context, text.words, text.mask)
                word_weights[rate] = weights
            elif self.node_strategy == "sentence":
                keyword = text.sentence
            else:  # word_average
                valid = text.mask.unsqueeze(-1).to(text.words.dtype)
                keyword = (text.words * valid).sum(dim=1) / valid.sum(dim=1)
            modulated.append(self.node_film(context, keyword))
        return torch.stack(modulated).mean(dim=0), word_weights

    def _fuse_back(
        self,
        maps: Dict[int, torch.Tensor],
        regions: SuspectedRegions,
        residual: torch.Tensor,
    ) -> Dict[int, torch.Tensor]:
        rows = regions.indices[..., 0]
        cols = regions.indices[..., 1]
        fused = {}
        for level, level_map in maps.items():
            b, c, h, w = level_map.shape
            if level == 3:
                # A stride-16 cell covers a 2x2 block here; use its top-left cell.
                r, col = rows * 2, cols * 2
            elif level == 4:
                r, col = rows, cols
            elif level == 5:
                r, col = torch.div(rows, 2, rounding_mode="floor"), torch.div(
                    cols, 2, rounding_mode="floor"
                )
            else:
                raise InvalidInputError(f"unexpected pyramid level {level}")
            flat = (r * w + col).unsqueeze(1).expand(b, c, regions.alpha.shape[1])
            fused[level] = (
                level_map.reshape(b, c, h * w)
                .scatter_add(2, flat, residual.transpose(1, 2))
                .reshape(b, c, h, w)
            )
        return fused

    def forward(
        self,
        state: MultiModalState,
        text: TextFeatures,
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[Dict[int, torch.Tensor], GraphDiagnostics]:
        regions = select_regions(state.m_bar, state.c_bar, self.k)
        contexts = self.context(state.m_bar, regions.flat_indices)
        nodes, word_weights = self._build_nodes(contexts, text)
        alpha_prime = edge_transform(
            regions.alpha, self.edge_strategy, self.keep_prob, generator, self.training
        )
        edges = build_edges(regions.alpha, alpha_prime)
        updated = message_pass(nodes, edges)
        fused = self._fuse_back(state.m, regions, self.node_out(updated))
        diagnostics = GraphDiagnostics(
            indices=regions.indices.detach(),
            alpha=regions.alpha.detach(),
            alpha_prime=alpha_prime.detach(),
            edges=edges.detach(),
            word_weights={r: ww.detach() for r, ww in word_weights.items()},
        )
        return fused, diagnostics
