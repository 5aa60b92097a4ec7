from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from hierrisk.config import HyperParams
from hierrisk.features import D_ST, D_T, enhance_features
from hierrisk.remote_sensing import RSEnhancer, encode_rs_features
from hierrisk.window import DataError

# Graph signal channels per view: risk, inflow, outflow.
D_C = 3


def _flatten_frames(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    lead = tuple(x.shape[:-2])
    return x.reshape(-1, *x.shape[-2:]), lead


class GridConvEncoder(nn.Module):
    """
    Same-padded conv -> ReLU layers over the I x J raster of each frame.

    Input and output are region-major: (..., N, D) with N = rows * cols.
    """

    def __init__(self, in_width: int, width: int, layers: int, kernel: int, rows: int, cols: int):
        super().__init__()
        self.rows, self.cols = rows, cols
        convs: list[nn.Module] = []
        prev = in_width
        for _ in range(layers):
            convs += [nn.Conv2d(prev, width, kernel, padding=kernel // 2), nn.ReLU()]
            prev = width
        self.net = nn.Sequential(*convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        frames, lead = _flatten_frames(x)
        f, n, d = frames.shape
        if n != self.rows * self.cols:
            raise DataError(f"grid encoder expects {self.rows * self.cols} regions, got {n}")
        raster = frames.transpose(1, 2).reshape(f, d, self.rows, self.cols)
        out = self.net(raster)
        out = out.reshape(f, out.shape[1], n).transpose(1, 2)
        return out.reshape(*lead, n, out.shape[-1])


class PointwiseEncoder(nn.Module):
    """Per-node Linear -> ReLU layers for levels without a raster layout."""

    def __init__(self, in_width: int, width: int, layers: int):
        super().__init__()
        mods: list[nn.Module] = []
        prev = in_width
        for _ in range(layers):
            mods += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        self.net = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class GraphEncoder(nn.Module):
    """E = ReLU(ReLU(G W0 + b0) W1 + b1), applied to every frame."""

    def __init__(self, in_width: int, width: int):
        super().__init__()
        self.inner = nn.Linear(in_width, width)
        self.outer = nn.Linear(width, width)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.outer(torch.relu(self.inner(g))))


def multilevel_embedding_fusion(
    embeddings: Sequence[torch.Tensor],
    transforms: Sequence[torch.Tensor],
    lambda_f: float,
    lambda_c: float,
) -> list[torch.Tensor]:
    """
    Exchange information between adjacent levels, finest pair first.

    For each pair both sides are updated from the values current before the
    update; the coarse result then feeds the next pair as its fine side.
    Embeddings are (..., N_g, d); transforms[g] is (N_g, N_{g+1}).
    """
    if len(transforms) != len(embeddings) - 1:
        raise DataError("need one transform per adjacent level pair")
    fused = list(embeddings)
    for g, m in enumerate(transforms):
        fine, coarse = fused[g], fused[g + 1]
        if m.shape != (fine.shape[-2], coarse.shape[-2]):
            raise DataError(f"transform {g + 1} has shape {tuple(m.shape)}")
        m = m.to(fine.dtype)
        up = torch.einsum("nc,...nd->...cd", m, fine)
        down = torch.einsum("nc,...cd->...nd", m, coarse)
        fused[g + 1] = coarse + lambda_f * up
        fused[g] = fine + lambda_c * down
    return fused


def positional_encoding(
    length: int, width: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """PE[t, 2k] = sin(t / 10000^(2k/d)), PE[t, 2k+1] = cos(t / 10000^(2k/d))."""
    if width % 2:
        raise DataError("positional encoding width must be even")
    t = torch.arange(length, dtype=torch.float64)[:, None]
    k = torch.arange(0, width, 2, dtype=torch.float64)
    angle = t / torch.pow(10000.0, k / width)
    pe = torch.zeros(length, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe.to(dtype)


class SelfAttentionBlock(nn.Module):
    """Scaled dot-product attention over time, residual + LN, FFN, residual + LN."""

    def __init__(self, width: int, ff_width: int):
        super().__init__()
        self.width = width
        self.w_q = nn.Linear(width, width, bias=False)
        self.w_k = nn.Linear(width, width, bias=False)
        self.w_v = nn.Linear(width, width, bias=False)
        self.norm1 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_width), nn.ReLU(), nn.Linear(ff_width, width))
        self.norm2 = nn.LayerNorm(width)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        """(..., T, T) softmax over the last axis."""
        q, k = self.w_q(x), self.w_k(x)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.width)
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.scores(x) @ self.w_v(x)
        h = self.norm1(x + z)
        return self.norm2(h + self.ff(h))


class AttentionStack(nn.Module):
    """Positional encoding once, then the blocks in order; input (B, T, N, d)."""

    def __init__(self, width: int, ff_width: int, n_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(SelfAttentionBlock(width, ff_width) for _ in range(n_blocks))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        x = seq.transpose(-3, -2)  # (B, N, T, d): attend over time per region
        x = x + positional_encoding(x.shape[-2], x.shape[-1], x.dtype).to(x.device)
        for block in self.blocks:
            x = block(x)
        return x.transpose(-3, -2)


class AdaptiveTemporalAttention(nn.Module):
    """alpha = softmax_T(ReLU(seq W_H + temporal W_T + b)); output = sum_t alpha_t seq_t."""

    def __init__(self, width: int, temporal_width: int = D_T):
        super().__init__()
        self.w_h = nn.Linear(width, 1, bias=False)
        self.w_t = nn.Linear(temporal_width, 1)

    def weights(self, seq: torch.Tensor, temporal: torch.Tensor) -> torch.Tensor:
        # seq (B, T, N, d), temporal (B, D_T) broadcast over time and regions.
        score = self.w_h(seq).squeeze(-1) + self.w_t(temporal)[:, :, None]
        return torch.softmax(torch.relu(score), dim=1)

    def forward(self, seq: torch.Tensor, temporal: torch.Tensor) -> torch.Tensor:
        alpha = self.weights(seq, temporal)
        return (alpha[..., None] * seq).sum(dim=1)


class MeanPooling(nn.Module):
    def forward(self, seq: torch.Tensor, temporal: torch.Tensor) -> torch.Tensor:
        return seq.mean(dim=1)


class FusionHead(nn.Module):
    """Risk = FC(W1 H + W2 E); occurrence probability from the same fused vector."""

    def __init__(self, width: int):
        super().__init__()
        self.w1 = nn.Linear(width, width, bias=False)
        self.w2 = nn.Linear(width, width, bias=False)
        self.fc = nn.Linear(width, 1)
        self.occurrence = nn.Linear(width, 1)

    def forward(
        self, h_hat: torch.Tensor, e_hat: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if h_hat.shape != e_hat.shape:
            raise DataError(f"branch shapes differ: {tuple(h_hat.shape)} vs {tuple(e_hat.shape)}")
        fused = self.w1(h_hat) + self.w2(e_hat)
        risk = self.fc(fused).squeeze(-1)
        prob = torch.sigmoid(self.occurrence(fused)).squeeze(-1)
        return risk, prob


@dataclass
class ModelOutput:
    preds: list[torch.Tensor]  # per level, (B, N_g)
    probs: list[torch.Tensor]


def mean_pool_matrix(membership: np.ndarray, n_coarse: int) -> np.ndarray:
    """(N_1, N_g) matrix whose transpose averages fine rows per cluster."""
    m = np.zeros((membership.size, n_coarse))
    m[np.arange(membership.size), membership] = 1.0
    return m / m.sum(axis=0, keepdims=True)


def level_memberships(transforms: Sequence[np.ndarray], n_fine: int) -> list[np.ndarray]:
    """Node of every finest region at each level, read off the one-hot transforms."""
    labels = np.arange(n_fine)
    out = []
    for m in transforms:
        out.append(labels)
        labels = np.asarray(m).argmax(axis=1)[labels]
    out.append(labels)
    return out


def _temporal_pooling(h: HyperParams) -> nn.Module:
    if h.use_temporal_attention:
        return AdaptiveTemporalAttention(h.model_width)
    return MeanPooling()


class HierRiskNet(nn.Module):
    def __init__(
        self,
        h: HyperParams,
        level_sizes: Sequence[int],
        transforms: Sequence[np.ndarray],
        grid_shape: tuple[int, int],
        *,
        rs_tiles: torch.Tensor | None = None,
    ):
        super().__init__()
        self.n_levels = len(level_sizes)
        if len(transforms) != self.n_levels - 1:
            raise DataError("need one transform per adjacent level pair")
        self.level_sizes = tuple(level_sizes)
        self.use_graph = h.use_graph_views
        self.lambda_f, self.lambda_c = h.effective_lambdas
        d = h.model_width
        rows, cols = grid_shape

        self.rs: RSEnhancer | None = None
        in_width = D_ST
        if h.use_rs:
            if rs_tiles is None:
                raise DataError("remote-sensing enhancement enabled but no tiles given")
            self.rs = RSEnhancer(
                int(rs_tiles.shape[1]), h.rs_conv_channels, h.rs_tile, h.rs_channels
            )
            self.register_buffer("rs_tiles", rs_tiles.float(), persistent=False)
            in_width += h.rs_channels
            memberships = level_memberships(transforms, level_sizes[0])
            for g, (membership, n_g) in enumerate(zip(memberships, level_sizes)):
                pool = torch.as_tensor(mean_pool_matrix(np.asarray(membership), n_g))
                self.register_buffer(f"rs_pool_{g}", pool.float(), persistent=False)

        for g, m in enumerate(transforms):
            self.register_buffer(f"m_tran_{g}", torch.as_tensor(m).float(), persistent=False)

        region: list[nn.Module] = [
            GridConvEncoder(in_width, d, h.conv_layers, h.conv_kernel, rows, cols)
        ]
        region += [PointwiseEncoder(in_width, d, h.conv_layers) for _ in level_sizes[1:]]
        self.region_encoders = nn.ModuleList(region)
        self.region_attention = nn.ModuleList(
            AttentionStack(d, h.ff_width, h.attention_blocks) for _ in level_sizes
        )
        self.region_pooling = nn.ModuleList(_temporal_pooling(h) for _ in level_sizes)
        if self.use_graph:
            graph_width = D_C * len(h.views)
            self.graph_encoders = nn.ModuleList(GraphEncoder(graph_width, d) for _ in level_sizes)
            self.graph_attention = nn.ModuleList(
                AttentionStack(d, h.ff_width, h.attention_blocks) for _ in level_sizes
            )
            self.graph_pooling = nn.ModuleList(_temporal_pooling(h) for _ in level_sizes)
        self.heads = nn.ModuleList(FusionHead(d) for _ in level_sizes)

    def transforms(self) -> list[torch.Tensor]:
        return [getattr(self, f"m_tran_{g}") for g in range(self.n_levels - 1)]

    def rs_features(self) -> list[torch.Tensor] | None:
        """F_rs per level; coarse levels average their member regions."""
        if self.rs is None:
            return None
        f_rs = encode_rs_features(self.rs_tiles, self.rs)
        pools = [getattr(self, f"rs_pool_{g}") for g in range(self.n_levels)]
        return [pool.to(f_rs.dtype).T @ f_rs for pool in pools]

    def forward(
        self,
        st: Sequence[torch.Tensor],
        graph: Sequence[torch.Tensor] | None,
        temporal: torch.Tensor,
    ) -> ModelOutput:
        """
        st[g]: (B, T, N_g, D_ST) window features, graph[g]: (B, T, N_g, 3V)
        graph signals, temporal: (B, D_T) features of the target interval.
        """
        if len(st) != self.n_levels:
            raise DataError(f"model has {self.n_levels} levels, got {len(st)} inputs")
        f_rs = self.rs_features()
        encoded_h = []
        for g, x in enumerate(st):
            if x.shape[-2] != self.level_sizes[g]:
                raise DataError(f"level {g + 1} has {self.level_sizes[g]} nodes, got {x.shape[-2]}")
            if f_rs is not None:
                x = enhance_features(x, f_rs[g])
            encoded_h.append(self.region_encoders[g](x))

        encoded_e: list[torch.Tensor] = []
        if self.use_graph:
            if graph is None or len(graph) != self.n_levels:
                raise DataError("graph signals missing for some levels")
            encoded_e = [enc(gs) for enc, gs in zip(self.graph_encoders, graph)]
            encoded_e = multilevel_embedding_fusion(
                encoded_e, self.transforms(), self.lambda_f, self.lambda_c
            )

        preds, probs = [], []
        for g in range(self.n_levels):
            h_hat = self.region_pooling[g](self.region_attention[g](encoded_h[g]), temporal)
            if self.use_graph:
                e_seq = self.graph_attention[g](encoded_e[g])
                e_hat = self.graph_pooling[g](e_seq, temporal)
            else:
                e_hat = torch.zeros_like(h_hat)
            risk, prob = self.heads[g](h_hat, e_hat)
            preds.append(risk)
            probs.append(prob)
        return ModelOutput(preds=preds, probs=probs)
