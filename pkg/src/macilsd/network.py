"""Lightweight two-stream cross-modal attention network and its visual twin.

The audio-visual network projects each modality to a shared hidden size,
runs one attention block in both cross directions with shared Q/K/V/O
projections, and scores snippets with per-modality affine heads.  The
fused logit is the elementwise sum of the unimodal logits; the video score
is the mean of the top-K snippet sigmoids with K = floor(T/16) + 1.

The visual twin is the same block run as plain self-attention on visual
features alone; its parameters are shape-identical to the visual path of
the audio-visual network so they can be EMA-infused layer by layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractViolation


@dataclass
class NetworkConfig:
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * d_model
    dropout: float = 0.1
    d_audio: int = 128
    d_visual: int = 1024

    def __post_init__(self) -> None:
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        if self.d_model < 1 or self.n_heads < 1 or self.ffn_dim < 1:
            raise ConfigError("d_model, n_heads, ffn_dim must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.d_audio < 1 or self.d_visual < 1:
            raise ConfigError("input dims must be >= 1")


@dataclass
class LogitsBundle:
    """Per-video forward outputs: embeddings, unimodal logits, and video score."""

    h_a: torch.Tensor  # (T, d_model)
    h_v: torch.Tensor  # (T, d_model)
    l_a: torch.Tensor  # (T,)
    l_v: torch.Tensor  # (T,)
    l_fused: torch.Tensor  # (T,)
    snippet_scores: torch.Tensor  # (T,), sigmoid of fused logits
    p: torch.Tensor  # scalar video score in (0, 1)


def k_for(T: int) -> int:
    """MIL top-K size: K = floor(T/16) + 1."""
    return T // 16 + 1


def kmax_score(snippet_scores: torch.Tensor) -> torch.Tensor:
    """Mean of the K largest snippet scores."""
    k = k_for(snippet_scores.shape[0])
    return torch.topk(snippet_scores, k).values.mean()


class AttentionBlock(nn.Module):
    """One transformer encoder block with externally supplied key/value input.

    Post-norm layout: multi-head scaled dot-product attention, output
    projection, dropout, residual + layer norm, then a two-layer ReLU FFN
    with dropout, residual + layer norm.  Queries come from `q_in`; keys
    and values from `kv_in` (pass the same tensor for self-attention).
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.p_drop = cfg.dropout
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)
        self.norm_attn = nn.LayerNorm(d)
        self.norm_ffn = nn.LayerNorm(d)

    def attend(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        """Multi-head attention up to (not including) the output projection."""
        *lead, T, d = q_in.shape
        h = self.n_heads
        dh = d // h
        q = self.w_q(q_in).view(*lead, T, h, dh).transpose(-3, -2)
        k = self.w_k(kv_in).view(*lead, T, h, dh).transpose(-3, -2)
        v = self.w_v(kv_in).view(*lead, T, h, dh).transpose(-3, -2)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        return (weights @ v).transpose(-3, -2).reshape(*lead, T, d)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor,
                train_mode: bool = False) -> torch.Tensor:
        if q_in.ndim < 2 or q_in.shape != kv_in.shape:
            raise ContractViolation(
                f"attention inputs must share shape (..., T, d_model); "
                f"got {tuple(q_in.shape)} and {tuple(kv_in.shape)}"
            )
        att = self.w_o(self.attend(q_in, kv_in))
        att = F.dropout(att, self.p_drop, training=train_mode)
        x = self.norm_attn(q_in + att)
        f = F.dropout(F.relu(self.ffn_in(x)), self.p_drop, training=train_mode)
        f = self.ffn_out(f)
        return self.norm_ffn(x + f)


class AVNetwork(nn.Module):
    """Two-stream audio-visual network with shared cross-attention parameters."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_a = nn.Linear(cfg.d_audio, cfg.d_model)
        self.proj_v = nn.Linear(cfg.d_visual, cfg.d_model)
        self.block = AttentionBlock(cfg)
        self.head_a = nn.Linear(cfg.d_model, 1)
        self.head_v = nn.Linear(cfg.d_model, 1)

    def forward(self, audio: torch.Tensor, visual: torch.Tensor,
                train_mode: bool = False) -> LogitsBundle:
        if audio.shape[0] != visual.shape[0]:
            raise ContractViolation(
                f"snippet count mismatch: audio T={audio.shape[0]}, "
                f"visual T={visual.shape[0]}"
            )
        f_a = self.proj_a(audio)
        f_v = self.proj_v(visual)
        h_a = self.block(f_a, f_v, train_mode)
        h_v = self.block(f_v, f_a, train_mode)
        l_a = self.head_a(h_a).squeeze(-1)
        l_v = self.head_v(h_v).squeeze(-1)
        l_fused = l_a + l_v
        snippet_scores = torch.sigmoid(l_fused)
        return LogitsBundle(
            h_a=h_a, h_v=h_v, l_a=l_a, l_v=l_v, l_fused=l_fused,
            snippet_scores=snippet_scores, p=kmax_score(snippet_scores),
        )

    def forward_batch(self, audio: torch.Tensor, visual: torch.Tensor,
                      train_mode: bool = False) -> list[LogitsBundle]:
        """Vectorized forward over a (B, T, d) stack of equal-length videos.

        Returns one bundle per video, numerically identical to per-video
        `forward` calls (dropout pattern aside).
        """
        if audio.ndim != 3 or visual.ndim != 3 or audio.shape[:2] != visual.shape[:2]:
            raise ContractViolation(
                f"expected (B, T, d) stacks with matching B and T; "
                f"got {tuple(audio.shape)} and {tuple(visual.shape)}"
            )
        f_a = self.proj_a(audio)
        f_v = self.proj_v(visual)
        h_a = self.block(f_a, f_v, train_mode)
        h_v = self.block(f_v, f_a, train_mode)
        l_a = self.head_a(h_a).squeeze(-1)
        l_v = self.head_v(h_v).squeeze(-1)
        l_fused = l_a + l_v
        scores = torch.sigmoid(l_fused)
        k = k_for(audio.shape[1])
        p = torch.topk(scores, k, dim=-1).values.mean(dim=-1)
        return [
            LogitsBundle(
                h_a=h_a[i], h_v=h_v[i], l_a=l_a[i], l_v=l_v[i],
                l_fused=l_fused[i], snippet_scores=scores[i], p=p[i],
            )
            for i in range(audio.shape[0])
        ]


class VisualTwin(nn.Module):
    """Self-attention twin of the visual path, trained only for distillation."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_v = nn.Linear(cfg.d_visual, cfg.d_model)
        self.block = AttentionBlock(cfg)
        self.head_v = nn.Linear(cfg.d_model, 1)

    def forward(self, visual: torch.Tensor,
                train_mode: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        f_v = self.proj_v(visual)
        h_v = self.block(f_v, f_v, train_mode)
        l_v = self.head_v(h_v).squeeze(-1)
        p = kmax_score(torch.sigmoid(l_v))
        return h_v, l_v, p

    def forward_batch(self, visual: torch.Tensor,
                      train_mode: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Vectorized twin forward over a (B, T, d_visual) stack."""
        if visual.ndim != 3:
            raise ContractViolation(f"expected (B, T, d) stack, got {tuple(visual.shape)}")
        f_v = self.proj_v(visual)
        h_v = self.block(f_v, f_v, train_mode)
        l_v = self.head_v(h_v).squeeze(-1)
        scores = torch.sigmoid(l_v)
        k = k_for(visual.shape[1])
        p = torch.topk(scores, k, dim=-1).values.mean(dim=-1)
        return h_v, l_v, p


def _init_module(module: nn.Module, generator: torch.Generator) -> None:
    # Fan-in-scaled uniform weights, zero biases; layer norms stay (1, 0).
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            fan_in = sub.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=generator)
                sub.bias.zero_()


def init_av_network(cfg: NetworkConfig, seed: int) -> AVNetwork:
    """Build an AV network with deterministic seed-derived initial weights."""
    net = AVNetwork(cfg)
    gen = torch.Generator().manual_seed(seed)
    _init_module(net, gen)
    return net


def init_visual_twin(cfg: NetworkConfig, seed: int) -> VisualTwin:
    """Build the visual twin with deterministic seed-derived initial weights."""
    net = VisualTwin(cfg)
    gen = torch.Generator().manual_seed(seed)
    _init_module(net, gen)
    return net


def count_parameters(module: nn.Module) -> int:
    """Exact number of trainable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
