"""EMA self-distillation: infuse visual-twin parameters into the AV network.

Every shape-shared layer (visual projection, attention block, FFN, norms,
visual head) is updated elementwise as av <- m * av + (1 - m) * twin.  The
audio projection and audio head have no twin counterpart and are never
touched.  The momentum m follows a cosine schedule rising from m_hat to 1
over the training horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ContractViolation
from .network import AVNetwork, VisualTwin

# Twin module names coincide with their AV counterparts, so the default map
# is the identity on the twin's parameter names.
DEFAULT_SHARED_PREFIXES = ("proj_v", "block", "head_v")


def default_layer_map(twin: VisualTwin) -> list[tuple[str, str]]:
    return [
        (name, name)
        for name, _ in twin.named_parameters()
        if name.startswith(DEFAULT_SHARED_PREFIXES)
    ]


@dataclass
class DistillState:
    m_hat: float = 0.91
    total_steps: int = 1
    layer_map: list[tuple[str, str]] | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.m_hat <= 1.0:
            raise ConfigError("m_hat must lie in [0, 1]")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")


def cosine_momentum(step: int, state: DistillState) -> float:
    """Momentum at `step`: m_hat at 0, rising along a half cosine to 1."""
    if not 0 <= step <= state.total_steps:
        raise ContractViolation(
            f"step {step} outside [0, {state.total_steps}]"
        )
    frac = step / state.total_steps
    return 1.0 - (1.0 - state.m_hat) * (1.0 + math.cos(math.pi * frac)) / 2.0


def ema_infuse(av: AVNetwork, twin: VisualTwin, m: float,
               layer_map: list[tuple[str, str]] | None = None) -> None:
    """In-place EMA update of the AV network's shape-shared parameters."""
    if layer_map is None:
        layer_map = default_layer_map(twin)
    twin_params = dict(twin.named_parameters())
    av_params = dict(av.named_parameters())
    for twin_name, av_name in layer_map:
        if twin_name not in twin_params or av_name not in av_params:
            raise ContractViolation(f"unknown parameter in layer map: "
                                    f"({twin_name!r}, {av_name!r})")
        src = twin_params[twin_name]
        dst = av_params[av_name]
        if src.shape != dst.shape:
            raise ContractViolation(
                f"layer map shape mismatch: {twin_name} {tuple(src.shape)} vs "
                f"{av_name} {tuple(dst.shape)}"
            )
        if m != 1.0:  # m == 1 must be a bit-exact no-op
            with torch.no_grad():
                dst.mul_(m).add_(src, alpha=1.0 - m)
