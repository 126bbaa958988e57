"""Modality-aware contrastive instance learning over unimodal semi-bags.

Within a mini-batch, each video predicted violent (p > 0.5) contributes, per
modality, the indices of its K highest unimodal logits as its violent
semi-bag; each video predicted normal contributes its top-K indices to a
batch-wide normal instance pool; every video contributes its bottom-K
indices to a batch-wide background pool.  K is the MIL size floor(T/16)+1.
Ranking ties break toward the lower snippet index.

The contrastive objective treats the two modalities' violent semi-bag mean
embeddings of the same video as a positive pair and pits the anchor against
opposite-modality normal-pool instances (v2n) or background-pool instances
(v2b) under a temperature-scaled InfoNCE with cosine similarity.  Per-term
sums are normalized by the number of violent videos in the batch, and the
two terms are ramped linearly per epoch: lambda(t) = min(r * t, max_weight).

The module is backbone-agnostic: any model exposing per-snippet embeddings,
unimodal logits, and a video score can feed it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractViolation, DegenerateInputError
from .network import LogitsBundle, k_for

MODALITIES = ("a", "v")


@dataclass
class RampSchedule:
    r: float = 0.1
    max_v2n: float = 1.5
    max_v2b: float = 1.5
    tau: float = 0.1

    def __post_init__(self) -> None:
        if self.r <= 0:
            raise ConfigError("ramp ratio r must be > 0")
        if self.max_v2n < 0 or self.max_v2b < 0:
            raise ConfigError("maximum loss weights must be >= 0")
        if self.tau <= 0:
            raise ConfigError("temperature tau must be > 0")

    def weight_v2n(self, epoch: int) -> float:
        return min(self.r * epoch, self.max_v2n)

    def weight_v2b(self, epoch: int) -> float:
        return min(self.r * epoch, self.max_v2b)


@dataclass
class SemiBagAssignment:
    """Index sets produced by `build_semi_bags`; embeddings are looked up later.

    `violent` maps modality -> {batch index -> snippet indices of that video's
    violent semi-bag}; `normal_pool` and `background_pool` map modality ->
    list of (batch index, snippet index) pairs pooled over the whole batch.
    """

    violent: dict[str, dict[int, list[int]]] = field(default_factory=dict)
    normal_pool: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    background_pool: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def violent_videos(self) -> list[int]:
        return sorted(self.violent["a"].keys())

    @property
    def n_violent(self) -> int:
        return len(self.violent["a"])


def build_semi_bags(batch: Sequence[LogitsBundle]) -> SemiBagAssignment:
    """Cluster every video's instances into violent/normal/background index sets."""
    if len(batch) == 0:
        raise ContractViolation("build_semi_bags requires a nonempty batch")
    assign = SemiBagAssignment(
        violent={m: {} for m in MODALITIES},
        normal_pool={m: [] for m in MODALITIES},
        background_pool={m: [] for m in MODALITIES},
    )
    for i, bundle in enumerate(batch):
        T = bundle.l_a.shape[0]
        k = k_for(T)
        if T < k:
            raise ContractViolation(f"video {i}: T={T} smaller than K={k}")
        is_violent = float(bundle.p.detach()) > 0.5
        for m, logits in (("a", bundle.l_a), ("v", bundle.l_v)):
            values = logits.detach().cpu().numpy().astype(np.float64)
            # Ties in either ranking break toward the lower snippet index.
            top = [int(j) for j in np.lexsort((np.arange(T), -values))[:k]]
            bottom = [int(j) for j in np.lexsort((np.arange(T), values))[:k]]
            if is_violent:
                assign.violent[m][i] = top
            else:
                assign.normal_pool[m].extend((i, j) for j in top)
            assign.background_pool[m].extend((i, j) for j in bottom)
    return assign


def _embeddings(batch: Sequence[LogitsBundle], m: str, i: int) -> torch.Tensor:
    return batch[i].h_a if m == "a" else batch[i].h_v


def violent_representation(batch: Sequence[LogitsBundle], assign: SemiBagAssignment,
                           m: str, i: int) -> torch.Tensor:
    """Mean embedding over video i's violent semi-bag in modality m."""
    idx = assign.violent[m][i]
    return _embeddings(batch, m, i)[idx].mean(dim=0)


def infonce(anchor: torch.Tensor, positive: torch.Tensor,
            negatives: Sequence[torch.Tensor], tau: float,
            eps: float = 0.0) -> torch.Tensor:
    """InfoNCE with cosine similarity; returns 0 exactly when negatives is empty.

    With eps == 0 a zero-norm vector raises DegenerateInputError (strict mode);
    a positive eps is added to every norm instead (training mode).
    """
    vectors = [anchor, positive, *negatives]
    norms = [torch.linalg.vector_norm(v) for v in vectors]
    if eps == 0.0 and any(float(n) == 0.0 for n in norms):
        raise DegenerateInputError("zero-norm embedding in cosine similarity")

    def cos(u, un, v, vn):
        return (u @ v) / (un * vn + eps)

    sims = [cos(anchor, norms[0], v, n) for v, n in zip(vectors[1:], norms[1:])]
    logits = torch.stack(sims) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def macil_loss(assign: SemiBagAssignment, batch: Sequence[LogitsBundle],
               sched: RampSchedule, epoch: int,
               eps: float = 1e-8) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-level (L_v2n, L_v2b, weighted total), each normalized by the
    number of violent videos; all zeros when the batch has no violent video."""
    device = batch[0].h_a.device
    dtype = batch[0].h_a.dtype
    zero = torch.zeros((), device=device, dtype=dtype)
    k_vio = assign.n_violent
    if k_vio == 0:
        return zero, zero, zero

    def pool_matrix(pairs, m):
        if not pairs:
            return None
        mat = torch.stack([_embeddings(batch, m, i)[j] for i, j in pairs])
        return mat, torch.linalg.vector_norm(mat, dim=-1)

    pools = {
        "v2n": {m: pool_matrix(assign.normal_pool[m], m) for m in MODALITIES},
        "v2b": {m: pool_matrix(assign.background_pool[m], m) for m in MODALITIES},
    }

    losses = {"v2n": zero, "v2b": zero}
    for i in assign.violent_videos:
        reprs = {m: violent_representation(batch, assign, m, i) for m in MODALITIES}
        norms = {m: torch.linalg.vector_norm(reprs[m]) for m in MODALITIES}
        if eps == 0.0 and any(float(n) == 0.0 for n in norms.values()):
            raise DegenerateInputError("zero-norm semi-bag representation")
        cos_pos = (reprs["a"] @ reprs["v"]) / (norms["a"] * norms["v"] + eps)
        for anchor_m in MODALITIES:
            other = "v" if anchor_m == "a" else "a"
            s_pos = cos_pos / sched.tau
            for term in ("v2n", "v2b"):
                if pools[term][other] is None:
                    continue  # empty negative set contributes exactly 0
                negs, neg_norms = pools[term][other]
                if eps == 0.0 and bool((neg_norms == 0).any()):
                    raise DegenerateInputError("zero-norm pool embedding")
                cos_neg = (negs @ reprs[anchor_m]) / (neg_norms * norms[anchor_m] + eps)
                logits = torch.cat([s_pos.reshape(1), cos_neg / sched.tau])
                losses[term] = losses[term] + torch.logsumexp(logits, dim=0) - s_pos
    loss_v2n = losses["v2n"] / k_vio
    loss_v2b = losses["v2b"] / k_vio
    total = sched.weight_v2n(epoch) * loss_v2n + sched.weight_v2b(epoch) * loss_v2b
    return loss_v2n, loss_v2b, total
