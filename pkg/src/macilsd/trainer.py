"""Joint training of the AV network and visual twin.

One step computes the AV loss (mean video-level BCE plus the ramped
contrastive terms), updates the AV network with Adam under a per-epoch
cosine-annealed learning rate, updates the twin with its own constant-rate
Adam on plain BCE, then EMA-infuses twin parameters into the AV network.
The contrastive ramp epoch index is 0-based, so the first epoch trains on
BCE alone.

Checkpoints are a single binary file: magic "MCKP", version, a sequence of
named float32 tensors (model parameters and Adam moments) in the same
matrix encoding as feature files, and a JSON trailer with counters, config,
and the dropout RNG state.  Round-trips are bit-exact and resuming
reproduces the uninterrupted trajectory.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .distill import DistillState, cosine_momentum, ema_infuse
from .errors import ContractViolation, FormatError, MacilError
from .features import Manifest, VideoRecord
from .macil import RampSchedule, build_semi_bags, macil_loss
from .network import (
    AVNetwork,
    NetworkConfig,
    VisualTwin,
    init_av_network,
    init_visual_twin,
)

METRICS_HEADER = "epoch,bce,ctl_v2n,ctl_v2b,lambda_v2n,lambda_v2b,acc,momentum,lr"

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_av: float = 4e-4
    lr_twin: float = 8e-5
    ramp: RampSchedule = field(default_factory=RampSchedule)
    m_hat: float = 0.91
    infusion_frequency: str = "per-step"
    seed: int = 0
    enable_macil: bool = True
    enable_distill: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0 and batch_size >= 1")
        if self.lr_av < 0 or self.lr_twin < 0:
            raise ContractViolation("learning rates must be >= 0")
        if self.infusion_frequency not in ("per-step", "per-epoch"):
            raise ContractViolation(
                f"unknown infusion_frequency {self.infusion_frequency!r}"
            )


@dataclass
class TrainState:
    av: AVNetwork
    twin: VisualTwin | None
    opt_av: torch.optim.Adam
    opt_twin: torch.optim.Adam | None
    train_cfg: TrainConfig
    net_cfg: NetworkConfig
    epoch: int = 0
    global_step: int = 0
    total_steps: int = 1
    history: list[dict] = field(default_factory=list)


def bce_loss(p: torch.Tensor, y: float) -> torch.Tensor:
    """Binary cross-entropy on a video score, clamped away from {0, 1}."""
    eps = 1e-7
    p = torch.clamp(p, eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


def _as_tensors(record: VideoRecord, dtype=torch.float32):
    return (
        torch.from_numpy(record.audio.data).to(dtype),
        torch.from_numpy(record.visual.data).to(dtype),
        float(record.label),
    )


def _forward_bundles(av: AVNetwork, batch, train_mode: bool):
    """Per-video bundles; equal-length videos share one vectorized forward."""
    groups: dict[int, list[int]] = {}
    for idx, (a, _, _) in enumerate(batch):
        groups.setdefault(a.shape[0], []).append(idx)
    bundles = [None] * len(batch)
    for idxs in groups.values():
        if len(idxs) == 1:
            i = idxs[0]
            bundles[i] = av(batch[i][0], batch[i][1], train_mode)
        else:
            audio = torch.stack([batch[i][0] for i in idxs])
            visual = torch.stack([batch[i][1] for i in idxs])
            for i, b in zip(idxs, av.forward_batch(audio, visual, train_mode)):
                bundles[i] = b
    return bundles


def total_loss(av: AVNetwork, batch: list[tuple[torch.Tensor, torch.Tensor, float]],
               sched: RampSchedule, epoch: int, train_mode: bool = False,
               enable_macil: bool = True) -> tuple[torch.Tensor, dict]:
    """AV objective over one batch: mean BCE plus the ramped contrastive total."""
    if not batch:
        raise ContractViolation("total_loss requires a nonempty batch")
    bundles = _forward_bundles(av, batch, train_mode)
    labels = [y for _, _, y in batch]
    bce = torch.stack([bce_loss(b.p, y) for b, y in zip(bundles, labels)]).mean()
    zero = torch.zeros((), dtype=bce.dtype)
    if enable_macil:
        assign = build_semi_bags(bundles)
        v2n, v2b, weighted = macil_loss(assign, bundles, sched, epoch)
    else:
        v2n, v2b, weighted = zero, zero, zero
    correct = sum(
        1 for b, y in zip(bundles, labels)
        if (float(b.p.detach()) > 0.5) == bool(y)
    )
    components = {
        "bce": float(bce.detach()),
        "ctl_v2n": float(v2n.detach()),
        "ctl_v2b": float(v2b.detach()),
        "lambda_v2n": sched.weight_v2n(epoch) if enable_macil else 0.0,
        "lambda_v2b": sched.weight_v2b(epoch) if enable_macil else 0.0,
        "acc": correct / len(batch),
    }
    return bce + weighted, components


def twin_loss(twin: VisualTwin, batch: list[tuple[torch.Tensor, torch.Tensor, float]],
              train_mode: bool = False) -> torch.Tensor:
    """Mean BCE of the twin's video scores."""
    groups: dict[int, list[int]] = {}
    for idx, (_, v, _) in enumerate(batch):
        groups.setdefault(v.shape[0], []).append(idx)
    losses = [None] * len(batch)
    for idxs in groups.values():
        if len(idxs) == 1:
            i = idxs[0]
            losses[i] = bce_loss(twin(batch[i][1], train_mode)[2], batch[i][2])
        else:
            visual = torch.stack([batch[i][1] for i in idxs])
            _, _, p = twin.forward_batch(visual, train_mode)
            for pos, i in enumerate(idxs):
                losses[i] = bce_loss(p[pos], batch[i][2])
    return torch.stack(losses).mean()


def init_state(train_cfg: TrainConfig, net_cfg: NetworkConfig,
               steps_per_epoch: int) -> TrainState:
    av = init_av_network(net_cfg, train_cfg.seed)
    opt_av = torch.optim.Adam(av.parameters(), lr=train_cfg.lr_av, weight_decay=0.0)
    twin = opt_twin = None
    if train_cfg.enable_distill:
        twin = init_visual_twin(net_cfg, train_cfg.seed + 1)
        opt_twin = torch.optim.Adam(twin.parameters(), lr=train_cfg.lr_twin,
                                    weight_decay=0.0)
    total_steps = max(1, train_cfg.epochs * steps_per_epoch)
    return TrainState(av=av, twin=twin, opt_av=opt_av, opt_twin=opt_twin,
                      train_cfg=train_cfg, net_cfg=net_cfg,
                      total_steps=total_steps)


def _check_finite(value: torch.Tensor, component: str) -> None:
    if not torch.isfinite(value):
        raise MacilError(f"non-finite loss in component {component!r}")


def train_step(state: TrainState, batch: list[tuple[torch.Tensor, torch.Tensor, float]],
               train_mode: bool = True) -> dict:
    """One joint optimization step; returns the logged loss components."""
    cfg = state.train_cfg
    loss_av, components = total_loss(
        state.av, batch, cfg.ramp, state.epoch,
        train_mode=train_mode, enable_macil=cfg.enable_macil,
    )
    _check_finite(loss_av, "loss_av")
    state.opt_av.zero_grad()
    loss_av.backward()
    state.opt_av.step()

    if state.twin is not None:
        loss_twin = twin_loss(state.twin, batch, train_mode=train_mode)
        _check_finite(loss_twin, "loss_twin")
        state.opt_twin.zero_grad()
        loss_twin.backward()
        state.opt_twin.step()
        components["twin_bce"] = float(loss_twin.detach())

    state.global_step += 1
    if state.twin is not None and cfg.infusion_frequency == "per-step":
        m = cosine_momentum(min(state.global_step, state.total_steps),
                            DistillState(cfg.m_hat, state.total_steps))
        ema_infuse(state.av, state.twin, m)
        components["momentum"] = m
    return components


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    # Cosine annealing from lr_av to 0 over the full horizon, no restarts.
    if cfg.epochs <= 1:
        return cfg.lr_av
    return cfg.lr_av * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0


def fit(train_cfg: TrainConfig, net_cfg: NetworkConfig, manifest: Manifest,
        out_dir: str | Path | None = None,
        state: TrainState | None = None,
        stop_after: int | None = None) -> TrainState:
    """Run the training loop; optionally log metrics and checkpoints to out_dir.

    Deterministic given (configs, data, seed).  Pass a loaded checkpoint
    state to resume; the remaining epochs of train_cfg.epochs are run.
    `stop_after` interrupts once that epoch count is reached while keeping
    all schedules on the full train_cfg.epochs horizon, so a resumed run
    reproduces the uninterrupted trajectory exactly.
    """
    if not manifest.records:
        raise ContractViolation("training manifest is empty")
    data = [_as_tensors(rec) for rec in manifest.records]
    steps_per_epoch = max(1, (len(data) + train_cfg.batch_size - 1) // train_cfg.batch_size)
    if state is None:
        state = init_state(train_cfg, net_cfg, steps_per_epoch)
        torch.manual_seed(train_cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    distill_state = DistillState(train_cfg.m_hat, state.total_steps)
    last_epoch = train_cfg.epochs if stop_after is None else min(stop_after, train_cfg.epochs)
    while state.epoch < last_epoch:
        epoch = state.epoch
        lr = _epoch_lr(train_cfg, epoch)
        for group in state.opt_av.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([train_cfg.seed, 1000 + epoch]).permutation(len(data))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(data), train_cfg.batch_size):
            batch = [data[i] for i in order[start : start + train_cfg.batch_size]]
            components = train_step(state, batch)
            for key in ("bce", "ctl_v2n", "ctl_v2b", "acc"):
                sums[key] = sums.get(key, 0.0) + components[key]
            n_batches += 1
        if state.twin is not None and train_cfg.infusion_frequency == "per-epoch":
            m = cosine_momentum(min(state.global_step, state.total_steps), distill_state)
            ema_infuse(state.av, state.twin, m)
        momentum = cosine_momentum(min(state.global_step, state.total_steps),
                                   distill_state) if state.twin is not None else 1.0
        row = {
            "epoch": epoch,
            "bce": sums["bce"] / n_batches,
            "ctl_v2n": sums["ctl_v2n"] / n_batches,
            "ctl_v2b": sums["ctl_v2b"] / n_batches,
            "lambda_v2n": train_cfg.ramp.weight_v2n(epoch) if train_cfg.enable_macil else 0.0,
            "lambda_v2b": train_cfg.ramp.weight_v2b(epoch) if train_cfg.enable_macil else 0.0,
            "acc": sums["acc"] / n_batches,
            "momentum": momentum,
            "lr": lr,
        }
        state.history.append(row)
        state.epoch += 1
        if out is not None:
            write_metrics(state.history, out / "metrics.csv")
            save_checkpoint(state, out / "latest.ckpt")
    if out is not None:
        write_metrics(state.history, out / "metrics.csv")
    return state


def write_metrics(history: list[dict], path: str | Path) -> None:
    lines = [METRICS_HEADER]
    for row in history:
        lines.append(
            "{epoch},{bce:.10g},{ctl_v2n:.10g},{ctl_v2b:.10g},"
            "{lambda_v2n:.10g},{lambda_v2b:.10g},{acc:.10g},"
            "{momentum:.10g},{lr:.10g}".format(**row)
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpointing


def _named_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for name, param in state.av.named_parameters():
        tensors[f"av/{name}"] = param.detach()
    opt_state = state.opt_av.state
    for name, param in state.av.named_parameters():
        if param in opt_state:
            for key in ("step", "exp_avg", "exp_avg_sq"):
                tensors[f"opt_av/{name}/{key}"] = opt_state[param][key].detach()
    if state.twin is not None:
        for name, param in state.twin.named_parameters():
            tensors[f"twin/{name}"] = param.detach()
        opt_state = state.opt_twin.state
        for name, param in state.twin.named_parameters():
            if param in opt_state:
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    tensors[f"opt_twin/{name}/{key}"] = opt_state[param][key].detach()
    return tensors


def config_hash(train_cfg: TrainConfig, net_cfg: NetworkConfig) -> str:
    payload = json.dumps(
        {"train": asdict(train_cfg), "net": asdict(net_cfg)}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = _named_tensors(state)
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<II", CKPT_VERSION, len(tensors))
    shapes: dict[str, list[int]] = {}
    for name, tensor in tensors.items():
        arr = tensor.cpu().contiguous().to(torch.float32).numpy().reshape(-1)
        shapes[name] = list(tensor.shape)
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<4sII", b"MFE1", 1, max(1, arr.size))
        blob += arr.astype("<f4").tobytes()
    trailer = json.dumps({
        "format_version": CKPT_VERSION,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "total_steps": state.total_steps,
        "train_cfg": asdict(state.train_cfg),
        "net_cfg": asdict(state.net_cfg),
        "config_hash": config_hash(state.train_cfg, state.net_cfg),
        "shapes": shapes,
        "torch_rng": base64.b64encode(
            torch.get_rng_state().numpy().tobytes()
        ).decode(),
        "history": state.history,
    }).encode()
    blob += struct.pack("<I", len(trailer)) + trailer
    Path(path).write_bytes(bytes(blob))


def _restore_adam(opt: torch.optim.Adam, model: torch.nn.Module,
                  tensors: dict[str, np.ndarray], prefix: str,
                  shapes: dict[str, list[int]]) -> None:
    for name, param in model.named_parameters():
        key = f"{prefix}/{name}/exp_avg"
        if key not in tensors:
            continue
        entry = {}
        for field_name in ("step", "exp_avg", "exp_avg_sq"):
            full = f"{prefix}/{name}/{field_name}"
            shape = shapes[full]
            arr = tensors[full].reshape(shape) if shape else tensors[full].reshape(())
            entry[field_name] = torch.from_numpy(arr.copy())
        opt.state[param] = entry


def load_checkpoint(path: str | Path) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, n_tensors = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        magic, rows, cols = struct.unpack_from("<4sII", raw, offset)
        if magic != b"MFE1":
            raise FormatError(f"{path}: bad tensor magic for {name!r}")
        offset += 12
        count = rows * cols
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).copy()
        offset += 4 * count
    (trailer_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    trailer = json.loads(raw[offset : offset + trailer_len].decode())

    train_dict = dict(trailer["train_cfg"])
    train_dict["ramp"] = RampSchedule(**train_dict["ramp"])
    train_cfg = TrainConfig(**train_dict)
    net_cfg = NetworkConfig(**trailer["net_cfg"])
    shapes = trailer["shapes"]

    state = init_state(train_cfg, net_cfg, steps_per_epoch=1)
    state.epoch = trailer["epoch"]
    state.global_step = trailer["global_step"]
    state.total_steps = trailer["total_steps"]
    state.history = trailer["history"]

    def load_model(model, prefix):
        with torch.no_grad():
            for name, param in model.named_parameters():
                full = f"{prefix}/{name}"
                arr = tensors[full].reshape(shapes[full])
                param.copy_(torch.from_numpy(arr.copy()))

    load_model(state.av, "av")
    _restore_adam(state.opt_av, state.av, tensors, "opt_av", shapes)
    if state.twin is not None:
        load_model(state.twin, "twin")
        _restore_adam(state.opt_twin, state.twin, tensors, "opt_twin", shapes)
    torch.set_rng_state(torch.from_numpy(np.frombuffer(
        base64.b64decode(trailer["torch_rng"]), dtype=np.uint8
    ).copy()))
    return state
