"""Command-line entry point: synth / train / eval / plot / params.

All commands are driven by one flat JSON config whose keys merge the
synthesis, network, and training knobs; unknown keys are rejected and the
fully resolved config is echoed into the output directory for provenance.
Individual values can be overridden with repeated `--set key=value` flags,
and the MACIL_SEED environment variable overrides the seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, MacilError
from .features import load_manifest, save_manifest, write_feature_file
from .macil import RampSchedule
from .network import NetworkConfig, count_parameters, init_av_network, init_visual_twin
from .synth import SynthConfig, generate_dataset
from .trainer import TrainConfig, fit, load_checkpoint
from .evaluation import evaluate, export_embeddings, export_scores

DEFAULTS: dict = {
    # synthesis
    "n_videos": 250,
    "violent_fraction": 0.5,
    "T": 32,
    "events_per_violent_video": [1, 3],
    "event_len_snippets": [2, 5],
    "asynchrony_offset": [1, 4],
    "noise_sigma": 0.5,
    # shared feature dims
    "d_audio": 128,
    "d_visual": 1024,
    # network
    "d_model": 128,
    "n_heads": 4,
    "ffn_dim": None,
    "dropout": 0.1,
    # training
    "epochs": 50,
    "batch_size": 32,
    "lr_av": 4e-4,
    "lr_twin": 8e-5,
    "ramp_ratio": 0.1,
    "lambda_v2n_max": 1.5,
    "lambda_v2b_max": 1.5,
    "tau": 0.1,
    "m_hat": 0.91,
    "infusion_frequency": "per-step",
    "enable_macil": True,
    "enable_distill": True,
    "seed": 0,
}


def resolve_config(config_path: str | None, overrides: list[str] | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if config_path:
        with open(config_path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        cfg.update(user)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    if "MACIL_SEED" in os.environ:
        cfg["seed"] = int(os.environ["MACIL_SEED"])
    return cfg


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        n_videos=cfg["n_videos"],
        violent_fraction=cfg["violent_fraction"],
        T=cfg["T"],
        d_audio=cfg["d_audio"],
        d_visual=cfg["d_visual"],
        events_per_violent_video=tuple(cfg["events_per_violent_video"]),
        event_len_snippets=tuple(cfg["event_len_snippets"]),
        asynchrony_offset=tuple(cfg["asynchrony_offset"]),
        noise_sigma=cfg["noise_sigma"],
        seed=cfg["seed"],
    )


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        ffn_dim=cfg["ffn_dim"],
        dropout=cfg["dropout"],
        d_audio=cfg["d_audio"],
        d_visual=cfg["d_visual"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr_av=cfg["lr_av"],
        lr_twin=cfg["lr_twin"],
        ramp=RampSchedule(
            r=cfg["ramp_ratio"],
            max_v2n=cfg["lambda_v2n_max"],
            max_v2b=cfg["lambda_v2b_max"],
            tau=cfg["tau"],
        ),
        m_hat=cfg["m_hat"],
        infusion_frequency=cfg["infusion_frequency"],
        seed=cfg["seed"],
        enable_macil=cfg["enable_macil"],
        enable_distill=cfg["enable_distill"],
    )


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, args.set)
    out = Path(args.out)
    echo_config(cfg, out)
    train, test, _ = generate_dataset(synth_config(cfg))
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for manifest, name in ((train, "train"), (test, "test")):
        entries = []
        for rec in manifest.records:
            audio_rel = f"features/{rec.id}_a.mfe"
            visual_rel = f"features/{rec.id}_v.mfe"
            write_feature_file(rec.audio, out / audio_rel)
            write_feature_file(rec.visual, out / visual_rel)
            entries.append({
                "id": rec.id,
                "audio": audio_rel,
                "visual": visual_rel,
                "label": rec.label,
                "num_frames": rec.num_frames,
                "violent_intervals": [list(iv) for iv in rec.violent_intervals],
            })
        save_manifest(entries, out / f"{name}.jsonl")
    print(f"wrote {len(train.records)} train / {len(test.records)} test videos to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, args.set)
    out = Path(args.out)
    echo_config(cfg, out)
    manifest = load_manifest(Path(args.data) / "train.jsonl", args.data, split="train")
    state = fit(train_config(cfg), network_config(cfg), manifest, out_dir=out)
    print(f"trained {state.epoch} epoch(s); checkpoint and metrics in {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    manifest = load_manifest(Path(args.data) / "test.jsonl", args.data, split="test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(state.av, manifest)
    export_scores(report, manifest, out / "scores.csv")
    export_embeddings(state.av, manifest, out / "embeddings.csv")
    summary = {
        "frame_ap": report.frame_ap,
        "video_accuracy": report.video_accuracy,
        "param_count": report.param_count,
        "n_videos": len(manifest.records),
        "epoch": state.epoch,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    from .plotting import render_score_tracks

    render_score_tracks(args.scores, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, args.set)
    net_cfg = network_config(cfg)
    light = count_parameters(init_av_network(net_cfg, cfg["seed"]))
    full = light + count_parameters(init_visual_twin(net_cfg, cfg["seed"]))
    print(f"light {light}")
    print(f"full {full}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macilsd",
        description="Weakly-supervised audio-visual violence detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        for flag, required in flags.items():
            p.add_argument(f"--{flag}", required=required)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, config=False, out=True)
    add("train", cmd_train, config=False, data=True, out=True)
    add("eval", cmd_eval, checkpoint=True, data=True, out=True)
    add("plot", cmd_plot, scores=True, out=True)
    add("params", cmd_params, config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MacilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
