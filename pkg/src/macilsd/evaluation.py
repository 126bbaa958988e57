"""Frame-level average precision, video accuracy, and score/embedding export.

Snippet scores expand to frames via the 16-frames-per-snippet rule (tail
frames fold into the last snippet).  AP is computed over the frames of all
test videos concatenated, using step interpolation with tied scores grouped
at a single threshold.  Only the audio-visual network is used here; the
twin never participates in inference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, UndefinedMetricError
from .features import FRAMES_PER_SNIPPET, Manifest, VideoRecord
from .network import AVNetwork, count_parameters


@dataclass
class ScoreTrack:
    video_id: str
    snippet_scores: np.ndarray  # (T,)
    frame_scores: np.ndarray  # (num_frames,)
    frame_labels: np.ndarray | None  # (num_frames,) or None when no GT


@dataclass
class EvalReport:
    frame_ap: float | None
    video_accuracy: float
    tracks: list[ScoreTrack] = field(default_factory=list)
    param_count: int = 0


def snippet_to_frame_scores(snippet_scores: np.ndarray, num_frames: int) -> np.ndarray:
    """Frame f inherits the score of snippet min(floor(f/16), T-1)."""
    snippet_scores = np.asarray(snippet_scores, dtype=np.float64)
    T = snippet_scores.shape[0]
    if num_frames < FRAMES_PER_SNIPPET * (T - 1) + 1:
        raise ContractViolation(
            f"num_frames={num_frames} too small for T={T} snippets"
        )
    frames = np.arange(num_frames)
    return snippet_scores[np.minimum(frames // FRAMES_PER_SNIPPET, T - 1)]


def frame_labels_of(record: VideoRecord) -> np.ndarray | None:
    """Per-frame ground truth from a record's violent intervals."""
    if record.violent_intervals is None:
        return None
    labels = np.zeros(record.num_frames, dtype=np.int8)
    for start, end in record.violent_intervals:
        labels[start : end + 1] = 1
    return labels


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-interpolated AP with ties grouped at one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractViolation("scores and labels must be 1-D with equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order])
    ranks = np.arange(1, len(scores) + 1)
    # Threshold boundaries: last position of each tied-score group.
    last = np.flatnonzero(np.diff(sorted_scores) != 0)
    boundaries = np.concatenate([last, [len(scores) - 1]])
    precision = tp[boundaries] / ranks[boundaries]
    recall = tp[boundaries] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def evaluate(av: AVNetwork, manifest: Manifest) -> EvalReport:
    """Run the AV network (dropout off) over a test manifest."""
    tracks: list[ScoreTrack] = []
    correct = 0
    with torch.no_grad():
        for rec in manifest.records:
            bundle = av(
                torch.from_numpy(rec.audio.data),
                torch.from_numpy(rec.visual.data),
                train_mode=False,
            )
            snippet_scores = bundle.snippet_scores.numpy().astype(np.float64)
            tracks.append(ScoreTrack(
                video_id=rec.id,
                snippet_scores=snippet_scores,
                frame_scores=snippet_to_frame_scores(snippet_scores, rec.num_frames),
                frame_labels=frame_labels_of(rec),
            ))
            correct += int((float(bundle.p) > 0.5) == bool(rec.label))
    video_accuracy = correct / len(manifest.records) if manifest.records else 0.0
    frame_ap = None
    if tracks and all(t.frame_labels is not None for t in tracks):
        all_scores = np.concatenate([t.frame_scores for t in tracks])
        all_labels = np.concatenate([t.frame_labels for t in tracks])
        if all_labels.any():
            frame_ap = average_precision(all_scores, all_labels)
    return EvalReport(
        frame_ap=frame_ap,
        video_accuracy=video_accuracy,
        tracks=tracks,
        param_count=count_parameters(av),
    )


def export_scores(report: EvalReport, manifest: Manifest, path: str | Path) -> None:
    """Per-snippet score rows with frame spans and ground-truth snippet labels."""
    by_id = {rec.id: rec for rec in manifest.records}
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["video_id", "snippet_index", "score", "frame_start", "frame_end", "gt_label"]
        )
        for track in report.tracks:
            rec = by_id[track.video_id]
            T = len(track.snippet_scores)
            for t, score in enumerate(track.snippet_scores):
                frame_start = FRAMES_PER_SNIPPET * t
                frame_end = (FRAMES_PER_SNIPPET * (t + 1) - 1 if t < T - 1
                             else rec.num_frames - 1)
                if track.frame_labels is not None:
                    gt = int(track.frame_labels[frame_start : frame_end + 1].any())
                else:
                    gt = ""
                writer.writerow(
                    [track.video_id, t, f"{score:.9g}", frame_start, frame_end, gt]
                )


def export_embeddings(av: AVNetwork, manifest: Manifest, path: str | Path) -> None:
    """Per-snippet embedding rows for both modalities, for external t-SNE etc."""
    d_model = av.cfg.d_model
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["video_id", "snippet_index", "modality"] + [f"e{i}" for i in range(d_model)]
        )
        with torch.no_grad():
            for rec in manifest.records:
                bundle = av(
                    torch.from_numpy(rec.audio.data),
                    torch.from_numpy(rec.visual.data),
                    train_mode=False,
                )
                for modality, h in (("a", bundle.h_a), ("v", bundle.h_v)):
                    matrix = h.numpy()
                    for t in range(matrix.shape[0]):
                        writer.writerow(
                            [rec.id, t, modality]
                            + [f"{x:.9g}" for x in matrix[t]]
                        )
