"""Minimal SVG rendering of per-video score tracks (presentation only)."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

TRACK_WIDTH = 640
TRACK_HEIGHT = 80
MARGIN = 40
GAP = 20


def render_score_tracks(scores_csv: str | Path, out_path: str | Path) -> None:
    """One polyline per video over its frame span, ground truth shaded red."""
    rows = defaultdict(list)
    with Path(scores_csv).open() as fh:
        for row in csv.DictReader(fh):
            rows[row["video_id"]].append(row)

    parts = []
    y_off = MARGIN
    for video_id, snippets in rows.items():
        snippets.sort(key=lambda r: int(r["snippet_index"]))
        total_frames = int(snippets[-1]["frame_end"]) + 1
        x_scale = TRACK_WIDTH / total_frames
        for r in snippets:
            if r["gt_label"] == "1":
                x0 = MARGIN + int(r["frame_start"]) * x_scale
                x1 = MARGIN + (int(r["frame_end"]) + 1) * x_scale
                parts.append(
                    f'<rect x="{x0:.1f}" y="{y_off}" width="{x1 - x0:.1f}" '
                    f'height="{TRACK_HEIGHT}" fill="#f8c0c0"/>'
                )
        points = []
        for r in snippets:
            score = float(r["score"])
            for frame in (int(r["frame_start"]), int(r["frame_end"]) + 1):
                points.append(
                    f"{MARGIN + frame * x_scale:.1f},"
                    f"{y_off + TRACK_HEIGHT * (1.0 - score):.1f}"
                )
        parts.append(
            f'<polyline points="{" ".join(points)}" fill="none" '
            f'stroke="#2040a0" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{MARGIN}" y="{y_off - 4}" font-size="11" '
            f'font-family="sans-serif">{video_id}</text>'
        )
        parts.append(
            f'<rect x="{MARGIN}" y="{y_off}" width="{TRACK_WIDTH}" '
            f'height="{TRACK_HEIGHT}" fill="none" stroke="#888"/>'
        )
        y_off += TRACK_HEIGHT + GAP

    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{TRACK_WIDTH + 2 * MARGIN}" height="{y_off + MARGIN}">'
        + "".join(parts)
        + "</svg>"
    )
    Path(out_path).write_text(svg)
