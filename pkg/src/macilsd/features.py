"""Feature-sequence data model, MAFD-FEAT v1 binary files, and manifest ingestion.

A feature file stores one T x D float32 matrix: 4-byte ASCII magic "MFE1",
uint32-LE snippet count T, uint32-LE feature dim D, then T*D IEEE-754
binary32 little-endian values in row-major (snippet-major) order.

Manifests are JSON Lines, one video per line:

    {"id": str, "audio": path, "visual": path, "label": 0|1,
     "num_frames": int, "violent_intervals": [[start, end], ...]}

Paths are relative to the manifest's root directory.  Snippet t covers
frames [16t, 16t+15] at 24 fps; tail frames beyond 16*T fold into the
last snippet.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError

MAGIC = b"MFE1"
HEADER = struct.Struct("<4sII")

FRAMES_PER_SNIPPET = 16
FPS = 24


@dataclass
class FeatureSequence:
    """A T x D matrix of snippet features for one modality of one video."""

    data: np.ndarray  # float32, shape (T, D)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise FormatError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise FormatError(f"feature matrix needs T >= 1 and D >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise FormatError("feature matrix contains non-finite values")
        self.data = arr

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


@dataclass
class VideoRecord:
    """One video: paired audio/visual features, weak label, optional frame GT."""

    id: str
    audio: FeatureSequence
    visual: FeatureSequence
    label: int
    num_frames: int
    violent_intervals: list[tuple[int, int]] | None = None

    def __post_init__(self) -> None:
        if self.audio.T != self.visual.T:
            raise ManifestError(
                f"record {self.id!r}: snippet count mismatch "
                f"(audio T={self.audio.T}, visual T={self.visual.T})"
            )
        if self.label not in (0, 1):
            raise ManifestError(f"record {self.id!r}: label must be 0 or 1, got {self.label}")
        if self.num_frames < 1:
            raise ManifestError(f"record {self.id!r}: num_frames must be >= 1")
        if self.violent_intervals is not None:
            ivals = sorted(tuple(iv) for iv in self.violent_intervals)
            prev_end = -1
            for start, end in ivals:
                if start > end:
                    raise ManifestError(
                        f"record {self.id!r}: interval [{start}, {end}] has start > end"
                    )
                if start < 0 or end > self.num_frames - 1:
                    raise ManifestError(
                        f"record {self.id!r}: interval [{start}, {end}] outside "
                        f"[0, {self.num_frames - 1}]"
                    )
                if start <= prev_end:
                    raise ManifestError(f"record {self.id!r}: overlapping violent intervals")
                prev_end = end
            self.violent_intervals = ivals
            if self.label != (1 if ivals else 0):
                raise ManifestError(
                    f"record {self.id!r}: label {self.label} inconsistent with "
                    f"{len(ivals)} violent interval(s)"
                )

    @property
    def T(self) -> int:
        return self.audio.T


@dataclass
class Manifest:
    """Ordered collection of validated video records for one split."""

    records: list[VideoRecord] = field(default_factory=list)
    split: str = "train"


def snippet_of_frame(frame: int, num_snippets: int) -> int:
    """Map a frame index to its covering snippet; tail frames fold into the last."""
    return min(frame // FRAMES_PER_SNIPPET, num_snippets - 1)


def write_feature_file(seq: FeatureSequence, path: str | Path) -> None:
    """Serialize one feature matrix in MAFD-FEAT v1 format."""
    payload = HEADER.pack(MAGIC, seq.T, seq.D) + seq.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(payload)


def read_feature_file(path: str | Path) -> FeatureSequence:
    """Parse a MAFD-FEAT v1 file, validating magic, payload size, and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, t, d = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if t < 1 or d < 1:
        raise FormatError(f"{path}: invalid shape T={t}, D={d}")
    expected = HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(t, d)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return FeatureSequence(data.copy())


def _parse_manifest_line(obj: dict, root: Path, line_no: int) -> VideoRecord:
    for key in ("id", "audio", "visual", "label", "num_frames"):
        if key not in obj:
            raise ManifestError(f"manifest line {line_no}: missing field {key!r}")
    audio_path = root / obj["audio"]
    visual_path = root / obj["visual"]
    for p in (audio_path, visual_path):
        if not p.is_file():
            raise ManifestError(
                f"record {obj['id']!r}: missing feature file {p}"
            )
    intervals = obj.get("violent_intervals")
    return VideoRecord(
        id=obj["id"],
        audio=read_feature_file(audio_path),
        visual=read_feature_file(visual_path),
        label=int(obj["label"]),
        num_frames=int(obj["num_frames"]),
        violent_intervals=None if intervals is None else [tuple(iv) for iv in intervals],
    )


def load_manifest(path: str | Path, root_dir: str | Path | None = None,
                  split: str = "train") -> Manifest:
    """Load and validate a JSON-Lines manifest; record order follows file order."""
    path = Path(path)
    root = Path(root_dir) if root_dir is not None else path.parent
    records: list[VideoRecord] = []
    seen: set[str] = set()
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"manifest line {line_no}: invalid JSON: {exc}") from exc
            rec = _parse_manifest_line(obj, root, line_no)
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r} in manifest")
            seen.add(rec.id)
            records.append(rec)
    return Manifest(records=records, split=split)


def save_manifest(entries: list[dict], path: str | Path) -> None:
    """Write manifest entries (already-relative paths) as JSON Lines."""
    with Path(path).open("w") as fh:
        for obj in entries:
            fh.write(json.dumps(obj) + "\n")
