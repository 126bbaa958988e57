import numpy as np
import torch

from macilsd.features import FeatureSequence, Manifest, VideoRecord

torch.set_num_threads(1)


def tiny_manifest(n_videos=6, T=8, d_audio=5, d_visual=6, seed=0, split="train"):
    """Random labeled manifest with frame ground truth for small tests."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_videos):
        label = i % 2
        num_frames = 16 * T + int(rng.integers(0, 16))
        intervals = [(0, 15)] if label else []
        records.append(VideoRecord(
            id=f"vid_{i:03d}",
            audio=FeatureSequence(rng.normal(size=(T, d_audio)).astype(np.float32)),
            visual=FeatureSequence(rng.normal(size=(T, d_visual)).astype(np.float32)),
            label=label,
            num_frames=num_frames,
            violent_intervals=intervals,
        ))
    return Manifest(records=records, split=split)
