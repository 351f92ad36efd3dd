"""Bounding-box cleansing of images and gaze maps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .data import (
    BBox,
    DatasetManifest,
    ManifestEntry,
    load_frame,
    save_gaze_map,
    save_image,
    write_manifest,
)


def box_mask(height: int, width: int, boxes: Sequence[BBox]) -> np.ndarray:
    """Boolean (H, W) mask of the union of ``boxes``."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        b = b.clamp(width, height)
        mask[b.y1 : b.y2, b.x1 : b.x2] = True
    return mask


def mask_image(image: np.ndarray, boxes: Sequence[BBox]) -> np.ndarray:
    """Zero every pixel of a (3, H, W) image outside the union of boxes."""
    keep = box_mask(image.shape[-2], image.shape[-1], boxes)
    return np.where(keep, image, 0.0).astype(image.dtype, copy=False)


def mask_gaze(gaze: np.ndarray, boxes: Sequence[BBox]) -> np.ndarray:
    keep = box_mask(gaze.shape[0], gaze.shape[1], boxes)
    return np.where(keep, gaze, 0.0).astype(gaze.dtype, copy=False)


@dataclass
class CleanseReport:
    n_frames: int = 0
    n_dropped: int = 0
    empty_gaze_ids: List[str] = field(default_factory=list)

    @property
    def n_empty_gaze(self) -> int:
        return len(self.empty_gaze_ids)

    def to_text(self) -> str:
        lines = [
            f"frames={self.n_frames}",
            f"empty_gaze_frames={self.n_empty_gaze}",
            f"dropped_frames={self.n_dropped}",
        ]
        lines += [f"empty_gaze_id={i}" for i in self.empty_gaze_ids]
        return "\n".join(lines) + "\n"


def _cleanse_entry(manifest: DatasetManifest, entry: ManifestEntry, out: Path) -> bool:
    frame = load_frame(entry, root=manifest.root)
    image = mask_image(frame.image, frame.boxes)
    gaze = mask_gaze(frame.gaze, frame.boxes)
    save_image(image, out / entry.image_path)
    save_gaze_map(gaze, out / entry.gaze_path)
    # empty means every stored byte is zero
    return not np.any(np.round(gaze * 255.0) > 0)


def cleanse_dataset(
    manifest: DatasetManifest,
    out_dir,
    drop_empty_gaze: bool = False,
    threads: int = 1,
):
    """Mask every frame of ``manifest`` into ``out_dir``.

    Returns the new manifest and a :class:`CleanseReport`.  Frames whose
    masked gaze is entirely zero are kept unless ``drop_empty_gaze`` is set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = list(manifest.entries)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            empty = list(pool.map(lambda e: _cleanse_entry(manifest, e, out), entries))
    else:
        empty = [_cleanse_entry(manifest, e, out) for e in entries]

    report = CleanseReport(n_frames=len(entries))
    kept = []
    for entry, is_empty in zip(entries, empty):
        if is_empty:
            report.empty_gaze_ids.append(entry.id)
            if drop_empty_gaze:
                report.n_dropped += 1
                continue
        kept.append(ManifestEntry(entry.image_path, entry.gaze_path, entry.boxes))
    cleansed = DatasetManifest(out, kept)
    write_manifest(cleansed, out / "manifest.txt")
    (out / "cleanse_report.txt").write_text(report.to_text(), encoding="utf-8")
    return cleansed, report
