"""Domain types, manifest I/O and the synthetic driving-scene generator.

Images are float arrays of shape (3, H, W) with values in [0, 1]; gaze maps
are float arrays of shape (H, W) in [0, 1].  Boxes use integer pixel
coordinates, inclusive on the top-left and exclusive on the bottom-right.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

CLASSES: Tuple[str, ...] = (
    "pedestrian",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
    "traffic light",
    "traffic sign",
)


class ManifestError(ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, ``[x1, x2) x [y1, y2)`` in pixels."""

    cls: str
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown object class {self.cls!r}")

    @property
    def area(self) -> int:
        return max(0, self.x2 - self.x1) * max(0, self.y2 - self.y1)

    def clamp(self, width: int, height: int) -> "BBox":
        return BBox(
            self.cls,
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
            min(max(self.x2, 0), width),
            min(max(self.y2, 0), height),
        )

    def scale(self, sx: float, sy: float) -> "BBox":
        # floor/ceil keeps every rescaled interior point inside the box
        return BBox(
            self.cls,
            int(math.floor(self.x1 * sx + 1e-9)),
            int(math.floor(self.y1 * sy + 1e-9)),
            int(math.ceil(self.x2 * sx - 1e-9)),
            int(math.ceil(self.y2 * sy - 1e-9)),
        )

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2


@dataclass
class Frame:
    image: np.ndarray  # (3, H, W)
    gaze: np.ndarray  # (H, W)
    boxes: List[BBox]
    id: str

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    gaze_path: str
    boxes: Tuple[BBox, ...] = ()

    @property
    def id(self) -> str:
        return Path(self.image_path).with_suffix("").as_posix()


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(self.root, [self.entries[i] for i in indices])

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dataset.

    The frame is divided into an ``align x align`` grid of cells (matching a
    tokenization with ``T = align**2``).  Objects occupy disjoint blocks of
    ``block x block`` cells, and every gaze blob is centred on a cell centre
    inside its box, so ground truth stays resolvable at the token grid.
    Blob standard deviation is ``blob_scale`` times the shorter cell side.
    """

    n_frames: int = 8
    width: int = 320
    height: int = 192
    objects_per_frame: Tuple[int, int] = (2, 4)
    distractor_blob_prob: float = 0.0
    seed: int = 0
    align: int = 8
    block: int = 2
    blob_scale: float = 0.15
    focus_prob: float = 0.5

    def validate(self) -> "SynthSpec":
        if self.width % self.align or self.height % self.align:
            raise ValueError(f"{self.width}x{self.height} is not divisible by align={self.align}")
        if self.align % self.block:
            raise ValueError(f"align={self.align} is not divisible by block={self.block}")
        lo, hi = self.objects_per_frame
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_frame range {self.objects_per_frame}")
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")
        return self


# -- manifest -----------------------------------------------------------------

_FIELD_RE = re.compile(r"(\w+)=(\S*)")


def _parse_boxes(text: str, lineno: int) -> Tuple[BBox, ...]:
    text = text.strip()
    if not text:
        return ()
    boxes = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 5:
            raise ManifestError(lineno, f"box {chunk!r} needs cls,x1,y1,x2,y2")
        cls = parts[0].replace("_", " ")
        if cls not in CLASSES:
            raise ManifestError(lineno, f"unknown class {parts[0]!r}")
        try:
            x1, y1, x2, y2 = (int(round(float(v))) for v in parts[1:])
        except ValueError:
            raise ManifestError(lineno, f"non-numeric coordinate in {chunk!r}") from None
        if x2 <= x1 or y2 <= y1:
            raise ManifestError(lineno, f"degenerate box {chunk!r} (need x2 > x1 and y2 > y1)")
        x1, y1 = max(x1, 0), max(y1, 0)
        if x2 <= x1 or y2 <= y1:
            raise ManifestError(lineno, f"box {chunk!r} lies outside the image")
        boxes.append(BBox(cls, x1, y1, x2, y2))
    return tuple(boxes)


def parse_manifest_line(line: str, lineno: int) -> Optional[ManifestEntry]:
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    head, sep, box_text = stripped.partition("boxes=")
    if not sep:
        raise ManifestError(lineno, "missing boxes= field")
    fields = dict(_FIELD_RE.findall(head))
    leftover = _FIELD_RE.sub("", head).strip()
    if leftover:
        raise ManifestError(lineno, f"unexpected text {leftover!r}")
    for key in ("image", "gaze"):
        if not fields.get(key):
            raise ManifestError(lineno, f"missing {key}= field")
    return ManifestEntry(fields["image"], fields["gaze"], _parse_boxes(box_text, lineno))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    entries = []
    for lineno, line in enumerate(lines, start=1):
        entry = parse_manifest_line(line, lineno)
        if entry is not None:
            entries.append(entry)
    manifest = DatasetManifest(path.parent, entries)
    if check_files:
        for entry in entries:
            for rel in (entry.image_path, entry.gaze_path):
                if not manifest.resolve(rel).is_file():
                    raise FileNotFoundError(f"{path}: referenced file {rel} does not exist")
    return manifest


def format_boxes(boxes: Sequence[BBox]) -> str:
    return ";".join(f"{b.cls},{b.x1},{b.y1},{b.x2},{b.y2}" for b in boxes)


def format_entry(entry: ManifestEntry) -> str:
    return f"image={entry.image_path} gaze={entry.gaze_path} boxes={format_boxes(entry.boxes)}"


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in manifest.entries:
            fh.write(format_entry(entry) + "\n")
    return path


# -- pixels -------------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a (H, W) or (C, H, W) array with corner-aligned bilinear sampling."""
    h, w = arr.shape[-2:]
    if (h, w) == (height, width):
        return arr.astype(np.float64, copy=True)
    ry = _interp_matrix(h, height)
    rx = _interp_matrix(w, width)
    return np.clip(ry @ arr.astype(np.float64) @ rx.T, 0.0, 1.0)


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        im.load()
        rgb = im.convert("RGB")
    return np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0


def read_gaze(path) -> np.ndarray:
    with PILImage.open(path) as im:
        im.load()
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).mean(axis=2)
    return arr / 255.0


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gaze_map(gaze: np.ndarray, path) -> Path:
    gaze = np.asarray(gaze)
    if gaze.ndim != 2:
        raise ValueError(f"gaze map must be 2-D, got shape {gaze.shape}")
    if gaze.size and (gaze.min() < 0.0 or gaze.max() > 1.0):
        raise ValueError("gaze values must lie in [0, 1]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_bytes(gaze), mode="L").save(path)
    return path


def save_image(image: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_bytes(image.transpose(1, 2, 0)), mode="RGB").save(path)
    return path


def load_frame(
    entry: ManifestEntry,
    target_w: Optional[int] = None,
    target_h: Optional[int] = None,
    root=None,
) -> Frame:
    """Decode an entry, scale to [0, 1] and resize image, gaze and boxes.

    With no target size the frame keeps the image's native size; the gaze map
    is always resized to match the image.
    """
    base = Path(root) if root is not None else Path(".")
    try:
        image = read_image(base / entry.image_path)
        gaze = read_gaze(base / entry.gaze_path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode frame {entry.id}: {exc}") from exc
    src_h, src_w = image.shape[1:]
    target_w = src_w if target_w is None else target_w
    target_h = src_h if target_h is None else target_h
    image = resize_bilinear(image, target_h, target_w)
    gaze = resize_bilinear(gaze, target_h, target_w)
    sx, sy = target_w / src_w, target_h / src_h
    boxes = []
    for b in entry.boxes:
        b = b.clamp(src_w, src_h).scale(sx, sy).clamp(target_w, target_h)
        if b.area > 0:
            boxes.append(b)
    return Frame(image, gaze, boxes, entry.id)


def load_frames(manifest: DatasetManifest, target_w=None, target_h=None) -> List[Frame]:
    return [load_frame(e, target_w, target_h, root=manifest.root) for e in manifest.entries]


# -- synthetic data -----------------------------------------------------------


def _gaussian_blob(height: int, width: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    sky = rng.uniform(0.45, 0.75, size=3)
    road = rng.uniform(0.15, 0.35, size=3)
    t = np.linspace(0.0, 1.0, height)[None, :, None]
    bg = sky[:, None, None] * (1.0 - t) + road[:, None, None] * t
    bg = np.broadcast_to(bg, (3, height, width)).copy()
    bg += rng.normal(0.0, 0.02, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _synth_frame(spec: SynthSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    image = _background(rng, h, w)
    cw, ch = w // spec.align, h // spec.align
    sigma = spec.blob_scale * min(cw, ch)
    reach = int(math.ceil(2.5 * sigma))  # blob value < 0.05 beyond this radius
    nb = spec.align // spec.block
    lo, hi = spec.objects_per_frame
    n_obj = min(int(rng.integers(lo, hi + 1)), nb * nb)
    blocks = sorted(int(c) for c in rng.choice(nb * nb, size=n_obj, replace=False))

    boxes: List[BBox] = []
    centers = []
    for blk in blocks:
        br, bc = divmod(blk, nb)
        # a random cell of the block; the object is built around its centre
        r = br * spec.block + int(rng.integers(spec.block))
        c = bc * spec.block + int(rng.integers(spec.block))
        cx, cy = c * cw + (cw - 1) / 2, r * ch + (ch - 1) / 2
        bx0, by0 = bc * spec.block * cw, br * spec.block * ch
        bx1, by1 = bx0 + spec.block * cw, by0 + spec.block * ch
        mx, my = int(0.1 * cw), int(0.1 * ch)
        x1 = int(rng.integers(bx0 + mx, max(int(cx) - reach, bx0 + mx) + 1))
        x2 = int(rng.integers(min(int(math.ceil(cx)) + reach + 1, bx1 - mx), bx1 - mx + 1))
        y1 = int(rng.integers(by0 + my, max(int(cy) - reach, by0 + my) + 1))
        y2 = int(rng.integers(min(int(math.ceil(cy)) + reach + 1, by1 - my), by1 - my + 1))
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        boxes.append(BBox(cls, x1, y1, x2, y2))
        centers.append((cx, cy))
    # distinct colors: evenly spaced hues with a random phase
    phase = rng.uniform(0.0, 1.0)
    for i, b in enumerate(boxes):
        hue = (phase + i / max(len(boxes), 1)) % 1.0
        color = 0.5 + 0.45 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
        image[:, b.y1 : b.y2, b.x1 : b.x2] = color[:, None, None]

    focused = [i for i in range(len(boxes)) if rng.uniform() < spec.focus_prob]
    if boxes and not focused:
        focused = [int(rng.integers(len(boxes)))]
    clean = np.zeros((h, w))
    for i in focused:
        clean += _gaussian_blob(h, w, *centers[i], sigma)

    noisy = clean.copy()
    if rng.uniform() < spec.distractor_blob_prob:
        dsigma = 2.0 * sigma
        pad = 3.0 * dsigma
        for _ in range(200):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            if not any(b.x1 - pad <= cx < b.x2 + pad and b.y1 - pad <= cy < b.y2 + pad for b in boxes):
                noisy += 2.0 * _gaussian_blob(h, w, cx, cy, dsigma)
                break

    def norm(m):
        peak = m.max()
        return m / peak if peak > 0 else m

    return image, norm(noisy), norm(clean), boxes


def synth_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a seeded synthetic dataset and its manifest under ``out_dir``.

    Besides ``manifest.txt`` (gaze with distractors) a ``manifest_clean.txt``
    referencing distractor-free gaze maps of the same images is written.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries, clean_entries = [], []
    for i in range(spec.n_frames):
        image, gaze, clean, boxes = _synth_frame(spec, rng)
        name = f"{i:05d}.png"
        save_image(image, out / "images" / name)
        save_gaze_map(gaze, out / "gaze" / name)
        save_gaze_map(clean, out / "gaze_clean" / name)
        entries.append(ManifestEntry(f"images/{name}", f"gaze/{name}", tuple(boxes)))
        clean_entries.append(ManifestEntry(f"images/{name}", f"gaze_clean/{name}", tuple(boxes)))
    manifest = DatasetManifest(out, entries)
    write_manifest(manifest, out / "manifest.txt")
    write_manifest(DatasetManifest(out, clean_entries), out / "manifest_clean.txt")
    return manifest


def relpath(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()
