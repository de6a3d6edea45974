"""Frame-folder datasets, clip sampling, input corruption and synthetic scenes.

Layout on disk::

    root/train/<video_id>/000000.jpg ...
    root/test/<video_id>/000000.jpg ... labels.txt

``labels.txt`` holds one 0/1 integer per line, one line per frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset

logger = logging.getLogger(__name__)

FRAME_PATTERN = "{:06d}.jpg"
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif")
LABEL_FILE = "labels.txt"
SCENE_FILE = "scene.json"


class DatasetLayoutError(ValueError):
    """The dataset directory does not follow the documented layout."""


# --------------------------------------------------------------------------
# frames on disk


def extract_frames(video_path, out_dir, quality: int = 100) -> int:
    """Split a video container into numbered frames under ``out_dir``."""
    cap = cv2.VideoCapture(str(video_path))
    if not cap.isOpened():
        raise IOError(f"cannot open video {video_path}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            cv2.imwrite(str(out / FRAME_PATTERN.format(count)), frame, [cv2.IMWRITE_JPEG_QUALITY, quality])
            count += 1
    finally:
        cap.release()
    if count == 0:
        raise IOError(f"no frames could be decoded from {video_path}")
    return count


def frame_to_array(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 RGB image to float32 in [-1, 1]."""
    return image.astype(np.float32) / 127.5 - 1.0


def array_to_frame(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((frame + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_frame(path, size: Optional[tuple] = None) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IOError(f"cannot read image {path}")
    if size is not None and bgr.shape[:2] != tuple(size):
        bgr = cv2.resize(bgr, (size[1], size[0]), interpolation=cv2.INTER_AREA)
    return frame_to_array(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))


def write_frame(path, frame: np.ndarray, quality: int = 100) -> None:
    bgr = cv2.cvtColor(array_to_frame(frame), cv2.COLOR_RGB2BGR)
    cv2.imwrite(str(path), bgr, [cv2.IMWRITE_JPEG_QUALITY, quality])


def read_labels(path) -> np.ndarray:
    values = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    labels = np.array([int(v) for v in values], dtype=np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise DatasetLayoutError(f"{path}: labels must be 0 or 1")
    return labels


def write_labels(path, labels: Sequence[int]) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


@dataclass
class Video:
    video_id: str
    frame_paths: list
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.frame_paths)


def list_videos(split_dir, require_labels: bool = False) -> list[Video]:
    """Enumerate per-video frame folders in sorted order."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise DatasetLayoutError(f"missing split directory {split_dir}")
    videos = []
    for vdir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        frames = sorted(p for p in vdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not frames:
            raise DatasetLayoutError(f"video directory {vdir} contains no frames")
        labels = None
        label_path = vdir / LABEL_FILE
        if label_path.exists():
            labels = read_labels(label_path)
            if len(labels) != len(frames):
                raise DatasetLayoutError(
                    f"{label_path}: {len(labels)} labels for {len(frames)} frames"
                )
        elif require_labels:
            raise DatasetLayoutError(f"test video {vdir} has no {LABEL_FILE}")
        videos.append(Video(vdir.name, frames, labels))
    if not videos:
        raise DatasetLayoutError(f"no video directories under {split_dir}")
    return videos


# --------------------------------------------------------------------------
# clips


@dataclass
class ClipSample:
    inputs: np.ndarray  # (T, H, W, 3)
    target: np.ndarray  # (H, W, 3)
    label: int
    video_id: str
    frame_index: int


def window_length(task: str) -> int:
    return 5 if task == "prediction" else 1


def clip_index(videos: Sequence[Video], task: str) -> list[tuple[int, int]]:
    """(video, target frame) pairs; prediction windows stay inside one video."""
    span = window_length(task)
    index = []
    for vi, video in enumerate(videos):
        for t in range(span - 1, len(video)):
            index.append((vi, t))
    return index


def salt_pepper(frame: np.ndarray, ratio: float, seed=None) -> np.ndarray:
    """Set exactly floor(ratio*H*W) pixel positions to min or max across channels."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1), got {ratio}")
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    n = int(np.floor(ratio * h * w))
    out = frame.copy()
    if n == 0:
        return out
    rng = np.random.default_rng(seed)
    flat = rng.choice(h * w, size=n, replace=False)
    salt = rng.random(n) < 0.5
    ys, xs = np.divmod(flat, w)
    out[ys[salt], xs[salt]] = 1.0
    out[ys[~salt], xs[~salt]] = -1.0
    return out


class ClipDataset(Dataset):
    """Clips for one task over a frame-folder split.

    Items are ``(input, target, label, index)`` with ``input`` shaped
    ``(T*3, H, W)``. For ``denoise_reconstruction`` the input carries
    salt-and-pepper noise drawn from ``(seed, epoch, index)``.
    """

    def __init__(
        self,
        root,
        split: str,
        task: str,
        size: Optional[tuple] = None,
        noise_ratio: float = 0.0,
        seed: int = 0,
        cache: bool = True,
    ):
        self.root = Path(root)
        self.split = split
        self.task = task
        self.size = tuple(size) if size is not None else None
        self.noise_ratio = noise_ratio
        self.seed = seed
        self.epoch = 0
        self.videos = list_videos(self.root / split, require_labels=(split == "test"))
        self.index = clip_index(self.videos, task)
        self._cache: Optional[dict] = {} if cache else None

    def __len__(self):
        return len(self.index)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _frame(self, vi: int, t: int) -> np.ndarray:
        if self._cache is None:
            return read_frame(self.videos[vi].frame_paths[t], self.size)
        key = (vi, t)
        if key not in self._cache:
            self._cache[key] = read_frame(self.videos[vi].frame_paths[t], self.size)
        return self._cache[key]

    def sample(self, i: int) -> ClipSample:
        vi, t = self.index[i]
        video = self.videos[vi]
        span = window_length(self.task)
        inputs = np.stack([self._frame(vi, j) for j in range(t - span + 1, t)] or [self._frame(vi, t)])
        target = self._frame(vi, t)
        label = int(video.labels[t]) if video.labels is not None else 0
        return ClipSample(inputs, target, label, video.video_id, t)

    def __getitem__(self, i: int):
        clip = self.sample(i)
        inputs = clip.inputs
        if self.task == "denoise_reconstruction" and self.noise_ratio > 0:
            seed = np.random.SeedSequence([self.seed, self.epoch, i])
            inputs = np.stack([salt_pepper(f, self.noise_ratio, seed) for f in inputs])
        x = torch.from_numpy(np.ascontiguousarray(inputs.transpose(0, 3, 1, 2))).reshape(
            -1, *inputs.shape[1:3]
        )
        y = torch.from_numpy(np.ascontiguousarray(clip.target.transpose(2, 0, 1)))
        return x, y, clip.label, i

    def clips(self) -> Iterator[ClipSample]:
        for i in range(len(self)):
            yield self.sample(i)


def load_dataset(root, task: str, split: str = "train", **kwargs) -> ClipDataset:
    return ClipDataset(root, split, task, **kwargs)


def validate_layout(root, splits=("train",)) -> None:
    """Raise :class:`DatasetLayoutError` unless the requested splits are well formed."""
    for split in splits:
        list_videos(Path(root) / split, require_labels=(split == "test"))


# --------------------------------------------------------------------------
# synthetic moving shapes

ANOMALY_CLASSES = ("normal", "spatial", "temporal", "spatio_temporal")
NORMAL_SPEED = 5
FAST_SPEED = 10


@dataclass
class SynthScene:
    shape: str = "circle"
    size: int = 10  # circle radius or square half-side, pixels
    speed: int = NORMAL_SPEED
    canvas: tuple = (64, 64)
    start: tuple = (10, 32)  # (x, y) center at t = 0
    direction: int = 1  # +1 moves right, -1 moves left

    def __post_init__(self):
        if self.shape not in ("circle", "square"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        self.canvas = tuple(int(c) for c in self.canvas)
        self.start = tuple(int(c) for c in self.start)
        h, w = self.canvas
        if h < 1 or w < 1 or 2 * self.size + 1 > min(h, w):
            raise ValueError(f"canvas {self.canvas} cannot hold a shape of size {self.size}")
        y = self.start[1]
        if y - self.size < 0 or y + self.size >= h:
            raise ValueError("shape leaves the canvas vertically")

    @property
    def anomaly_class(self) -> str:
        return scene_class(self.shape, self.speed)

    @classmethod
    def for_class(cls, anomaly_class: str, **kwargs) -> "SynthScene":
        shape, speed = CLASS_PARAMS[anomaly_class]
        return cls(shape=shape, speed=speed, **kwargs)

    def center(self, t: int) -> tuple[int, int]:
        x = (self.start[0] + t * self.speed * self.direction) % self.canvas[1]
        return x, self.start[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_class"] = self.anomaly_class
        return d


CLASS_PARAMS = {
    "normal": ("circle", NORMAL_SPEED),
    "spatial": ("square", NORMAL_SPEED),
    "temporal": ("circle", FAST_SPEED),
    "spatio_temporal": ("square", FAST_SPEED),
}


def scene_class(shape: str, speed: int) -> str:
    for name, params in CLASS_PARAMS.items():
        if params == (shape, speed):
            return name
    raise ValueError(f"({shape}, speed {speed}) is not one of the synthetic classes")


def render(scene: SynthScene, t: int) -> np.ndarray:
    """White shape on black, wrapping horizontally; float32 (H, W, 3) in [-1, 1]."""
    h, w = scene.canvas
    cx, cy = scene.center(t)
    ys, xs = np.mgrid[0:h, 0:w]
    dx = np.abs(xs - cx)
    dx = np.minimum(dx, w - dx)
    dy = np.abs(ys - cy)
    if scene.shape == "circle":
        mask = dx * dx + dy * dy <= scene.size * scene.size
    else:
        mask = (dx <= scene.size) & (dy <= scene.size)
    frame = np.full((h, w, 3), -1.0, dtype=np.float32)
    frame[mask] = 1.0
    return frame


def synth_generate(scene: SynthScene, n_frames: int, seed=None, t0: int = 0):
    """Render ``n_frames`` consecutive frames; labels are 1 for anomalous scenes.

    ``seed`` is accepted for interface symmetry; a scene is fully
    deterministic once its start and direction are fixed.
    """
    del seed
    if n_frames < 1:
        raise ValueError("need at least one frame")
    frames = np.stack([render(scene, t0 + t) for t in range(n_frames)])
    labels = np.full(n_frames, int(scene.anomaly_class != "normal"), dtype=np.int64)
    return frames, labels


def random_scene(anomaly_class: str, rng: np.random.Generator, canvas=(64, 64), size: int = 10) -> SynthScene:
    h, w = canvas
    x = int(rng.integers(0, w))
    y = int(rng.integers(size, h - size))
    direction = int(rng.choice([-1, 1]))
    return SynthScene.for_class(anomaly_class, size=size, canvas=canvas, start=(x, y), direction=direction)


@dataclass
class SynthSpec:
    """Size of a generated synthetic dataset."""

    train_videos: int = 8
    train_frames: int = 32
    test_videos_per_class: int = 4
    normal_frames: int = 24
    anomaly_frames: int = 24
    canvas: tuple = (64, 64)
    size: int = 10
    classes: tuple = ("spatial", "temporal", "spatio_temporal")
    seed: int = 0
    extras: dict = field(default_factory=dict)


def write_synthetic_dataset(root, spec: Optional[SynthSpec] = None) -> dict:
    """Write train (normal only) and test videos in the frame-folder layout.

    Each test video opens with a normal segment and continues, from the same
    object position, with a segment of one anomaly class, so every video has
    both labels. Returns the manifest also written to ``root/scene.json``.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    root = Path(root)
    manifest = {"spec": {k: v for k, v in asdict(spec).items() if k != "extras"}, "train": {}, "test": {}}

    for i in range(spec.train_videos):
        scene = random_scene("normal", rng, spec.canvas, spec.size)
        vid = f"{i + 1:02d}"
        frames, _ = synth_generate(scene, spec.train_frames)
        _write_video(root / "train" / vid, frames, None)
        manifest["train"][vid] = [{"scene": scene.to_dict(), "frames": spec.train_frames}]

    vidx = 0
    for cls in spec.classes:
        for _ in range(spec.test_videos_per_class):
            vidx += 1
            vid = f"{vidx:02d}_{cls}"
            normal = random_scene("normal", rng, spec.canvas, spec.size)
            f0, l0 = synth_generate(normal, spec.normal_frames)
            x_next, y = normal.center(spec.normal_frames)
            anomalous = SynthScene.for_class(
                cls, size=spec.size, canvas=spec.canvas, start=(x_next, y), direction=normal.direction
            )
            f1, l1 = synth_generate(anomalous, spec.anomaly_frames)
            _write_video(root / "test" / vid, np.concatenate([f0, f1]), np.concatenate([l0, l1]))
            manifest["test"][vid] = [
                {"scene": normal.to_dict(), "frames": spec.normal_frames},
                {"scene": anomalous.to_dict(), "frames": spec.anomaly_frames},
            ]

    text = json.dumps(manifest, indent=2)
    (root / SCENE_FILE).write_text(text)
    logger.info("wrote synthetic dataset to %s (%d test videos)", root, vidx)
    return json.loads(text)


def _write_video(vdir: Path, frames: np.ndarray, labels) -> None:
    vdir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        write_frame(vdir / FRAME_PATTERN.format(t), frame)
    if labels is not None:
        write_labels(vdir / LABEL_FILE, labels)
