"""Synthetic image and clip datasets.

``shapes2d``: one static 5x5 pattern per image at a random position; the
class is the pattern. ``motion3d``: one pattern translating at one pixel per
frame with toroidal wrap-around; the class is the direction of motion and the
pattern is drawn independently of it. Because the start position is uniform
on the torus, every single frame has the same distribution under every
class, so a frame-level classifier cannot beat chance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import F32, Rng


def _disc() -> np.ndarray:
    yy, xx = np.mgrid[-2:3, -2:3]
    return (yy**2 + xx**2 <= 5).astype(np.float64)


def _square() -> np.ndarray:
    p = np.ones((5, 5))
    p[1:4, 1:4] = 0
    return p


def _cross() -> np.ndarray:
    p = np.zeros((5, 5))
    p[2, :] = 1
    p[:, 2] = 1
    return p


def _bar() -> np.ndarray:
    p = np.zeros((5, 5))
    p[1:4, :] = 1
    p[1:4, 2] = 0
    return p


def _xshape() -> np.ndarray:
    p = np.eye(5)
    return np.maximum(p, p[:, ::-1])


def _triangle() -> np.ndarray:
    return np.tril(np.ones((5, 5)))


PATTERNS = {
    "square": _square(),
    "disc": _disc(),
    "cross": _cross(),
    "bar": _bar(),
    "xshape": _xshape(),
    "triangle": _triangle(),
}
PATTERN_NAMES = tuple(PATTERNS)
PATTERN_SIZE = 5
# Clips are drawn from the first four patterns regardless of num_classes.
MOTION_PATTERNS = PATTERN_NAMES[:4]

# (dy, dx) per frame; up is toward row 0.
DIRECTIONS = {
    "up": (-1, 0),
    "down": (1, 0),
    "left": (0, -1),
    "right": (0, 1),
}
MOTION_CLASSES = {2: ("up", "down"), 4: ("up", "down", "left", "right")}
MIN_CLIP_T = 8


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    task: str = "shapes2d"
    num_classes: int = 4
    samples_train: int = 512
    samples_test: int = 512
    h: int = 16
    w: int = 16
    t: int = 8
    noise_std: float = 0.1
    seed: int = 0
    wrap: bool = True

    def __post_init__(self):
        if self.task not in ("shapes2d", "motion3d"):
            raise DataError(f"unknown task {self.task!r}")
        if self.samples_train < 1 or self.samples_test < 1:
            raise DataError("splits need at least one sample")
        if not self.noise_std >= 0:
            raise DataError("noise_std must be >= 0")
        if self.h < PATTERN_SIZE or self.w < PATTERN_SIZE:
            raise DataError(f"frame {self.h}x{self.w} is smaller than the {PATTERN_SIZE}x{PATTERN_SIZE} pattern")
        if self.task == "shapes2d":
            if not 1 <= self.num_classes <= len(PATTERNS):
                raise DataError(f"shapes2d supports 1..{len(PATTERNS)} classes")
        else:
            if self.num_classes not in MOTION_CLASSES:
                raise DataError("motion3d supports 2 or 4 classes")
            if self.t < MIN_CLIP_T:
                raise DataError(f"clips need at least {MIN_CLIP_T} frames, got {self.t}")
            if not self.wrap and PATTERN_SIZE + self.t - 1 > min(self.h, self.w):
                raise DataError(
                    f"without wrap-around a pattern moving 1 px/frame for {self.t} frames leaves a "
                    f"{self.h}x{self.w} frame"
                )


@dataclass
class ClipBatch:
    """``clips`` is (N, C, T, H, W) for motion3d and (N, C, H, W) for shapes2d."""

    clips: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.clips.shape[0] < 1 or self.labels.shape != (self.clips.shape[0],):
            raise DataError("need N >= 1 samples with one label each")
        if self.clips.min() < 0 or self.clips.max() > 1:
            raise DataError("intensities must lie in [0, 1]")

    def __len__(self) -> int:
        return self.clips.shape[0]

    def as_dataset(self):
        return self.clips, self.labels


def render(pattern: str, top: int, left: int, h: int, w: int, wrap: bool = True) -> np.ndarray:
    """Pattern on a black ``h x w`` canvas with its top-left corner at (top, left)."""
    p = PATTERNS[pattern]
    canvas = np.zeros((h, w))
    if wrap:
        rows = (top + np.arange(PATTERN_SIZE)) % h
        cols = (left + np.arange(PATTERN_SIZE)) % w
        canvas[np.ix_(rows, cols)] = p
    else:
        if not (0 <= top <= h - PATTERN_SIZE and 0 <= left <= w - PATTERN_SIZE):
            raise DataError(f"pattern at ({top}, {left}) leaves the frame")
        canvas[top:top + PATTERN_SIZE, left:left + PATTERN_SIZE] = p
    return canvas


def _balanced_labels(n: int, k: int, rng: Rng) -> np.ndarray:
    """Each class appears floor(n/k) or ceil(n/k) times, in random order."""
    return (np.arange(n) % k)[rng.permutation(n)]


def _noisy(x: np.ndarray, std: float, rng: Rng) -> np.ndarray:
    if std > 0:
        x = x + rng.normal(x.shape, 0.0, std)
    return np.clip(x, 0.0, 1.0).astype(F32)


def _shapes_split(cfg: DatasetConfig, n: int, rng: Rng) -> ClipBatch:
    labels = _balanced_labels(n, cfg.num_classes, rng.split("labels"))
    tops = rng.integers(0, cfg.h - PATTERN_SIZE + 1, size=n)
    lefts = rng.integers(0, cfg.w - PATTERN_SIZE + 1, size=n)
    images = np.stack([
        render(PATTERN_NAMES[c], t, l, cfg.h, cfg.w, wrap=False)
        for c, t, l in zip(labels, tops, lefts)
    ])[:, None]
    return ClipBatch(_noisy(images, cfg.noise_std, rng.split("noise")), labels.astype(np.int64))


def _motion_split(cfg: DatasetConfig, n: int, rng: Rng) -> ClipBatch:
    names = MOTION_CLASSES[cfg.num_classes]
    labels = _balanced_labels(n, cfg.num_classes, rng.split("labels"))
    pats = rng.integers(0, len(MOTION_PATTERNS), size=n)
    if cfg.wrap:
        tops = rng.integers(0, cfg.h, size=n)
        lefts = rng.integers(0, cfg.w, size=n)
    else:
        # start far enough from the edge the pattern is heading to
        travel = cfg.t - 1
        tops = rng.integers(0, cfg.h - PATTERN_SIZE - travel + 1, size=n)
        lefts = rng.integers(0, cfg.w - PATTERN_SIZE - travel + 1, size=n)
    clips = np.zeros((n, 1, cfg.t, cfg.h, cfg.w))
    for i in range(n):
        dy, dx = DIRECTIONS[names[labels[i]]]
        top, left = tops[i], lefts[i]
        if not cfg.wrap:
            top += travel if dy < 0 else 0
            left += travel if dx < 0 else 0
        for f in range(cfg.t):
            clips[i, 0, f] = render(MOTION_PATTERNS[pats[i]], top + dy * f, left + dx * f,
                                    cfg.h, cfg.w, cfg.wrap)
    return ClipBatch(_noisy(clips, cfg.noise_std, rng.split("noise")), labels.astype(np.int64))


def _generate(cfg: DatasetConfig, split_fn) -> tuple[ClipBatch, ClipBatch]:
    root = Rng(cfg.seed).split(cfg.task)
    return (split_fn(cfg, cfg.samples_train, root.split("train")),
            split_fn(cfg, cfg.samples_test, root.split("test")))


def gen_shapes2d(cfg: DatasetConfig) -> tuple[ClipBatch, ClipBatch]:
    if cfg.task != "shapes2d":
        raise DataError("config task is not shapes2d")
    return _generate(cfg, _shapes_split)


def gen_motion3d(cfg: DatasetConfig) -> tuple[ClipBatch, ClipBatch]:
    if cfg.task != "motion3d":
        raise DataError("config task is not motion3d")
    return _generate(cfg, _motion_split)


def generate(cfg: DatasetConfig) -> tuple[ClipBatch, ClipBatch]:
    return gen_shapes2d(cfg) if cfg.task == "shapes2d" else gen_motion3d(cfg)


def frames_of(batch: ClipBatch) -> ClipBatch:
    """Middle frame (index T // 2) of every clip, labels unchanged."""
    if batch.clips.ndim != 5:
        raise DataError(f"expected (N, C, T, H, W) clips, got {batch.clips.shape}")
    mid = batch.clips.shape[2] // 2
    return ClipBatch(np.ascontiguousarray(batch.clips[:, :, mid]), batch.labels.copy())
