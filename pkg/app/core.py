import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

# Row-major (H, W) float arrays in [0, 1].
ProbMap = np.ndarray
# Row-major (H, W, 2) float arrays of (dx, dy) in pixels.
FlowField = np.ndarray
# Row-major (H, W) integer arrays in {0..K}, 0 = background.
LabelMap = np.ndarray


class VosError(Exception):
    """Base error for the segmentation pipeline."""


class ValidationError(VosError):
    """Raised when user supplied input is invalid."""


class ContractViolation(VosError):
    """Raised when a component breaks its interface contract."""


@dataclass(frozen=True, order=True)
class BBox:
    """Half-open pixel box: x0, y0 inclusive, x1, y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    @property
    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def is_valid(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True, eq=False)
class Frame:
    pixels: np.ndarray
    index: Optional[int] = None

    def __post_init__(self):
        pixels = self.pixels
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValidationError(f'Frame pixels must have shape (H, W, 3), got {pixels.shape}')
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValidationError('Frame must be at least 1x1')
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValidationError('Frame channel values must lie in [0, 1]')

    @classmethod
    def from_uint8(cls, array: np.ndarray, index: Optional[int] = None) -> 'Frame':
        rgb = np.asarray(array, dtype=np.float32) / 255.0
        return cls(pixels=rgb, index=index)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def crop(self, box: BBox) -> np.ndarray:
        return self.pixels[box.slices]


@dataclass(eq=False)
class VideoSequence:
    frames: List[Frame] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValidationError(f'A sequence needs at least 2 frames, got {len(self.frames)}')
        shape = self.frames[0].shape
        for position, frame in enumerate(self.frames):
            if frame.shape != shape:
                raise ValidationError(
                    f'Frame {position} has size {frame.width}x{frame.height}, expected {shape[1]}x{shape[0]}'
                )
        self.frames = [
            frame if frame.index == position else Frame(frame.pixels, index=position)
            for position, frame in enumerate(self.frames)
        ]

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> Frame:
        return self.frames[index]

    def __iter__(self):
        return iter(self.frames)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].shape

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


def validate_prob_map(prob: np.ndarray, shape: Optional[Tuple[int, int]] = None, *, name: str = 'probability map') -> None:
    if prob.ndim != 2:
        raise ContractViolation(f'{name} must be 2-D, got shape {prob.shape}')
    if shape is not None and prob.shape != tuple(shape):
        raise ContractViolation(f'{name} has shape {prob.shape}, expected {tuple(shape)}')
    if prob.size and (not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0):
        raise ContractViolation(f'{name} values must lie in [0, 1]')


def prob_box(prob: ProbMap, threshold: float = 0.5) -> Optional[BBox]:
    """Tightest box around pixels strictly above ``threshold``, or None."""
    support = prob > threshold
    rows = np.flatnonzero(support.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(support.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / float(a.area + b.area - inter)


def enlarge_box(box: BBox, factor: float, width: int, height: int) -> BBox:
    """Scale ``box`` about its center, round outward and clamp to the image."""
    if factor < 1.0:
        raise ValidationError(f'Enlargement factor must be >= 1, got {factor}')
    cx = (box.x0 + box.x1) / 2.0
    cy = (box.y0 + box.y1) / 2.0
    half_w = box.width * factor / 2.0
    half_h = box.height * factor / 2.0
    # round() guards against float noise turning an exact edge into the next pixel
    x0 = math.floor(round(cx - half_w, 9))
    y0 = math.floor(round(cy - half_h, 9))
    x1 = math.ceil(round(cx + half_w, 9))
    y1 = math.ceil(round(cy + half_h, 9))
    return BBox(
        max(0, min(x0, box.x0)),
        max(0, min(y0, box.y0)),
        min(width, max(x1, box.x1)),
        min(height, max(y1, box.y1)),
    )


def full_box(width: int, height: int) -> BBox:
    return BBox(0, 0, width, height)
