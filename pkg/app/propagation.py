import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple

import cv2
import numpy as np
from scipy.ndimage import uniform_filter

from core import (
    BBox,
    ContractViolation,
    FlowField,
    Frame,
    ProbMap,
    ValidationError,
    enlarge_box,
    full_box,
    prob_box,
)
from flow import DimensionMismatchError, FlowEstimator, warp_bilinear

log = logging.getLogger('propagation')

CROP_MODES = ('box', 'full')


class RefinerContractError(ContractViolation):
    """Raised when a mask refiner returns an out-of-range or misshapen patch."""


@dataclass(frozen=True)
class PropagationConfig:
    patch_size: int = 256
    context_factor: float = 1.25
    box_threshold: float = 0.5
    crop_mode: str = 'box'

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValidationError(f'Patch size must be positive, got {self.patch_size}')
        if self.context_factor < 1.0:
            raise ValidationError(f'Context factor must be >= 1, got {self.context_factor}')
        if self.crop_mode not in CROP_MODES:
            raise ValidationError(f'Unknown crop mode "{self.crop_mode}"')

    @property
    def patch_shape(self) -> Tuple[int, int]:
        return self.patch_size, self.patch_size


@dataclass(frozen=True)
class PatchGeometry:
    box: BBox
    size: Tuple[int, int]
    scale: Tuple[float, float]

    @classmethod
    def for_box(cls, box: BBox, size: Tuple[int, int]) -> 'PatchGeometry':
        width, height = size
        return cls(box=box, size=size, scale=(width / box.width, height / box.height))


@dataclass(frozen=True)
class RefineContext:
    """Where a patch came from; only ground-truth backed refiners read it."""

    frame: int
    instance: int
    box: Optional[BBox] = None


class MaskRefiner(Protocol):
    def refine(
        self,
        rgb: np.ndarray,
        flow: FlowField,
        coarse: ProbMap,
        *,
        context: Optional[RefineContext] = None,
    ) -> ProbMap:
        ...


def crop_resize(array: np.ndarray, box: BBox, size: Tuple[int, int], *, is_flow: bool = False) -> np.ndarray:
    """Bilinearly resample the contents of ``box`` to ``size`` = (width, height)."""
    crop = np.ascontiguousarray(array[box.slices], dtype=np.float32)
    resized = cv2.resize(crop, size, interpolation=cv2.INTER_LINEAR)
    if is_flow:
        geometry = PatchGeometry.for_box(box, size)
        resized = resized * np.array(geometry.scale, dtype=np.float32)
    elif array.ndim == 2 or (array.ndim == 3 and array.shape[2] == 3):
        resized = np.clip(resized, 0.0, 1.0)
    return resized.astype(np.float32)


def uncrop(patch: ProbMap, box: BBox, shape: Tuple[int, int]) -> ProbMap:
    """Resize ``patch`` back to ``box`` and paste it into a zero map of ``shape`` = (H, W)."""
    out = np.zeros(shape, dtype=np.float32)
    restored = cv2.resize(np.ascontiguousarray(patch, dtype=np.float32), (box.width, box.height),
                          interpolation=cv2.INTER_LINEAR)
    out[box.slices] = np.clip(restored.reshape(box.height, box.width), 0.0, 1.0)
    return out


def box_smooth(prob: ProbMap) -> ProbMap:
    return uniform_filter(np.asarray(prob, dtype=np.float64), size=3, mode='nearest')


class IdentityRefiner:
    def refine(self, rgb, flow, coarse, *, context=None):
        return np.array(coarse, dtype=np.float32, copy=True)


@dataclass(frozen=True)
class ColorModelRefiner:
    """Foreground/background colour histograms re-score the coarse map."""

    fg_threshold: float = 0.8
    bg_threshold: float = 0.2
    min_support: int = 16
    bins: int = 16

    def _quantize(self, rgb: np.ndarray) -> np.ndarray:
        levels = np.clip(np.floor(rgb * self.bins), 0, self.bins - 1).astype(np.int64)
        return (levels[..., 0] * self.bins + levels[..., 1]) * self.bins + levels[..., 2]

    def refine(self, rgb, flow, coarse, *, context=None):
        coarse = np.asarray(coarse, dtype=np.float32)
        fg = coarse > self.fg_threshold
        bg = coarse < self.bg_threshold
        fg_count = int(fg.sum())
        bg_count = int(bg.sum())
        if fg_count < self.min_support or bg_count < self.min_support:
            return coarse.copy()

        codes = self._quantize(np.asarray(rgb))
        total = self.bins ** 3
        fg_hist = np.bincount(codes[fg], minlength=total) / fg_count
        bg_hist = np.bincount(codes[bg], minlength=total) / bg_count
        p_fg = fg_hist[codes]
        p_bg = bg_hist[codes]
        denom = p_fg + p_bg
        ratio = np.full(coarse.shape, 0.5)
        seen = denom > 0
        ratio[seen] = p_fg[seen] / denom[seen]

        blended = 0.5 * (ratio + coarse)
        return np.clip(box_smooth(blended), 0.0, 1.0).astype(np.float32)


def color_model_refine(rgb: np.ndarray, flow: FlowField, coarse: ProbMap) -> ProbMap:
    return ColorModelRefiner().refine(rgb, flow, coarse)


def apply_refiner(
    refiner: MaskRefiner,
    rgb: np.ndarray,
    flow: FlowField,
    coarse: ProbMap,
    context: Optional[RefineContext] = None,
) -> ProbMap:
    refined = np.asarray(refiner.refine(rgb, flow, coarse, context=context), dtype=np.float32)
    name = type(refiner).__name__
    if refined.shape != coarse.shape:
        raise RefinerContractError(f'{name} returned a patch of shape {refined.shape}, expected {coarse.shape}')
    if not np.all(np.isfinite(refined)) or refined.min() < 0.0 or refined.max() > 1.0:
        raise RefinerContractError(f'{name} returned values outside [0, 1]')
    return refined


def propagation_box(coarse: ProbMap, cfg: PropagationConfig) -> Optional[BBox]:
    box = prob_box(coarse, cfg.box_threshold)
    if box is None:
        return None
    height, width = coarse.shape
    if cfg.crop_mode == 'full':
        return full_box(width, height)
    return enlarge_box(box, cfg.context_factor, width, height)


def propagate_mask(
    frame_i: Frame,
    frame_j: Frame,
    prob_i: ProbMap,
    flow: FlowEstimator,
    refiner: MaskRefiner,
    cfg: PropagationConfig,
    *,
    context: Optional[RefineContext] = None,
) -> ProbMap:
    """Carry one instance's map from frame i to the adjacent frame j."""
    if frame_i.shape != frame_j.shape or prob_i.shape != frame_j.shape:
        raise DimensionMismatchError(
            f'Frames {frame_i.shape}, {frame_j.shape} and map {prob_i.shape} must share dimensions'
        )
    shape = frame_j.shape
    if not np.any(prob_i > cfg.box_threshold):
        return np.zeros(shape, dtype=np.float32)

    # backward warp: the field lives on frame j's grid and points into frame i
    field = flow.estimate(frame_j, frame_i)
    if field.shape != (*shape, 2):
        raise ContractViolation(f'{type(flow).__name__} returned a field of shape {field.shape}')
    coarse = warp_bilinear(prob_i, field)

    box = propagation_box(coarse, cfg)
    if box is None:
        log.debug('Instance lost between frames %s and %s', frame_i.index, frame_j.index)
        return np.zeros(shape, dtype=np.float32)

    size = (cfg.patch_size, cfg.patch_size)
    rgb_patch = crop_resize(frame_j.pixels, box, size)
    flow_patch = crop_resize(field, box, size, is_flow=True)
    coarse_patch = crop_resize(coarse, box, size)
    if context is not None:
        context = dataclasses.replace(context, box=box)
    refined = apply_refiner(refiner, rgb_patch, flow_patch, coarse_patch, context)
    return uncrop(refined, box, shape)
