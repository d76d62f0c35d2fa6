import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple

import cv2
import numpy as np
from scipy.ndimage import maximum_filter

from core import BBox, ContractViolation, Frame, ProbMap, ValidationError, iou, prob_box

log = logging.getLogger('reid')

COLOR_BINS = 16
ORIENTATION_BINS = 8
DESCRIPTOR_LENGTH = 3 * COLOR_BINS + ORIENTATION_BINS
DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
NO_CANDIDATE_BOX = BBox(0, 0, 1, 1)


class DescriptorError(ContractViolation):
    """Raised when a descriptor is empty, zero or of mismatched length."""


@dataclass(frozen=True, eq=False)
class Template:
    instance: int
    box: BBox
    image_patch: np.ndarray
    prob_patch: np.ndarray
    descriptor: np.ndarray


@dataclass(frozen=True)
class Candidate:
    box: BBox
    similarity: float


class Reidentification(NamedTuple):
    box: BBox
    score: float

    @property
    def accepted(self) -> bool:
        return self.score >= 0.0


class ProposalGenerator(Protocol):
    def propose(self, frame: Frame, template: Template) -> List[BBox]:
        ...


class DescriptorExtractor(Protocol):
    def describe(self, patch: np.ndarray) -> np.ndarray:
        ...


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DescriptorError(f'Descriptor lengths differ: {a.shape} vs {b.shape}')
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DescriptorError('Cannot compare a zero descriptor')
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def _orientation_histogram(gray: np.ndarray) -> np.ndarray:
    if gray.shape[0] < 2 or gray.shape[1] < 2:
        return np.full(ORIENTATION_BINS, 1.0 / ORIENTATION_BINS)
    gy, gx = np.gradient(gray)
    magnitude = np.hypot(gx, gy)
    moving = magnitude > 0
    if not moving.any():
        # flat patch: uninformative uniform block
        return np.full(ORIENTATION_BINS, 1.0 / ORIENTATION_BINS)
    angle = np.mod(np.arctan2(gy[moving], gx[moving]), 2.0 * math.pi)
    bins = np.floor(angle / (2.0 * math.pi / ORIENTATION_BINS)).astype(np.int64) % ORIENTATION_BINS
    hist = np.bincount(bins, weights=magnitude[moving], minlength=ORIENTATION_BINS)
    return hist / hist.sum()


def _soft_histogram(values: np.ndarray, bins: int) -> np.ndarray:
    """Histogram over [0, 1] where each value votes linearly into its two nearest bin centres."""
    position = np.clip(values.ravel(), 0.0, 1.0) * bins - 0.5
    lower = np.floor(position)
    upper_weight = position - lower
    lower = lower.astype(np.int64)
    hist = np.bincount(np.clip(lower, 0, bins - 1), weights=1.0 - upper_weight, minlength=bins)
    hist += np.bincount(np.clip(lower + 1, 0, bins - 1), weights=upper_weight, minlength=bins)
    return hist / hist.sum()


def histogram_descriptor(patch: np.ndarray) -> np.ndarray:
    """Three 16-bin colour histograms plus an 8-bin gradient orientation histogram."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[0] == 0 or patch.shape[1] == 0:
        raise DescriptorError(f'Cannot describe a patch of shape {patch.shape}')

    blocks = [_soft_histogram(patch[..., channel], COLOR_BINS) for channel in range(3)]
    blocks.append(_orientation_histogram(patch @ LUMA_WEIGHTS))

    vector = np.concatenate(blocks)
    return vector / np.linalg.norm(vector)


class HistogramDescriptor:
    def describe(self, patch: np.ndarray) -> np.ndarray:
        return histogram_descriptor(patch)


def build_template(frame: Frame, mask: ProbMap, instance: int, extractor: DescriptorExtractor) -> Template:
    box = prob_box(mask, 0.5)
    if box is None:
        raise ValidationError(f'First-frame mask of instance {instance} is empty')
    image_patch = np.array(frame.crop(box), dtype=np.float32)
    descriptor = np.asarray(extractor.describe(image_patch), dtype=np.float64)
    if not np.isclose(np.linalg.norm(descriptor), 1.0, atol=1e-6):
        raise DescriptorError(f'{type(extractor).__name__} returned a descriptor that is not unit-norm')
    return Template(
        instance=instance,
        box=box,
        image_patch=image_patch,
        prob_patch=np.array(mask[box.slices], dtype=np.float32),
        descriptor=descriptor,
    )


def non_max_suppression(scored: Sequence[Tuple[float, BBox]], overlap: float, limit: int) -> List[Tuple[float, BBox]]:
    ranked = sorted(scored, key=lambda item: (-item[0], item[1].as_tuple()))
    kept: List[Tuple[float, BBox]] = []
    for score, box in ranked:
        if len(kept) >= limit:
            break
        if all(iou(box, other) <= overlap for _, other in kept):
            kept.append((score, box))
    return kept


def ncc_proposals(
    frame: Frame,
    template: Template,
    scales: Sequence[float] = DEFAULT_SCALES,
    max_proposals: int = 10,
    threshold: float = 0.3,
    nms_iou: float = 0.5,
) -> List[BBox]:
    """Multi-scale normalised cross-correlation of the template patch over the frame."""
    image = np.ascontiguousarray(frame.pixels, dtype=np.float32)
    height, width = frame.shape
    patch = np.ascontiguousarray(template.image_patch, dtype=np.float32)
    scored: List[Tuple[float, BBox]] = []
    for scale in scales:
        tw = max(1, int(round(patch.shape[1] * scale)))
        th = max(1, int(round(patch.shape[0] * scale)))
        if tw > width or th > height:
            continue
        resized = cv2.resize(patch, (tw, th), interpolation=cv2.INTER_LINEAR)
        scores = cv2.matchTemplate(image, resized, cv2.TM_CCOEFF_NORMED)
        scores = np.nan_to_num(scores, nan=0.0, posinf=0.0, neginf=0.0)
        peaks = (scores == maximum_filter(scores, size=3, mode='constant', cval=-np.inf)) & (scores > threshold)
        for y, x in zip(*np.nonzero(peaks)):
            scored.append((float(scores[y, x]), BBox(int(x), int(y), int(x) + tw, int(y) + th)))
    return [box for _, box in non_max_suppression(scored, nms_iou, max_proposals)]


@dataclass(frozen=True)
class NCCProposals:
    scales: Tuple[float, ...] = DEFAULT_SCALES
    max_proposals: int = 10
    threshold: float = 0.3
    nms_iou: float = 0.5

    def propose(self, frame: Frame, template: Template) -> List[BBox]:
        return ncc_proposals(frame, template, self.scales, self.max_proposals, self.threshold, self.nms_iou)


def select_retrieval(
    candidates: Sequence[Candidate],
    current: Optional[BBox],
    rho_reid: float,
    rho_occ: float,
) -> Reidentification:
    """Accept the most similar candidate only if it is similar enough and disagrees with ``current``."""
    if not candidates:
        return Reidentification(NO_CANDIDATE_BOX, -1.0)
    best = min(candidates, key=lambda c: (-c.similarity, c.box.as_tuple()))
    overlap = iou(best.box, current) if current is not None else 0.0
    if best.similarity > rho_reid and overlap < rho_occ:
        return Reidentification(best.box, best.similarity)
    return Reidentification(best.box, -1.0)


@dataclass(frozen=True)
class ReidThresholds:
    rho_reid: float = 0.7
    rho_occ: float = 0.3

    def __post_init__(self):
        for name, value in (('rho_reid', self.rho_reid), ('rho_occ', self.rho_occ)):
            if not 0.0 < value < 1.0:
                raise ValidationError(f'{name} must lie in (0, 1), got {value}')


def score_candidates(
    frame: Frame,
    template: Template,
    boxes: Sequence[BBox],
    extractor: DescriptorExtractor,
) -> List[Candidate]:
    return [
        Candidate(box, cosine_similarity(extractor.describe(frame.crop(box)), template.descriptor))
        for box in boxes
    ]


def reidentify(
    frame: Frame,
    prob: ProbMap,
    template: Template,
    generator: ProposalGenerator,
    extractor: DescriptorExtractor,
    rho_reid: float = 0.7,
    rho_occ: float = 0.3,
) -> Reidentification:
    thresholds = ReidThresholds(rho_reid, rho_occ)
    boxes = generator.propose(frame, template)
    for box in boxes:
        if not box.is_valid(frame.width, frame.height):
            raise ContractViolation(f'{type(generator).__name__} proposed an invalid box {box}')
    candidates = score_candidates(frame, template, boxes, extractor)
    return select_retrieval(candidates, prob_box(prob, 0.5), thresholds.rho_reid, thresholds.rho_occ)
