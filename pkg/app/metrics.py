import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from core import LabelMap, ValidationError

log = logging.getLogger('metrics')

RECALL_THRESHOLD = 0.5
TOLERANCE_RATIO = 0.008
_FOUR_CONNECTED = generate_binary_structure(2, 1)


@dataclass(frozen=True)
class FrameScore:
    frame: int
    instance: int
    j: float
    f: float


@dataclass(frozen=True)
class MeasureStats:
    mean: float
    recall: float
    decay: float
    # set when some series was too short for a decay estimate
    short_series: bool = False


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValidationError(f'Prediction {pred.shape} and ground truth {gt.shape} differ in size')


def region_jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)


def default_tolerance(height: int, width: int) -> int:
    return int(math.ceil(TOLERANCE_RATIO * math.hypot(height, width)))


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: Optional[float] = None) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_pair(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(*gt.shape)
    if tolerance < 0:
        raise ValidationError(f'Boundary tolerance must be >= 0, got {tolerance}')

    pred_edge = boundary(pred)
    gt_edge = boundary(gt)
    if not pred_edge.any() and not gt_edge.any():
        return 1.0
    if not pred_edge.any() or not gt_edge.any():
        return 0.0

    to_gt = distance_transform_edt(~gt_edge)
    to_pred = distance_transform_edt(~pred_edge)
    precision = float(np.mean(to_gt[pred_edge] <= tolerance))
    recall = float(np.mean(to_pred[gt_edge] <= tolerance))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _decay(series: np.ndarray) -> float:
    quarters = np.array_split(series, 4)
    return float(np.mean(quarters[0]) - np.mean(quarters[-1]))


def aggregate(values: Union[Sequence[float], Sequence[Sequence[float]]]) -> MeasureStats:
    """Statistics over one per-frame series or over one series per instance.

    Mean averages the per-instance means, recall counts instances whose mean
    exceeds 0.5 and decay compares the first and last temporal quarters.
    """
    values = list(values)
    if values and np.ndim(values[0]) == 0:
        values = [values]
    series = [np.asarray(v, dtype=np.float64) for v in values]
    series = [s for s in series if s.size]
    if not series:
        return MeasureStats(mean=0.0, recall=0.0, decay=0.0, short_series=True)

    means = np.array([s.mean() for s in series])
    short = any(s.size < 4 for s in series)
    decays = [0.0 if s.size < 4 else _decay(s) for s in series]
    if short:
        log.warning('Decay undefined for series shorter than 4 frames; reported as 0')
    return MeasureStats(
        mean=float(means.mean()),
        recall=float(np.mean(means > RECALL_THRESHOLD)),
        decay=float(np.mean(decays)),
        short_series=short,
    )


def global_mean(j: MeasureStats, f: MeasureStats) -> float:
    return (j.mean + f.mean) / 2.0


@dataclass(frozen=True)
class InstanceStats:
    instance: int
    j: MeasureStats
    f: MeasureStats


@dataclass(eq=False)
class SequenceEvaluation:
    j: MeasureStats
    f: MeasureStats
    global_mean: float
    tolerance: float
    frames: List[FrameScore] = field(default_factory=list)
    instances: List[InstanceStats] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        return {
            'global_mean': self.global_mean,
            'tolerance': self.tolerance,
            'J': asdict(self.j),
            'F': asdict(self.f),
            'instances': [
                {'instance': stats.instance, 'J': asdict(stats.j), 'F': asdict(stats.f)}
                for stats in self.instances
            ],
            'frames': [asdict(score) for score in self.frames],
        }


def evaluation_instances(gt: Sequence[LabelMap]) -> List[int]:
    labels = np.unique(np.asarray(gt[0]))
    instances = [int(label) for label in labels if label > 0]
    if not instances:
        instances = sorted({int(label) for label_map in gt for label in np.unique(label_map) if label > 0})
    return instances


def evaluate_sequence(
    pred: Sequence[LabelMap],
    gt: Sequence[LabelMap],
    tolerance: Optional[float] = None,
    frames: Optional[Sequence[int]] = None,
) -> SequenceEvaluation:
    """Scores every frame after the first (or only ``frames``) for every annotated instance."""
    if len(pred) != len(gt):
        raise ValidationError(f'Prediction has {len(pred)} frames, ground truth has {len(gt)}')
    if len(gt) < 2:
        raise ValidationError('Evaluation needs at least 2 frames')
    for index, (p, g) in enumerate(zip(pred, gt)):
        if np.shape(p) != np.shape(g):
            raise ValidationError(f'Frame {index}: prediction {np.shape(p)} and ground truth {np.shape(g)} differ')
    if tolerance is None:
        tolerance = default_tolerance(*np.shape(gt[0]))

    indices = list(frames) if frames is not None else list(range(1, len(gt)))
    instances = evaluation_instances(gt)
    scores: List[FrameScore] = []
    per_instance: List[InstanceStats] = []
    j_series, f_series = [], []
    for instance in instances:
        js, fs = [], []
        for index in indices:
            p = np.asarray(pred[index]) == instance
            g = np.asarray(gt[index]) == instance
            score = FrameScore(index, instance, region_jaccard(p, g), boundary_f(p, g, tolerance))
            scores.append(score)
            js.append(score.j)
            fs.append(score.f)
        j_series.append(js)
        f_series.append(fs)
        per_instance.append(InstanceStats(instance, aggregate(js), aggregate(fs)))

    j_stats = aggregate(j_series)
    f_stats = aggregate(f_series)
    return SequenceEvaluation(
        j=j_stats,
        f=f_stats,
        global_mean=global_mean(j_stats, f_stats),
        tolerance=float(tolerance),
        frames=scores,
        instances=per_instance,
    )


def format_table(evaluation: SequenceEvaluation) -> str:
    rows = [
        ('Global Mean', evaluation.global_mean),
        ('J Mean', evaluation.j.mean),
        ('J Recall', evaluation.j.recall),
        ('J Decay', evaluation.j.decay),
        ('F Mean', evaluation.f.mean),
        ('F Recall', evaluation.f.recall),
        ('F Decay', evaluation.f.decay),
    ]
    lines = [f'{"Measure":<12} {"Value":>8}']
    lines += [f'{name:<12} {value:>8.3f}' for name, value in rows]
    if evaluation.instances:
        lines.append('')
        lines.append(f'{"Instance":<9} {"J Mean":>7} {"J Rec":>7} {"J Decay":>8} {"F Mean":>7} {"F Rec":>7} {"F Decay":>8}')
        for stats in evaluation.instances:
            lines.append(
                f'{stats.instance:<9d} {stats.j.mean:>7.3f} {stats.j.recall:>7.3f} {stats.j.decay:>8.3f} '
                f'{stats.f.mean:>7.3f} {stats.f.recall:>7.3f} {stats.f.decay:>8.3f}'
            )
    if evaluation.j.short_series:
        lines.append('')
        lines.append('warning: fewer than 4 scored frames, decay reported as 0')
    return '\n'.join(lines) + '\n'
