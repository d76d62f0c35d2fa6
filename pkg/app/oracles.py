import logging
import os
import re
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import BBox, ContractViolation, FlowField, Frame, LabelMap, ProbMap, ValidationError, prob_box
from flow import oracle_flow, read_flow
from propagation import RefineContext, crop_resize
from reid import Template
from sequence_io import load_masks
from synthetic import SyntheticSpec, SyntheticVideo

log = logging.getLogger('oracles')

_FLOW_NAME = re.compile(r'^(\d+)_(\d+)\.vsfl$')


def flow_name(i: int, j: int) -> str:
    return f'{i:05d}_{j:05d}.vsfl'


class GroundTruth:
    """Per-frame label maps plus whatever analytic flow is known for the scene."""

    def __init__(self, labels: List[LabelMap], flows: Optional[Dict[Tuple[int, int], FlowField]] = None,
                 spec: Optional[SyntheticSpec] = None):
        if not labels:
            raise ValidationError('Ground truth needs at least one label map')
        self.labels = [np.asarray(label_map) for label_map in labels]
        self.flows = dict(flows or {})
        self.spec = spec

    @classmethod
    def from_video(cls, video: SyntheticVideo) -> 'GroundTruth':
        return cls(video.labels, video.flows, video.spec)

    @classmethod
    def from_directory(cls, directory: str) -> 'GroundTruth':
        """Reads ``gt/`` and ``flow/`` as written by the ``synth`` command."""
        labels = load_masks(os.path.join(directory, 'gt'))
        flows: Dict[Tuple[int, int], FlowField] = {}
        flow_dir = os.path.join(directory, 'flow')
        if os.path.isdir(flow_dir):
            for name in sorted(os.listdir(flow_dir)):
                match = _FLOW_NAME.match(name)
                if match:
                    key = (int(match.group(1)), int(match.group(2)))
                    flows[key] = read_flow(os.path.join(flow_dir, name))
        log.info('Loaded ground truth for %d frames (%d flow fields) from %s', len(labels), len(flows), directory)
        return cls(labels, flows)

    @property
    def num_frames(self) -> int:
        return len(self.labels)

    def _check_frame(self, index: Optional[int]) -> int:
        if index is None or not 0 <= index < self.num_frames:
            raise ContractViolation(f'Frame index {index} has no ground truth ({self.num_frames} frames known)')
        return index

    def mask(self, index: int, instance: int) -> np.ndarray:
        return self.labels[self._check_frame(index)] == instance

    def box(self, index: int, instance: int) -> Optional[BBox]:
        return prob_box(self.mask(index, instance).astype(np.float32), 0.5)

    def flow(self, i: int, j: int) -> FlowField:
        self._check_frame(i)
        self._check_frame(j)
        field = self.flows.get((i, j))
        if field is not None:
            return field
        if self.spec is not None:
            field = oracle_flow(self.spec, i, j)
            self.flows[(i, j)] = field
            return field
        raise ContractViolation(f'No analytic flow recorded from frame {i} to frame {j}')


class OracleFlowEstimator:
    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def estimate(self, src: Frame, dst: Frame) -> FlowField:
        if src.index is None or dst.index is None:
            raise ContractViolation('Oracle flow needs frames that carry their sequence index')
        return self.truth.flow(src.index, dst.index)


class OracleRefiner:
    """Returns the true mask of the instance, resampled exactly like the other patches."""

    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def refine(self, rgb: np.ndarray, flow: FlowField, coarse: ProbMap, *,
               context: Optional[RefineContext] = None) -> ProbMap:
        if context is None or context.box is None:
            raise ContractViolation('Oracle refiner needs the frame, instance and box of the patch')
        height, width = coarse.shape
        mask = self.truth.mask(context.frame, context.instance).astype(np.float32)
        return crop_resize(mask, context.box, (width, height))


class OracleProposals:
    """Proposes the true box of the template's instance whenever it is visible."""

    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def propose(self, frame: Frame, template: Template) -> List[BBox]:
        if frame.index is None:
            raise ContractViolation('Oracle proposals need frames that carry their sequence index')
        box = self.truth.box(frame.index, template.instance)
        return [] if box is None else [box]
