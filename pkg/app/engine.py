import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import anyio
import anyio.to_thread
import numpy as np
import psutil

from core import BBox, ContractViolation, LabelMap, ProbMap, ValidationError, VideoSequence, VosError, validate_prob_map
from flow import CachedFlow, FlowEstimator
from propagation import (
    MaskRefiner,
    PropagationConfig,
    RefineContext,
    apply_refiner,
    crop_resize,
    propagate_mask,
    uncrop,
)
from reid import DescriptorExtractor, ProposalGenerator, ReidThresholds, Template, build_template, reidentify

log = logging.getLogger('engine')

FORWARD = 'forward'
BACKWARD = 'backward'


def worker_count() -> int:
    """``VOSREID_THREADS`` when set, otherwise the number of logical CPUs."""
    value = os.environ.get('VOSREID_THREADS', '').strip()
    if value:
        try:
            workers = int(value)
        except ValueError as exc:
            raise ValidationError(f'VOSREID_THREADS must be an integer, got "{value}"') from exc
        if workers < 1:
            raise ValidationError(f'VOSREID_THREADS must be at least 1, got {workers}')
        return workers
    try:
        return psutil.cpu_count(logical=True) or 1
    except Exception:
        return 1


@dataclass(frozen=True)
class EngineConfig:
    rho_reid: float = 0.7
    rho_occ: float = 0.3
    patch_size: int = 256
    context_factor: float = 1.25
    crop_mode: str = 'box'
    flow_backend: str = 'block_matching'
    refiner_backend: str = 'color_model'
    proposal_backend: str = 'ncc'
    descriptor_backend: str = 'histogram'
    # None caps the retrieval loop at N * K
    max_iterations: Optional[int] = None
    reid_enabled: bool = True
    workers: Optional[int] = None

    def __post_init__(self):
        ReidThresholds(self.rho_reid, self.rho_occ)
        self.propagation()
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValidationError(f'max_iterations must be at least 1, got {self.max_iterations}')
        if self.workers is not None and self.workers < 1:
            raise ValidationError(f'workers must be at least 1, got {self.workers}')

    def propagation(self) -> PropagationConfig:
        return PropagationConfig(
            patch_size=self.patch_size,
            context_factor=self.context_factor,
            crop_mode=self.crop_mode,
        )


@dataclass(frozen=True)
class Components:
    flow: FlowEstimator
    refiner: MaskRefiner
    generator: ProposalGenerator
    extractor: DescriptorExtractor


@dataclass(frozen=True)
class Retrieval:
    frame: int
    # 0-based position; the label in masks is instance + 1
    instance: int
    box: BBox
    score: float


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    frame: int
    instance: int
    score: float
    box: tuple
    forward: int
    backward: int

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class EngineState:
    sequence: VideoSequence
    templates: List[Template]
    # (N, K, H, W) float32
    probs: np.ndarray
    # (N, K) anchor frame of each cell
    checkpoints: np.ndarray
    iteration: int = 0

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_instances(self) -> int:
        return self.probs.shape[1]


@dataclass(eq=False)
class EngineResult:
    probs: np.ndarray
    labels: List[LabelMap]
    checkpoints: np.ndarray
    iterations: List[IterationRecord] = field(default_factory=list)
    truncated: bool = False


def merge_scores(probs: np.ndarray) -> np.ndarray:
    """Normalised (K + 1, H, W) scores; slot 0 is the background term."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] < 1:
        raise ContractViolation(f'Expected (K, H, W) maps with K >= 1, got shape {probs.shape}')
    background = np.prod(1.0 - probs, axis=0)
    unnormalised = np.concatenate([background[None], probs], axis=0)
    return unnormalised / unnormalised.sum(axis=0, keepdims=True)


def merge(probs: np.ndarray) -> LabelMap:
    """Per-pixel argmax over background and instances; exact ties go to the lowest label."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] < 1:
        raise ContractViolation(f'Expected (K, H, W) maps with K >= 1, got shape {probs.shape}')
    background = np.prod(1.0 - probs, axis=0)
    # dividing every score by the same Z cannot change the argmax
    unnormalised = np.concatenate([background[None], probs], axis=0)
    return np.argmax(unnormalised, axis=0).astype(np.int32)


class Engine:
    def __init__(self, cfg: EngineConfig, components: Components):
        self.cfg = cfg
        self.components = components
        self.propagation_cfg = cfg.propagation()
        self.flow = CachedFlow(components.flow)
        self.workers = cfg.workers or worker_count()

    def build_templates(self, sequence: VideoSequence, first_masks: Sequence[ProbMap]) -> List[Template]:
        first = sequence[0]
        return [
            build_template(first, mask, instance=k + 1, extractor=self.components.extractor)
            for k, mask in enumerate(first_masks)
        ]

    def _validate_masks(self, sequence: VideoSequence, first_masks: Sequence[ProbMap]) -> np.ndarray:
        if len(first_masks) < 1:
            raise ValidationError('At least one first-frame mask is required')
        masks = []
        for k, mask in enumerate(first_masks):
            mask = np.asarray(mask, dtype=np.float32)
            if mask.shape != sequence.shape:
                raise ValidationError(
                    f'First-frame mask {k + 1} has shape {mask.shape}, frames are {sequence.shape}'
                )
            try:
                validate_prob_map(mask, name=f'first-frame mask {k + 1}')
            except ContractViolation as exc:
                raise ValidationError(str(exc)) from exc
            masks.append(mask)
        return np.stack(masks)

    def _propagate(self, state: EngineState, src: int, dst: int, k: int) -> ProbMap:
        sequence = state.sequence
        return propagate_mask(
            sequence[src],
            sequence[dst],
            state.probs[src, k],
            self.flow,
            self.components.refiner,
            self.propagation_cfg,
            context=RefineContext(frame=dst, instance=k + 1),
        )

    def initialize(self, sequence: VideoSequence, first_masks: Sequence[ProbMap]) -> EngineState:
        masks = self._validate_masks(sequence, first_masks)
        templates = self.build_templates(sequence, masks)
        num_frames, num_instances = len(sequence), masks.shape[0]
        probs = np.zeros((num_frames, num_instances, *sequence.shape), dtype=np.float32)
        probs[0] = masks
        state = EngineState(
            sequence=sequence,
            templates=templates,
            probs=probs,
            checkpoints=np.zeros((num_frames, num_instances), dtype=np.int64),
        )
        for i in range(1, num_frames):
            for k in range(num_instances):
                state.probs[i, k] = self._propagate(state, i - 1, i, k)
        log.debug('Initialised %d instances over %d frames', num_instances, num_frames)
        return state

    def _reidentify_at(self, state: EngineState, i: int, k: int) -> Optional[Retrieval]:
        result = reidentify(
            state.sequence[i],
            state.probs[i, k],
            state.templates[k],
            self.components.generator,
            self.components.extractor,
            self.cfg.rho_reid,
            self.cfg.rho_occ,
        )
        if not result.accepted:
            return None
        return Retrieval(frame=i, instance=k, box=result.box, score=result.score)

    async def _scan_concurrently(self, state: EngineState, positions: List[tuple]) -> List[Optional[Retrieval]]:
        limiter = anyio.CapacityLimiter(self.workers)
        results: List[Optional[Retrieval]] = [None] * len(positions)
        errors: List[Optional[VosError]] = [None] * len(positions)

        async def score(slot: int, i: int, k: int) -> None:
            try:
                results[slot] = await anyio.to_thread.run_sync(self._reidentify_at, state, i, k, limiter=limiter)
            except VosError as exc:
                errors[slot] = exc

        async with anyio.create_task_group() as tg:
            for slot, (i, k) in enumerate(positions):
                tg.start_soon(score, slot, i, k)

        for error in errors:
            if error is not None:
                raise error
        return results

    def scan_retrievals(self, state: EngineState) -> Optional[Retrieval]:
        """Best accepted retrieval over every frame after the first whose cell is not its own anchor."""
        positions = [
            (i, k)
            for i in range(1, state.num_frames)
            for k in range(state.num_instances)
            if state.checkpoints[i, k] != i
        ]
        if not positions:
            return None
        if self.workers == 1:
            results = [self._reidentify_at(state, i, k) for i, k in positions]
        else:
            results = anyio.run(self._scan_concurrently, state, positions)
        accepted = [result for result in results if result is not None]
        # strict improvement in scan order: the earliest (i, k) wins equal scores
        return min(accepted, key=lambda r: (-r.score, r.frame, r.instance), default=None)

    def recover(self, state: EngineState, retrieval: Retrieval) -> None:
        i, k, box = retrieval.frame, retrieval.instance, retrieval.box
        sequence = state.sequence
        if not box.is_valid(sequence.width, sequence.height):
            raise ContractViolation(f'Retrieved box {box} lies outside the frame')

        frame = sequence[i]
        # the last frame has no successor; its predecessor serves as flow context
        neighbour = i + 1 if i + 1 < state.num_frames else i - 1
        field_i = self.flow.estimate(frame, sequence[neighbour])

        template = state.templates[k]
        size = self.propagation_cfg.patch_shape
        rgb_patch = crop_resize(frame.pixels, box, size)
        flow_patch = crop_resize(field_i, box, size, is_flow=True)
        guide_patch = crop_resize(state.probs[0, k], template.box, size)
        refined = apply_refiner(
            self.components.refiner,
            rgb_patch,
            flow_patch,
            guide_patch,
            RefineContext(frame=i, instance=k + 1, box=box),
        )
        state.probs[i, k] = uncrop(refined, box, sequence.shape)
        state.checkpoints[i, k] = i

    def propagate_from_checkpoint(self, state: EngineState, anchor: int, k: int, direction: str) -> List[int]:
        """Walk away from ``anchor`` while it is strictly closer than each cell's current anchor."""
        if direction == FORWARD:
            step, stop = 1, state.num_frames
        elif direction == BACKWARD:
            # frame 0 holds the given masks and is never rewritten
            step, stop = -1, 0
        else:
            raise ValueError(f'Unknown direction "{direction}"')

        updated: List[int] = []
        for i in range(anchor + step, stop, step):
            if abs(int(state.checkpoints[i, k]) - i) <= abs(anchor - i):
                break
            state.probs[i, k] = self._propagate(state, i - step, i, k)
            state.checkpoints[i, k] = anchor
            updated.append(i)
        return updated

    def iteration_cap(self, state: EngineState) -> int:
        bound = state.num_frames * state.num_instances
        if self.cfg.max_iterations is None:
            return bound
        return min(bound, self.cfg.max_iterations)

    def run(self, sequence: VideoSequence, first_masks: Sequence[ProbMap]) -> EngineResult:
        state = self.initialize(sequence, first_masks)
        records: List[IterationRecord] = []
        truncated = False

        if self.cfg.reid_enabled:
            cap = self.iteration_cap(state)
            while True:
                retrieval = self.scan_retrievals(state)
                if retrieval is None:
                    break
                if state.iteration >= cap:
                    truncated = True
                    log.warning('Stopped after %d iterations with retrievals still pending', state.iteration)
                    break
                state.iteration += 1
                self.recover(state, retrieval)
                forward = self.propagate_from_checkpoint(state, retrieval.frame, retrieval.instance, FORWARD)
                backward = self.propagate_from_checkpoint(state, retrieval.frame, retrieval.instance, BACKWARD)
                record = IterationRecord(
                    iteration=state.iteration,
                    frame=retrieval.frame,
                    instance=retrieval.instance + 1,
                    score=retrieval.score,
                    box=retrieval.box.as_tuple(),
                    forward=len(forward),
                    backward=len(backward),
                )
                records.append(record)
                log.info(
                    'iteration=%d frame=%d instance=%d score=%.4f forward=%d backward=%d',
                    record.iteration, record.frame, record.instance, record.score, record.forward, record.backward,
                )

        labels = [merge(state.probs[i]) for i in range(state.num_frames)]
        return EngineResult(
            probs=state.probs,
            labels=labels,
            checkpoints=state.checkpoints,
            iterations=records,
            truncated=truncated,
        )
