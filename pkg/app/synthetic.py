import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import BBox, FlowField, Frame, LabelMap, ValidationError, VideoSequence
from flow import oracle_flow

log = logging.getLogger('synthetic')

SHAPES = ('disc', 'rectangle')
BACKGROUND = -1
OCCLUDER = -2


class SpecValidationError(ValidationError):
    """Raised when a synthetic scene description is inconsistent."""


Color = Tuple[float, float, float]


@dataclass(frozen=True)
class Trajectory:
    kind: str = 'linear'
    start: Tuple[float, float] = (0.0, 0.0)
    velocity: Tuple[float, float] = (0.0, 0.0)
    amplitude: Tuple[float, float] = (0.0, 0.0)
    period: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ('linear', 'sinusoidal'):
            raise SpecValidationError(f'Unknown trajectory kind "{self.kind}"')
        if self.kind == 'sinusoidal' and self.period <= 0:
            raise SpecValidationError('Sinusoidal trajectories need a positive period')

    def at(self, t: int) -> Tuple[float, float]:
        x0, y0 = self.start
        if self.kind == 'linear':
            return x0 + self.velocity[0] * t, y0 + self.velocity[1] * t
        angle = 2.0 * math.pi * t / self.period + self.phase
        return x0 + self.amplitude[0] * math.sin(angle), y0 + self.amplitude[1] * math.sin(angle)


@dataclass(frozen=True)
class SyntheticObject:
    shape: str
    color: Color
    size: Tuple[float, float]
    trajectory: Trajectory
    visible: Optional[Tuple[Tuple[int, int], ...]] = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecValidationError(f'Unknown shape "{self.shape}"')
        if any(c < 0.0 or c > 1.0 for c in self.color):
            raise SpecValidationError(f'Colour {self.color} outside [0, 1]')
        if min(self.size) <= 0:
            raise SpecValidationError(f'Object size {self.size} must be positive')

    def center(self, t: int) -> Tuple[float, float]:
        return self.trajectory.at(t)

    def is_visible(self, t: int) -> bool:
        if self.visible is None:
            return True
        return any(start <= t < end for start, end in self.visible)

    def extent(self, t: int) -> Tuple[float, float, float, float]:
        cx, cy = self.center(t)
        if self.shape == 'disc':
            r = self.size[0]
            return cx - r, cy - r, cx + r, cy + r
        half_w, half_h = self.size[0] / 2.0, self.size[1] / 2.0
        return cx - half_w, cy - half_h, cx + half_w, cy + half_h

    def footprint(self, t: int, height: int, width: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width]
        cx, cy = self.center(t)
        if self.shape == 'disc':
            r = self.size[0]
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        half_w, half_h = self.size[0] / 2.0, self.size[1] / 2.0
        return (xs >= cx - half_w) & (xs < cx + half_w) & (ys >= cy - half_h) & (ys < cy + half_h)


@dataclass(frozen=True)
class Occluder:
    box: BBox
    color: Color = (0.6, 0.6, 0.65)


@dataclass(frozen=True)
class SyntheticSpec:
    width: int
    height: int
    num_frames: int
    objects: Tuple[SyntheticObject, ...] = ()
    occluders: Tuple[Occluder, ...] = ()
    texture_seed: int = 0
    background: Color = (0.35, 0.35, 0.35)
    texture_amplitude: float = 0.04

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise SpecValidationError(f'Invalid image size {self.width}x{self.height}')
        if self.num_frames < 2:
            raise SpecValidationError(f'A scene needs at least 2 frames, got {self.num_frames}')
        for occluder in self.occluders:
            if not occluder.box.is_valid(self.width, self.height):
                raise SpecValidationError(f'Occluder {occluder.box} lies outside the image')
        for position, obj in enumerate(self.objects):
            for t in range(self.num_frames):
                if not obj.is_visible(t):
                    continue
                x0, y0, x1, y1 = obj.extent(t)
                if x0 < 0 or y0 < 0 or x1 > self.width - 1 or y1 > self.height - 1:
                    raise SpecValidationError(
                        f'Object {position + 1} leaves the frame at t={t} while visible'
                    )

    @property
    def num_instances(self) -> int:
        return len(self.objects)

    def occluder_mask(self) -> np.ndarray:
        mask = np.zeros((self.height, self.width), dtype=bool)
        for occluder in self.occluders:
            mask[occluder.box.slices] = True
        return mask

    def layer_map(self, t: int) -> np.ndarray:
        """Per pixel: index of the topmost visible object, ``BACKGROUND`` or ``OCCLUDER``."""
        layers = np.full((self.height, self.width), BACKGROUND, dtype=np.int32)
        for position, obj in enumerate(self.objects):
            if obj.is_visible(t):
                layers[obj.footprint(t, self.height, self.width)] = position
        layers[self.occluder_mask()] = OCCLUDER
        return layers

    def label_map(self, t: int) -> LabelMap:
        layers = self.layer_map(t)
        return np.where(layers >= 0, layers + 1, 0).astype(np.int32)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'width': self.width,
            'height': self.height,
            'num_frames': self.num_frames,
            'texture_seed': self.texture_seed,
            'background': list(self.background),
            'texture_amplitude': self.texture_amplitude,
            'objects': [
                {
                    'shape': obj.shape,
                    'color': list(obj.color),
                    'size': list(obj.size),
                    'trajectory': {
                        'kind': obj.trajectory.kind,
                        'start': list(obj.trajectory.start),
                        'velocity': list(obj.trajectory.velocity),
                        'amplitude': list(obj.trajectory.amplitude),
                        'period': obj.trajectory.period,
                        'phase': obj.trajectory.phase,
                    },
                    'visible': [list(interval) for interval in obj.visible] if obj.visible is not None else None,
                }
                for obj in self.objects
            ],
            'occluders': [
                {'box': list(occluder.box.as_tuple()), 'color': list(occluder.color)}
                for occluder in self.occluders
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SyntheticSpec':
        try:
            _reject_unknown(data, {'width', 'height', 'num_frames', 'objects', 'occluders',
                                   'texture_seed', 'background', 'texture_amplitude'}, 'scene')
            objects = []
            for entry in data.get('objects', []):
                _reject_unknown(entry, {'shape', 'color', 'size', 'trajectory', 'visible'}, 'object')
                trajectory = dict(entry.get('trajectory', {}))
                _reject_unknown(trajectory, {'kind', 'start', 'velocity', 'amplitude', 'period', 'phase'}, 'trajectory')
                size = entry['size']
                size = (float(size), float(size)) if isinstance(size, (int, float)) else tuple(float(v) for v in size)
                visible = entry.get('visible')
                objects.append(SyntheticObject(
                    shape=entry['shape'],
                    color=_color(entry['color']),
                    size=size,
                    trajectory=Trajectory(
                        kind=trajectory.get('kind', 'linear'),
                        start=_pair(trajectory.get('start', (0, 0))),
                        velocity=_pair(trajectory.get('velocity', (0, 0))),
                        amplitude=_pair(trajectory.get('amplitude', (0, 0))),
                        period=float(trajectory.get('period', 0.0)),
                        phase=float(trajectory.get('phase', 0.0)),
                    ),
                    visible=tuple((int(a), int(b)) for a, b in visible) if visible is not None else None,
                ))
            occluders = []
            for entry in data.get('occluders', []):
                _reject_unknown(entry, {'box', 'color'}, 'occluder')
                occluders.append(Occluder(
                    box=BBox(*(int(v) for v in entry['box'])),
                    color=_color(entry.get('color', (0.6, 0.6, 0.65))),
                ))
            return cls(
                width=int(data['width']),
                height=int(data['height']),
                num_frames=int(data['num_frames']),
                objects=tuple(objects),
                occluders=tuple(occluders),
                texture_seed=int(data.get('texture_seed', 0)),
                background=_color(data.get('background', (0.35, 0.35, 0.35))),
                texture_amplitude=float(data.get('texture_amplitude', 0.04)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecValidationError(f'Invalid scene description: {exc!r}') from exc


def _reject_unknown(data: Dict[str, Any], allowed: set, what: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise SpecValidationError(f'Unknown {what} keys: {", ".join(unknown)}')


def _pair(value: Sequence[float]) -> Tuple[float, float]:
    x, y = value
    return float(x), float(y)


def _color(value: Sequence[float]) -> Color:
    r, g, b = value
    return float(r), float(g), float(b)


@dataclass(eq=False)
class SyntheticVideo:
    spec: SyntheticSpec
    sequence: VideoSequence
    labels: List[LabelMap]
    flows: Dict[Tuple[int, int], FlowField] = field(default_factory=dict)

    def first_masks(self) -> List[np.ndarray]:
        return [(self.labels[0] == k).astype(np.float32) for k in range(1, self.spec.num_instances + 1)]

    def instance_mask(self, t: int, instance: int) -> np.ndarray:
        return self.labels[t] == instance


def render_background(spec: SyntheticSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([spec.texture_seed, seed])
    noise = rng.uniform(-spec.texture_amplitude, spec.texture_amplitude, size=(spec.height, spec.width, 1))
    return np.asarray(spec.background, dtype=np.float64) + noise


def render_frame(spec: SyntheticSpec, t: int, background: np.ndarray) -> np.ndarray:
    image = background.copy()
    for obj in spec.objects:
        if obj.is_visible(t):
            image[obj.footprint(t, spec.height, spec.width)] = obj.color
    for occluder in spec.occluders:
        image[occluder.box.slices] = occluder.color
    # quantise to 8-bit levels so frames survive a PNG round trip unchanged
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate(spec: SyntheticSpec, seed: int = 0) -> SyntheticVideo:
    background = render_background(spec, seed)
    frames = [Frame(render_frame(spec, t, background), index=t) for t in range(spec.num_frames)]
    labels = [spec.label_map(t) for t in range(spec.num_frames)]
    flows: Dict[Tuple[int, int], FlowField] = {}
    for t in range(spec.num_frames - 1):
        flows[(t, t + 1)] = oracle_flow(spec, t, t + 1)
        flows[(t + 1, t)] = oracle_flow(spec, t + 1, t)
    log.debug('Generated %d frames with %d objects', spec.num_frames, spec.num_instances)
    return SyntheticVideo(spec=spec, sequence=VideoSequence(frames), labels=labels, flows=flows)


def occlusion_scene(occluded: bool = True) -> SyntheticSpec:
    """Red disc crossing an occluder band while a green box slides below it."""
    disc = SyntheticObject(
        shape='disc',
        color=(0.85, 0.15, 0.15),
        size=(9.0, 9.0),
        trajectory=Trajectory(kind='linear', start=(16.0, 30.0), velocity=(6.0, 0.0)),
    )
    box = SyntheticObject(
        shape='rectangle',
        color=(0.15, 0.75, 0.2),
        size=(14.0, 10.0),
        trajectory=Trajectory(kind='linear', start=(20.0, 60.0), velocity=(3.0, 0.0)),
    )
    occluders = (Occluder(BBox(46, 10, 82, 50)),) if occluded else ()
    return SyntheticSpec(width=120, height=72, num_frames=14, objects=(disc, box), occluders=occluders, texture_seed=7)


def random_spec(seed: int, max_frames: int = 20, max_objects: int = 3, size: Tuple[int, int] = (48, 40)) -> SyntheticSpec:
    rng = np.random.default_rng(seed)
    width, height = size
    num_frames = int(rng.integers(2, max_frames + 1))
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        radius = float(rng.integers(3, 7))
        lo_x, hi_x = radius + 1, width - radius - 2
        lo_y, hi_y = radius + 1, height - radius - 2
        start = (float(rng.integers(int(lo_x), int(hi_x) + 1)), float(rng.integers(int(lo_y), int(hi_y) + 1)))
        end = (float(rng.integers(int(lo_x), int(hi_x) + 1)), float(rng.integers(int(lo_y), int(hi_y) + 1)))
        steps = max(num_frames - 1, 1)
        velocity = ((end[0] - start[0]) / steps, (end[1] - start[1]) / steps)
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
        shape = SHAPES[int(rng.integers(0, 2))]
        objects.append(SyntheticObject(
            shape=shape,
            color=color,
            size=(radius, radius) if shape == 'disc' else (2 * radius, 1.5 * radius),
            trajectory=Trajectory(kind='linear', start=start, velocity=velocity),
        ))
    occluders = []
    if rng.random() < 0.5:
        x0 = int(rng.integers(0, width - 8))
        occluders.append(Occluder(BBox(x0, 0, min(width, x0 + int(rng.integers(6, 16))), height)))
    return SyntheticSpec(width=width, height=height, num_frames=num_frames, objects=tuple(objects),
                         occluders=tuple(occluders), texture_seed=seed)
